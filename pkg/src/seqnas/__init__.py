"""seqnas: two-step downsampling-path and operation search for text-recognition backbones."""

__version__ = "0.1.0"
