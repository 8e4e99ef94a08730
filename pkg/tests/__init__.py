"""Test suite for seqnas."""
