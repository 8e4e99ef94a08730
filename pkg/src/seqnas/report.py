"""Human-readable summaries rendered with rich on stderr."""

from typing import Any, Dict, Optional, Sequence

from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from seqnas.cost import CostReport
from seqnas.search.backends import CandidateScore

console = Console(stderr=True)


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def scores_table(rows: Sequence[CandidateScore], title: str = "Candidates") -> Table:
    table = Table(title=title, header_style="bold cyan")
    table.add_column("id", justify="right")
    table.add_column("stage")
    table.add_column("path")
    table.add_column("score", justify="right")
    table.add_column("val loss", justify="right")
    table.add_column("MACs", justify="right")
    table.add_column("params", justify="right")
    for row in rows:
        table.add_row(
            str(row.candidate_id),
            row.stage,
            row.path,
            _fmt(row.score),
            _fmt(row.val_loss),
            f"{row.macs:,}",
            f"{row.params:,}",
        )
    return table


def cost_table(reports: Dict[str, CostReport]) -> Table:
    """Per-layer MACs of one or more architectures side by side."""
    table = Table(title="Cost", header_style="bold cyan")
    table.add_column("layer", justify="right")
    for name in reports:
        table.add_column(f"{name} MACs", justify="right")
    depth = max(len(r.per_layer) for r in reports.values())
    for l in range(depth):
        table.add_row(str(l + 1), *(f"{r.per_layer[l].macs:,}" for r in reports.values()))
    table.add_row(
        Text("total", style="bold"), *(f"{r.total_macs:,}" for r in reports.values())
    )
    return table


def sweep_table(rows: Sequence[Dict[str, Any]]) -> Table:
    table = Table(title="Regularizer sweep", header_style="bold cyan")
    for column in ("beta", "total MACs", "params", "depth", "arch"):
        table.add_column(column, justify="left" if column == "arch" else "right")
    for row in rows:
        table.add_row(
            f"{row['beta']:g}",
            f"{row['total_macs']:,}",
            f"{row['total_params']:,}",
            str(row["effective_depth"]),
            row["arch"],
        )
    return table


def result_panel(result: Dict[str, Any]) -> Panel:
    cost = result["cost"]
    body = (
        f"[bold]arch[/bold]   {result['best_arch']}\n"
        f"[bold]score[/bold]  {_fmt(result['score'])}   "
        f"[bold]val loss[/bold] {_fmt(result.get('val_loss'))}\n"
        f"[bold]MACs[/bold]   {cost['total_macs']:,}   "
        f"[bold]params[/bold] {cost['total_params']:,}   "
        f"[bold]depth[/bold] {result['effective_depth']}"
    )
    return Panel(body, title=f"Result ({result['backend']})", border_style="green")


def show(renderable: Any) -> None:
    console.print(renderable)
