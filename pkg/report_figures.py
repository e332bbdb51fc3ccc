# report_figures.py - Plotly Figures over Result CSVs
"""
Figure builders for the dashboard. They only read the CSV artifacts written
by experiment_cli; nothing here touches the solvers.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import plotly.graph_objects as go

logger = logging.getLogger(__name__)

NUMERIC_SKIP = {"experiment", "profile", "estimate_id", "error", "quantity", "stayed_stable"}


def _coerce(key: str, value: str) -> Union[str, float]:
    if key in NUMERIC_SKIP or value == "":
        return value
    try:
        return float(value)
    except ValueError:
        return value


def read_result_csv(path: Union[str, Path]) -> List[Dict[str, Union[str, float]]]:
    """Rows of a result CSV with numeric columns as floats; '#' comment lines are skipped."""
    with open(path, newline="", encoding="utf-8") as handle:
        lines = [line for line in handle if not line.startswith("#")]
    rows = [{key: _coerce(key, value) for key, value in row.items()} for row in csv.DictReader(lines)]
    logger.debug(f"Read {len(rows)} rows from {path}")
    return rows


def list_experiments(results_dir: Union[str, Path]) -> List[str]:
    directory = Path(results_dir)
    if not directory.is_dir():
        return []
    return sorted(p.stem for p in directory.glob("*.csv") if not p.stem.endswith("_summary"))


def scaling_figure(rows: Iterable[Dict], x: str, y: str, group: Optional[Sequence[str]] = None,
                   title: str = "") -> go.Figure:
    """Log-log scatter of y against x, one trace per group; nonpositive values are dropped."""
    traces: Dict[str, List] = {}
    for row in rows:
        xv, yv = row.get(x), row.get(y)
        if not isinstance(xv, float) or not isinstance(yv, float) or xv <= 0.0 or yv <= 0.0:
            continue
        label = ", ".join(f"{name}={row.get(name, '')}" for name in group) if group else y
        traces.setdefault(label, []).append((xv, yv))

    fig = go.Figure()
    for label in sorted(traces):
        points = sorted(traces[label])
        fig.add_trace(go.Scatter(x=[p[0] for p in points], y=[p[1] for p in points],
                                 mode="lines+markers", name=label))
    fig.update_layout(title=title or f"{y} vs {x}", xaxis_title=x, yaxis_title=y, template="plotly_dark")
    fig.update_xaxes(type="log")
    fig.update_yaxes(type="log")
    return fig


def timeseries_figure(rows: Iterable[Dict], columns: Sequence[str], title: str = "") -> go.Figure:
    """Norm histories against t on a logarithmic value axis."""
    rows = list(rows)
    fig = go.Figure()
    t = [row["t"] for row in rows]
    for column in columns:
        fig.add_trace(go.Scatter(x=t, y=[row.get(column) for row in rows], mode="lines", name=column))
    fig.update_layout(title=title, xaxis_title="t", template="plotly_dark")
    fig.update_yaxes(type="log")
    return fig
