"""
Metrics persistence and convergence plots.

metrics.csv header (fixed, in this order):
    step,seed,algorithm,success_rate,mean_return,critic_loss,actor_loss,
    help_loss,expected_loss,alpha,gate_rate
Diagnostics a run does not produce (gate metrics without mutual help) are
left empty.
"""
from __future__ import annotations

import logging
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import BaseModel, ConfigDict, Field, ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_SCALES = ("linear", "fifth-root", "symlog")
PLOT_METRICS = ("success_rate", "mean_return")
SVG_HASHSALT = "mh-marl-plot"


class MetricsSchemaError(ValueError):
    """Rows or CSV files that do not follow the metrics schema."""


class MetricsRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    step: int = Field(ge=0)
    seed: int = Field(ge=0)
    algorithm: str = Field(min_length=1)
    success_rate: float = Field(ge=0.0, le=1.0)
    mean_return: float
    critic_loss: Optional[float] = None
    actor_loss: Optional[float] = None
    help_loss: Optional[float] = None
    expected_loss: Optional[float] = None
    alpha: Optional[float] = None
    gate_rate: Optional[float] = Field(None, ge=0.0, le=1.0)


METRICS_HEADER: List[str] = list(MetricsRow.model_fields)


def _atomic_csv(frame: pd.DataFrame, path: str):
    tmp_path = f"{path}.tmp"
    frame.to_csv(tmp_path, index=False, float_format="%.17g")
    os.replace(tmp_path, path)


def write_metrics(rows: Sequence[MetricsRow], path: str):
    """Validate every row, then write the CSV (write-then-rename)."""
    checked = []
    for k, row in enumerate(rows):
        try:
            checked.append(row if isinstance(row, MetricsRow) else MetricsRow.model_validate(row))
        except ValidationError as exc:
            raise MetricsSchemaError(f"metrics row {k} is invalid: {exc}") from exc
    frame = pd.DataFrame([row.model_dump() for row in checked], columns=METRICS_HEADER)
    _atomic_csv(frame, path)


def _header_diff(found: List[str]) -> str:
    missing = [c for c in METRICS_HEADER if c not in found]
    extra = [c for c in found if c not in METRICS_HEADER]
    parts = [f"expected {','.join(METRICS_HEADER)}", f"found {','.join(found)}"]
    if missing:
        parts.append(f"missing {missing}")
    if extra:
        parts.append(f"unexpected {extra}")
    if not missing and not extra:
        parts.append("columns out of order")
    return "; ".join(parts)


def read_metrics(path: str) -> List[MetricsRow]:
    if not os.path.exists(path):
        raise MetricsSchemaError(f"metrics file not found: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"algorithm": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MetricsSchemaError(f"malformed metrics file {path}: {exc}") from exc
    found = list(frame.columns)
    if found != METRICS_HEADER:
        raise MetricsSchemaError(f"bad header in {path}: {_header_diff(found)}")

    rows = []
    for k, record in enumerate(frame.to_dict(orient="records")):
        clean = {key: (None if isinstance(value, float) and np.isnan(value) else value)
                 for key, value in record.items()}
        try:
            rows.append(MetricsRow.model_validate(clean))
        except ValidationError as exc:
            raise MetricsSchemaError(f"{path} line {k + 2}: {exc}") from exc
    return rows


def find_metrics_files(root: str) -> List[str]:
    """Every metrics.csv below `root`, sorted for a stable aggregation order."""
    found = []
    for dirpath, _dirnames, filenames in os.walk(root):
        if "metrics.csv" in filenames:
            found.append(os.path.join(dirpath, "metrics.csv"))
    return sorted(found)


def aggregate(rows: Sequence[MetricsRow], metric: str) -> Dict[str, pd.DataFrame]:
    """Per algorithm: mean, min and max of `metric` across seeds at each step."""
    if metric not in PLOT_METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {PLOT_METRICS}")
    if not rows:
        return {}
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=METRICS_HEADER)
    curves = {}
    for algorithm, group in frame.groupby("algorithm", sort=True):
        stats = group.groupby("step")[metric].agg(["mean", "min", "max", "count"]).sort_index()
        curves[algorithm] = stats
    return curves


def fifth_root(values):
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.abs(values) ** 0.2


def _fifth_root_inverse(values):
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.abs(values) ** 5


def plot_curves(rows: Sequence[MetricsRow], metric: str, path: str, scale: str = "linear"):
    """Mean curve plus min/max band per algorithm, written as a reproducible SVG."""
    if scale not in PLOT_SCALES:
        raise ValueError(f"unknown scale {scale!r}; choose from {PLOT_SCALES}")
    curves = aggregate(rows, metric)
    if not curves:
        raise MetricsSchemaError("no metrics rows to plot")

    with plt.rc_context({"svg.hashsalt": SVG_HASHSALT}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for algorithm, stats in curves.items():
            steps = stats.index.to_numpy()
            ax.plot(steps, stats["mean"], label=f"{algorithm} (n={int(stats['count'].max())})")
            ax.fill_between(steps, stats["min"], stats["max"], alpha=0.2)
        if scale == "fifth-root":
            ax.set_yscale("function", functions=(fifth_root, _fifth_root_inverse))
        elif scale == "symlog":
            ax.set_yscale("symlog")
        ax.set_xlabel("training step")
        ax.set_ylabel(metric.replace("_", " "))
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        fig.tight_layout()

        tmp_path = f"{path}.tmp"
        with open(tmp_path, "wb") as f:
            fig.savefig(f, format="svg", metadata={"Date": None})
        plt.close(fig)
    os.replace(tmp_path, path)
    logger.info(f"[Plot] {metric} ({scale}) for {len(curves)} algorithm(s) -> {path}")
