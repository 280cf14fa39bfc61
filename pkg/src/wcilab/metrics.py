"""Per-epoch metrics records and the versioned CSV schema.

Header for a K-layer model (schema ``wci-metrics/1``)::

    schema, epoch, lr,
    train_robust_loss, train_robust_err, test_robust_loss, test_robust_err,
    loss_gap, err_gap, test_clean_loss, test_clean_err,
    w_sq_1..K, bias_sq_1..K, trace_raw_1..K, trace_1..K, trace_stderr_1..K,
    wci, cs_weight_sum, cs_trace_sum, cs_bound,
    kl_term, variability_bound, combined_bound, wci_bound, catoni_const,
    clamp_count

Floats are written with 17 significant digits so they parse back exactly.
Curvature-derived columns are empty on epochs where WCI was not evaluated.
Wall-clock phase times are kept on the row but not written to the CSV, so
reruns with the same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

SCHEMA_VERSION = "wci-metrics/1"

_HEAD = (
    "epoch",
    "lr",
    "train_robust_loss",
    "train_robust_err",
    "test_robust_loss",
    "test_robust_err",
    "loss_gap",
    "err_gap",
    "test_clean_loss",
    "test_clean_err",
)
_LAYERED = ("w_sq", "bias_sq", "trace_raw", "trace", "trace_stderr")
_TAIL = (
    "wci",
    "cs_weight_sum",
    "cs_trace_sum",
    "cs_bound",
    "kl_term",
    "variability_bound",
    "combined_bound",
    "wci_bound",
    "catoni_const",
    "clamp_count",
)


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_robust_loss: float
    train_robust_err: float
    test_robust_loss: float
    test_robust_err: float
    loss_gap: float
    err_gap: float
    test_clean_loss: float
    test_clean_err: float
    w_sq: tuple[float, ...]
    bias_sq: tuple[float, ...]
    trace_raw: tuple[float, ...] | None = None
    trace: tuple[float, ...] | None = None
    trace_stderr: tuple[float, ...] | None = None
    wci: float | None = None
    cs_weight_sum: float | None = None
    cs_trace_sum: float | None = None
    cs_bound: float | None = None
    kl_term: float | None = None
    variability_bound: float | None = None
    combined_bound: float | None = None
    wci_bound: float | None = None
    catoni_const: float | None = None
    clamp_count: int | None = None
    times: dict[str, float] = field(default_factory=dict, compare=False)

    @property
    def num_layers(self) -> int:
        return len(self.w_sq)

    @property
    def test_robust_acc(self) -> float:
        return 1.0 - self.test_robust_err

    @property
    def test_clean_acc(self) -> float:
        return 1.0 - self.test_clean_err


def header(num_layers: int) -> list[str]:
    cols = ["schema", *_HEAD]
    for name in _LAYERED:
        cols.extend(f"{name}_{k}" for k in range(1, num_layers + 1))
    cols.extend(_TAIL)
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return "%.17g" % v


def row_values(row: MetricsRow) -> list[str]:
    K = row.num_layers
    vals = [SCHEMA_VERSION] + [_fmt(getattr(row, c)) for c in _HEAD]
    for name in _LAYERED:
        seq = getattr(row, name)
        vals.extend(_fmt(None if seq is None else seq[k]) for k in range(K))
    vals.extend(_fmt(getattr(row, c)) for c in _TAIL)
    return vals


def to_csv(rows: list[MetricsRow]) -> str:
    if not rows:
        raise ValueError("no metrics rows to write")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header(rows[0].num_layers))
    for r in rows:
        writer.writerow(row_values(r))
    return buf.getvalue()


def emit_metrics_csv(rows: list[MetricsRow], path) -> Path:
    path = Path(path)
    path.write_text(to_csv(rows), encoding="utf-8")
    return path


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            if rec["schema"] != SCHEMA_VERSION:
                raise ValueError(f"unsupported metrics schema {rec['schema']!r}")
            K = sum(1 for c in rec if c.startswith("w_sq_"))
            kw = {c: _parse(rec[c]) for c in _HEAD + _TAIL}
            for c in _HEAD[1:] + _TAIL[:-1]:
                if kw[c] is not None:
                    kw[c] = float(kw[c])
            for name in _LAYERED:
                vals = [_parse(rec[f"{name}_{k}"]) for k in range(1, K + 1)]
                kw[name] = None if any(v is None for v in vals) else tuple(float(v) for v in vals)
            out.append(MetricsRow(**kw))
        return out


def column(rows: list[MetricsRow], name: str) -> list[float]:
    """Values of a column (including per-layer names like ``trace_2``)."""
    names = {f.name for f in fields(MetricsRow)}
    if name in names:
        return [getattr(r, name) for r in rows]
    base, _, idx = name.rpartition("_")
    if base in _LAYERED and idx.isdigit():
        k = int(idx) - 1
        return [None if getattr(r, base) is None else getattr(r, base)[k] for r in rows]
    raise KeyError(f"unknown metrics column {name!r}")


def finite(x) -> bool:
    return x is not None and math.isfinite(x)
