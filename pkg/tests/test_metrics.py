import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcilab.metrics import (
    SCHEMA_VERSION,
    MetricsRow,
    column,
    emit_metrics_csv,
    header,
    read_metrics_csv,
    row_values,
    to_csv,
)


def make_row(epoch=0, K=2, with_wci=True, rng=None):
    rng = rng or np.random.default_rng(epoch)
    tr, te = rng.uniform(0, 2, 2)
    row = MetricsRow(
        epoch=epoch, lr=0.1 / (1 + epoch),
        train_robust_loss=tr, train_robust_err=0.25, test_robust_loss=te, test_robust_err=0.375,
        loss_gap=te - tr, err_gap=0.125, test_clean_loss=0.3, test_clean_err=0.1,
        w_sq=tuple(rng.uniform(0, 5, K)), bias_sq=tuple(rng.uniform(0, 1, K)),
    )
    if with_wci:
        row.trace_raw = tuple(rng.normal(size=K))
        row.trace = tuple(max(t, 0.0) for t in row.trace_raw)
        row.trace_stderr = (0.0,) * K
        row.wci = float(rng.uniform(0, 10))
        row.cs_weight_sum, row.cs_trace_sum, row.cs_bound = 3.0, 4.0, 2 * math.sqrt(3)
        row.kl_term, row.variability_bound, row.combined_bound, row.wci_bound = 1.0, 2.0, 3.0, 3.0
        row.catoni_const = 0.27
        row.clamp_count = sum(t < 0 for t in row.trace_raw)
    return row


def test_header_layout_and_version():
    h = header(2)
    assert h[0] == "schema" and h[1] == "epoch"
    assert h.index("w_sq_1") < h.index("w_sq_2") < h.index("bias_sq_1") < h.index("trace_raw_1")
    assert h[-1] == "clamp_count"
    assert len(h) == 11 + 5 * 2 + 10
    assert SCHEMA_VERSION == "wci-metrics/1"


def test_single_row_csv_has_header_and_one_line(tmp_path):
    p = emit_metrics_csv([make_row()], tmp_path / "m.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 2
    rows = list(csv.reader(lines))
    assert len(rows[1]) == len(rows[0]) == len(header(2))
    assert rows[1][0] == SCHEMA_VERSION


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    rows = [make_row(e, 3, with_wci=e % 2 == 0, rng=rng) for e in range(6)]
    back = read_metrics_csv(emit_metrics_csv(rows, tmp_path / "m.csv"))
    assert back == rows
    for a, b in zip(rows, back):
        assert abs(a.loss_gap - b.loss_gap) <= 1e-12
        assert b.loss_gap == b.test_robust_loss - b.train_robust_loss


def test_missing_curvature_columns_are_empty():
    vals = row_values(make_row(with_wci=False))
    h = header(2)
    for name in ("wci", "trace_1", "cs_bound", "clamp_count"):
        assert vals[h.index(name)] == ""
    assert vals[h.index("w_sq_1")] != ""


def test_times_are_not_serialized():
    a, b = make_row(), make_row()
    a.times, b.times = {"train": 1.0}, {"train": 2.0}
    assert to_csv([a]) == to_csv([b]) and a == b


def test_empty_rows_rejected():
    with pytest.raises(ValueError):
        to_csv([])


def test_unknown_schema_rejected(tmp_path):
    p = emit_metrics_csv([make_row()], tmp_path / "m.csv")
    p.write_text(p.read_text().replace(SCHEMA_VERSION, "wci-metrics/0"))
    with pytest.raises(ValueError):
        read_metrics_csv(p)


def test_unwritable_path_is_os_error(tmp_path):
    with pytest.raises(OSError):
        emit_metrics_csv([make_row()], tmp_path / "missing" / "m.csv")


def test_column_access():
    rows = [make_row(e) for e in range(3)]
    assert column(rows, "epoch") == [0, 1, 2]
    assert column(rows, "trace_2") == [r.trace[1] for r in rows]
    assert column([make_row(with_wci=False)], "trace_1") == [None]
    with pytest.raises(KeyError):
        column(rows, "nonsense")


@settings(max_examples=100, deadline=None)
@given(x=st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_seventeen_digit_floats_parse_back_exactly(x, tmp_path_factory):
    row = make_row()
    row.train_robust_loss = x
    row.loss_gap = row.test_robust_loss - x
    text = to_csv([row])
    rec = list(csv.DictReader(text.splitlines()))[0]
    assert float(rec["train_robust_loss"]) == x
