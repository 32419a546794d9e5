import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aed.metrics import (
    CSV_COLUMNS,
    EvalReport,
    MetricError,
    Trace,
    build_report,
    emit_report,
    energy_shares,
    mae,
    sae,
)


def loop_mae(p, t):
    total = 0.0
    for a, b in zip(p, t):
        total += abs(a - b)
    return total / len(p)


def loop_sae(p, t):
    sp = st_ = 0.0
    for a, b in zip(p, t):
        sp += a
        st_ += b
    return abs(sp - st_) / st_


def test_mae_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0
    assert mae([2, 2, 5], [1, 2, 3]) == 1.0
    assert mae(np.arange(5) + 2.5, np.arange(5)) == 2.5


def test_mae_errors():
    with pytest.raises(MetricError, match="mismatch"):
        mae([1, 2], [1])
    with pytest.raises(MetricError, match="at least one"):
        mae([], [])


def test_sae_examples():
    assert sae([3, 4], [3, 4]) == 0
    assert sae([110], [100]) == pytest.approx(0.1, abs=1e-15)
    x = np.random.default_rng(0).random(100) + 0.1
    assert abs(sae(1.1 * x, x) - 0.1) < 1e-9
    with pytest.raises(MetricError, match="undefined"):
        sae([1, 2], [0, 0])


@pytest.mark.parametrize("k", [0.25, 0.5, 2.0, 4.0])
def test_sae_scale_exact_for_binary_factors(k):
    x = np.random.default_rng(1).random(64) + 0.1
    assert sae(k * x, x) == abs(k - 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 10))
def test_sae_scale_property(seed, k):
    x = np.random.default_rng(seed).random(50) * 1000 + 1
    assert abs(sae(k * x, x) - abs(k - 1)) <= 1e-12 * max(1.0, k)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 300))
def test_straight_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    p, t = rng.random(n) * 2000, rng.random(n) * 2000 + 1e-3
    assert abs(mae(p, t) - loop_mae(p, t)) <= 1e-12 * max(1.0, loop_mae(p, t))
    assert abs(sae(p, t) - loop_sae(p, t)) <= 1e-12 * max(1.0, loop_sae(p, t))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mae_triangle(seed):
    a, b, c = np.random.default_rng(seed).standard_normal((3, 40)) * 100
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12


def test_energy_shares():
    assert energy_shares([1, 1, 1, 1]).tolist() == [25, 25, 25, 25]
    assert energy_shares([300, 100]).tolist() == [75, 25]
    with pytest.raises(MetricError):
        energy_shares([0, 0])
    with pytest.raises(MetricError):
        energy_shares([-1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=10).filter(lambda v: sum(v) > 0))
def test_shares_sum_to_100(totals):
    assert abs(energy_shares(totals).sum() - 100) < 1e-6


def _report():
    truth = {"fridge": np.array([100.0, 120.0, 0.0]), "kettle": np.array([0.0, 2000.0, 0.0])}
    pred = {"fridge": np.array([90.0, 130.0, -5.0]), "kettle": np.array([10.0, 1900.0, 0.0])}
    trace = Trace([0, 6, 12], [100.0, 2120.0, 0.0], truth["kettle"].tolist(), pred["kettle"].tolist())
    return build_report(pred, truth, metadata={"seed": 1, "W": 599}, traces={"kettle": trace})


def test_build_report_clamps_and_scores():
    r = _report()
    fridge = r.appliances[0]
    assert fridge.pred_total == 220.0  # -5 clamped to 0
    assert fridge.mae_watts == pytest.approx(20 / 3)
    assert sum(a.share_pct for a in r.appliances) == pytest.approx(100, abs=1e-6)
    raw = build_report({"x": np.array([-5.0, 5.0])}, {"x": np.array([0.0, 5.0])}, clamp=False)
    assert raw.appliances[0].mae_watts == 2.5
    with pytest.raises(MetricError):
        build_report({}, {})


def test_perfect_prediction_report():
    t = {"a": np.array([1.0, 2.0])}
    a = build_report(t, t).appliances[0]
    assert a.mae_watts == 0 and a.sae == 0


def test_emit_report_files_and_determinism(tmp_path):
    r = _report()
    files = emit_report(r, prefix=tmp_path / "one" / "report")
    again = emit_report(r, prefix=tmp_path / "two" / "report")
    assert [f.name for f in files] == ["report.csv", "report.json", "report_shares.svg",
                                       "report_kettle_trace.svg"]
    for a, b in zip(files, again):
        assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(io.StringIO(files[0].read_text())))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 1 + len(r.appliances)
    doc = json.loads(files[1].read_text())
    assert EvalReport.from_json(doc) == r
    svg = files[2].read_text()
    assert svg.startswith("<svg") and "href" not in svg


def test_emit_report_errors(tmp_path):
    with pytest.raises(MetricError, match="no appliances"):
        emit_report(EvalReport([]), prefix=tmp_path / "r")
    with pytest.raises(MetricError, match="formats"):
        emit_report(_report(), formats=("pdf",), prefix=tmp_path / "r")
