import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liornet import evaluation as E

import oracles


def test_perfect_prediction():
    r = E.confusion([1, 0, 1, 0], [1, 0, 1, 0])
    assert r.precision == r.recall_tpr == r.iou == 1.0


def test_empty_prediction():
    r = E.confusion([0, 0, 0], [1, 0, 1])
    assert r.recall_tpr == 0.0 and r.fnr == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        E.confusion([0, 1], [0])


def test_degenerate_flags():
    r = E.confusion([0, 0], [0, 0])
    assert {"precision", "recall_tpr", "iou", "fnr"} <= r.degenerate
    assert "fpr" not in r.degenerate


@pytest.mark.parametrize("seed", range(10))
def test_counts_match_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random(200) < 0.3, rng.random(200) < 0.3
    tp, fp, fn, tn = oracles.confusion_counts(pred, gt)
    r = E.confusion(pred, gt)
    assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn)
    assert r.precision == tp / (tp + fp)
    assert r.recall_tpr == tp / (tp + fn)
    assert r.fpr == fp / (fp + tn)
    assert r.fnr == fn / (tp + fn)
    assert r.iou == tp / (tp + fp + fn)
    assert r.total == 200


def test_fbeta_anchors():
    assert E.fbeta(0.827, 0.908, 1) == pytest.approx(0.866, abs=1e-3)
    assert E.fbeta(0.672, 0.920, 1) == pytest.approx(0.777, abs=1e-3)


def test_fbeta_zero_and_bad_beta():
    assert E.fbeta(0.0, 0.0, 1) == 0.0
    with pytest.raises(ValueError):
        E.fbeta(0.5, 0.5, 0)


unit = st.floats(0.0, 1.0)


@given(unit, st.floats(0.1, 10))
def test_fbeta_equal_inputs(x, beta):
    assert E.fbeta(x, x, beta) == pytest.approx(x, abs=1e-12)


@given(unit, unit)
def test_f1_is_harmonic_mean(p, r):
    want = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    assert E.fbeta(p, r, 1) == pytest.approx(want, abs=1e-12)


@given(unit, unit, unit, st.floats(0.1, 10))
def test_fbeta_monotone(p, r, other, beta):
    lo, hi = sorted((p, r))
    assert E.fbeta(lo, other, beta) <= E.fbeta(hi, other, beta) + 1e-12
    assert E.fbeta(other, lo, beta) <= E.fbeta(other, hi, beta) + 1e-12


@given(st.floats(0.05, 1.0), unit)
def test_fbeta_large_beta_tends_to_recall(p, r):
    assert E.fbeta(p, r, 100) == pytest.approx(r, rel=0.01, abs=1e-9)


def _rec(p):
    # tp/fp chosen so precision == p exactly for p in tenths
    tp = int(round(p * 10))
    return E.from_counts(tp, 10 - tp, 1, 5)


def test_aggregate_single_record_std_zero():
    s = E.aggregate([_rec(0.4)])
    assert s["precision"].std == 0.0


def test_aggregate_two_records():
    s = E.aggregate([_rec(0.4), _rec(0.6)])
    assert s["precision"].mean == pytest.approx(0.5)
    assert s["precision"].std == pytest.approx(0.1)


def test_aggregate_empty_and_bad_mode():
    with pytest.raises(ValueError):
        E.aggregate([])
    with pytest.raises(ValueError):
        E.aggregate([_rec(0.5)], mode="median")


def test_aggregate_matches_two_pass_reference():
    rng = np.random.default_rng(4)
    recs = [E.from_counts(*map(int, rng.integers(1, 50, 4))) for _ in range(50)]
    s = E.aggregate(recs)
    for m in E.METRICS:
        mean, std = oracles.two_pass_mean_std([getattr(r, m) for r in recs])
        assert s[m].mean == pytest.approx(mean, rel=1e-12)
        assert s[m].std == pytest.approx(std, rel=1e-9, abs=1e-15)
    f1 = [r.fbeta(1) for r in recs]
    assert s["f1"].mean == pytest.approx(oracles.two_pass_mean_std(f1)[0], rel=1e-12)


def test_aggregate_skips_degenerate_values():
    recs = [E.from_counts(0, 0, 0, 10), E.from_counts(2, 2, 0, 6)]
    s = E.aggregate(recs)
    assert s["precision"].mean == 0.5
    assert s["precision"].excluded == 1


def test_pooled_sums_counts():
    recs = [E.from_counts(1, 1, 0, 8), E.from_counts(3, 0, 1, 6)]
    s = E.aggregate(recs, mode=E.POOLED)
    assert s["precision"].mean == 4 / 5
    assert s["recall_tpr"].mean == 4 / 5
    assert s["precision"].std == 0.0


@pytest.mark.parametrize("ms,hz", [(208.1, "4.8"), (3505.0, "0.3"), (50.0, "20.0")])
def test_hz_conversion(ms, hz):
    assert E.format_hz(E.hz_from_ms(ms)) == hz
    assert E.is_close_hz(ms, E.hz_from_ms(ms))


def test_bench_counts_calls_and_reports():
    calls = []
    res = E.bench(calls.append, [1, 2, 3], warmup=2, reps=4)
    assert len(calls) == 3 * (2 + 4)
    assert res.scans == 3 and res.reps == 4
    assert res.hz * res.mean_ms == pytest.approx(1000.0)
    assert "numpy" in res.environment
    with pytest.raises(ValueError):
        E.bench(calls.append, [1], reps=0)


def test_report_formats():
    s = {"lior": E.aggregate([_rec(0.4), _rec(0.6)])}
    text = E.format_report(s)
    assert "0.500 ± 0.100" in text
    kv = E.format_kv("lior", s["lior"])
    assert "lior.precision.mean=0.5" in kv
    assert E.record_kv("x", _rec(0.4)).startswith("x.tp=4")
