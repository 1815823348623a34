import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from iomtfed.detector import (
    CalibrationError,
    HeadError,
    Label,
    Threshold,
    calibrate,
    detect,
    evaluate,
    score,
    score_batch,
)
from iomtfed.lstm import ModelWeights, forward, loss
from iomtfed.numeric import SeededRng, ShapeError
from iomtfed.telemetry import TrainingWindow

scores = st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60)
quantiles = st.floats(0.001, 0.999)


def win(x, y=0):
    return TrainingWindow(np.asarray(x, dtype=float), y, (0, 3))


def test_score_zero_when_reconstruction_exact():
    assert score(win(np.full((4, 3), 0.5)), ModelWeights.zeros(3, 4)) == 0.0


def test_score_equals_loss_of_forward():
    w = ModelWeights.initialize(3, 4, SeededRng(1))
    x = np.random.default_rng(0).random((4, 3))
    out, _ = forward(x, w)
    assert score(win(x), w) == loss(out, x, "reconstruction")


def test_classifier_score_is_probability():
    w = ModelWeights.zeros(3, 4, head="classifier")
    assert score(win(np.zeros((4, 3))), w) == 0.5


def test_score_rejects_mismatched_window():
    with pytest.raises(HeadError):
        score(win(np.zeros((4, 2))), ModelWeights.zeros(3, 4))


def test_batch_scores_match_single_scores():
    w = ModelWeights.initialize(3, 5, SeededRng(2))
    ws = [win(np.random.default_rng(k).random((4, 3))) for k in range(7)]
    batch = score_batch(ws, w, chunk=3)
    single = [score(x, w) for x in ws]
    np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-18)


def test_calibrate_examples():
    assert calibrate([0.3] * 5).value == 0.3
    t = calibrate(list(range(1, 101)), 0.99)
    assert t.value == pytest.approx(99.01, abs=1e-12)
    assert (t.quantile, t.calibration_count, t.method) == (0.99, 100, "quantile")
    assert calibrate([3, 1, 2], 0.5).value == 2


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate([])
    with pytest.raises(CalibrationError):
        calibrate([1.0], 1.0)


def test_threshold_dict_round_trip():
    t = calibrate([0.1, 0.4, 0.2], 0.9)
    assert Threshold.from_dict(t.to_dict()) == t


def test_detect_is_strict():
    t = Threshold(0.25, 0.99, 10)
    assert detect(0.25, t) is Label.NORMAL
    assert detect(np.nextafter(0.25, 1), t) is Label.ABNORMAL


def test_evaluate_examples():
    m = evaluate([1, 0, 1, 0], [1, 0, 1, 0])
    assert (m.precision, m.recall, m.f1, m.false_positive_rate) == (1.0, 1.0, 1.0, 0.0)
    m = evaluate([0] * 5, [0] * 5)
    assert m.precision is None and m.recall is None and m.f1 is None and m.false_positive_rate == 0.0
    pred = [1] * 8 + [1] * 2 + [0] * 2 + [0] * 88
    truth = [1] * 8 + [0] * 2 + [1] * 2 + [0] * 88
    m = evaluate(pred, truth)
    assert (m.tp, m.fp, m.fn, m.tn) == (8, 2, 2, 88)
    assert m.precision == pytest.approx(0.8) and m.recall == pytest.approx(0.8) and m.f1 == pytest.approx(0.8)
    assert m.false_positive_rate == pytest.approx(2 / 90)


def test_evaluate_length_mismatch():
    with pytest.raises(ShapeError):
        evaluate([1], [1, 0])


@given(scores, quantiles)
def test_quantile_matches_oracle(xs, q):
    assert calibrate(xs, q).value == pytest.approx(oracles.quantile_interp(xs, q), rel=1e-12, abs=1e-12)


@given(scores, quantiles, quantiles)
def test_raising_quantile_never_lowers_threshold(xs, q1, q2):
    lo, hi = sorted((q1, q2))
    t_lo, t_hi = calibrate(xs, lo), calibrate(xs, hi)
    assert t_hi.value >= t_lo.value
    assert sum(detect(s, t_hi) for s in xs) <= sum(detect(s, t_lo) for s in xs)


@given(scores, st.floats(0, 10), st.data())
def test_detection_independent_of_batch(xs, tv, data):
    t = Threshold(tv, 0.5, 1)
    subset = data.draw(st.lists(st.sampled_from(xs), max_size=10))
    full = {s: detect(s, t) for s in xs}
    assert all(detect(s, t) == full[s] for s in subset)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=80))
def test_evaluate_matches_brute_force(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    m = evaluate(pred, truth)
    tp, fp, fn, tn = oracles.confusion(pred, truth)
    assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
    assert m.precision == (tp / (tp + fp) if tp + fp else None)
    assert m.recall == (tp / (tp + fn) if tp + fn else None)
    assert m.false_positive_rate == (fp / (fp + tn) if fp + tn else None)
    if m.precision and m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
