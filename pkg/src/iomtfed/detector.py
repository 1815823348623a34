"""Anomaly scoring, threshold calibration and confusion-matrix metrics."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .lstm import ModelWeights, forward, forward_batch, loss
from .numeric import ShapeError


class HeadError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


class Label(enum.IntEnum):
    NORMAL = 0
    ABNORMAL = 1


def _check(window_x: np.ndarray, w: ModelWeights) -> None:
    if window_x.ndim != 2 or window_x.shape[1] != w.features:
        raise HeadError(f"window of shape {window_x.shape} does not fit a model with {w.features} features")


def score(window, w: ModelWeights) -> float:
    """Reconstruction MSE of the window, or the class probability for a classifier."""
    x = np.asarray(window.x, dtype=np.float64)
    _check(x, w)
    out, _ = forward(x, w)
    if w.head == "reconstruction":
        return loss(out, x, "reconstruction")
    return float(out[0, 0])


def score_batch(windows: Sequence, w: ModelWeights, chunk: int = 256) -> np.ndarray:
    """``score`` for many windows at once; values are identical to per-window calls."""
    if not windows:
        return np.zeros(0)
    out = []
    for start in range(0, len(windows), chunk):
        xs = np.stack([np.asarray(win.x, dtype=np.float64) for win in windows[start : start + chunk]])
        _check(xs[0], w)
        ys = forward_batch(xs, w).output
        if w.head == "reconstruction":
            out.extend(loss(y, x, "reconstruction") for y, x in zip(ys, xs))
        else:
            out.extend(float(y[0, 0]) for y in ys)
    return np.array(out)


@dataclass(frozen=True)
class Threshold:
    value: float
    quantile: float
    calibration_count: int
    method: str = "quantile"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        return cls(float(d["value"]), float(d["quantile"]), int(d["calibration_count"]), d.get("method", "quantile"))


def quantile_linear(values: Sequence[float], q: float) -> float:
    """Empirical quantile, linear interpolation between order statistics at (n-1)q."""
    xs = sorted(float(v) for v in values)
    pos = (len(xs) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def calibrate(errors: Sequence[float], q: float = 0.99) -> Threshold:
    if len(errors) == 0:
        raise CalibrationError("cannot calibrate on an empty error list")
    if not 0 < q < 1:
        raise CalibrationError("quantile must be in (0, 1)")
    return Threshold(quantile_linear(errors, q), q, len(errors))


def detect(value: float, t: Threshold) -> Label:
    """Abnormal iff the score is strictly above the threshold."""
    return Label.ABNORMAL if value > t.value else Label.NORMAL


@dataclass(frozen=True)
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    false_positive_rate: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def evaluate(predictions: Sequence[int], truth: Sequence[int]) -> DetectionMetrics:
    """Confusion-matrix metrics; ``None`` marks a division by zero (undefined)."""
    if len(predictions) != len(truth):
        raise ShapeError("predictions and truth differ in length")
    p = np.asarray(predictions, dtype=int)
    t = np.asarray(truth, dtype=int)
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return DetectionMetrics(tp, fp, fn, tn, precision, recall, f1, _ratio(fp, fp + tn))
