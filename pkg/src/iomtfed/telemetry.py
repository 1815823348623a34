"""Synthetic vitals, anomaly injection, windowing and DTDL-style device models."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .lstm import WINDOW_LENGTH
from .numeric import SeededRng


class SizeError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# Normalization ranges shared by every patient unless a scenario overrides them.
DEVICE_RANGES = {
    "spo2": (85.0, 100.0),
    "heart_rate": (40.0, 130.0),
    "temperature": (35.0, 39.0),
    "motion": (0.0, 1.0),
    "glucose": (60.0, 260.0),
}
BINARY_CHANNELS = {"motion"}


@dataclass(frozen=True)
class VitalsConfig:
    """Generator parameters for one patient. Units: %, bpm, degC, mg/dL, ticks."""

    channels: tuple[str, ...] = ("spo2", "heart_rate", "temperature", "motion")
    channel_ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEVICE_RANGES))
    spo2_baseline: float = 96.5
    spo2_sigma: float = 0.8
    spo2_normal_range: tuple[float, float] | None = None
    night_dip: float = 1.0
    day_length: int = 288
    night_fraction: float = 0.33
    ar: float = 0.9
    hr_baseline: float = 72.0
    hr_coupling: float = 2.5  # bpm per % SpO2; positive: SpO2 drop -> heart rate drop
    hr_sigma: float = 1.0
    temp_baseline: float = 36.8
    temp_sigma: float = 0.1
    motion_day: float = 0.3
    motion_night: float = 0.05
    motion_persistence: float = 0.9
    glucose_baseline: float = 120.0
    glucose_swing: float = 25.0
    glucose_sigma: float = 3.0

    def range_of(self, channel: str) -> tuple[float, float]:
        lo, hi = self.channel_ranges[channel]
        return float(lo), float(hi)


DISEASE_DEFAULTS = {
    "OSA": {},
    "DB": {"channels": ("spo2", "heart_rate", "temperature", "glucose"), "night_dip": 0.0},
}


def vitals_for(disease: str, **overrides) -> VitalsConfig:
    params = dict(DISEASE_DEFAULTS.get(disease, {}))
    params.update(overrides)
    if "channels" in params:
        params["channels"] = tuple(params["channels"])
    if "channel_ranges" in params:
        ranges = dict(DEVICE_RANGES)
        ranges.update({k: tuple(v) for k, v in params["channel_ranges"].items()})
        params["channel_ranges"] = ranges
    if params.get("spo2_normal_range") is not None:
        params["spo2_normal_range"] = tuple(params["spo2_normal_range"])
    return VitalsConfig(**params)


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: int
    channels: Mapping[str, float]


@dataclass
class LabeledSeries:
    channels: tuple[str, ...]
    values: np.ndarray  # ticks x channels
    labels: np.ndarray  # ticks, int 0/1
    channel_ranges: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        if len(self.labels) != len(self.values):
            raise SizeError("labels and records differ in length")

    def __len__(self) -> int:
        return len(self.values)

    def records(self) -> Iterator[TelemetryRecord]:
        for t, row in enumerate(self.values):
            yield TelemetryRecord(t, dict(zip(self.channels, map(float, row))))

    def column(self, channel: str) -> np.ndarray:
        return self.values[:, self.channels.index(channel)]

    def copy(self) -> "LabeledSeries":
        return LabeledSeries(self.channels, self.values.copy(), self.labels.copy(), dict(self.channel_ranges))

    def to_bytes(self) -> bytes:
        """Raw float64 little-endian dump of the values, used by the privacy auditor."""
        return self.values.astype("<f8").tobytes()


def _ar_noise(n: int, ar: float, sigma: float, rng: SeededRng) -> np.ndarray:
    shocks = rng.normal(0.0, sigma * math.sqrt(1.0 - ar * ar), n)
    out = np.empty(n)
    prev = rng.normal(0.0, sigma)
    for t in range(n):
        prev = ar * prev + shocks[t]
        out[t] = prev
    return out


def generate_series(profile, length: int, rng: SeededRng, config: VitalsConfig | None = None) -> LabeledSeries:
    """Clean synthetic vitals for one patient; all labels are 0.

    SpO2 follows an AR(1) process around its baseline with a smooth nocturnal
    dip; heart rate tracks SpO2 deviations through ``hr_coupling``.
    """
    if length < WINDOW_LENGTH:
        raise SizeError(f"series length must be >= {WINDOW_LENGTH}")
    if config is None:
        config = vitals_for(profile.attributes.get("disease", ""))
    cfg = config
    t = np.arange(length)
    phase = (t % cfg.day_length) / cfg.day_length
    night = phase < cfg.night_fraction
    dip = np.where(night, cfg.night_dip * np.sin(np.pi * phase / cfg.night_fraction), 0.0)

    spo2 = cfg.spo2_baseline - dip + _ar_noise(length, cfg.ar, cfg.spo2_sigma, rng)
    if cfg.spo2_normal_range is not None:
        spo2 = np.clip(spo2, *cfg.spo2_normal_range)
    spo2 = np.minimum(spo2, 100.0)
    hr = cfg.hr_baseline + cfg.hr_coupling * (spo2 - cfg.spo2_baseline) + _ar_noise(length, cfg.ar, cfg.hr_sigma, rng)
    temp = cfg.temp_baseline + _ar_noise(length, cfg.ar, cfg.temp_sigma, rng)

    motion = np.zeros(length)
    draws = rng.random((length, 2))
    state = 0.0
    for k in range(length):
        if draws[k, 0] > cfg.motion_persistence or k == 0:
            p = cfg.motion_night if night[k] else cfg.motion_day
            state = 1.0 if draws[k, 1] < p else 0.0
        motion[k] = state

    glucose = (
        cfg.glucose_baseline
        + cfg.glucose_swing * np.sin(2 * np.pi * phase)
        + _ar_noise(length, cfg.ar, cfg.glucose_sigma, rng)
    )
    columns = {"spo2": spo2, "heart_rate": hr, "temperature": temp, "motion": motion, "glucose": glucose}
    unknown = [c for c in cfg.channels if c not in columns]
    if unknown:
        raise SchemaError(f"unknown channels {unknown}")
    values = np.column_stack([columns[c] for c in cfg.channels])
    ranges = {c: cfg.range_of(c) for c in cfg.channels}
    return LabeledSeries(tuple(cfg.channels), values, np.zeros(length, dtype=np.int64), ranges)


@dataclass(frozen=True)
class AnomalySpec:
    """Anomaly mix. Magnitudes for spikes and shifts are fractions of the channel range."""

    rate: float = 0.05
    kinds: Mapping[str, float] = field(
        default_factory=lambda: {"spike": 1.0, "correlation_break": 1.0, "level_shift": 1.0}
    )
    spike_magnitude: float = 0.3
    break_magnitude: float = 25.0  # bpm
    break_length: tuple[int, int] = (1, 3)
    shift_magnitude: float = 0.3
    shift_length: tuple[int, int] = (4, 12)


def _continuous(series: LabeledSeries) -> list[str]:
    return [c for c in series.channels if c not in BINARY_CHANNELS]


def inject_anomalies(series: LabeledSeries, spec: AnomalySpec, rng: SeededRng) -> LabeledSeries:
    """Return a copy with anomalies injected and their ticks labeled 1.

    The number of anomalous ticks is drawn Binomial(len, rate); events are
    then placed on unlabeled ticks until that count is reached (the last
    event is truncated to fit).
    """
    if not 0 < spec.rate < 1:
        raise ValueError("anomaly rate must be in (0, 1)")
    out = series.copy()
    n = len(out)
    target = int(rng.binomial(n, spec.rate))
    kinds = sorted(k for k, wgt in spec.kinds.items() if wgt > 0)
    if not kinds:
        return out
    weights = np.array([spec.kinds[k] for k in kinds], dtype=float)
    weights /= weights.sum()
    channels = _continuous(out)
    has_hr = "heart_rate" in out.channels
    placed = 0
    attempts = 0
    while placed < target and attempts < 100 * n:
        attempts += 1
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        if kind == "correlation_break" and not has_hr:
            kind = "spike"
        if kind == "spike":
            length = 1
        elif kind == "correlation_break":
            length = int(rng.integers(spec.break_length[0], spec.break_length[1] + 1))
        else:
            length = int(rng.integers(spec.shift_length[0], spec.shift_length[1] + 1))
        length = min(length, target - placed)
        start = int(rng.integers(0, n - length + 1))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        channel = channels[int(rng.integers(0, len(channels)))]
        span = slice(start, start + length)
        if out.labels[span].any():
            continue
        if kind == "spike":
            col = out.channels.index(channel)
            lo, hi = out.channel_ranges[channel]
            # push past whichever bound is farther from the current reading
            up = hi - out.values[start, col] >= out.values[start, col] - lo
            bound, away = (hi, 1.0) if up else (lo, -1.0)
            out.values[start, col] = bound + away * spec.spike_magnitude * (hi - lo)
        elif kind == "correlation_break":
            col = out.channels.index("heart_rate")
            out.values[span, col] += sign * spec.break_magnitude
        else:
            col = out.channels.index(channel)
            lo, hi = out.channel_ranges[channel]
            out.values[span, col] += sign * spec.shift_magnitude * (hi - lo)
        out.labels[span] = 1
        placed += length
    return out


@dataclass
class TrainingWindow:
    x: np.ndarray  # 4 x d, normalized to [0, 1]
    y: int
    tick_range: tuple[int, int]  # inclusive

    def __post_init__(self):
        if self.x.shape[0] != WINDOW_LENGTH:
            raise SizeError(f"a window holds exactly {WINDOW_LENGTH} samples")

    def to_bytes(self) -> bytes:
        return np.asarray(self.x, dtype="<f8").tobytes()


def normalize(values: np.ndarray, channels: Sequence[str], ranges: Mapping[str, tuple[float, float]]) -> np.ndarray:
    lo = np.array([ranges[c][0] for c in channels], dtype=float)
    hi = np.array([ranges[c][1] for c in channels], dtype=float)
    return np.clip((np.asarray(values, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def windowize(series: LabeledSeries) -> list[TrainingWindow]:
    """Non-overlapping windows of 4 ticks from index 0; a short tail is dropped."""
    norm = normalize(series.values, series.channels, series.channel_ranges)
    windows = []
    for k in range(len(series) // WINDOW_LENGTH):
        s = k * WINDOW_LENGTH
        e = s + WINDOW_LENGTH
        windows.append(TrainingWindow(norm[s:e].copy(), int(series.labels[s:e].any()), (s, e - 1)))
    return windows


def steady_window(config: VitalsConfig, spo2: float) -> TrainingWindow:
    """Four identical resting ticks with SpO2 held at ``spo2``.

    Heart rate follows the generator coupling, other channels sit at their
    baselines and motion is 0. Values are normalized with ``config``'s ranges.
    """
    resting = {
        "spo2": spo2,
        "heart_rate": config.hr_baseline + config.hr_coupling * (spo2 - config.spo2_baseline),
        "temperature": config.temp_baseline,
        "motion": 0.0,
        "glucose": config.glucose_baseline,
    }
    raw = np.array([[resting[c] for c in config.channels]] * WINDOW_LENGTH)
    ranges = {c: config.range_of(c) for c in config.channels}
    return TrainingWindow(normalize(raw, config.channels, ranges), 0, (0, WINDOW_LENGTH - 1))


def series_to_csv(series: LabeledSeries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tick", *series.channels, "label"])
    for t, (row, label) in enumerate(zip(series.values, series.labels)):
        writer.writerow([t, *(f"{v:.17g}" for v in row), int(label)])
    return buf.getvalue()


def series_from_csv(text: str, channel_ranges: Mapping[str, tuple[float, float]] | None = None) -> LabeledSeries:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "tick" or rows[0][-1] != "label":
        raise SchemaError("series CSV must have header tick,<channels...>,label")
    channels = tuple(rows[0][1:-1])
    body = rows[1:]
    for i, row in enumerate(body):
        if int(row[0]) != i:
            raise SchemaError(f"line {i + 2}: ticks must be 0,1,2,...")
    values = np.array([[float(v) for v in row[1:-1]] for row in body], dtype=float).reshape(len(body), len(channels))
    labels = np.array([int(row[-1]) for row in body], dtype=np.int64)
    ranges = dict(DEVICE_RANGES)
    if channel_ranges:
        ranges.update(channel_ranges)
    return LabeledSeries(channels, values, labels, {c: tuple(ranges[c]) for c in channels})


# --- device models -----------------------------------------------------------

SCHEMAS = ("double", "integer", "boolean")
CONTENT_TYPES = ("Property", "Telemetry")


@dataclass(frozen=True)
class DeviceModel:
    model_id: str
    display_name: str
    properties: tuple[tuple[str, str], ...]
    context: str = ""

    def __post_init__(self):
        names = [n for n, _ in self.properties]
        if len(names) != len(set(names)):
            raise SchemaError(f"duplicate property names in {self.model_id}")


def parse_device_model(text: str) -> DeviceModel:
    """Read a DTDL-like interface; property names are whitespace-stripped."""
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise SchemaError("device model must be a JSON object")
    for key in ("@id", "contents"):
        if key not in doc:
            raise SchemaError(f"device model is missing {key!r}")
    if not isinstance(doc["contents"], list):
        raise SchemaError("'contents' must be a list")
    props = []
    for i, item in enumerate(doc["contents"]):
        if not isinstance(item, dict) or item.get("@type") not in CONTENT_TYPES:
            continue
        name = str(item.get("name", "")).strip()
        schema = item.get("schema")
        if not name:
            raise SchemaError(f"contents[{i}]: property without a name")
        if schema not in SCHEMAS:
            raise SchemaError(f"contents[{i}]: unsupported schema {schema!r}")
        props.append((name, schema))
    return DeviceModel(str(doc["@id"]), str(doc.get("displayName", "")), tuple(props), str(doc.get("@context", "")))


def dump_device_model(model: DeviceModel) -> str:
    doc = {
        "@id": model.model_id,
        "@type": "Interface",
        "displayName": model.display_name,
        "contents": [{"@type": "Property", "name": n, "schema": s} for n, s in model.properties],
        "@context": model.context,
    }
    return json.dumps(doc, indent=2) + "\n"


def device_model_for(client_id: str, channels: Sequence[str]) -> DeviceModel:
    props = tuple((c, "integer" if c in BINARY_CHANNELS else "double") for c in channels)
    return DeviceModel(f"patient:{client_id}:Vitals;1", f"{client_id} vitals", props, "patient:dtdl:context;2")
