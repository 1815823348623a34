"""Scenario files: JSON describing organizations, patients, model and training setup.

Example (abridged)::

    {
      "name": "osa-detection",
      "seed": 7,
      "model": {"layers": 2, "hidden": 32, "features": 4, "head": "reconstruction"},
      "training": {"batch_size": 16, "local_epochs": 2, "lr": 1.0,
                   "server_lr": 1.0, "rounds": 30, "participation": 1.0},
      "aggregation": "weighted_mean",
      "grouping_keys": ["disease", "age_band"],
      "detection": {"quantile": 0.99},
      "data": {"train_length": 2000, "test_length": 2000,
               "anomalies": {"rate": 0.05}, "vitals": {}},
      "organizations": [
        {"org_id": "org1", "patients": [
          {"client_id": "Bob", "attributes": {"disease": "OSA", "age_band": "30-36"},
           "data": {"vitals": {"spo2_baseline": 96.8}}}]}
      ]
    }

Per-patient ``data`` entries override the scenario-wide ``data`` block.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .lstm import HEADS, INIT_SCALE
from .protocol import DEFAULT_GROUPING_KEYS, PatientProfile
from .telemetry import DEVICE_RANGES, AnomalySpec, VitalsConfig, vitals_for

AGGREGATION_RULES = ("weighted_mean", "delta_step")


class ScenarioError(ValueError):
    """Invalid scenario; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 32
    features: int = 4
    head: str = "reconstruction"
    init_scale: float = INIT_SCALE


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 16
    local_epochs: int = 2
    lr: float = 1.0
    server_lr: float = 1.0
    rounds: int = 30
    participation: float = 1.0


@dataclass(frozen=True)
class DetectionConfig:
    quantile: float = 0.99


@dataclass
class PatientConfig:
    profile: PatientProfile
    vitals: VitalsConfig
    train_length: int
    test_length: int
    anomalies: AnomalySpec

    @property
    def client_id(self) -> str:
        return self.profile.client_id


@dataclass
class Scenario:
    name: str
    seed: int
    model: ModelConfig
    training: TrainingConfig
    aggregation: str
    grouping_keys: tuple[str, ...]
    detection: DetectionConfig
    patients: list[PatientConfig] = field(default_factory=list)

    @property
    def org_ids(self) -> list[str]:
        return sorted({p.profile.org_id for p in self.patients})

    @property
    def profiles(self) -> list[PatientProfile]:
        return [p.profile for p in self.patients]

    def patient(self, client_id: str) -> PatientConfig:
        for p in self.patients:
            if p.client_id == client_id:
                return p
        raise KeyError(client_id)

    def restricted_to(self, client_ids) -> "Scenario":
        """Same scenario with only the listed patients (e.g. a local-only baseline)."""
        keep = set(client_ids)
        missing = keep - {p.client_id for p in self.patients}
        if missing:
            raise ScenarioError("organizations", f"unknown client ids {sorted(missing)}")
        out = dataclasses.replace(self, patients=[p for p in self.patients if p.client_id in keep])
        validate(out)
        return out

    def with_overrides(self, **changes) -> "Scenario":
        """Copy with command-line style overrides: rounds, aggregation, head, seed, lr."""
        out = dataclasses.replace(self)
        training = {k: changes.pop(k) for k in ("rounds", "lr") if changes.get(k) is not None}
        if training:
            out.training = dataclasses.replace(self.training, **training)
        if changes.get("head") is not None:
            out.model = dataclasses.replace(self.model, head=changes.pop("head"))
        for key in ("aggregation", "seed"):
            if changes.get(key) is not None:
                setattr(out, key, changes.pop(key))
        validate(out)
        return out


def _get(obj: dict, key: str, path: str, kind, default=None, required=False):
    if key not in obj:
        if required:
            raise ScenarioError(f"{path}.{key}" if path else key, "missing required field")
        return default
    value = obj[key]
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and bool not in kinds or not isinstance(value, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise ScenarioError(f"{path}.{key}" if path else key, f"expected {names}, got {type(value).__name__}")
    return value


def _section(doc: dict, key: str, path: str = "") -> dict:
    value = _get(doc, key, path, dict, default={})
    return value


def _known(obj: dict, allowed, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ScenarioError(f"{path}.{key}" if path else key, "unknown field")


def _dataclass_from(cls, obj: dict, path: str, base=None):
    names = {f.name: f for f in dataclasses.fields(cls)}
    _known(obj, names, path)
    values = {}
    for key, value in obj.items():
        f = names[key]
        target = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if "int" == target:
            values[key] = _get(obj, key, path, int)
        elif "float" == target:
            values[key] = _get(obj, key, path, float)
        elif "str" == target:
            values[key] = _get(obj, key, path, str)
        else:
            values[key] = value
    if base is None:
        return cls(**values)
    return dataclasses.replace(base, **values)


_ANOMALY_TUPLES = ("break_length", "shift_length")


def _anomalies(obj: dict, path: str, base: AnomalySpec) -> AnomalySpec:
    _known(obj, {f.name for f in dataclasses.fields(AnomalySpec)}, path)
    values = dict(obj)
    for key in _ANOMALY_TUPLES:
        if key in values:
            v = values[key]
            if not (isinstance(v, list) and len(v) == 2 and all(isinstance(i, int) for i in v) and 1 <= v[0] <= v[1]):
                raise ScenarioError(f"{path}.{key}", "expected [min, max] with 1 <= min <= max")
            values[key] = tuple(v)
    if "rate" in values:
        rate = _get(values, "rate", path, float)
        if not 0 < rate < 1:
            raise ScenarioError(f"{path}.rate", "must be in (0, 1)")
        values["rate"] = rate
    if "kinds" in values:
        kinds = values["kinds"]
        if not isinstance(kinds, dict) or not kinds:
            raise ScenarioError(f"{path}.kinds", "expected a non-empty object")
        for k, wgt in kinds.items():
            if k not in ("spike", "correlation_break", "level_shift"):
                raise ScenarioError(f"{path}.kinds.{k}", "unknown anomaly kind")
            if not isinstance(wgt, (int, float)) or wgt < 0:
                raise ScenarioError(f"{path}.kinds.{k}", "weight must be a non-negative number")
    for key in ("spike_magnitude", "break_magnitude", "shift_magnitude"):
        if key in values:
            values[key] = _get(values, key, path, float)
    return dataclasses.replace(base, **values)


def _vitals(obj: dict, path: str, disease: str) -> VitalsConfig:
    allowed = {f.name for f in dataclasses.fields(VitalsConfig)}
    _known(obj, allowed, path)
    if "channels" in obj:
        chans = obj["channels"]
        if not isinstance(chans, list) or not chans or not all(c in DEVICE_RANGES for c in chans):
            raise ScenarioError(f"{path}.channels", f"expected a list drawn from {sorted(DEVICE_RANGES)}")
        if len(set(chans)) != len(chans):
            raise ScenarioError(f"{path}.channels", "duplicate channel")
    for key in ("channel_ranges",):
        if key in obj:
            for ch, rng in obj[key].items():
                if ch not in DEVICE_RANGES:
                    raise ScenarioError(f"{path}.{key}.{ch}", "unknown channel")
                if not (isinstance(rng, list) and len(rng) == 2 and rng[0] < rng[1]):
                    raise ScenarioError(f"{path}.{key}.{ch}", "expected [low, high] with low < high")
    if obj.get("spo2_normal_range") is not None:
        rng = obj["spo2_normal_range"]
        if not (isinstance(rng, list) and len(rng) == 2 and rng[0] < rng[1]):
            raise ScenarioError(f"{path}.spo2_normal_range", "expected [low, high] with low < high")
    try:
        return vitals_for(disease, **obj)
    except TypeError as exc:
        raise ScenarioError(path, str(exc)) from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(doc: Any) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("", "scenario must be a JSON object")
    _known(
        doc,
        {"name", "seed", "model", "training", "aggregation", "grouping_keys", "detection", "data", "organizations"},
        "",
    )
    seed = _get(doc, "seed", "", int, required=True)
    if not 0 <= seed < 2**64:
        raise ScenarioError("seed", "must be a 64-bit unsigned integer")
    model = _dataclass_from(ModelConfig, _section(doc, "model"), "model")
    training = _dataclass_from(TrainingConfig, _section(doc, "training"), "training")
    detection = _dataclass_from(DetectionConfig, _section(doc, "detection"), "detection")
    aggregation = _get(doc, "aggregation", "", str, default="weighted_mean")
    keys = _get(doc, "grouping_keys", "", list, default=list(DEFAULT_GROUPING_KEYS))
    if not keys or not all(isinstance(k, str) for k in keys):
        raise ScenarioError("grouping_keys", "expected a non-empty list of attribute names")

    data_defaults = _section(doc, "data")
    orgs = _get(doc, "organizations", "", list, required=True)
    patients = []
    for oi, org in enumerate(orgs):
        opath = f"organizations[{oi}]"
        if not isinstance(org, dict):
            raise ScenarioError(opath, "expected an object")
        _known(org, {"org_id", "patients"}, opath)
        org_id = _get(org, "org_id", opath, str, required=True)
        plist = _get(org, "patients", opath, list, required=True)
        for pi, pdoc in enumerate(plist):
            ppath = f"{opath}.patients[{pi}]"
            if not isinstance(pdoc, dict):
                raise ScenarioError(ppath, "expected an object")
            _known(pdoc, {"client_id", "attributes", "data"}, ppath)
            client_id = _get(pdoc, "client_id", ppath, str, required=True)
            attrs = _get(pdoc, "attributes", ppath, dict, required=True)
            for k, v in attrs.items():
                if not isinstance(v, str):
                    raise ScenarioError(f"{ppath}.attributes.{k}", "attribute values must be strings")
            for k in keys:
                if k not in attrs:
                    raise ScenarioError(f"{ppath}.attributes.{k}", "missing grouping attribute")
            data = _merge(data_defaults, _get(pdoc, "data", ppath, dict, default={}))
            dpath = f"{ppath}.data"
            _known(data, {"train_length", "test_length", "anomalies", "vitals"}, dpath)
            train_len = _get(data, "train_length", dpath, int, default=2000)
            test_len = _get(data, "test_length", dpath, int, default=2000)
            if train_len < 4 or test_len < 4:
                raise ScenarioError(dpath, "series lengths must be >= 4 ticks")
            anomalies = _anomalies(_get(data, "anomalies", dpath, dict, default={}), f"{dpath}.anomalies", AnomalySpec())
            vitals = _vitals(_get(data, "vitals", dpath, dict, default={}), f"{dpath}.vitals", attrs.get("disease", ""))
            profile = PatientProfile(client_id, org_id, dict(attrs))
            patients.append(PatientConfig(profile, vitals, train_len, test_len, anomalies))

    scenario = Scenario(
        name=_get(doc, "name", "", str, default="scenario"),
        seed=seed,
        model=model,
        training=training,
        aggregation=aggregation,
        grouping_keys=tuple(keys),
        detection=detection,
        patients=patients,
    )
    validate(scenario)
    return scenario


def validate(s: Scenario) -> None:
    t = s.training
    if t.rounds < 1:
        raise ScenarioError("training.rounds", "must be >= 1")
    if not 0 < t.participation <= 1:
        raise ScenarioError("training.participation", "must be in (0, 1]")
    if t.batch_size < 1:
        raise ScenarioError("training.batch_size", "must be >= 1")
    if t.local_epochs < 1:
        raise ScenarioError("training.local_epochs", "must be >= 1")
    if t.lr < 0 or t.server_lr < 0:
        raise ScenarioError("training.lr", "learning rates must be non-negative")
    m = s.model
    if m.layers < 1 or m.hidden < 1 or m.features < 1:
        raise ScenarioError("model", "layers, hidden and features must be >= 1")
    if m.head not in HEADS:
        raise ScenarioError("model.head", f"must be one of {list(HEADS)}")
    if m.init_scale <= 0:
        raise ScenarioError("model.init_scale", "must be positive")
    if s.aggregation not in AGGREGATION_RULES:
        raise ScenarioError("aggregation", f"must be one of {list(AGGREGATION_RULES)}")
    if not 0 < s.detection.quantile < 1:
        raise ScenarioError("detection.quantile", "must be in (0, 1)")
    if not s.patients:
        raise ScenarioError("organizations", "scenario has no patients")
    seen = set()
    for p in s.patients:
        if p.client_id in seen:
            raise ScenarioError("organizations", f"duplicate client_id {p.client_id!r}")
        seen.add(p.client_id)
        if len(p.vitals.channels) != m.features:
            raise ScenarioError(
                "model.features",
                f"patient {p.client_id!r} has {len(p.vitals.channels)} channels, model expects {m.features}",
            )


def loads(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return from_dict(doc)


def load(path) -> Scenario:
    return loads(Path(path).read_text())


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
