"""Synchronous hierarchical federation: clients, hospital servers, multi-cloud server.

Each round, for every group: the hospital server of each organization sends
the current group model to its selected patients, the patients train
locally and send back weight updates, every hospital aggregates its own
patients' updates, and the multi-cloud server merges the per-hospital group
models and returns the result to every hospital hosting that group.

Nodes are named ``client:<id>``, ``hospital:<org>`` and ``cloud``. Every
transfer is a serialized weight frame and is recorded in the MessageLog.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import detector
from .lstm import EmptyDatasetError, ModelWeights, train_local_with_history
from .numeric import SeededRng
from .protocol import (
    GroupGlobal,
    GroupKey,
    WeightUpdate,
    aggregate_delta,
    aggregate_weighted,
    cross_org_aggregate,
    deserialize_weights,
    group_assign,
    serialize_weights,
    FormatError,
)
from .scenario import PatientConfig, Scenario
from .telemetry import LabeledSeries, TrainingWindow, generate_series, inject_anomalies, series_to_csv, windowize

KINDS = ("broadcast_global", "weight_update", "group_global_up", "fed_global_down")
ROUTES = {
    "broadcast_global": ("hospital", "client"),
    "weight_update": ("client", "hospital"),
    "group_global_up": ("hospital", "cloud"),
    "fed_global_down": ("cloud", "hospital"),
}


def client_node(client_id: str) -> str:
    return f"client:{client_id}"


def hospital_node(org_id: str) -> str:
    return f"hospital:{org_id}"


CLOUD = "cloud"


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class MessageRecord:
    round: int
    from_node: str
    to_node: str
    kind: str
    byte_size: int
    payload_digest: str
    group: str


@dataclass
class MessageLog:
    records: list[MessageRecord] = field(default_factory=list)
    # In-process copy of payload bytes keyed by digest; never written to disk.
    payloads: dict[str, bytes] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)

    def send(self, round_: int, src: str, dst: str, kind: str, payload: bytes, group: str) -> MessageRecord:
        d = digest(payload)
        rec = MessageRecord(round_, src, dst, kind, len(payload), d, group)
        self.records.append(rec)
        self.payloads.setdefault(d, payload)
        return rec

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "MessageLog":
        return cls([MessageRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    group: str
    mean_loss: float
    participants: int
    bytes_up: int
    bytes_down: int
    wall_time: float = field(default=0.0, compare=False)


METRICS_HEADER = "round,group,participants,mean_loss,bytes_up,bytes_down"


def metrics_csv(metrics: Sequence[RoundMetrics]) -> str:
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(f"{m.round},{m.group},{m.participants},{m.mean_loss!r},{m.bytes_up},{m.bytes_down}")
    return "\n".join(lines) + "\n"


@dataclass
class ClientData:
    config: PatientConfig
    train_series: LabeledSeries
    test_series: LabeledSeries
    train: list[TrainingWindow]
    test: list[TrainingWindow]

    @property
    def client_id(self) -> str:
        return self.config.client_id

    @property
    def org_id(self) -> str:
        return self.config.profile.org_id


def build_client_data(scenario: Scenario, patient: PatientConfig) -> ClientData:
    """Generate one patient's train and test series from the scenario seed."""
    cid = patient.client_id
    seed = scenario.seed
    train = generate_series(patient.profile, patient.train_length, SeededRng(seed, "data", cid, "train"), patient.vitals)
    if scenario.model.head == "classifier":
        train = inject_anomalies(train, patient.anomalies, SeededRng(seed, "anomaly", cid, "train"))
    test = generate_series(patient.profile, patient.test_length, SeededRng(seed, "data", cid, "test"), patient.vitals)
    test = inject_anomalies(test, patient.anomalies, SeededRng(seed, "anomaly", cid, "test"))
    train_w = windowize(train)
    patient.profile.dataset_size = len(train_w)
    return ClientData(patient, train, test, train_w, windowize(test))


def select_participants(group_clients: Sequence[str], fraction: float, rng: SeededRng) -> list[str]:
    """ceil(fraction * n) clients drawn without replacement, returned sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must be in (0, 1]")
    clients = sorted(group_clients)
    if not clients:
        return []
    k = math.ceil(fraction * len(clients))
    if k >= len(clients):
        return clients
    idx = rng.choice(len(clients), size=k, replace=False)
    return sorted(clients[int(i)] for i in idx)


@dataclass
class SimulationState:
    scenario: Scenario
    clients: dict[str, ClientData]
    groups: dict[GroupKey, list[str]]
    globals: dict[GroupKey, ModelWeights]
    log: MessageLog = field(default_factory=MessageLog)
    metrics: list[RoundMetrics] = field(default_factory=list)
    history: list[dict[GroupKey, ModelWeights]] = field(default_factory=list)
    workers: int = 1

    def orgs_of(self, group: GroupKey) -> list[str]:
        return sorted({self.clients[c].org_id for c in self.groups[group]})


def initial_group_weights(scenario: Scenario, group: GroupKey) -> ModelWeights:
    m = scenario.model
    rng = SeededRng(scenario.seed, "init", str(group))
    return ModelWeights.initialize(m.features, m.hidden, rng, m.layers, m.head, m.init_scale)


def init_state(scenario: Scenario, workers: int = 1, clients: Optional[Mapping[str, ClientData]] = None) -> SimulationState:
    if clients is None:
        clients = {p.client_id: build_client_data(scenario, p) for p in scenario.patients}
    groups = group_assign(scenario.profiles, scenario.grouping_keys)
    globals_ = {g: initial_group_weights(scenario, g) for g in groups}
    return SimulationState(scenario, dict(clients), groups, globals_, workers=max(1, workers))


@dataclass
class _ClientResult:
    client_id: str
    weights: Optional[ModelWeights]
    loss: float


def _train_client(state: SimulationState, cid: str, start: ModelWeights, q: int) -> _ClientResult:
    t = state.scenario.training
    data = state.clients[cid].train
    rng = SeededRng(state.scenario.seed, "train", cid, q)
    try:
        w, history = train_local_with_history(data, start, t.batch_size, t.local_epochs, t.lr, rng)
    except EmptyDatasetError:
        return _ClientResult(cid, None, float("nan"))
    return _ClientResult(cid, w, history[-1])


def run_round(state: SimulationState, q: int) -> tuple[SimulationState, list[RoundMetrics]]:
    """One synchronous round over every group; returns only when all groups finished."""
    sc = state.scenario
    log = state.log
    round_metrics = []
    for group, members in state.groups.items():
        started = time.perf_counter()
        gname = str(group)
        before = len(log.records)
        current = state.globals[group]
        current_bytes = serialize_weights(current)
        selected = select_participants(members, sc.training.participation, SeededRng(sc.seed, "select", gname, q))

        for cid in selected:
            log.send(q, hospital_node(state.clients[cid].org_id), client_node(cid), "broadcast_global", current_bytes, gname)

        if state.workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=state.workers) as pool:
                results = list(pool.map(lambda c: _train_client(state, c, current, q), selected))
        else:
            results = [_train_client(state, c, current, q) for c in selected]

        by_org: dict[str, list[WeightUpdate]] = {}
        losses = []
        for res in results:
            cd = state.clients[res.client_id]
            if res.weights is None:
                log.events.append({"round": q, "client": res.client_id, "event": "skipped_empty_dataset"})
                continue
            if sc.aggregation == "delta_step":
                payload = res.weights.map(lambda a, b: a - b, current)
                kind = "delta"
            else:
                payload = res.weights
                kind = "weights"
            upd = WeightUpdate(res.client_id, group, q, payload, len(cd.train), kind)
            log.send(q, client_node(res.client_id), hospital_node(cd.org_id), "weight_update", upd.payload_bytes(), gname)
            by_org.setdefault(cd.org_id, []).append(upd)
            losses.append(res.loss)

        if by_org:
            org_globals = []
            for org in sorted(by_org):
                ups = by_org[org]
                if sc.aggregation == "delta_step":
                    base = GroupGlobal(group, current, 0, org)
                    gg = aggregate_delta(base, ups, sc.training.server_lr)
                else:
                    gg = aggregate_weighted(ups)
                gg.source = org
                org_globals.append(gg)
                log.send(q, hospital_node(org), CLOUD, "group_global_up", serialize_weights(gg.weights), gname)
            fed = cross_org_aggregate(org_globals)
            fed_bytes = serialize_weights(fed.weights)
            for org in state.orgs_of(group):
                log.send(q, CLOUD, hospital_node(org), "fed_global_down", fed_bytes, gname)
            state.globals[group] = fed.weights

        sent = log.records[before:]
        up = sum(r.byte_size for r in sent if r.kind in ("weight_update", "group_global_up"))
        down = sum(r.byte_size for r in sent if r.kind in ("broadcast_global", "fed_global_down"))
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        round_metrics.append(
            RoundMetrics(q, gname, mean_loss, len(losses), up, down, time.perf_counter() - started)
        )
    state.metrics.extend(round_metrics)
    state.history.append(dict(state.globals))
    return state, round_metrics


@dataclass
class RunResult:
    state: SimulationState
    thresholds: dict[str, detector.Threshold]

    @property
    def finals(self) -> dict[GroupKey, ModelWeights]:
        return self.state.globals

    @property
    def log(self) -> MessageLog:
        return self.state.log

    @property
    def metrics(self) -> list[RoundMetrics]:
        return self.state.metrics

    def group_of(self, client_id: str) -> GroupKey:
        for g, members in self.state.groups.items():
            if client_id in members:
                return g
        raise KeyError(client_id)


def calibrate_thresholds(state: SimulationState) -> dict[str, detector.Threshold]:
    """Each client calibrates on its own training windows with its group's final model."""
    q = state.scenario.detection.quantile
    out = {}
    for group, members in state.groups.items():
        w = state.globals[group]
        for cid in members:
            windows = state.clients[cid].train
            if w.head == "classifier":
                windows = [win for win in windows if win.y == 0]
            if not windows:
                continue
            out[cid] = detector.calibrate(detector.score_batch(windows, w), q)
    return out


def run(scenario: Scenario, workers: int = 1, clients: Optional[Mapping[str, ClientData]] = None) -> RunResult:
    state = init_state(scenario, workers, clients)
    for q in range(1, scenario.training.rounds + 1):
        state, _ = run_round(state, q)
    return RunResult(state, calibrate_thresholds(state))


def detection_report(
    models: Mapping[str, tuple[ModelWeights, Sequence[str]]],
    thresholds: Mapping[str, detector.Threshold],
    clients: Mapping[str, ClientData],
    split: str = "test",
) -> dict:
    """Per-client and pooled window-level metrics.

    ``models`` maps a group name to (final weights, member ids); each client
    is scored with its group's model against its own threshold.
    """
    if split not in ("test", "train"):
        raise ValueError("split must be 'test' or 'train'")
    entries = []
    all_pred, all_truth = [], []
    for gname, (w, members) in models.items():
        for cid in members:
            if cid not in thresholds:
                continue
            t = thresholds[cid]
            windows = clients[cid].test if split == "test" else clients[cid].train
            pred = [int(detector.detect(s, t)) for s in detector.score_batch(windows, w)]
            truth = [win.y for win in windows]
            all_pred += pred
            all_truth += truth
            entries.append(
                {
                    "client_id": cid,
                    "group": gname,
                    "threshold": t.to_dict(),
                    "metrics": detector.evaluate(pred, truth).to_dict(),
                }
            )
    return {"split": split, "clients": entries, "overall": detector.evaluate(all_pred, all_truth).to_dict()}


def report_for(result: RunResult, split: str = "test") -> dict:
    models = {str(g): (w, result.state.groups[g]) for g, w in result.finals.items()}
    return detection_report(models, result.thresholds, result.state.clients, split)


# --- privacy audit -------------------------------------------------------------


@dataclass
class TelemetryCorpus:
    """Digests of everything that must stay on the clients."""

    window_digests: set[str] = field(default_factory=set)
    series_digests: set[str] = field(default_factory=set)

    def add_series(self, series: LabeledSeries) -> None:
        self.series_digests.add(digest(series.to_bytes()))
        self.series_digests.add(digest(series_to_csv(series).encode()))
        for win in windowize(series):
            self.window_digests.add(digest(win.to_bytes()))

    @classmethod
    def from_clients(cls, clients: Iterable[ClientData]) -> "TelemetryCorpus":
        corpus = cls()
        for cd in clients:
            corpus.add_series(cd.train_series)
            corpus.add_series(cd.test_series)
        return corpus


@dataclass
class AuditReport:
    checked: int
    violations: list[dict]

    def to_dict(self) -> dict:
        return {"checked": self.checked, "violations": self.violations}


def _role(node: str) -> str:
    return node.split(":", 1)[0]


def audit_privacy(log: MessageLog, corpus: TelemetryCorpus) -> AuditReport:
    """Flag any transfer that is not a model frame on an allowed route.

    One entry per offending message, listing every reason it failed.
    """
    violations = []
    for idx, rec in enumerate(log.records):
        reasons = []
        if rec.kind not in KINDS:
            reasons.append(f"unexpected message kind {rec.kind!r}")
        elif (_role(rec.from_node), _role(rec.to_node)) != ROUTES[rec.kind]:
            reasons.append(f"{rec.kind} not allowed from {rec.from_node} to {rec.to_node}")
        if rec.payload_digest in corpus.window_digests:
            reasons.append("payload matches a telemetry window")
        if rec.payload_digest in corpus.series_digests:
            reasons.append("payload matches a raw telemetry series")
        payload = log.payloads.get(rec.payload_digest)
        if payload is not None:
            try:
                deserialize_weights(payload)
            except FormatError as exc:
                reasons.append(f"payload is not a weight frame ({exc})")
        if reasons:
            violations.append({"index": idx, "round": rec.round, "from": rec.from_node, "to": rec.to_node, "reasons": reasons})
    return AuditReport(len(log.records), violations)


# --- communication accounting --------------------------------------------------


@dataclass(frozen=True)
class CommunicationReport:
    fl_bytes: int
    fl_bytes_per_round: dict[int, int]
    centralized_upload_bytes: int
    centralized_download_bytes: int

    @property
    def centralized_counterfactual_bytes(self) -> int:
        return self.centralized_upload_bytes + self.centralized_download_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fl_bytes_per_round"] = {str(k): v for k, v in self.fl_bytes_per_round.items()}
        d["centralized_counterfactual_bytes"] = self.centralized_counterfactual_bytes
        return d


def account_communication(
    log: MessageLog, rounds: int, dataset_sizes: Mapping[str, int], features: int, model_bytes: int
) -> CommunicationReport:
    """Bytes moved by the federation versus shipping every window to a central server.

    The counterfactual uploads each client's windows (4 x features float64)
    every round and sends the trained model back to every client.
    """
    per_round: dict[int, int] = {}
    for rec in log.records:
        per_round[rec.round] = per_round.get(rec.round, 0) + rec.byte_size
    window_bytes = 4 * features * 8
    upload = rounds * sum(n * window_bytes for n in dataset_sizes.values())
    download = rounds * len(dataset_sizes) * model_bytes
    return CommunicationReport(sum(per_round.values()), per_round, upload, download)


def communication_for(result: RunResult) -> CommunicationReport:
    sc = result.state.scenario
    sizes = {cid: len(cd.train) for cid, cd in result.state.clients.items()}
    any_w = next(iter(result.finals.values()))
    return account_communication(result.log, sc.training.rounds, sizes, sc.model.features, len(serialize_weights(any_w)))
