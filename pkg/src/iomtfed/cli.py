"""Command line: ``gen-data``, ``run``, ``eval`` and ``audit``.

Exit codes: 0 ok, 1 validation error, 2 I/O error, 3 internal error.
Flags given on the command line override the matching scenario fields.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, detector, scenario as scenario_mod, simulation
from .protocol import deserialize_weights, serialize_weights
from .telemetry import dump_device_model, device_model_for, parse_device_model, series_from_csv, series_to_csv, windowize

log = logging.getLogger("iomtfed")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

# Reference oximeter interface in the DTDL shape, written next to the per-patient models.
OXIMETER_MODEL = """{
  "@id": "patient:example:Oximeter;1",
  "@type": "Interface",
  "displayName": "Oximeter",
  "contents": [
    {"@type": "Property", "name": "blood_oxygen_level", "schema": "double"},
    {"@type": "Property", "name": "pulse_rate", "schema": "double"}
  ],
  "@context": "patient:dtdl:context;2"
}
"""


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_scenario(path: str, **overrides) -> tuple[scenario_mod.Scenario, bytes]:
    raw = Path(path).read_bytes()
    sc = scenario_mod.loads(raw.decode("utf-8"))
    return sc.with_overrides(**overrides), raw


def _client_data_from_dir(sc: scenario_mod.Scenario, data_dir: Path) -> dict[str, simulation.ClientData]:
    clients = {}
    for p in sc.patients:
        train_path = data_dir / "series" / f"{p.client_id}.csv"
        test_path = data_dir / "test" / f"{p.client_id}.csv"
        for f in (train_path, test_path):
            if not f.is_file():
                raise FileNotFoundError(f"missing data file {f}")
        train = series_from_csv(train_path.read_text(), p.vitals.channel_ranges)
        test = series_from_csv(test_path.read_text(), p.vitals.channel_ranges)
        if train.channels != tuple(p.vitals.channels):
            raise ValidationError(f"{train_path}: channels {train.channels} differ from scenario")
        train_w = windowize(train)
        p.profile.dataset_size = len(train_w)
        clients[p.client_id] = simulation.ClientData(p, train, test, train_w, windowize(test))
    return clients


def cmd_gen_data(args) -> int:
    sc, _ = _load_scenario(args.scenario, seed=args.seed)
    out = Path(args.out)
    for sub in ("series", "test", "devices"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for p in sc.patients:
        cd = simulation.build_client_data(sc, p)
        (out / "series" / f"{p.client_id}.csv").write_text(series_to_csv(cd.train_series))
        (out / "test" / f"{p.client_id}.csv").write_text(series_to_csv(cd.test_series))
        (out / "devices" / f"{p.client_id}.json").write_text(dump_device_model(device_model_for(p.client_id, p.vitals.channels)))
    (out / "devices" / "oximeter.json").write_text(dump_device_model(parse_device_model(OXIMETER_MODEL)))
    log.info("wrote data for %d patients to %s", len(sc.patients), out)
    return EXIT_OK


def _overrides(args) -> dict:
    keys = ("seed", "rounds", "aggregation", "head")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_run(args) -> int:
    overrides = _overrides(args)
    sc, raw = _load_scenario(args.scenario, **overrides)
    out = Path(args.out)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "iomtfed",
        "version": __version__,
        "scenario_path": str(args.scenario),
        "scenario_sha256": scenario_mod.content_hash(raw),
        "seed": sc.seed,
        "aggregation": sc.aggregation,
        "head": sc.model.head,
        "rounds": sc.training.rounds,
        "overrides": overrides,
        "data_dir": str(args.data) if args.data else None,
        "output_dir": str(out),
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    (out / "scenario.json").write_bytes(raw)
    (out / "manifest.json").write_text(_json_dump(manifest))

    clients = _client_data_from_dir(sc, Path(args.data)) if args.data else None
    result = simulation.run(sc, workers=args.workers, clients=clients)

    (out / "metrics.csv").write_text(simulation.metrics_csv(result.metrics))
    (out / "messages.jsonl").write_text(result.log.to_jsonl())
    (out / "events.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log.events))
    groups = {}
    for group, w in result.finals.items():
        name = f"{group.slug}.bin"
        (out / "weights" / name).write_bytes(serialize_weights(w))
        groups[str(group)] = {"weights": f"weights/{name}", "members": result.state.groups[group]}
    (out / "groups.json").write_text(_json_dump(groups))
    (out / "thresholds.json").write_text(_json_dump({c: t.to_dict() for c, t in sorted(result.thresholds.items())}))
    (out / "communication.json").write_text(_json_dump(simulation.communication_for(result).to_dict()))
    log.info("run complete: %d rounds, %d messages", sc.training.rounds, len(result.log))
    return EXIT_OK


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing run artifact {path}")
    return path


def _load_run(run_dir: Path):
    manifest = json.loads(_require(run_dir / "manifest.json").read_text())
    raw = _require(run_dir / "scenario.json").read_bytes()
    sc = scenario_mod.loads(raw.decode("utf-8")).with_overrides(**manifest.get("overrides", {}))
    data_dir = manifest.get("data_dir")
    if data_dir:
        clients = _client_data_from_dir(sc, Path(data_dir))
    else:
        clients = {p.client_id: simulation.build_client_data(sc, p) for p in sc.patients}
    return manifest, sc, clients


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    _, _, clients = _load_run(run_dir)
    groups = json.loads(_require(run_dir / "groups.json").read_text())
    raw = json.loads(_require(run_dir / "thresholds.json").read_text())
    thresholds = {cid: detector.Threshold.from_dict(t) for cid, t in raw.items()}
    models = {
        gname: (deserialize_weights(_require(run_dir / info["weights"]).read_bytes()), info["members"])
        for gname, info in groups.items()
    }
    report = simulation.detection_report(models, thresholds, clients, args.split)
    dest = Path(args.out) if args.out else run_dir / "detection_report.json"
    dest.write_text(_json_dump(report))
    return EXIT_OK


def cmd_audit(args) -> int:
    run_dir = Path(args.run)
    _, _, clients = _load_run(run_dir)
    msg_log = simulation.MessageLog.from_jsonl(_require(run_dir / "messages.jsonl").read_text())
    corpus = simulation.TelemetryCorpus.from_clients(clients.values())
    report = simulation.audit_privacy(msg_log, corpus).to_dict()
    dest = Path(args.out) if args.out else run_dir / "audit.json"
    dest.write_text(_json_dump(report))
    if report["violations"]:
        log.warning("%d privacy violations", len(report["violations"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iomtfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="write per-patient CSV series and device models")
    gen.add_argument("--scenario", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser("run", help="simulate the federation")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--aggregation", choices=scenario_mod.AGGREGATION_RULES)
    run.add_argument("--head", choices=("reconstruction", "classifier"))
    run.add_argument("--data", help="directory written by gen-data; generated inline when omitted")
    run.add_argument("--workers", type=int, default=1, help="threads used to train clients within a round")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score a split with the final models and per-client thresholds")
    ev.add_argument("--run", required=True)
    ev.add_argument("--split", choices=("test", "train"), default="test")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    au = sub.add_parser("audit", help="check the message log for telemetry leaving a client")
    au.add_argument("--run", required=True)
    au.add_argument("--out")
    au.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (scenario_mod.ScenarioError, ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
