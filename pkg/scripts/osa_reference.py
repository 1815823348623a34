"""Pinned-seed reference run of the OSA detection scenario.

Runs the federation, evaluates the group model on every client's test split
with the client's own threshold, and writes the numbers the acceptance test
compares against (default: tests/data/osa_reference.json).

    python3 scripts/osa_reference.py [--out PATH] [--workers N]
"""
import argparse
import json
import time
from pathlib import Path

from iomtfed import scenario, simulation

ROOT = Path(__file__).resolve().parents[1]
SCENARIO = ROOT / "scenarios" / "osa_detection.json"


def reference(workers: int = 1) -> dict:
    raw = SCENARIO.read_bytes()
    sc = scenario.loads(raw.decode())
    started = time.perf_counter()
    result = simulation.run(sc, workers=workers)
    report = simulation.report_for(result, "test")
    elapsed = time.perf_counter() - started
    return {
        "scenario": SCENARIO.name,
        "scenario_sha256": scenario.content_hash(raw),
        "seed": sc.seed,
        "thresholds": {c: t.value for c, t in sorted(result.thresholds.items())},
        "clients": {e["client_id"]: e["metrics"] for e in report["clients"]},
        "overall": report["overall"],
        "final_loss": {m.group: m.mean_loss for m in result.metrics if m.round == sc.training.rounds},
        "runtime_seconds": round(elapsed, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "osa_reference.json"))
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    ref = reference(args.workers)
    Path(args.out).write_text(json.dumps(ref, indent=2, sort_keys=True) + "\n")
    o = ref["overall"]
    print(f"F1 {o['f1']:.4f}  FPR {o['false_positive_rate']:.4f}  "
          f"TP {o['tp']} FP {o['fp']} FN {o['fn']} TN {o['tn']}  ({ref['runtime_seconds']} s)")


if __name__ == "__main__":
    main()
