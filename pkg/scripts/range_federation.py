"""Does federating with a wider-range patient stop false alarms?

patient-1's SpO2 normally stays in [95, 98]; patient-2 (another hospital)
sits in [94, 98]. A resting window at a given SpO2 is scored by a model
trained on patient-1 alone and by the shared OSA group model, each against
patient-1's own calibrated threshold.

    python3 scripts/range_federation.py [--spo2 93 94 95 96.5]
"""
import argparse
from pathlib import Path

from iomtfed import detector, scenario, simulation
from iomtfed.telemetry import steady_window

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "spo2_range.json"
PROBE = "patient-1"


def compare(spo2_values, workers: int = 1):
    sc = scenario.load(SCENARIO)
    federated = simulation.run(sc, workers=workers)
    local = simulation.run(sc.restricted_to([PROBE]), workers=workers)
    vitals = sc.patient(PROBE).vitals
    rows = []
    for spo2 in spo2_values:
        window = steady_window(vitals, spo2)
        row = {"spo2": spo2}
        for name, res in (("local", local), ("federated", federated)):
            w = res.finals[res.group_of(PROBE)]
            t = res.thresholds[PROBE]
            s = detector.score(window, w)
            row[name] = (s, t.value, detector.detect(s, t).name.lower())
        rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spo2", type=float, nargs="+", default=[93.0, 94.0, 95.0, 96.5])
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    print(f"{'SpO2':>6}  {'local score/threshold':>26}  {'federated score/threshold':>30}")
    for row in compare(args.spo2, args.workers):
        cells = [f"{s:.5f}/{t:.5f} {label:>8}" for s, t, label in (row["local"], row["federated"])]
        print(f"{row['spo2']:>6.1f}  {cells[0]:>26}  {cells[1]:>30}")


if __name__ == "__main__":
    main()
