"""Two hospitals, two disease groups: grouping, traffic and privacy audit.

org1 hosts Bob and Alice (OSA, 30-36) plus John and Paul (DB, 34-40); org2
hosts Susan and Max (OSA, 30-36). Prints group memberships, per-group test
metrics, bytes moved versus a centralized counterfactual, and the audit.

    python3 scripts/two_organizations.py [--rounds N] [--workers N]
"""
import argparse
from pathlib import Path

from iomtfed import scenario, simulation

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "two_organizations.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    sc = scenario.load(SCENARIO).with_overrides(rounds=args.rounds)
    result = simulation.run(sc, workers=args.workers)

    for group, members in result.state.groups.items():
        orgs = result.state.orgs_of(group)
        print(f"group {group}: {', '.join(members)}  (organizations: {', '.join(orgs)})")

    report = simulation.report_for(result)
    for entry in report["clients"]:
        m = entry["metrics"]
        f1 = "n/a" if m["f1"] is None else f"{m['f1']:.3f}"
        print(f"  {entry['client_id']:>6} [{entry['group']}]  F1 {f1}  FPR {m['false_positive_rate']:.3f}")

    comm = simulation.communication_for(result)
    print(f"federated bytes: {comm.fl_bytes:,} over {sc.training.rounds} rounds")
    print(f"centralized counterfactual: {comm.centralized_counterfactual_bytes:,} "
          f"(upload {comm.centralized_upload_bytes:,}, model download {comm.centralized_download_bytes:,})")

    audit = simulation.audit_privacy(result.log, simulation.TelemetryCorpus.from_clients(result.state.clients.values()))
    print(f"audit: {audit.checked} messages checked, {len(audit.violations)} violations")


if __name__ == "__main__":
    main()
