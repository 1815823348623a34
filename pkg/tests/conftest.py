import copy
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from iomtfed import scenario as scenario_mod  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

TWO_ORG_ROSTER = {
    "org1": [("Bob", "OSA", "30-36"), ("Alice", "OSA", "30-36"), ("John", "DB", "34-40"), ("Paul", "DB", "34-40")],
    "org2": [("Susan", "OSA", "30-36"), ("Max", "OSA", "30-36")],
}


def scenario_doc(roster=None, *, seed=11, hidden=4, rounds=2, lr=1.0, length=64, **extra):
    """A small scenario document; ``roster`` maps org -> [(client, disease, age_band)]."""
    roster = roster or TWO_ORG_ROSTER
    doc = {
        "name": "tiny",
        "seed": seed,
        "model": {"layers": 2, "hidden": hidden, "features": 4, "head": "reconstruction"},
        "training": {"batch_size": 4, "local_epochs": 1, "lr": lr, "server_lr": 1.0, "rounds": rounds, "participation": 1.0},
        "aggregation": "weighted_mean",
        "data": {"train_length": length, "test_length": length},
        "organizations": [
            {
                "org_id": org,
                "patients": [
                    {"client_id": cid, "attributes": {"disease": dis, "age_band": band}} for cid, dis, band in pats
                ],
            }
            for org, pats in roster.items()
        ],
    }
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return doc


def tiny_scenario(roster=None, **kw):
    return scenario_mod.from_dict(copy.deepcopy(scenario_doc(roster, **kw)))


@pytest.fixture
def two_org_tiny():
    return tiny_scenario()


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
