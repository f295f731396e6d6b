#!/usr/bin/env python3
"""Run the bundled three-stakeholder demo scenario end to end.

Usage: python scripts/run_demo_scenario.py [run-dir]

Leaves the run directory in place for inspection: sealed volumes under
volumes/, the policy-manager store (with its audit log) under store/, and
each stakeholder's plaintext staging area under stakeholders/.
"""

import sys
import tempfile
from pathlib import Path

from covault.scenario import run_scenario

REPO = Path(__file__).resolve().parent.parent


def main() -> int:
    run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(
        tempfile.mkdtemp(prefix="covault-demo-")
    )
    scenario = REPO / "scenarios" / "three_stakeholder_demo.yaml"
    print(f"scenario: {scenario}")
    print(f"run dir:  {run_dir}\n")
    outcome = run_scenario(scenario, run_dir)
    for result in outcome.assertions:
        mark = "PASS" if result.ok else "FAIL"
        detail = f"  ({result.detail})" if result.detail and not result.ok else ""
        print(f"{mark}  {result.name}{detail}")
    print(f"\n{'all assertions passed' if outcome.ok else 'FAILURES PRESENT'}")
    return 0 if outcome.ok else 1


if __name__ == "__main__":
    sys.exit(main())
