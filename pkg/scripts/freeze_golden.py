#!/usr/bin/env python3
"""Regenerate the frozen golden transcript hashes for the shipped scenarios.

Run only after deliberately reviewing a behavior change:

    python3 scripts/freeze_golden.py
"""

import json
import os
import sys

ROOT = os.path.join(os.path.dirname(__file__), "..")
sys.path.insert(0, os.path.join(ROOT, "src"))

from lakat.scenario import Runner, parse_scenario  # noqa: E402


def main():
    golden = {}
    for name in ("fig5a", "fig5b"):
        with open(os.path.join(ROOT, "scenarios", f"{name}.json")) as fh:
            scenario = parse_scenario(fh.read())
        report = Runner(scenario).run()
        if not report.ok:
            print(f"{name}: expectations FAILED; refusing to freeze", file=sys.stderr)
            return 1
        golden[name] = report.transcript_hash
        print(f"{name}: {report.transcript_hash}")
    out_dir = os.path.join(ROOT, "tests", "golden")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "transcripts.json"), "w") as fh:
        json.dump(golden, fh, indent=1, sort_keys=True)
    print("frozen to tests/golden/transcripts.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
