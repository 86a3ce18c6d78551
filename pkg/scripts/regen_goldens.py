#!/usr/bin/env python3
"""Rewrite tests/golden/<name>.trace from scenarios/<name>.scn.

Only run this after a deliberate model change; review the diff before committing.
"""
import sys
from pathlib import Path

from sptm_sim.scenario import load_scenario, run_scenario

ROOT = Path(__file__).resolve().parent.parent


def main():
    out_dir = ROOT / "tests" / "golden"
    out_dir.mkdir(parents=True, exist_ok=True)
    status = 0
    for path in sorted((ROOT / "scenarios").glob("*.scn")):
        world, results = run_scenario(load_scenario(path))
        bad = [r for r in results if not r.matched]
        if bad:
            status = 1
            for r in bad:
                print(f"{path.name}:{r.step.lineno}: expected {r.step.expect}, got {r.outcome}")
        (out_dir / f"{path.stem}.trace").write_text(world.trace.text(), encoding="utf-8")
        print(f"{path.stem}: {len(world.trace)} records")
    return status


if __name__ == "__main__":
    sys.exit(main())
