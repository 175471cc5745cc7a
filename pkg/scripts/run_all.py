"""Sequential driver for the whole experiment chain.

Each stage runs as a subprocess (so its memory is returned on exit) and
is skipped once its summary exists, which makes the driver safe to rerun
after a crash; stages that die get one retry, resuming from their own
checkpoints and partial logs.
"""

from __future__ import annotations

import subprocess
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
STAGES = ["vae", "overfit", "e2e", "ablation"]


def main() -> int:
    for name in STAGES:
        summary = ROOT / "artifacts" / name / "summary.json"
        if summary.exists():
            print(f"[run_all] {name}: summary exists, skipping", flush=True)
            continue
        for attempt in (1, 2):
            print(f"[run_all] {name}: attempt {attempt}", flush=True)
            t0 = time.time()
            r = subprocess.run(
                [sys.executable, str(ROOT / "scripts" / f"run_{name}.py")],
                cwd=ROOT)
            minutes = (time.time() - t0) / 60
            print(f"[run_all] {name}: exit {r.returncode} after {minutes:.1f} min",
                  flush=True)
            if r.returncode == 0:
                break
        else:
            print(f"[run_all] {name}: failed twice, stopping the chain", flush=True)
            return 1
    print("[run_all] chain complete", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
