"""Train the voxel codec on grammar shapes and record holdout IoU.

Target: holdout reconstruction IoU >= 0.9 within 5,000 steps on ~2,000
grids at M=32. Training stops early once the IoU clears the target with
a small margin; the summary keeps the full eval trace.
"""

from __future__ import annotations

import numpy as np

from _common import Config, out_dirs, write_summary, Tee
from ard3d.cli import _grids_from_scripts, _script_stream
from ard3d.vae import train_vae

N_GRIDS = 2000
N_HOLDOUT = 200
MAX_STEPS = 5000
STOP_IOU = 0.93
SEED = 0


def main():
    run, art = out_dirs("vae")
    log = Tee(run / "log.txt")
    cfg = Config()
    # Batch 4 here, not the config default: at batch 8 the per-step
    # activation churn fragments the allocator heap badly enough to hit
    # the sandbox memory ceiling partway through long runs. Half batch
    # keeps every recurring buffer warm-reusable and peak RSS ~2 GB.
    cfg.vae.batch = 4
    train_stream = _script_stream(SEED, cfg)
    hold_stream = _script_stream(SEED + 7919, cfg)
    log(f"collecting {N_GRIDS} train / {N_HOLDOUT} holdout grids")
    train_bits = _grids_from_scripts((next(train_stream) for _ in range(N_GRIDS)), N_GRIDS)
    holdout_bits = _grids_from_scripts((next(hold_stream) for _ in range(N_HOLDOUT)), N_HOLDOUT)
    log(f"train {train_bits.shape} holdout {holdout_bits.shape}")

    vae, metrics = train_vae(
        train_bits, cfg.vae, MAX_STEPS, run / "vae.ardc",
        holdout_bits=holdout_bits, seed=SEED, eval_every=250,
        log=log, stop_iou=STOP_IOU)

    final = metrics[-1]
    write_summary(art, {
        "n_train": int(len(train_bits)),
        "n_holdout": int(len(holdout_bits)),
        "max_steps": MAX_STEPS,
        "steps_used": int(final["step"]),
        "holdout_iou": float(final["holdout_iou"]),
        "trace": [{"step": m["step"], "holdout_iou": m.get("holdout_iou")} for m in metrics],
        "checkpoint": str(run / "vae.ardc"),
    })
    log(f"done: iou {final['holdout_iou']:.4f} at step {final['step']}")


if __name__ == "__main__":
    main()
