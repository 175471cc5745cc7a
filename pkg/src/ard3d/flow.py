"""Rectified-flow objective, Euler sampler, and dual guidance mixing.

The model learns velocity v = eps - x0 on linear interpolants
x(s) = (1-s) x0 + s eps. Sampling integrates from s=1 to s=0 with
x <- x - ds * v. Time grid points are computed as exact rational blends
of the interval endpoints, so splitting a schedule into sub-calls with
carried state reproduces the full run bit for bit whenever the split
point lands on a grid value.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, mean_square


class FlowError(RuntimeError):
    pass


def interpolate(x0: np.ndarray, eps: np.ndarray, s: float) -> np.ndarray:
    if x0.shape != eps.shape:
        raise FlowError(f"shape mismatch {x0.shape} vs {eps.shape}")
    return (1.0 - s) * x0 + s * eps


def velocity_target(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return eps - x0


def flow_loss(v_pred: Tensor, x0: np.ndarray, eps: np.ndarray) -> Tensor:
    """Mean squared error against the interpolant velocity eps - x0.

    v_pred holds the predictions for the flagged latent tokens only; the
    mean runs over every element given.
    """
    if v_pred.shape != x0.shape or x0.shape != eps.shape:
        raise FlowError(f"shape mismatch {v_pred.shape} / {x0.shape} / {eps.shape}")
    target = (eps - x0).astype(v_pred.data.dtype)
    return mean_square(v_pred - Tensor(target))


def sample_time(batch: int, rng: np.random.Generator,
                schedule: str = "uniform") -> np.ndarray:
    """Training times, one per noised block; open interval keeps both the
    clean and pure-noise endpoints out of the batch."""
    if schedule != "uniform":
        raise FlowError(f"unknown time schedule {schedule!r}")
    u = rng.random(batch)
    return np.clip(u, 1e-6, 1.0 - 1e-6)


def time_grid(steps: int, s_hi: float, s_lo: float) -> np.ndarray:
    """steps+1 descending grid values; each is the correctly rounded
    rational blend (s_hi*(steps-k) + s_lo*k) / steps."""
    k = np.arange(steps + 1, dtype=np.float64)
    return (s_hi * (steps - k) + s_lo * k) / steps


def euler_sample(v_fn, x_init: np.ndarray, steps: int, s_hi: float = 1.0,
                 s_lo: float = 0.0):
    """Integrate x' = -v from s_hi down to s_lo in uniform steps.

    v_fn(x, s) evaluates the guided velocity. Returns the final x.
    Non-finite velocities or states abort with the offending step index.
    """
    if steps < 1:
        raise FlowError("steps must be >= 1")
    if not (0.0 <= s_lo < s_hi <= 1.0):
        raise FlowError(f"bad integration interval [{s_hi}, {s_lo}]")
    grid = time_grid(steps, s_hi, s_lo)
    x = np.array(x_init, copy=True)  # dtype follows the caller's state
    for k in range(steps):
        s = float(grid[k])
        v = np.asarray(v_fn(x, s), dtype=x.dtype)
        if v.shape != x.shape:
            raise FlowError(f"velocity shape {v.shape} vs state {x.shape} at step {k}")
        if not np.isfinite(v).all():
            raise FlowError(f"non-finite velocity at step {k} (s={s:.4f})")
        ds = x.dtype.type(grid[k] - grid[k + 1])
        x = x - ds * v
        if not np.isfinite(x).all():
            raise FlowError(f"non-finite state after step {k} (s={s:.4f})")
    return x


def cfg_combine(v_uncond: np.ndarray, v_3d_only: np.ndarray, v_full: np.ndarray,
                cfg_text: float, cfg_3d: float) -> np.ndarray:
    """v_uncond + cfg_3d*(v_3d_only - v_uncond) + cfg_text*(v_full - v_3d_only).

    The (1,1) and (0,0) coefficient pairs short-circuit to v_full and
    v_uncond so the degenerate settings are exact, not just close.
    """
    if not (v_uncond.shape == v_3d_only.shape == v_full.shape):
        raise FlowError("branch shape mismatch")
    if cfg_text == 1.0 and cfg_3d == 1.0:
        return v_full.copy()
    if cfg_text == 0.0 and cfg_3d == 0.0:
        return v_uncond.copy()
    return (v_uncond + cfg_3d * (v_3d_only - v_uncond)
            + cfg_text * (v_full - v_3d_only))
