"""Parameter store and AdamW.

All trainable state lives in a flat name -> Tensor dict together with the
Adam moment buffers, so checkpointing is a straight serialization of the
store.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class OptimError(RuntimeError):
    """Raised on non-finite gradients; names the offending parameter."""


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until inside [-2*std, 2*std]."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    np.clip(out, -2 * std, 2 * std, out=out)
    return out.astype(np.float32)


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def adamw_step(self, lr: float, betas: tuple[float, float] = (0.9, 0.95),
                   eps: float = 1e-8, weight_decay: float = 0.01,
                   grad_clip: float | None = 1.0) -> float:
        """One decoupled-weight-decay Adam update over all params with grads.

        Returns the global grad norm (pre-clip). Raises OptimError on any
        non-finite gradient.
        """
        norm_sq = 0.0
        for name, t in self.params.items():
            if t.grad is None:
                continue
            gr = t.grad.reshape(-1)
            # float64 accumulation; a non-finite entry makes the sum
            # non-finite, which replaces a separate isfinite pass
            norm_sq += float(np.einsum("i,i->", gr, gr, dtype=np.float64))
        if not math.isfinite(norm_sq):
            for name, t in self.params.items():
                if t.grad is not None and not np.isfinite(t.grad).all():
                    raise OptimError(f"non-finite gradient in parameter {name!r}")
            raise OptimError("non-finite gradient")
        gnorm = math.sqrt(norm_sq)
        scale = 1.0
        if grad_clip is not None and gnorm > grad_clip:
            scale = grad_clip / (gnorm + 1e-12)
        self.step_count += 1
        b1, b2 = betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            if scale != 1.0:
                g *= scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            g *= g
            g *= 1 - b2
            v += g
            u = v / bc2
            np.sqrt(u, out=u)
            u += eps
            np.divide(m, u, out=u)
            u *= lr / bc1
            t.data *= 1.0 - lr * weight_decay
            t.data -= u
        return gnorm

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flatten params + moments into one dict for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.names():
            out[name] = self.params[name].data
            out[name + ".adam_m"] = self.m[name]
            out[name + ".adam_v"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int):
        for name in self.names():
            for key, target in ((name, self.params[name].data),
                                (name + ".adam_m", self.m[name]),
                                (name + ".adam_v", self.v[name])):
                src = tensors.get(key)
                if src is None:
                    raise KeyError(f"checkpoint missing tensor {key!r}")
                if src.shape != target.shape:
                    raise ValueError(f"shape mismatch for {key!r}: {src.shape} vs {target.shape}")
                target[...] = src
        self.step_count = step_count
