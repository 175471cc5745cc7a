"""Convolutional 3D VAE: occupancy M^3 <-> latent (M/4)^3 x C_S.

Encoder is two stride-2 k3 convolutions with 1x1 heads for posterior
mean and log-variance; decoder mirrors with nearest upsampling. Training
minimizes mean binary cross-entropy plus a small KL to the unit normal.
Binarization threshold is logit 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import VaeConfig
from .optim import OptimError, ParamStore, trunc_normal
from .tensor import Tensor
from .voxel import OccupancyGrid


@dataclass(frozen=True)
class LatentVolume:
    """D^3 x C_S float latent, channels-last."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, np.float32)
        if v.ndim != 4 or v.shape[0] != v.shape[1] or v.shape[1] != v.shape[2]:
            raise ValueError(f"latent must be (D,D,D,C), got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("latent has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def C_S(self) -> int:
        return self.values.shape[3]


class Vae3d:
    def __init__(self, cfg: VaeConfig, store: ParamStore | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.store = store or ParamStore()
        if "vae.enc1.w" not in self.store:
            self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c1, c2, cs = self.cfg.base_channels, 2 * self.cfg.base_channels, self.cfg.C_S
        add = self.store.add
        add("vae.enc1.w", trunc_normal(rng, (c1, 1, 3, 3, 3), 0.05))
        add("vae.enc1.b", np.zeros(c1, np.float32))
        add("vae.enc2.w", trunc_normal(rng, (c2, c1, 3, 3, 3), 0.05))
        add("vae.enc2.b", np.zeros(c2, np.float32))
        add("vae.mean.w", trunc_normal(rng, (cs, c2, 1, 1, 1), 0.02))
        add("vae.mean.b", np.zeros(cs, np.float32))
        # zero logvar head: posterior starts at unit variance, KL small
        add("vae.logvar.w", np.zeros((cs, c2, 1, 1, 1), np.float32))
        add("vae.logvar.b", np.zeros(cs, np.float32))
        add("vae.dec1.w", trunc_normal(rng, (c2, cs, 1, 1, 1), 0.05))
        add("vae.dec1.b", np.zeros(c2, np.float32))
        add("vae.dec2.w", trunc_normal(rng, (c1, c2, 3, 3, 3), 0.05))
        add("vae.dec2.b", np.zeros(c1, np.float32))
        add("vae.dec3.w", trunc_normal(rng, (c1, c1, 3, 3, 3), 0.05))
        add("vae.dec3.b", np.zeros(c1, np.float32))
        add("vae.out.w", trunc_normal(rng, (1, c1, 3, 3, 3), 0.02))
        add("vae.out.b", np.zeros(1, np.float32))

    def _p(self, name: str) -> Tensor:
        return self.store["vae." + name]

    # -- graph pieces --------------------------------------------------------

    def encode_tensor(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(B,1,M,M,M) -> posterior mean and logvar, each (B,C_S,D,D,D)."""
        h = T.silu(T.conv3d(x, self._p("enc1.w"), self._p("enc1.b"), stride=2, padding=1))
        h = T.silu(T.conv3d(h, self._p("enc2.w"), self._p("enc2.b"), stride=2, padding=1))
        mean = T.conv3d(h, self._p("mean.w"), self._p("mean.b"))
        logvar = T.conv3d(h, self._p("logvar.w"), self._p("logvar.b"))
        return mean, logvar

    def decode_tensor(self, z: Tensor) -> Tensor:
        """(B,C_S,D,D,D) -> occupancy logits (B,1,M,M,M)."""
        h = T.silu(T.conv3d(z, self._p("dec1.w"), self._p("dec1.b")))
        h = T.upsample_nearest3d(h, 2)
        h = T.silu(T.conv3d(h, self._p("dec2.w"), self._p("dec2.b"), padding=1))
        h = T.upsample_nearest3d(h, 2)
        h = T.silu(T.conv3d(h, self._p("dec3.w"), self._p("dec3.b"), padding=1))
        return T.conv3d(h, self._p("out.w"), self._p("out.b"), padding=1)

    # -- losses --------------------------------------------------------------

    def loss_terms(self, bits: np.ndarray, rng: np.random.Generator,
                   sample: bool = True) -> tuple[Tensor, float, float]:
        """(B,M,M,M) occupancy batch -> (total loss, bce value, kl value)."""
        x = Tensor(bits[:, None].astype(np.float32))
        mean, logvar = self.encode_tensor(x)
        if sample:
            noise = rng.standard_normal(mean.shape).astype(np.float32)
            z = T.add(mean, T.mul(T.exp(T.mul(logvar, Tensor(np.float32(0.5)))), Tensor(noise)))
        else:
            z = mean
        logits = self.decode_tensor(z)
        bce = T.bce_with_logits(logits, bits[:, None].astype(np.float32))
        # KL(q || N(0,1)) per element: 0.5 (mu^2 + e^lv - 1 - lv)
        mu2 = T.mul(mean, mean)
        ev = T.exp(logvar)
        kl_elem = T.mul(T.add(T.add(mu2, ev), T.add(T.mul(logvar, Tensor(np.float32(-1.0))),
                                                    Tensor(np.float32(-1.0)))),
                        Tensor(np.float32(0.5)))
        kl = T.tmean(kl_elem)
        total = T.add(bce, T.mul(kl, Tensor(np.float32(self.cfg.kl_weight))))
        return total, float(bce.data), float(kl.data)

    def vae_loss(self, g: OccupancyGrid, rng: np.random.Generator | None = None,
                 sample: bool = False) -> float:
        rng = rng or np.random.default_rng(0)
        with T.no_grad():
            total, _, _ = self.loss_terms(g.bits[None], rng, sample=sample)
        return float(total.data)

    # -- user-facing encode / decode ----------------------------------------

    def _check_res(self, M: int):
        if M != self.cfg.M:
            raise ValueError(f"grid resolution {M} does not match VAE config M={self.cfg.M}")

    def encode(self, g: OccupancyGrid, sample: bool = False,
               rng: np.random.Generator | None = None) -> LatentVolume:
        self._check_res(g.M)
        with T.no_grad():
            mean, logvar = self.encode_tensor(Tensor(g.bits[None, None].astype(np.float32)))
        z = mean.data
        if sample:
            rng = rng or np.random.default_rng(0)
            z = z + np.exp(0.5 * logvar.data) * rng.standard_normal(z.shape).astype(np.float32)
        return LatentVolume(np.moveaxis(z[0], 0, -1))

    def encode_batch(self, bits: np.ndarray) -> np.ndarray:
        """(B,M,M,M) -> posterior means (B,D,D,D,C_S), no sampling."""
        self._check_res(bits.shape[1])
        with T.no_grad():
            mean, _ = self.encode_tensor(Tensor(bits[:, None].astype(np.float32)))
        return np.moveaxis(mean.data, 1, -1)

    def decode(self, latent: LatentVolume, space_tag: str = "scene") -> OccupancyGrid:
        if latent.D != self.cfg.D or latent.C_S != self.cfg.C_S:
            raise ValueError(f"latent shape ({latent.D}, C={latent.C_S}) does not match "
                             f"config (D={self.cfg.D}, C_S={self.cfg.C_S})")
        with T.no_grad():
            logits = self.decode_tensor(Tensor(np.moveaxis(latent.values, -1, 0)[None]))
        return OccupancyGrid(logits.data[0, 0] > 0.0, space_tag)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path):
        meta = {"kind": "vae3d",
                "vae3d": {"M": self.cfg.M, "stride": self.cfg.stride,
                          "D": self.cfg.D, "C_S": self.cfg.C_S,
                          "base_channels": self.cfg.base_channels},
                "step_count": self.store.step_count}
        save_checkpoint(path, self.store.state_tensors(), meta)

    @classmethod
    def load(cls, path: str | Path, cfg: VaeConfig) -> "Vae3d":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "vae3d":
            raise CheckpointError(f"{path}: not a vae3d checkpoint")
        saved = meta["vae3d"]
        want = {"M": cfg.M, "stride": cfg.stride, "D": cfg.D, "C_S": cfg.C_S,
                "base_channels": cfg.base_channels}
        mismatches = {k: (saved.get(k), v) for k, v in want.items() if saved.get(k) != v}
        if mismatches:
            raise CheckpointError(f"{path}: config mismatch {mismatches}")
        vae = cls(cfg)
        vae.store.load_state_tensors(tensors, meta["step_count"])
        return vae


def train_vae(train_bits: np.ndarray, cfg: VaeConfig, steps: int,
              out_path: str | Path, holdout_bits: np.ndarray | None = None,
              seed: int = 0, eval_every: int = 500,
              log=None, stop_iou: float | None = None) -> tuple[Vae3d, list[dict]]:
    """Adam training over occupancy batches. Writes a checkpoint at every
    eval interval; on divergence the last good checkpoint survives and an
    OptimError is raised. ``stop_iou`` ends training at the first eval
    whose holdout IoU reaches it."""
    vae = Vae3d(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n = len(train_bits)
    metrics: list[dict] = []
    out_path = Path(out_path)

    def evaluate(step):
        row = {"step": step}
        if holdout_bits is not None:
            row["holdout_iou"] = reconstruction_iou(vae, holdout_bits)
            lat = vae.encode_batch(train_bits[: min(64, n)])
            row["latent_std"] = [round(float(s), 4) for s in lat.reshape(-1, cfg.C_S).std(axis=0)]
        metrics.append(row)
        if log:
            log(f"vae step {step}: " + " ".join(f"{k}={v}" for k, v in row.items() if k != "step"))

    vae.save(out_path)
    if steps == 0:
        evaluate(0)
        return vae, metrics
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=min(cfg.batch, n))
        loss, bce, kl = vae.loss_terms(train_bits[idx], rng, sample=True)
        if not np.isfinite(loss.data):
            raise OptimError(f"vae training diverged at step {step}; "
                             f"last good checkpoint at {out_path}")
        vae.store.zero_grad()
        loss.backward()
        vae.store.adamw_step(lr=cfg.lr, weight_decay=0.0)
        if step % 10 == 0:
            T.trim_heap()  # bounds heap fragmentation over long runs
        if step % eval_every == 0 or step == steps:
            evaluate(step)
            vae.save(out_path)
            T.trim_heap()
            if stop_iou is not None and metrics[-1].get("holdout_iou", 0.0) >= stop_iou:
                break
    return vae, metrics


def reconstruction_iou(vae: Vae3d, bits: np.ndarray, batch: int = 8) -> float:
    """Mean IoU of decode(encode(g)) over a grid batch (posterior mean)."""
    total = 0.0
    for start in range(0, len(bits), batch):
        chunk = bits[start:start + batch]
        with T.no_grad():
            mean, _ = vae.encode_tensor(Tensor(chunk[:, None].astype(np.float32)))
            logits = vae.decode_tensor(mean)
        recon = logits.data[:, 0] > 0
        for a, b in zip(recon, chunk):
            union = (a | b).sum()
            total += 1.0 if union == 0 else (a & b).sum() / union
    return total / len(bits)
