"""Per-timeframe fitting of the potential network and volume reconstruction."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, MlpWeights, adam_step
from .fourier import PotentialNet, embed, predict_velocity, sample_fourier_map, velocity_backward, velocity_with_tape
from .segmentation import LumenGeometry, normalize_coords
from .volume import FlowDataset

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3500
    lr0: float = 1e-3
    decay: float = 0.9
    decay_every: int = 500
    batch_cap: int = 50000
    seed: int = 0
    precision: int = 32
    depth: int = 5
    width: int = 200
    m: int = 256
    sigma: float = 1.0
    reduction: str = "mean"
    # Glorot limits of the output layer are multiplied by this, so the
    # untrained field starts near zero instead of at a few VENC.
    out_init_scale: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.batch_cap < 1:
            raise ValueError("batch_cap must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if not self.sigma > 0 or self.m < 1 or self.width < 1 or self.depth < 1:
            raise ValueError("depth, width, m must be >= 1 and sigma > 0")
        if not self.out_init_scale > 0:
            raise ValueError("out_init_scale must be > 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return TrainConfig(**d)


@dataclass
class SamplePool:
    """Normalized coordinates with VENC-normalized measurements over the lumen, plus wall coordinates."""

    fluid_coords: np.ndarray
    fluid_velocity: np.ndarray
    wall_coords: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: FlowDataset, geometry: LumenGeometry, t: int) -> "SamplePool":
        fidx = np.argwhere(geometry.fluid_mask)
        widx = np.argwhere(geometry.wall_mask)
        vel = dataset.velocity[t].astype(np.float64) / dataset.venc
        meas = vel[:, fidx[:, 0], fidx[:, 1], fidx[:, 2]].T
        return cls(normalize_coords(geometry, fidx), meas, normalize_coords(geometry, widx).reshape(-1, 3))


def compute_loss(pred_fluid, meas_fluid, pred_wall, reduction: str = "mean"):
    """Cosine data term plus no-slip term, all in VENC units.

    Returns ``(total, {"L_d": ..., "L_ns": ...})``.
    """
    delta = np.asarray(pred_fluid, dtype=np.float64) - np.asarray(meas_fluid, dtype=np.float64)
    data = 1.0 - np.cos(np.pi * delta)
    pw = np.asarray(pred_wall, dtype=np.float64).reshape(-1, 3)
    wall = np.sum(pw**2, axis=1)
    if reduction == "mean":
        l_d = float(data.mean())
        l_ns = float(wall.mean()) if wall.size else 0.0
    else:
        l_d = float(data.sum())
        l_ns = float(wall.sum())
    return l_d + l_ns, {"L_d": l_d, "L_ns": l_ns}


def _loss_grads(pred_fluid, meas_fluid, pred_wall, reduction):
    nf = pred_fluid.size
    nw = pred_wall.shape[0]
    sf = 1.0 / nf if reduction == "mean" else 1.0
    sw = 1.0 / nw if (reduction == "mean" and nw) else 1.0
    g_f = (np.pi * sf) * np.sin(np.pi * (pred_fluid - meas_fluid))
    g_w = (2.0 * sw) * pred_wall
    return g_f.astype(pred_fluid.dtype), g_w.astype(pred_wall.dtype)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.decay ** (epoch // config.decay_every)


def sample_batch(pool: SamplePool, cap: int, rng: np.random.Generator):
    """Fluid and wall index arrays for one step, proportional to pool shares above ``cap``."""
    nf, nw = len(pool.fluid_coords), len(pool.wall_coords)
    total = nf + nw
    if total == 0:
        raise ValueError("empty sample pool")
    if total <= cap:
        return np.arange(nf), np.arange(nw)
    kf = int(round(cap * nf / total))
    if nf:
        kf = max(kf, 1)
    if nw:
        kf = min(kf, cap - 1)
    kw = cap - kf
    fi = rng.choice(nf, size=kf, replace=False) if kf else np.arange(0)
    wi = rng.choice(nw, size=kw, replace=False) if kw else np.arange(0)
    return fi, wi


def _seeds(config: TrainConfig, t: int):
    fourier_seed, init_seed, batch_seed = np.random.SeedSequence([config.seed, t]).generate_state(3)
    return int(fourier_seed), int(init_seed), int(batch_seed)


def init_net(config: TrainConfig, geometry: LumenGeometry, venc: float, t: int = 0) -> PotentialNet:
    fourier_seed, init_seed, _ = _seeds(config, t)
    fmap = sample_fourier_map(config.m, config.sigma, fourier_seed)
    mlp = MlpWeights.init(2 * config.m, config.width, config.depth, seed=init_seed, dtype=config.dtype)
    W, b = mlp.layers[-1]
    mlp.layers[-1] = ((W * config.out_init_scale).astype(W.dtype), b)
    return PotentialNet(fmap, mlp, geometry.bbox_min, geometry.bbox_max, venc, t, config.digest())


def loss_and_gradients(net: PotentialNet, fluid_coords, fluid_meas, wall_coords, reduction="mean", embedded=None):
    """Full loss and its weight gradients for one batch."""
    nf = len(fluid_coords)
    coords = np.concatenate([fluid_coords, wall_coords.reshape(-1, 3)], axis=0)
    vel, bundle = velocity_with_tape(net, coords, embedded)
    pf, pw = vel[:nf], vel[nf:]
    total, terms = compute_loss(pf, fluid_meas, pw, reduction)
    g_f, g_w = _loss_grads(pf, fluid_meas.astype(vel.dtype), pw, reduction)
    grads = velocity_backward(net, bundle, np.concatenate([g_f, g_w], axis=0))
    return total, terms, grads


def train_timeframe(
    dataset: FlowDataset, geometry: LumenGeometry, t: int, config: TrainConfig, callback=None
) -> tuple[PotentialNet, list[dict]]:
    """Fit one timeframe; one sampled batch and one Adam step per epoch."""
    if not 0 <= t < dataset.nt:
        raise ValueError(f"timeframe {t} out of range (nt={dataset.nt})")
    if not geometry.fluid_mask.any():
        raise ValueError("fluid mask is empty")
    if geometry.fluid_mask.shape != dataset.dims:
        raise ValueError(f"mask dims {geometry.fluid_mask.shape} != dataset dims {dataset.dims}")
    pool = SamplePool.from_dataset(dataset, geometry, t)
    net = init_net(config, geometry, dataset.venc, t)
    state = AdamState.zeros_like(net.mlp)
    rng = np.random.default_rng(_seeds(config, t)[2])
    dtype = config.dtype
    fc, fv, wc = (a.astype(np.float64) for a in (pool.fluid_coords, pool.fluid_velocity, pool.wall_coords))
    full = len(fc) + len(wc) <= config.batch_cap
    cached = embed(np.concatenate([fc, wc]), net.fourier, dtype) if full else None
    history = []
    for epoch in range(config.epochs):
        fi, wi = sample_batch(pool, config.batch_cap, rng)
        total, terms, grads = loss_and_gradients(
            net, fc[fi], fv[fi].astype(dtype), wc[wi], config.reduction, embedded=cached
        )
        if not np.isfinite(total):
            raise NumericalError(f"non-finite loss at epoch {epoch} (timeframe {t})")
        lr = lr_at(epoch, config)
        history.append({"epoch": epoch, "lr": lr, "L_d": terms["L_d"], "L_ns": terms["L_ns"], "total": total})
        new_mlp, state = adam_step(state, net.mlp, grads, lr)
        net.mlp = new_mlp
        if callback is not None:
            callback(epoch, history[-1])
    log.info("timeframe %d: final loss %.4g", t, history[-1]["total"])
    return net, history


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "L_d", "L_ns", "total"])
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})


def reconstruct(checkpoints, geometry: LumenGeometry, eval_mask: np.ndarray, dataset: FlowDataset) -> FlowDataset:
    """Evaluate one model per timeframe at the voxel centres of ``eval_mask``."""
    if len(checkpoints) != dataset.nt:
        raise ValueError(f"need {dataset.nt} checkpoints, got {len(checkpoints)}")
    eval_mask = np.asarray(eval_mask, bool)
    if eval_mask.shape != dataset.dims:
        raise ValueError(f"eval mask dims {eval_mask.shape} != dataset dims {dataset.dims}")
    idx = np.argwhere(eval_mask)
    coords = normalize_coords(geometry, idx) if len(idx) else np.zeros((0, 3))
    out = np.zeros((dataset.nt, 3) + dataset.dims, dtype=np.float32)
    for t, net in enumerate(checkpoints):
        if not (np.allclose(net.bbox_min, geometry.bbox_min, rtol=0, atol=1e-9)
                and np.allclose(net.bbox_max, geometry.bbox_max, rtol=0, atol=1e-9)):
            raise ValueError(f"checkpoint {t} bounding box does not match the geometry")
        if len(idx):
            v = predict_velocity(net, coords)
            out[t][:, idx[:, 0], idx[:, 1], idx[:, 2]] = v.T
    return dataset.replace(velocity=out)
