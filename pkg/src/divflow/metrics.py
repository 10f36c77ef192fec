"""Velocity error, direction error, divergence, PVNR, wrap and flow metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import FlowDataset

M3S_TO_LMIN = 60000.0
AXES = {"x": 0, "y": 1, "z": 2}


def _masked(vel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``(3, nx, ny, nz)`` -> ``(n, 3)`` over mask voxels."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("mask is empty")
    return np.asarray(vel, dtype=np.float64)[:, mask].T


def vel_nrmse(ref, pred, mask) -> float:
    r, p = _masked(ref, mask), _masked(pred, mask)
    peak = np.sqrt((r**2).sum(axis=1)).max()
    if peak <= 0:
        raise ValueError("reference field is zero on the mask; VelNRMSE undefined")
    return float(np.sqrt(np.mean(np.sum((r - p) ** 2, axis=1))) / peak)


def direction_error(ref, pred, mask, eps: float = 1e-6) -> tuple[float, int]:
    """Mean ``1 - cos`` between vectors; voxels with either speed <= eps are excluded.

    Returns ``(de, n_excluded)``.
    """
    r, p = _masked(ref, mask), _masked(pred, mask)
    nr = np.linalg.norm(r, axis=1)
    np_ = np.linalg.norm(p, axis=1)
    keep = (nr > eps) & (np_ > eps)
    if not keep.any():
        raise ValueError("all voxels excluded from direction error")
    # 1 - cos(a, b) = |a/|a| - b/|b||^2 / 2, which stays exact for parallel vectors
    # and keeps precision at small angles where the dot-product form cancels.
    ru = r[keep] / nr[keep, None]
    pu = p[keep] / np_[keep, None]
    gap = 0.5 * np.sum((ru - pu) ** 2, axis=1)
    return float(np.mean(np.clip(gap, 0.0, 2.0))), int((~keep).sum())


def divergence(vel, mask, spacing) -> np.ndarray:
    """Per-voxel finite-difference divergence restricted to ``mask`` (zero outside).

    Central differences where both axis neighbours are in the mask, one-sided
    where only one is, and no contribution from an axis with neither.
    """
    vel = np.asarray(vel, dtype=np.float64)
    mask = np.asarray(mask, bool)
    div = np.zeros(mask.shape)
    for a in range(3):
        comp = vel[a]
        h = float(spacing[a])
        fwd = np.zeros_like(mask)
        bwd = np.zeros_like(mask)
        cf = np.zeros_like(comp)
        cb = np.zeros_like(comp)
        n = mask.shape[a]
        if n > 1:
            hi = [slice(None)] * 3
            lo = [slice(None)] * 3
            hi[a], lo[a] = slice(1, None), slice(None, -1)
            hi, lo = tuple(hi), tuple(lo)
            fwd[lo] = mask[hi]
            bwd[hi] = mask[lo]
            cf[lo] = comp[hi]
            cb[hi] = comp[lo]
        both = fwd & bwd
        d = np.zeros_like(comp)
        d[both] = (cf[both] - cb[both]) / (2 * h)
        only_f = fwd & ~bwd
        d[only_f] = (cf[only_f] - comp[only_f]) / h
        only_b = bwd & ~fwd
        d[only_b] = (comp[only_b] - cb[only_b]) / h
        div += d
    return np.where(mask, div, 0.0)


def div_rms(pred, mask, spacing) -> float:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("mask is empty")
    d = divergence(pred, mask, spacing)
    return float(np.sqrt(np.mean(d[mask] ** 2)))


def pvnr(vel_nrmse_synth: float) -> float:
    if not vel_nrmse_synth > 0:
        raise ValueError("PVNR needs a positive VelNRMSE")
    return float(20.0 * np.log10(1.0 / vel_nrmse_synth))


def wrapped_fraction(ref, pred, mask, venc: float) -> float:
    """Percent of mask voxels where any component deviates from the reference by more than venc."""
    r, p = _masked(ref, mask), _masked(pred, mask)
    wrapped = np.any(np.abs(p - r) > venc, axis=1)
    return float(100.0 * wrapped.mean())


@dataclass(frozen=True)
class FlowPlane:
    axis: str
    index: int

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"plane axis must be x, y or z, got {self.axis!r}")

    @classmethod
    def parse(cls, text: str) -> "FlowPlane":
        """``"z:5"`` -> FlowPlane("z", 5)."""
        axis, _, idx = text.partition(":")
        if not idx:
            raise ValueError(f"plane must look like 'z:5', got {text!r}")
        return cls(axis.strip(), int(idx))


def plane_flow(dataset: FlowDataset, t: int, plane: FlowPlane, mask, velocity=None) -> float:
    """Flow through an axis-aligned slice in L/min."""
    a = AXES[plane.axis]
    dims = dataset.dims
    if not 0 <= plane.index < dims[a]:
        raise ValueError(f"plane index {plane.index} outside axis {plane.axis} (size {dims[a]})")
    vel = dataset.velocity if velocity is None else velocity
    sl = [slice(None)] * 3
    sl[a] = plane.index
    sl = tuple(sl)
    m = np.asarray(mask, bool)[sl]
    if not m.any():
        raise ValueError(f"plane {plane.axis}:{plane.index} does not intersect the mask")
    normal = np.asarray(vel[t, a], dtype=np.float64)[sl]
    others = [dataset.spacing[d] for d in range(3) if d != a]
    area = others[0] * others[1]
    return float(normal[m].sum() * area * M3S_TO_LMIN)


def mean_plane_flow(dataset: FlowDataset, plane: FlowPlane, mask) -> float:
    return float(np.mean([plane_flow(dataset, t, plane, mask) for t in range(dataset.nt)]))


def mass_conservation_bias(q1: float, q2: float) -> tuple[float, float]:
    """Absolute (L/min) and relative (%) inter-plane bias."""
    if q1 + q2 == 0:
        raise ValueError("q1 + q2 must be non-zero")
    diff = abs(q1 - q2)
    return diff, 100.0 * diff / ((q1 + q2) / 2.0)


@dataclass
class MetricsReport:
    vel_nrmse: float | None
    de: float | None
    div_rms: float
    pvnr_db: float | None
    wrapped_pct: float
    per_timeframe: list[dict] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    plane_flows: dict = field(default_factory=dict)
    biases: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def flat_row(self) -> dict:
        row = {k: getattr(self, k) for k in ("vel_nrmse", "de", "div_rms", "pvnr_db", "wrapped_pct")}
        row.update({f"n_{k}": v for k, v in self.counts.items()})
        return row


def evaluate(ref: np.ndarray, pred: np.ndarray, mask, spacing, venc: float, eps: float = 1e-6) -> MetricsReport:
    """Metrics for ``(nt, 3, nx, ny, nz)`` fields; pooled values plus per-timeframe rows.

    VelNRMSE is normalized per timeframe; the pooled value normalizes by the
    peak reference speed over all timeframes.
    """
    mask = np.asarray(mask, bool)
    nt = ref.shape[0]
    rows = []
    excluded = 0
    for t in range(nt):
        row = {"t": t}
        try:
            row["vel_nrmse"] = vel_nrmse(ref[t], pred[t], mask)
        except ValueError:
            row["vel_nrmse"] = None
        try:
            row["de"], n_ex = direction_error(ref[t], pred[t], mask, eps)
        except ValueError:
            row["de"], n_ex = None, int(mask.sum())
        excluded += n_ex
        row["div_rms"] = div_rms(pred[t], mask, spacing)
        row["wrapped_pct"] = wrapped_fraction(ref[t], pred[t], mask, venc)
        rows.append(row)
    r = np.concatenate([np.asarray(ref[t], np.float64)[:, mask].T for t in range(nt)])
    p = np.concatenate([np.asarray(pred[t], np.float64)[:, mask].T for t in range(nt)])
    peak = np.sqrt((r**2).sum(axis=1)).max()
    pooled = float(np.sqrt(np.mean(np.sum((r - p) ** 2, axis=1))) / peak) if peak > 0 else None
    des = [row["de"] for row in rows if row["de"] is not None]
    n = int(mask.sum())
    return MetricsReport(
        vel_nrmse=pooled,
        de=float(np.mean(des)) if des else None,
        div_rms=float(np.sqrt(np.mean([row["div_rms"] ** 2 for row in rows]))),
        pvnr_db=pvnr(pooled) if pooled else None,
        wrapped_pct=float(np.mean([row["wrapped_pct"] for row in rows])),
        per_timeframe=rows,
        counts={"mask_voxels": n, "timeframes": nt, "de_excluded": excluded},
    )
