"""Analytic divergence-free flow phantoms and complex-noise corruption."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .volume import FlowDataset

KINDS = ("pipe", "vortex", "helix")
WAVEFORMS = ("constant", "half-sine")


@dataclass(frozen=True)
class PhantomSpec:
    """Straight tube along z centred in the x-y plane.

    ``radius=None`` picks 40% of the smaller transverse extent; ``omega=None``
    picks a rotation rate whose rim speed is half of ``v_max``.
    """

    kind: str = "pipe"
    dims: tuple[int, int, int] = (48, 16, 16)
    spacing: tuple[float, float, float] = (2e-3, 2e-3, 2e-3)
    radius: float | None = None
    v_max: float = 1.0
    omega: float | None = None
    nt: int = 1
    waveform: str = "constant"
    background: float = 0.05

    def resolved(self) -> "PhantomSpec":
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.waveform not in WAVEFORMS:
            raise ValueError(f"waveform must be one of {WAVEFORMS}, got {self.waveform!r}")
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.nt < 1:
            raise ValueError("nt must be >= 1")
        if not self.v_max > 0:
            raise ValueError("v_max must be > 0")
        half = min((dims[0] - 1) * spacing[0], (dims[1] - 1) * spacing[1]) / 2
        radius = 0.4 * min(dims[0] * spacing[0], dims[1] * spacing[1]) if self.radius is None else float(self.radius)
        if not 0 < radius <= half:
            raise ValueError(f"radius {radius} m does not fit the transverse half-extent {half} m")
        omega = 0.5 * self.v_max / radius if self.omega is None else float(self.omega)
        return PhantomSpec(self.kind, dims, spacing, radius, float(self.v_max), omega, int(self.nt), self.waveform, float(self.background))

    def to_dict(self) -> dict:
        d = asdict(self.resolved())
        d["dims"] = list(d["dims"])
        d["spacing"] = list(d["spacing"])
        return d


@dataclass(frozen=True)
class CorruptionSpec:
    venc: float
    noise_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.venc > 0:
            raise ValueError("venc must be > 0")
        if self.noise_pct < 0:
            raise ValueError("noise_pct must be >= 0")


def waveform(kind: str, nt: int) -> np.ndarray:
    if kind == "constant":
        return np.ones(nt)
    return np.sin(np.pi * (np.arange(nt) + 1) / (nt + 1))


def _grid(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, _ = spec.spacing
    x = (np.arange(nx) - (nx - 1) / 2) * sx
    y = (np.arange(ny) - (ny - 1) / 2) * sy
    X, Y = np.meshgrid(x, y, indexing="ij")
    return np.repeat(X[:, :, None], nz, axis=2), np.repeat(Y[:, :, None], nz, axis=2)


def steady_field(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit-waveform velocity ``(3, nx, ny, nz)`` and the lumen mask."""
    spec = spec.resolved()
    X, Y = _grid(spec)
    r2 = X**2 + Y**2
    lumen = r2 <= spec.radius**2
    vel = np.zeros((3,) + spec.dims)
    if spec.kind in ("pipe", "helix"):
        vel[2] = np.where(lumen, spec.v_max * (1.0 - r2 / spec.radius**2), 0.0)
    if spec.kind in ("vortex", "helix"):
        vel[0] += np.where(lumen, -spec.omega * Y, 0.0)
        vel[1] += np.where(lumen, spec.omega * X, 0.0)
    return vel, lumen


def analytic_flow_rate(spec: PhantomSpec) -> np.ndarray:
    """Through-plane flow per timeframe in L/min (pipe component only)."""
    spec = spec.resolved()
    if spec.kind == "vortex":
        return np.zeros(spec.nt)
    q = np.pi * spec.radius**2 * spec.v_max / 2.0
    return q * 60000.0 * waveform(spec.waveform, spec.nt)


def peak_speed(spec: PhantomSpec) -> float:
    spec = spec.resolved()
    vel, _ = steady_field(spec)
    return float(np.sqrt((vel**2).sum(axis=0)).max() * waveform(spec.waveform, spec.nt).max())


def make_phantom(spec: PhantomSpec) -> FlowDataset:
    spec = spec.resolved()
    vel, lumen = steady_field(spec)
    wf = waveform(spec.waveform, spec.nt)
    ref = wf[:, None, None, None, None] * vel[None]
    mag = np.where(lumen, 1.0, spec.background)
    mag = np.broadcast_to(mag, (spec.nt,) + spec.dims)
    # venc is a placeholder until corrupt() fixes the encoding
    venc = max(peak_speed(spec), 1e-12)
    return FlowDataset(mag, ref, spec.spacing, venc, reference_velocity=ref)


def corrupt(dataset: FlowDataset, spec: CorruptionSpec) -> FlowDataset:
    """Encode velocities as complex phase, add complex Gaussian noise, decode.

    Per component: ``S = M exp(i pi v / venc)``; real and imaginary parts each
    receive noise with std ``noise_pct/100 * max(M)``; measured velocity is
    ``venc * arg(S) / pi``, so aliasing happens through ``arg``.
    """
    if dataset.reference_velocity is None:
        raise ValueError("corrupt needs a dataset with reference velocities")
    ref = dataset.reference_velocity.astype(np.float64)
    mag = dataset.magnitude.astype(np.float64)
    std = spec.noise_pct / 100.0 * float(mag.max())
    out = np.empty_like(ref)
    for t in range(dataset.nt):
        for c in range(3):
            signal = mag[t] * np.exp(1j * np.pi * ref[t, c] / spec.venc)
            if std > 0:
                rng = np.random.default_rng([spec.seed, t, c])
                noise = rng.standard_normal((2,) + signal.shape)
                signal = signal + std * (noise[0] + 1j * noise[1])
            out[t, c] = spec.venc * np.angle(signal) / np.pi
    return dataset.replace(velocity=out, venc=spec.venc)
