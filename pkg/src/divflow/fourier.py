"""Fourier-feature potential network whose curl is the predicted velocity.

The MLP maps normalized coordinates ``r`` in ``[0, 1]^3`` to a vector
potential.  Velocity is ``venc * L * curl(Phi)`` with derivatives taken in
physical units: column ``d`` of the normalized Jacobian is divided by the
bounding-box extent along ``d``.  ``L`` is the geometric mean extent, a
constant that keeps the network output O(1); a constant factor does not affect
the zero-divergence identity.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import MlpWeights, _gelu_all, backward, forward_with_tangents
from .volume import FormatError

MAGIC = b"F4DN"
VERSION = 1
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class FourierMap:
    """Random frequencies ``B`` (m x 3) with entries drawn from N(0, sigma^2)."""

    B: np.ndarray
    sigma: float
    seed: int

    @property
    def m(self) -> int:
        return self.B.shape[0]


def sample_fourier_map(m: int, sigma: float, seed: int) -> FourierMap:
    if m < 1:
        raise ValueError("m must be >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    # sample N(0, 1) then scale so that sigma only rescales B
    B = sigma * np.random.default_rng(seed).standard_normal((m, 3))
    # keep B exactly representable in the float32 checkpoint payload
    B = B.astype(np.float32).astype(np.float64)
    B.setflags(write=False)
    return FourierMap(B, float(sigma), int(seed))


def embed(coords: np.ndarray, fmap: FourierMap | None, dtype=None):
    """Features ``[cos(2 pi B r), sin(2 pi B r)]`` and their coordinate tangents.

    Returns ``(features, seeds)`` with shapes ``(batch, 2m)`` and
    ``(batch, 2m, 3)``.  ``fmap=None`` is the identity embedding.
    """
    coords = np.asarray(coords, dtype=np.float64)
    dtype = dtype or np.float64
    if fmap is None:
        seeds = np.broadcast_to(np.eye(3), coords.shape[:1] + (3, 3))
        return coords.astype(dtype), np.ascontiguousarray(seeds, dtype=dtype)
    theta = TWO_PI * coords @ fmap.B.T
    c, s = np.cos(theta), np.sin(theta)
    w = TWO_PI * fmap.B  # (m, 3)
    feats = np.concatenate([c, s], axis=1)
    seeds = np.concatenate([-s[:, :, None] * w[None], c[:, :, None] * w[None]], axis=1)
    return feats.astype(dtype), seeds.astype(dtype)


@dataclass
class PotentialNet:
    """One timeframe's model: Fourier map, MLP and the coordinate chart."""

    fourier: FourierMap | None
    mlp: MlpWeights
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]
    venc: float
    timeframe: int = 0
    config_digest: str = ""

    def __post_init__(self):
        n_in = 3 if self.fourier is None else 2 * self.fourier.m
        if self.mlp.n_in != n_in or self.mlp.n_out != 3:
            raise ValueError(f"mlp shape ({self.mlp.n_in} -> {self.mlp.n_out}) does not fit embedding {n_in} -> 3")
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)

    @property
    def extent(self) -> np.ndarray:
        ext = np.subtract(self.bbox_max, self.bbox_min)
        if np.any(ext <= 0):
            raise ValueError(f"degenerate extent {ext}")
        return ext

    @property
    def length_scale(self) -> float:
        return float(np.prod(self.extent) ** (1.0 / 3.0))

    def physical_to_normalized(self, x_phys: np.ndarray) -> np.ndarray:
        return (np.asarray(x_phys, dtype=np.float64) - np.asarray(self.bbox_min)) / self.extent


def _curl_factor(net: PotentialNet) -> np.ndarray:
    """Per-column multiplier turning normalized-coordinate derivatives into VENC-unit velocity."""
    return net.length_scale / net.extent


def _curl(J: np.ndarray) -> np.ndarray:
    """Curl from a Jacobian ``J[..., component, direction]``."""
    return np.stack(
        [
            J[..., 2, 1] - J[..., 1, 2],
            J[..., 0, 2] - J[..., 2, 0],
            J[..., 1, 0] - J[..., 0, 1],
        ],
        axis=-1,
    )


def _curl_transpose(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_curl`: maps d(loss)/dV to d(loss)/dJ."""
    gJ = np.zeros(g.shape[:-1] + (3, 3), dtype=g.dtype)
    gJ[..., 2, 1] += g[..., 0]
    gJ[..., 1, 2] -= g[..., 0]
    gJ[..., 0, 2] += g[..., 1]
    gJ[..., 2, 0] -= g[..., 1]
    gJ[..., 1, 0] += g[..., 2]
    gJ[..., 0, 1] -= g[..., 2]
    return gJ


def velocity_with_tape(net: PotentialNet, coords: np.ndarray, embedded=None):
    """VENC-normalized velocity at normalized ``coords`` plus the forward tape.

    ``embedded`` may carry a precomputed ``embed(coords, net.fourier)`` result.
    """
    dtype = net.mlp.dtype
    feats, seeds = embedded if embedded is not None else embed(coords, net.fourier, dtype)
    bundle = forward_with_tangents(net.mlp, feats, seeds)
    factor = _curl_factor(net).astype(dtype)
    return _curl(bundle.tangents * factor), bundle


def velocity_backward(net: PotentialNet, bundle, grad_velocity: np.ndarray):
    """Weight gradients given d(loss)/d(VENC-normalized velocity)."""
    dtype = net.mlp.dtype
    factor = _curl_factor(net).astype(dtype)
    gJ = _curl_transpose(np.asarray(grad_velocity, dtype=dtype)) * factor
    return backward(net.mlp, bundle, None, gJ)


def predict_velocity(net: PotentialNet, coords: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Velocity in m/s at normalized coordinates, shape ``(batch, 3)``."""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    out = np.empty((coords.shape[0], 3), dtype=net.mlp.dtype)
    for start in range(0, coords.shape[0], chunk):
        v, _ = velocity_with_tape(net, coords[start : start + chunk])
        out[start : start + chunk] = v
    return out * np.asarray(net.venc, dtype=out.dtype)


def potential_hessian(net: PotentialNet, coords: np.ndarray):
    """Second derivatives of the potential w.r.t. normalized coordinates.

    Propagates values, first and second coordinate derivatives through the
    embedding and every layer in closed form.  Returns ``(batch, 3, 3, 3)``
    indexed ``[n, component, a, b]``.
    """
    dtype = net.mlp.dtype
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    n = coords.shape[0]
    if net.fourier is None:
        h = coords.astype(dtype)
        d1 = np.broadcast_to(np.eye(3, dtype=dtype)[:, None, :], (3, n, 3)).copy()
        d2 = np.zeros((3, 3, n, 3), dtype=dtype)
    else:
        w = TWO_PI * net.fourier.B
        theta = TWO_PI * coords @ net.fourier.B.T
        c, s = np.cos(theta), np.sin(theta)
        h = np.concatenate([c, s], axis=1).astype(dtype)
        d1 = np.stack([np.concatenate([-s * w[:, a], c * w[:, a]], axis=1) for a in range(3)]).astype(dtype)
        d2 = np.empty((3, 3, n, h.shape[1]), dtype=dtype)
        for a in range(3):
            for b in range(3):
                wab = w[:, a] * w[:, b]
                d2[a, b] = np.concatenate([-c * wab, -s * wab], axis=1)
    for W, bias in net.mlp.layers[:-1]:
        z = h @ W.T + bias
        z1 = d1 @ W.T
        z2 = d2 @ W.T
        g, g1, g2 = _gelu_all(z)
        h = g
        d2 = g1 * z2 + g2 * (z1[:, None] * z1[None, :])
        d1 = g1 * z1
    W, _ = net.mlp.layers[-1]
    out = d2 @ W.T  # (a, b, n, component)
    return np.transpose(out, (2, 3, 0, 1))


def analytic_divergence(net: PotentialNet, coords: np.ndarray) -> np.ndarray:
    """Divergence of the predicted velocity (1/s) from the potential Hessian."""
    H = potential_hessian(net, coords).astype(np.float64)
    f = _curl_factor(net)
    ext = net.extent
    # dV_a/dx_a: the curl component a differentiated along physical axis a
    grad_v = np.empty(H.shape[:1] + (3, 3))
    for a in range(3):
        J_a = H[..., a] * f[None, None, :] / ext[a]  # d/dx_a of scaled Jacobian
        grad_v[:, :, a] = _curl(J_a)
    return net.venc * (grad_v[:, 0, 0] + grad_v[:, 1, 1] + grad_v[:, 2, 2])


def scale_sigma(spacing_sim, spacing_tgt, extent_sim, extent_tgt, sigma_sim: float) -> float:
    """Transfer a Fourier scale between domains of different spacing and extent."""
    arrs = [np.asarray(a, dtype=np.float64) for a in (spacing_sim, spacing_tgt, extent_sim, extent_tgt)]
    if any(a.shape != (3,) or np.any(a <= 0) for a in arrs):
        raise ValueError("spacings and extents must be 3 positive values")
    s_sim, s_tgt, r_sim, r_tgt = arrs
    tau = 1.0
    for d in range(3):
        tau *= (s_sim[d] / s_tgt[d]) * (r_tgt[d] / r_sim[d])
    return tau * sigma_sim


def save_checkpoint(net: PotentialNet, path, seed: int | None = None) -> None:
    header = {
        "depth": net.mlp.depth,
        "width": net.mlp.width if net.mlp.depth else 0,
        "m": 0 if net.fourier is None else net.fourier.m,
        "sigma": 0.0 if net.fourier is None else net.fourier.sigma,
        "seed": (net.fourier.seed if net.fourier is not None else 0) if seed is None else int(seed),
        "venc_ms": net.venc,
        "bbox_min": list(net.bbox_min),
        "bbox_max": list(net.bbox_max),
        "timeframe": int(net.timeframe),
        "config_digest": net.config_digest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = []
    if net.fourier is not None:
        parts.append(np.asarray(net.fourier.B, dtype="<f4").tobytes())
    for W, b in net.mlp.layers:
        parts.append(np.asarray(W, dtype="<f4").tobytes())
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for p in parts:
            fh.write(p)


def load_checkpoint(path, dtype=np.float32) -> PotentialNet:
    """Load a `.f4n` checkpoint.  B is restored exactly as stored (float32)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC.decode()}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    h = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    flat = np.frombuffer(data[12 + hlen :], dtype="<f4")
    m, depth, width = h["m"], h["depth"], h["width"]
    sizes = [2 * m if m else 3] + [width] * depth + [3]
    expected = 3 * m + sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if flat.size != expected:
        raise FormatError(f"{path}: payload size mismatch: expected {expected} float32 values, found {flat.size}")
    off = 0
    fmap = None
    if m:
        B = flat[: 3 * m].reshape(m, 3).astype(np.float64)
        B.setflags(write=False)
        fmap = FourierMap(B, h["sigma"], h["seed"])
        off = 3 * m
    layers = []
    for i, o in zip(sizes[:-1], sizes[1:]):
        W = flat[off : off + o * i].reshape(o, i).astype(dtype)
        off += o * i
        b = flat[off : off + o].astype(dtype)
        off += o
        layers.append((W, b))
    return PotentialNet(
        fmap, MlpWeights(layers), h["bbox_min"], h["bbox_max"], h["venc_ms"], h["timeframe"], h["config_digest"]
    )
