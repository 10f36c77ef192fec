"""Velocity volume container, phase conversion, and the `.f4d` file format.

Volumes are numpy arrays indexed ``[i, j, k]`` (shape ``(nx, ny, nz)``) and
serialized x-fastest, i.e. in Fortran order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"F4DF"
VERSION = 1
SECTIONS = ("magnitude", "velocity", "reference")


class FormatError(ValueError):
    """Raised when a container file cannot be decoded."""


@dataclass(frozen=True, eq=False)
class FlowDataset:
    """Time-resolved magnitude and 3-component velocity volumes.

    ``magnitude`` has shape ``(nt, nx, ny, nz)``; ``velocity`` and the optional
    ``reference_velocity`` have shape ``(nt, 3, nx, ny, nz)``, in m/s.
    """

    magnitude: np.ndarray
    velocity: np.ndarray
    spacing: tuple[float, float, float]
    venc: float
    reference_velocity: np.ndarray | None = None

    def __post_init__(self):
        mag = np.ascontiguousarray(self.magnitude, dtype=np.float32)
        vel = np.ascontiguousarray(self.velocity, dtype=np.float32)
        if mag.ndim != 4:
            raise ValueError(f"magnitude must be 4D (nt, nx, ny, nz), got shape {mag.shape}")
        if mag.shape[0] < 1:
            raise ValueError("nt must be >= 1")
        if vel.shape != (mag.shape[0], 3) + mag.shape[1:]:
            raise ValueError(f"velocity shape {vel.shape} incompatible with magnitude {mag.shape}")
        if not np.all(np.isfinite(mag)) or np.any(mag < 0):
            raise ValueError("magnitude values must be finite and non-negative")
        if not self.venc > 0:
            raise ValueError(f"venc must be > 0, got {self.venc}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        ref = self.reference_velocity
        if ref is not None:
            ref = np.ascontiguousarray(ref, dtype=np.float32)
            if ref.shape != vel.shape:
                raise ValueError(f"reference shape {ref.shape} != velocity shape {vel.shape}")
            ref.setflags(write=False)
        mag.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "velocity", vel)
        object.__setattr__(self, "reference_velocity", ref)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "venc", float(self.venc))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.magnitude.shape[1:])

    @property
    def nt(self) -> int:
        return int(self.magnitude.shape[0])

    def replace(self, **changes) -> "FlowDataset":
        fields = dict(
            magnitude=self.magnitude,
            velocity=self.velocity,
            spacing=self.spacing,
            venc=self.venc,
            reference_velocity=self.reference_velocity,
        )
        fields.update(changes)
        return FlowDataset(**fields)

    def __eq__(self, other):
        if not isinstance(other, FlowDataset):
            return NotImplemented
        if (self.spacing, self.venc) != (other.spacing, other.venc):
            return False
        if (self.reference_velocity is None) != (other.reference_velocity is None):
            return False
        pairs = [(self.magnitude, other.magnitude), (self.velocity, other.velocity)]
        if self.reference_velocity is not None:
            pairs.append((self.reference_velocity, other.reference_velocity))
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)

    __hash__ = None


def velocity_to_phase(v, venc: float):
    """Phase in radians for velocity ``v``; not wrapped."""
    return np.pi * np.asarray(v) / venc


def wrap_velocity(v, venc: float):
    """Alias ``v`` into the half-open interval ``(-venc, venc]``."""
    v = np.asarray(v, dtype=np.float64)
    period = 2.0 * venc
    w = venc - np.mod(venc - v, period)
    # mod can return `period` itself through rounding
    w = np.where(w <= -venc, w + period, w)
    return w if w.ndim else float(w)


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path, magic: bytes, header: dict, payloads) -> None:
    blob = _header_bytes(header)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<II", VERSION, len(blob)))
            fh.write(blob)
            for arr in payloads:
                fh.write(arr)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def _read_container(path, magic: bytes) -> tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic.decode()}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if 12 + hlen > len(data):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    return header, memoryview(data)[12 + hlen :]


def _to_fortran_bytes(arr: np.ndarray) -> bytes:
    """Serialize trailing three axes x-fastest, leading axes outermost."""
    lead = arr.shape[:-3]
    flat = arr.reshape((-1,) + arr.shape[-3:])
    out = np.concatenate([np.ravel(v, order="F") for v in flat]) if flat.size else flat.ravel()
    return out.astype("<f4").reshape(lead + (-1,)).tobytes()


def _from_fortran(buf: np.ndarray, lead: tuple, dims: tuple) -> np.ndarray:
    vols = buf.reshape((-1,) + (dims[2], dims[1], dims[0]))
    vols = np.transpose(vols, (0, 3, 2, 1))
    return np.ascontiguousarray(vols.reshape(lead + tuple(dims)), dtype=np.float32)


def write_f4d(dataset: FlowDataset, path) -> None:
    sections = ["magnitude", "velocity"]
    payloads = [_to_fortran_bytes(dataset.magnitude), _to_fortran_bytes(dataset.velocity)]
    if dataset.reference_velocity is not None:
        sections.append("reference")
        payloads.append(_to_fortran_bytes(dataset.reference_velocity))
    header = {
        "dims": list(dataset.dims),
        "nt": dataset.nt,
        "spacing_m": list(dataset.spacing),
        "venc_ms": dataset.venc,
        "sections": sections,
    }
    _write_container(path, MAGIC, header, payloads)


def _require(header: dict, key: str, path):
    if key not in header:
        raise FormatError(f"{path}: header missing field '{key}'")
    return header[key]


def read_f4d(path) -> FlowDataset:
    header, payload = _read_container(path, MAGIC)
    dims = _require(header, "dims", path)
    nt = _require(header, "nt", path)
    spacing = _require(header, "spacing_m", path)
    venc = _require(header, "venc_ms", path)
    sections = _require(header, "sections", path)
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(n, int) and n > 0 for n in dims)):
        raise FormatError(f"{path}: invalid field 'dims': {dims!r}")
    if not (isinstance(nt, int) and nt >= 1):
        raise FormatError(f"{path}: invalid field 'nt': {nt!r}")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"{path}: invalid field 'spacing_m': {spacing!r}")
    unknown = [s for s in sections if s not in SECTIONS]
    if unknown or "magnitude" not in sections or "velocity" not in sections:
        raise FormatError(f"{path}: invalid field 'sections': {sections!r}")
    nvox = dims[0] * dims[1] * dims[2]
    counts = {"magnitude": nt * nvox, "velocity": nt * 3 * nvox, "reference": nt * 3 * nvox}
    expected = sum(counts[s] for s in sections)
    if len(payload) != 4 * expected:
        raise FormatError(
            f"{path}: payload size mismatch for field 'dims': expected {expected} float32 values, "
            f"found {len(payload) / 4:g}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    offset = 0
    for name in sections:
        n = counts[name]
        lead = (nt,) if name == "magnitude" else (nt, 3)
        arrays[name] = _from_fortran(flat[offset : offset + n], lead, dims)
        offset += n
    try:
        return FlowDataset(
            magnitude=arrays["magnitude"],
            velocity=arrays["velocity"],
            spacing=tuple(spacing),
            venc=venc,
            reference_velocity=arrays.get("reference"),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
