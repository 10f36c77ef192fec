"""PC-MRA, lumen thresholding, wall extraction and the normalized coordinate chart."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import FlowDataset, FormatError, _from_fortran, _read_container, _write_container

MASK_MAGIC = b"F4DM"


class EmptyMaskError(ValueError):
    pass


def structuring_element(connectivity: int) -> np.ndarray:
    """3x3x3 element for 6-, 18- or 26-connectivity."""
    rank = {6: 1, 18: 2, 26: 3}
    if connectivity not in rank:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank[connectivity])


def compute_pcmra(dataset: FlowDataset) -> np.ndarray:
    """sqrt(mean_t M_t^2 |V_t|^2) per voxel."""
    mag = dataset.magnitude.astype(np.float64)
    speed2 = np.sum(dataset.velocity.astype(np.float64) ** 2, axis=1)
    return np.sqrt(np.mean(mag**2 * speed2, axis=0))


def threshold_mask(pcmra: np.ndarray, frac: float = 0.15, keep_k: int = 1) -> np.ndarray:
    """Voxels above ``frac * max``, restricted to the ``keep_k`` largest 6-connected components."""
    if not 0 < frac < 1:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    if keep_k < 1:
        raise ValueError("keep_k must be >= 1")
    peak = float(np.max(pcmra))
    mask = pcmra >= frac * peak if peak > 0 else np.zeros(pcmra.shape, bool)
    if not mask.any():
        raise EmptyMaskError("threshold produced an empty mask")
    labels, n = ndimage.label(mask, structure=structuring_element(6))
    sizes = np.bincount(labels.ravel())[1:]
    # stable ordering: larger first, then lower label
    order = np.lexsort((np.arange(n), -sizes))[:keep_k]
    return np.isin(labels, order + 1)


def dilate_mask(mask: np.ndarray, connectivity: int = 6) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, bool), structure=structuring_element(connectivity))


@dataclass(frozen=True)
class LumenGeometry:
    fluid_mask: np.ndarray
    wall_mask: np.ndarray
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]
    spacing: tuple[float, float, float]

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.bbox_max, self.bbox_min)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.fluid_mask.shape


def build_geometry(fluid_mask: np.ndarray, spacing) -> LumenGeometry:
    """Wall shell by 6-connected dilation; bounding box over fluid and wall voxel centres."""
    fluid = np.asarray(fluid_mask, bool)
    if not fluid.any():
        raise EmptyMaskError("fluid mask is empty")
    grown = dilate_mask(fluid, 6)
    wall = grown & ~fluid
    idx = np.argwhere(grown)
    sp = np.asarray(spacing, dtype=np.float64)
    lo = idx.min(axis=0) * sp
    hi = idx.max(axis=0) * sp
    return LumenGeometry(fluid, wall, tuple(lo), tuple(hi), tuple(float(s) for s in sp))


def normalize_coords(geometry: LumenGeometry, indices) -> np.ndarray:
    """Map voxel indices ``(n, 3)`` to ``[0, 1]^3`` over the geometry bounding box."""
    ext = geometry.extent
    if np.any(ext <= 0):
        raise ValueError(f"degenerate extent {ext}; the mask must span more than one voxel per axis")
    idx = np.atleast_2d(np.asarray(indices))
    if np.any(idx < 0) or np.any(idx >= np.asarray(geometry.dims)):
        raise IndexError("voxel index outside the volume")
    phys = idx * np.asarray(geometry.spacing)
    return (phys - np.asarray(geometry.bbox_min)) / ext


def write_f4m(mask: np.ndarray, spacing, path) -> None:
    mask = np.asarray(mask, bool)
    header = {"dims": list(mask.shape), "spacing_m": [float(s) for s in spacing]}
    payload = np.ravel(mask, order="F").astype(np.uint8).tobytes()
    _write_container(path, MASK_MAGIC, header, [payload])


def read_f4m(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    header, payload = _read_container(path, MASK_MAGIC)
    dims = header.get("dims")
    spacing = header.get("spacing_m")
    if not (isinstance(dims, list) and len(dims) == 3):
        raise FormatError(f"{path}: invalid field 'dims': {dims!r}")
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise FormatError(f"{path}: invalid field 'spacing_m': {spacing!r}")
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n:
        raise FormatError(f"{path}: payload size mismatch for field 'dims': expected {n} bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if np.any(raw > 1):
        raise FormatError(f"{path}: mask payload must contain only 0/1")
    mask = _from_fortran(raw.astype(np.float32), (), dims) > 0.5
    return mask, tuple(float(s) for s in spacing)
