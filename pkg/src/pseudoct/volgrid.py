"""Volumes on an affine voxel grid.

A :class:`Volume` is a dense ``(D, H, W)`` float64 array plus the 4x4 affine
mapping voxel-centre indices to world millimetres.  This module holds the
coordinate algebra, the two interpolators used for resampling, min-max
normalisation and the UVOL on-disk container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SingularAffine

_DET_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {affine.shape}")
        check_invertible(affine)
        data.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume":
        """Same grid, new voxel values."""
        return Volume(data, self.affine)

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))


def check_invertible(affine) -> None:
    affine = np.asarray(affine, dtype=np.float64)
    if abs(np.linalg.det(affine[:3, :3])) <= _DET_EPS:
        raise SingularAffine("affine upper-left 3x3 block is singular")


def apply_affine(matrix, points) -> np.ndarray:
    """Apply a 4x4 homogeneous matrix to an ``(..., 3)`` array of points."""
    matrix = np.asarray(matrix, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    return points @ matrix[:3, :3].T + matrix[:3, 3]


def voxel_to_world(vol: Volume, idx) -> np.ndarray:
    return apply_affine(vol.affine, idx)


def world_to_voxel(vol: Volume, pt) -> np.ndarray:
    check_invertible(vol.affine)
    return apply_affine(np.linalg.inv(vol.affine), pt)


EDGE_TOL = 1e-9


def trilinear_at(data: np.ndarray, coords) -> np.ndarray:
    """Trilinear interpolation of ``data`` at voxel coordinates ``(..., 3)``.

    Coordinates outside ``[0, n - 1]`` on any axis sample as 0.  A rounding
    slack of ``EDGE_TOL`` voxels is snapped onto the boundary so transforms
    that are the identity up to float error keep the outer faces.
    """
    coords = np.asarray(coords, dtype=np.float64)
    shape = np.array(data.shape)
    flat = coords.reshape(-1, 3)
    inside = np.all((flat >= -EDGE_TOL) & (flat <= shape - 1 + EDGE_TOL), axis=1)
    out = np.zeros(len(flat), dtype=np.float64)
    c = np.clip(flat[inside], 0, shape - 1)
    if len(c):
        i0 = np.floor(c).astype(np.int64)
        frac = c - i0
        i1 = np.minimum(i0 + 1, shape - 1)
        acc = np.zeros(len(c))
        for corner in range(8):
            bits = [(corner >> axis) & 1 for axis in range(3)]
            idx = [i1[:, a] if bits[a] else i0[:, a] for a in range(3)]
            w = np.ones(len(c))
            for a in range(3):
                w = w * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
            acc = acc + w * data[idx[0], idx[1], idx[2]]
        out[inside] = acc
    return out.reshape(coords.shape[:-1])


def nearest_at(data: np.ndarray, coords) -> np.ndarray:
    """Nearest-voxel lookup; halfway ties go to the lower index, outside is 0."""
    coords = np.asarray(coords, dtype=np.float64)
    shape = np.array(data.shape)
    idx = np.ceil(coords.reshape(-1, 3) - 0.5).astype(np.int64)
    inside = np.all((idx >= 0) & (idx <= shape - 1), axis=1)
    out = np.zeros(len(idx), dtype=np.float64)
    j = idx[inside]
    out[inside] = data[j[:, 0], j[:, 1], j[:, 2]]
    return out.reshape(coords.shape[:-1])


def sample_trilinear(vol: Volume, coord) -> float:
    return float(trilinear_at(vol.data, np.asarray(coord, dtype=np.float64)[None])[0])


def sample_nearest(vol: Volume, coord) -> float:
    return float(nearest_at(vol.data, np.asarray(coord, dtype=np.float64)[None])[0])


def normalize_minmax(vol: Volume) -> Volume:
    lo = vol.data.min()
    hi = vol.data.max()
    if hi == lo:
        return vol.with_data(np.zeros(vol.dims))
    return vol.with_data((vol.data - lo) / (hi - lo))


def index_grid(dims) -> np.ndarray:
    """All voxel indices of a grid as a ``(D, H, W, 3)`` float array."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# --- UVOL container -------------------------------------------------------

def raw_path(header_path) -> Path:
    return Path(header_path).with_suffix(".raw")


def save_uvol(path, vol: Volume) -> Path:
    """Write ``path`` (JSON header) and its sibling ``.raw`` payload."""
    path = Path(path)
    header = {
        "dims": list(vol.dims),
        "affine": [float(v) for v in vol.affine.ravel()],
        "dtype": "f32",
    }
    path.write_text(json.dumps(header) + "\n")
    raw_path(path).write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    return path


def load_uvol(path) -> Volume:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        dims = tuple(int(n) for n in header["dims"])
        affine = np.array(header["affine"], dtype=np.float64).reshape(4, 4)
        dtype = header.get("dtype", "f32")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad UVOL header ({exc})") from exc
    if dtype != "f32" or len(dims) != 3:
        raise FormatError(f"{path}: unsupported UVOL header")
    payload = raw_path(path).read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return Volume(data, affine)
