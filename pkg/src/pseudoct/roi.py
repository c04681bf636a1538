"""Kidney bounding-box cropping and ultrasound field-of-view masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoxOutOfRange, DimsMismatch, EmptyMask
from .volgrid import Volume, normalize_minmax

DEFAULT_MARGIN = 5

_NEIGHBOURS_6 = np.array(
    [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel box ``b_min .. b_max``."""

    b_min: tuple[int, int, int]
    b_max: tuple[int, int, int]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.b_min, self.b_max))

    def as_dict(self) -> dict:
        return {"b_min": list(self.b_min), "b_max": list(self.b_max)}


def mask_bounding_box(mask: Volume) -> BoundingBox:
    idx = np.argwhere(mask.data > 0)
    if len(idx) == 0:
        raise EmptyMask("mask has no nonzero voxels")
    return BoundingBox(tuple(int(v) for v in idx.min(axis=0)), tuple(int(v) for v in idx.max(axis=0)))


def expand_and_clamp(box: BoundingBox, margin: int = DEFAULT_MARGIN, dims=None) -> BoundingBox:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    lo = [b - margin for b in box.b_min]
    hi = [b + margin for b in box.b_max]
    if dims is not None:
        lo = [max(0, v) for v in lo]
        hi = [min(n - 1, v) for v, n in zip(hi, dims)]
    return BoundingBox(tuple(lo), tuple(hi))


def crop(vol: Volume, box: BoundingBox) -> Volume:
    """Copy the voxels inside ``box``; the affine is shifted to ``b_min``."""
    for lo, hi, n in zip(box.b_min, box.b_max, vol.dims):
        if not (0 <= lo <= hi < n):
            raise BoxOutOfRange(f"box {box.b_min}..{box.b_max} does not fit dims {vol.dims}")
    (d0, h0, w0), (d1, h1, w1) = box.b_min, box.b_max
    shift = np.eye(4)
    shift[:3, 3] = box.b_min
    return Volume(vol.data[d0 : d1 + 1, h0 : h1 + 1, w0 : w1 + 1], vol.affine @ shift)


def exterior_zeros(zero: np.ndarray) -> np.ndarray:
    """Zero voxels 6-connected to the volume border through zeros.

    Breadth-first search from every zero voxel on the border, advancing
    one whole frontier per step.
    """
    shape = np.array(zero.shape)
    visited = np.zeros(zero.shape, dtype=bool)
    border = np.zeros(zero.shape, dtype=bool)
    border[[0, -1], :, :] = True
    border[:, [0, -1], :] = True
    border[:, :, [0, -1]] = True
    seeds = zero & border
    visited[seeds] = True
    frontier = np.argwhere(seeds)
    while len(frontier):
        nxt = (frontier[:, None, :] + _NEIGHBOURS_6[None, :, :]).reshape(-1, 3)
        nxt = nxt[np.all((nxt >= 0) & (nxt < shape), axis=1)]
        keep = zero[nxt[:, 0], nxt[:, 1], nxt[:, 2]] & ~visited[nxt[:, 0], nxt[:, 1], nxt[:, 2]]
        nxt = nxt[keep]
        if len(nxt):
            flat = np.unique(np.ravel_multi_index(nxt.T, zero.shape))
            nxt = np.stack(np.unravel_index(flat, zero.shape), axis=1)
            visited[nxt[:, 0], nxt[:, 1], nxt[:, 2]] = True
        frontier = nxt
    return visited


def fov_mask(us: Volume) -> Volume:
    """Binary FOV mask: ``us > 0`` with enclosed zero cavities filled."""
    inside = us.data > 0
    filled = ~exterior_zeros(~inside)
    return us.with_data(filled.astype(np.float64))


def apply_mask(vol: Volume, mask: Volume) -> Volume:
    if vol.dims != mask.dims:
        raise DimsMismatch(f"volume dims {vol.dims} != mask dims {mask.dims}")
    # np.where keeps masked voxels +0.0 rather than -0.0 for negative inputs
    return vol.with_data(np.where(mask.data != 0, vol.data * mask.data, 0.0))


def fit_window(box: BoundingBox, size, dims) -> BoundingBox:
    """Box of exactly ``size`` centred on ``box`` and shifted to lie inside ``dims``."""
    lo, hi = [], []
    for a, b, n, want in zip(box.b_min, box.b_max, dims, size):
        if want > n:
            raise BoxOutOfRange(f"window size {tuple(size)} exceeds volume dims {tuple(dims)}")
        start = (a + b + 1 - want) // 2
        start = min(max(start, 0), n - want)
        lo.append(start)
        hi.append(start + want - 1)
    return BoundingBox(tuple(lo), tuple(hi))


def preprocess_case(ct: Volume, us: Volume, us_mask: Volume, margin=DEFAULT_MARGIN, target_dims=None) -> dict:
    """Crop to the kidney, mask CT by the US field of view, min-max normalise.

    The FOV mask comes from the raw cropped US; normalisation follows, and
    the CT is masked after normalisation so out-of-view voxels are exactly 0.
    """
    for name, vol in (("ct", ct), ("us_mask", us_mask)):
        if vol.dims != us.dims:
            raise DimsMismatch(f"{name} dims {vol.dims} != us dims {us.dims}")
    box = expand_and_clamp(mask_bounding_box(us_mask), margin, us.dims)
    if target_dims is not None:
        box = fit_window(box, target_dims, us.dims)
    us_c, ct_c, mask_c = crop(us, box), crop(ct, box), crop(us_mask, box)
    fov = fov_mask(us_c)
    us_n = normalize_minmax(us_c)
    ct_n = normalize_minmax(ct_c)
    return {
        "box": box,
        "us": us_n,
        "us_mask": mask_c,
        "fov": fov,
        "ct_unmasked": ct_n,
        "ct": apply_mask(ct_n, fov),
    }
