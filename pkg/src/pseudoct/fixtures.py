"""Synthetic kidney phantoms for tests and the bundled demo pipeline.

Anatomy is defined by analytic fields in US world millimetres: an
ellipsoidal kidney with a brighter cortex, a smooth body background and a
small bright "bone" blob.  The ultrasound sees it through a fan-shaped
field of view with multiplicative speckle and depth attenuation; the CT is
smooth and covers everything.  The CT grid sits in its own world frame,
related to the US frame by a known similarity transform, so registration
can be checked against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .register import SimilarityTransform, save_landmarks
from .volgrid import Volume, apply_affine, index_grid, save_uvol


def _rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass
class Anatomy:
    """Analytic phantom in US world coordinates (mm)."""

    centre: np.ndarray
    radii: np.ndarray
    bone_centre: np.ndarray
    bone_radius: float
    apex: np.ndarray
    fan_half_angle: float
    max_depth: float

    def kidney_level(self, p):
        """< 1 inside the kidney ellipsoid."""
        q = (np.asarray(p) - self.centre) / self.radii
        return np.sqrt((q**2).sum(axis=-1))

    def kidney(self, p):
        return (self.kidney_level(p) < 1.0).astype(np.float64)

    def ct_hu(self, p):
        """CT-like intensities in HU: soft tissue, perirenal fat, medulla, cortex, bone."""
        p = np.asarray(p)
        r = self.kidney_level(p)
        smooth = lambda x, w: 0.5 * (1 + np.tanh(x / w))
        body = 45.0 + 12.0 * np.sin(p[..., 0] / 5.0) * np.cos(p[..., 2] / 7.0)
        fat = smooth(1.35 - r, 0.06)
        kidney = smooth(1.0 - r, 0.05)
        cortex = kidney * smooth(r - 0.72, 0.05)
        bone = smooth(self.bone_radius - np.linalg.norm(p - self.bone_centre, axis=-1), 0.8)
        hu = body + fat * (-100.0 - body)
        hu = hu + kidney * (30.0 - hu) + cortex * 120.0
        return hu + bone * (200.0 - hu)

    def in_fov(self, p):
        v = np.asarray(p) - self.apex
        depth = v[..., 0]
        lateral = np.sqrt(v[..., 1] ** 2 + v[..., 2] ** 2)
        return (depth > 0) & (depth < self.max_depth) & (lateral < np.tan(self.fan_half_angle) * depth)

    def us_echo(self, p):
        """Noise-free echogenicity, zero outside the field of view."""
        p = np.asarray(p)
        r = self.kidney_level(p)
        echo = np.full(p.shape[:-1], 0.55)
        echo = np.where(r < 1.0, 0.25, echo)
        echo = np.where((r >= 0.75) & (r < 1.0), 0.75, echo)
        echo = np.where(np.abs(r - 1.0) < 0.06, 1.0, echo)
        depth = np.clip(p[..., 0] - self.apex[0], 0, None)
        echo = echo * np.exp(-depth / (2.5 * self.max_depth))
        return np.where(self.in_fov(p), echo, 0.0)


def make_anatomy(dims, spacing, rng) -> Anatomy:
    extent = np.asarray(dims) * spacing
    centre = extent * np.array([0.55, 0.5, 0.5]) + rng.uniform(-1, 1, 3) * 0.03 * extent
    radii = extent * np.array([0.22, 0.2, 0.3]) * rng.uniform(0.9, 1.1, 3)
    bone_centre = centre + np.array([0.1, 0.3, -0.38]) * extent
    apex = np.array([-0.6 * extent[0], extent[1] / 2, extent[2] / 2])
    return Anatomy(
        centre=centre, radii=radii, bone_centre=bone_centre, bone_radius=0.07 * extent.min(),
        apex=apex, fan_half_angle=np.deg2rad(45.0), max_depth=1.55 * extent[0],
    )


def speckle(shape, rng, sigma=0.7):
    """Rayleigh-magnitude speckle with a short correlation length, mean ~1."""
    re = gaussian_filter(rng.normal(size=shape), sigma)
    im = gaussian_filter(rng.normal(size=shape), sigma)
    mag = np.hypot(re, im)
    return mag / mag.mean()


def training_pair(dims=(16, 16, 32), seed=0):
    """A normalised, FOV-masked ``(US, CT)`` pair as ``(1, 1, D, H, W)`` arrays."""
    rng = np.random.default_rng(seed)
    anatomy = make_anatomy(dims, 1.0, rng)
    pts = index_grid(dims)
    fov = anatomy.in_fov(pts)
    us = anatomy.us_echo(pts) * speckle(dims, rng)
    us = np.where(fov, np.maximum(us, 0.02), 0.0)
    us = us / us.max()
    ct = anatomy.ct_hu(pts)
    ct = (ct - ct.min()) / (ct.max() - ct.min())
    ct = np.where(fov, ct, 0.0)
    return us[None, None], ct[None, None]


@dataclass
class SyntheticCase:
    case: str
    us: Volume
    us_mask: Volume
    ct: Volume
    ct_mask: Volume
    us_landmarks: np.ndarray
    ct_landmarks: np.ndarray
    transform: SimilarityTransform


def make_case(case="case000", seed=0, us_dims=(24, 24, 40), us_spacing=1.0) -> SyntheticCase:
    """Paired US/CT volumes with landmarks related by a known similarity."""
    rng = np.random.default_rng(seed)
    us_dims = tuple(us_dims)
    anatomy = make_anatomy(us_dims, us_spacing, rng)

    A_us = np.diag([us_spacing] * 3 + [1.0])
    A_us[:3, 3] = rng.uniform(-20, 20, 3)
    # the anatomy lives in US-grid millimetres measured from the grid origin
    to_anat = lambda world: world - A_us[:3, 3]

    X = SimilarityTransform(rng.uniform(0.9, 1.1), _rotation(rng, np.deg2rad(25)), rng.uniform(-30, 30, 3))

    us_world = apply_affine(A_us, index_grid(us_dims))
    fov = anatomy.in_fov(to_anat(us_world))
    us = anatomy.us_echo(to_anat(us_world)) * speckle(us_dims, rng)
    us = np.where(fov, np.maximum(us, 0.02) * 200.0, 0.0)
    us_mask = anatomy.kidney(to_anat(us_world))

    # CT grid covering the transformed US box with some padding
    corners = apply_affine(A_us, index_grid((2, 2, 2)) * (np.array(us_dims) - 1))
    ct_corners = X.apply(corners.reshape(-1, 3))
    ct_spacing = 1.25
    lo = ct_corners.min(axis=0) - 6.0
    hi = ct_corners.max(axis=0) + 6.0
    ct_dims = tuple(int(n) for n in np.ceil((hi - lo) / ct_spacing) + 1)
    A_ct = np.diag([ct_spacing] * 3 + [1.0])
    A_ct[:3, 3] = lo
    ct_world = apply_affine(A_ct, index_grid(ct_dims))
    back = to_anat(X.inverse_apply(ct_world))
    ct = anatomy.ct_hu(back)
    ct_mask = anatomy.kidney(back)

    axes = np.diag(anatomy.radii) * 0.9
    P_anat = np.array([
        anatomy.centre + axes[0], anatomy.centre - axes[0],
        anatomy.centre + axes[1], anatomy.centre - axes[1],
        anatomy.centre + axes[2], anatomy.centre - 0.5 * axes[2] + 0.3 * axes[1],
    ])
    P = P_anat + A_us[:3, 3]
    Q = X.apply(P)
    return SyntheticCase(
        case, Volume(us, A_us), Volume(us_mask, A_us), Volume(ct, A_ct), Volume(ct_mask, A_ct), P, Q, X
    )


def write_case(directory, sc: SyntheticCase) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "us": directory / f"{sc.case}_us.uvol",
        "us_mask": directory / f"{sc.case}_us_mask.uvol",
        "ct": directory / f"{sc.case}_ct.uvol",
        "ct_mask": directory / f"{sc.case}_ct_mask.uvol",
        "us_landmarks": directory / f"{sc.case}_us_landmarks.json",
        "ct_landmarks": directory / f"{sc.case}_ct_landmarks.json",
    }
    save_uvol(paths["us"], sc.us)
    save_uvol(paths["us_mask"], sc.us_mask)
    save_uvol(paths["ct"], sc.ct)
    save_uvol(paths["ct_mask"], sc.ct_mask)
    save_landmarks(paths["us_landmarks"], sc.us_landmarks)
    save_landmarks(paths["ct_landmarks"], sc.ct_landmarks)
    return paths
