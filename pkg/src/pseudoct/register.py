"""Landmark similarity registration and CT-to-US resampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateLandmarks, FormatError, SizeMismatch
from .volgrid import Volume, apply_affine, check_invertible, index_grid, nearest_at, trilinear_at

_RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> s * R @ x + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    @property
    def T(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.s * points @ self.R.T + self.t

    def inverse_apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.t) @ self.R / self.s

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t
        )

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def _points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise SizeMismatch(f"landmarks must be an (N, 3) array, got shape {P.shape}")
    return P


def estimate_similarity(P, Q) -> SimilarityTransform:
    """Least-squares similarity taking landmarks ``P`` onto ``Q`` (Umeyama).

    Minimises ``sum_i ||q_i - (s R p_i + t)||^2`` in closed form.  A
    reflection in the SVD solution is corrected so ``det(R) = +1``.

    Raises
    ------
    SizeMismatch
        If the sets differ in length.
    DegenerateLandmarks
        With fewer than three points, collinear ``P`` or a cross-covariance
        of rank below two.
    """
    P = _points(P)
    Q = _points(Q)
    if len(P) != len(Q):
        raise SizeMismatch(f"landmark sets differ in length: {len(P)} vs {len(Q)}")
    n = len(P)
    if n < 3:
        raise DegenerateLandmarks(f"need at least 3 landmark pairs, got {n}")

    mu_p = P.mean(axis=0)
    mu_q = Q.mean(axis=0)
    Pc = P - mu_p
    Qc = Q - mu_q

    sv = np.linalg.svd(Pc, compute_uv=False)
    # three points are always rank 2 after centring, so test the second value
    if sv[0] == 0 or sv[1] <= _RANK_TOL * sv[0]:
        raise DegenerateLandmarks("US landmarks are collinear or coincident")

    sigma = Qc.T @ Pc / n
    U, D, Vt = np.linalg.svd(sigma)
    if D[0] == 0 or D[1] <= _RANK_TOL * D[0]:
        raise DegenerateLandmarks("landmark cross-covariance has rank below 2")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    var_p = (Pc**2).sum() / n
    s = float((D * S).sum() / var_p)
    t = mu_q - s * R @ mu_p
    return SimilarityTransform(s, R, t)


def fiducial_error(P, Q, X: SimilarityTransform) -> float:
    """RMS landmark residual ``sqrt(mean ||q - X(p)||^2)`` in mm."""
    P = _points(P)
    Q = _points(Q)
    if len(P) != len(Q):
        raise SizeMismatch(f"landmark sets differ in length: {len(P)} vs {len(Q)}")
    r = Q - X.apply(P)
    return float(np.sqrt((r**2).sum(axis=1).mean()))


def compose_resample_matrix(A_ct, T, A_us) -> np.ndarray:
    """US voxel index -> CT voxel index: ``inv(A_ct) @ T @ A_us``."""
    check_invertible(A_ct)
    return np.linalg.inv(np.asarray(A_ct, dtype=np.float64)) @ np.asarray(T, dtype=np.float64) @ np.asarray(A_us, dtype=np.float64)


def resample_into_us_grid(ct: Volume, M, us_dims, us_affine=None, interp: str = "trilinear") -> Volume:
    """Resample ``ct`` onto the US grid through the voxel map ``M``.

    ``us_affine`` defaults to ``ct.affine`` only so the identity case can be
    written without one; real pipelines pass the US affine.
    """
    if interp == "trilinear":
        sampler = trilinear_at
    elif interp == "nearest":
        sampler = nearest_at
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    us_dims = tuple(int(n) for n in us_dims)
    coords = apply_affine(M, index_grid(us_dims))
    data = sampler(ct.data, coords)
    return Volume(data, ct.affine if us_affine is None else us_affine)


# --- files ------------------------------------------------------------

def load_landmarks(path) -> np.ndarray:
    path = Path(path)
    try:
        points = np.array(json.loads(path.read_text())["points"], dtype=np.float64)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad landmark file ({exc})") from exc
    if points.ndim != 2 or points.shape[1] != 3:
        raise FormatError(f"{path}: points must be a list of [x, y, z] triples")
    return points


def save_landmarks(path, points) -> None:
    Path(path).write_text(json.dumps({"points": np.asarray(points, dtype=float).tolist()}) + "\n")


def transform_report(X: SimilarityTransform, fre_mm: float) -> dict:
    return {
        "s": float(X.s),
        "R": [float(v) for v in np.asarray(X.R).ravel()],
        "t": [float(v) for v in np.asarray(X.t)],
        "fre_mm": float(fre_mm),
    }
