"""Volume fidelity metrics: MSE, PSNR and windowed 3-D SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimsMismatch, EmptyDataset, PseudoCTError, VolumeTooSmall

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arrays(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimsMismatch(f"volume dims differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _arrays(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(pred, ref, i_max=1.0) -> float:
    """Peak SNR in dB; identical inputs give ``math.inf``."""
    err = mse(pred, ref)
    if err == 0:
        return math.inf
    return float(10.0 * np.log10(i_max**2 / err))


def _box_mean(x, w):
    """Mean over every fully contained ``w``-cube (valid positions only)."""
    for axis in range(x.ndim):
        c = np.cumsum(x, axis=axis)
        zero = np.zeros_like(np.take(c, [0], axis=axis))
        c = np.concatenate([zero, c], axis=axis)
        n = x.shape[axis]
        x = np.take(c, np.arange(w, n + 1), axis=axis) - np.take(c, np.arange(0, n - w + 1), axis=axis)
    return x / w**x.ndim


def ssim_map(pred, ref, window=SSIM_WINDOW, data_range=1.0) -> np.ndarray:
    x, y = _arrays(pred, ref)
    if min(x.shape) < window:
        raise VolumeTooSmall(f"every dim must be >= {window} for SSIM, got {x.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _box_mean(x, window)
    my = _box_mean(y, window)
    vx = _box_mean(x * x, window) - mx * mx
    vy = _box_mean(y * y, window) - my * my
    cxy = _box_mean(x * y, window) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(pred, ref, window=SSIM_WINDOW, data_range=1.0) -> float:
    """Mean local SSIM over a uniform ``window``^3 box, population moments."""
    return float(ssim_map(pred, ref, window, data_range).mean())


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        rows = [
            {**row, "psnr_db": "inf" if math.isinf(row["psnr_db"]) else row["psnr_db"]}
            for row in self.cases
        ]
        return {"cases": rows, "aggregate": self.aggregate}


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(len(values))}


def evaluate_set(pairs) -> MetricReport:
    """Per-case metrics plus mean/std.

    ``pairs`` is a sequence of ``(case_id, pred, ref)``.  Infinite PSNR rows
    are left out of the PSNR mean and counted in ``n_infinite``.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("evaluate_set needs at least one pair")
    rows = []
    for case, pred, ref in pairs:
        try:
            rows.append({"case": case, "psnr_db": psnr(pred, ref), "ssim": ssim(pred, ref), "mse": mse(pred, ref)})
        except PseudoCTError as exc:
            raise type(exc)(f"case {case}: {exc}") from exc
    finite = [r["psnr_db"] for r in rows if not math.isinf(r["psnr_db"])]
    agg = {
        "psnr_db": {**_summary(finite), "n_infinite": len(rows) - len(finite)},
        "ssim": _summary([r["ssim"] for r in rows]),
        "mse": _summary([r["mse"] for r in rows]),
    }
    return MetricReport(rows, agg)
