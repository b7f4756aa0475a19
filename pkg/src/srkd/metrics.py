"""PSNR / SSIM metrics and evaluation reports.

PSNR over volumes uses the full voxel set; SSIM over volumes is the mean of
per-axial-slice SSIM.  Identical inputs report the 99 dB cap with an `exact`
flag instead of infinity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from scipy.signal import convolve2d

from .errors import ConfigurationError, ShapeError, StructuralError
from .volume import Volume

PSNR_CAP_DB = 99.0


class PsnrResult(NamedTuple):
    db: float
    exact: bool


def _as_array(x) -> np.ndarray:
    if isinstance(x, Volume):
        return np.asarray(x.data, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> PsnrResult:
    """Peak signal-to-noise ratio in dB; MSE == 0 reports the cap value."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(10.0 * math.log10(peak * peak / mse), False)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    a,
    b,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
) -> float:
    """Mean local SSIM with a Gaussian-weighted sliding window (valid region).

    3-D inputs are scored as the mean SSIM over axial slices.
    """
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([_ssim2d(a[:, :, d], b[:, :, d], window, sigma, k1, k2, peak)
                              for d in range(a.shape[2])]))
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2-D or 3-D input, got shape {a.shape}")
    return _ssim2d(a, b, window, sigma, k1, k2, peak)


def _ssim2d(a, b, window, sigma, k1, k2, peak) -> float:
    if min(a.shape) < window:
        raise ConfigurationError(
            f"spatial dims {a.shape} smaller than the {window}-tap SSIM window"
        )
    w = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    mu_aa = convolve2d(a * a, w, mode="valid")
    mu_bb = convolve2d(b * b, w, mode="valid")
    mu_ab = convolve2d(a * b, w, mode="valid")
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class SampleMetrics:
    sample_id: str
    split: str
    contrast: str
    psnr_db: float
    psnr_exact: bool
    ssim: float


@dataclass
class MetricsReport:
    """Per-sample metric rows plus per-(split, contrast) aggregates."""

    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "split", "contrast", "psnr_db", "psnr_exact", "ssim"])
            for r in self.rows:
                writer.writerow(
                    [r.sample_id, r.split, r.contrast,
                     f"{r.psnr_db:.6f}", int(r.psnr_exact), f"{r.ssim:.6f}"]
                )

    def median_psnr(self, split: str | None = None) -> float:
        vals = [r.psnr_db for r in self.rows if split is None or r.split == split]
        return float(np.median(vals))

    def median_ssim(self, split: str | None = None) -> float:
        vals = [r.ssim for r in self.rows if split is None or r.split == split]
        return float(np.median(vals))


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "q1": float(np.percentile(arr, 25)),
        "q3": float(np.percentile(arr, 75)),
        "n": int(arr.size),
    }


def evaluate_run(
    preds: Mapping[str, Volume],
    refs: Mapping[str, Volume],
    meta: Mapping[str, tuple[str, str]],
) -> MetricsReport:
    """Score predictions against references; meta maps id -> (split, contrast)."""
    if set(preds.keys()) != set(refs.keys()):
        only_p = sorted(set(preds) - set(refs))
        only_r = sorted(set(refs) - set(preds))
        raise StructuralError(
            f"sample id mismatch: only in predictions {only_p}, only in references {only_r}"
        )
    report = MetricsReport()
    for sid in sorted(preds.keys()):
        split, contrast = meta[sid]
        p = psnr(preds[sid], refs[sid])
        s = ssim(preds[sid], refs[sid])
        report.rows.append(
            SampleMetrics(sid, split, contrast, p.db, p.exact, s)
        )
    groups: dict[tuple[str, str], list[SampleMetrics]] = {}
    for r in report.rows:
        groups.setdefault((r.split, r.contrast), []).append(r)
    for key, rows in sorted(groups.items()):
        report.aggregates[key] = {
            "psnr": _stats([r.psnr_db for r in rows]),
            "ssim": _stats([r.ssim for r in rows]),
        }
    return report
