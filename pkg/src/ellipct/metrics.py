"""Image and volume fidelity metrics: PSNR, Gaussian-window SSIM, reports.

SSIM uses an 11x11 truncated Gaussian window (sigma 1.5, k1 = 0.01,
k2 = 0.03) evaluated on the valid interior, the convention of the standard
reference implementations. `data_range` defaults to the ground-truth maximum
because log-space projections are unbounded above; pass `data_range=1.0` for
cross-run comparability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _resolve_range(ref: np.ndarray, data_range) -> float:
    if data_range is not None:
        if data_range <= 0:
            raise InvalidParameterError("data_range must be positive")
        return float(data_range)
    peak = float(np.max(ref))
    return peak if peak > 0 else 1.0


def psnr(a, b, data_range=None) -> float:
    """10 log10(range^2 / MSE); +inf for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    rng = _resolve_range(b, data_range)
    return 10.0 * math.log10(rng * rng / mse)


def _gaussian_kernel():
    radius = SSIM_WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_PAD = SSIM_WINDOW // 2


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering restricted to the valid interior."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _filter_adjoint(img_valid: np.ndarray, full_shape) -> np.ndarray:
    """Adjoint of `_filter_valid`: zero-embed, then correlate (kernel is symmetric)."""
    full = np.zeros(full_shape)
    full[_PAD:-_PAD, _PAD:-_PAD] = img_valid
    out = correlate1d(full, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _ssim_fields(a, b, rng):
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    va = _filter_valid(a * a)
    vb = _filter_valid(b * b)
    vab = _filter_valid(a * b)
    sa = va - mu_a * mu_a
    sb = vb - mu_b * mu_b
    sab = vab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * sab + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = sa + sb + c2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b, data_range=None) -> float:
    """Mean local SSIM over the valid interior of the window."""
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    rng = _resolve_range(b, data_range)
    _, _, a1, a2, b1, b2 = _ssim_fields(a, b, rng)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(pred, target, data_range=None):
    """(mean SSIM, d(mean SSIM)/d pred) for the training loss."""
    a, b = _check_pair(pred, target)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    rng = _resolve_range(b, data_range)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_fields(a, b, rng)
    value = float(np.mean(a1 * a2 / (b1 * b2)))

    # S = (A1/B1) * (A2/B2) as a function of mu_a, v_a = w*(a^2), v_ab = w*(ab).
    # The va/vab fields are arranged so they cancel bitwise for identical
    # images (a2/b2 == 1 exactly), leaving a true zero gradient there.
    f = a1 / b1
    g = a2 / b2
    base = f / b2
    ds_dmu = g * (2 * mu_b * b1 - 2 * mu_a * a1) / (b1 * b1) \
        + f * (-2 * mu_b * b2 + 2 * mu_a * a2) / (b2 * b2)
    ds_dva = -(g * base)
    ds_dvab = 2.0 * base
    n = a1.size
    grad = (_filter_adjoint(ds_dmu, a.shape)
            + 2 * a * _filter_adjoint(ds_dva, a.shape)
            + b * _filter_adjoint(ds_dvab, a.shape)) / n
    return value, grad


@dataclass
class MetricReport:
    """Per-view and aggregate fidelity numbers; LPIPS is intentionally absent."""

    per_view_psnr: list = field(default_factory=list)
    per_view_ssim: list = field(default_factory=list)
    volume_psnr: float | None = None
    volume_slice_ssim: float | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_view_psnr)) if self.per_view_psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_view_ssim)) if self.per_view_ssim else math.nan

    def to_csv(self) -> str:
        lines = ["view,psnr_db,ssim,lpips"]
        for i, (p, s) in enumerate(zip(self.per_view_psnr, self.per_view_ssim)):
            lines.append(f"{i},{_fmt(p)},{s:.6f},unavailable")
        lines.append(f"mean,{_fmt(self.mean_psnr)},{self.mean_ssim:.6f},unavailable")
        if self.volume_psnr is not None:
            lines.append(f"volume,{_fmt(self.volume_psnr)},{self.volume_slice_ssim:.6f},unavailable")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = f"{'view':>6} {'PSNR (dB)':>12} {'SSIM':>8}"
        rows = [header, "-" * len(header)]
        for i, (p, s) in enumerate(zip(self.per_view_psnr, self.per_view_ssim)):
            rows.append(f"{i:>6} {_fmt(p):>12} {s:>8.4f}")
        rows.append(f"{'mean':>6} {_fmt(self.mean_psnr):>12} {self.mean_ssim:>8.4f}")
        if self.volume_psnr is not None:
            rows.append(f"{'vol':>6} {_fmt(self.volume_psnr):>12} {self.volume_slice_ssim:>8.4f}")
        return "\n".join(rows) + "\n"


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def stack_report(pred: np.ndarray, ref: np.ndarray, data_range=None) -> MetricReport:
    """Per-view PSNR/SSIM of two projection stacks of identical layout."""
    pred, ref = _check_pair(pred, ref)
    report = MetricReport()
    for p, r in zip(pred, ref):
        report.per_view_psnr.append(psnr(p, r, data_range))
        report.per_view_ssim.append(ssim(p, r, data_range))
    return report


def volume_metrics(a, b, data_range=None) -> MetricReport:
    """3-D PSNR plus mean SSIM over axial (z) slices."""
    av, bv = _check_pair(np.asarray(a.values if hasattr(a, "values") else a),
                         np.asarray(b.values if hasattr(b, "values") else b))
    rng = _resolve_range(bv, data_range)
    report = MetricReport()
    report.volume_psnr = psnr(av, bv, rng)
    slices = [ssim(av[:, :, k], bv[:, :, k], rng) for k in range(av.shape[2])]
    report.volume_slice_ssim = float(np.mean(slices))
    return report
