"""Full-reference image quality metrics: PSNR, SSIM, UQI and pixel-domain VIF.

Inputs are images in [0, 1], either (H, W) grayscale or (3, H, W) colour.
Colour images are reduced to luma 0.299 R + 0.587 G + 0.114 B before any
metric is computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from panforge.errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
UQI_WINDOW = 8
UQI_EPS = 1e-12
UQI_C = 1e-8
VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_EPS = 1e-10
VIF_MIN_SIZE = 32


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise ShapeError(f"expected an H x W or 3 x H x W image, got shape {img.shape}")


def _pair(a, b, min_size=1, what="metric"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: image shapes differ, {np.shape(a)} vs {np.shape(b)}")
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < min_size:
        raise ShapeError(f"{what}: image {a.shape[0]}x{a.shape[1]} is smaller than the "
                         f"{min_size}x{min_size} minimum")
    return a, b


def gaussian_kernel(size, sigma):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def filter_valid(img, ky, kx):
    """Separable correlation with no padding: output shrinks by len(k) - 1."""
    out = sliding_window_view(img, ky.size, axis=0) @ ky
    return sliding_window_view(out, kx.size, axis=1) @ kx


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b, what="psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2, data_range=1.0):
    """Mean SSIM over all fully-contained Gaussian windows."""
    a, b = _pair(a, b, window, what="ssim")
    k = gaussian_kernel(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = filter_valid(a, k, k), filter_valid(b, k, k)
    var_a = filter_valid(a * a, k, k) - mu_a ** 2
    var_b = filter_valid(b * b, k, k) - mu_b ** 2
    cov = filter_valid(a * b, k, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _window(window):
    return (window, window) if np.isscalar(window) else tuple(int(v) for v in window)


def uqi(a, b, window=UQI_WINDOW):
    """Universal quality index averaged over sliding ``window`` blocks.

    Blocks whose denominator falls under 1e-12 (flat and dark) use the
    stabilized SSIM-style form with C1 = C2 = 1e-8 instead of dividing by ~0.
    """
    wy, wx = _window(window)
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"uqi: image shapes differ, {np.shape(a)} vs {np.shape(b)}")
    a, b = to_gray(a), to_gray(b)
    if a.shape[0] < wy or a.shape[1] < wx:
        raise ShapeError(f"uqi: image {a.shape[0]}x{a.shape[1]} is smaller than the {wy}x{wx} window")
    ky, kx = np.full(wy, 1.0 / wy), np.full(wx, 1.0 / wx)
    mu_a, mu_b = filter_valid(a, ky, kx), filter_valid(b, ky, kx)
    var_a = filter_valid(a * a, ky, kx) - mu_a ** 2
    var_b = filter_valid(b * b, ky, kx) - mu_b ** 2
    cov = filter_valid(a * b, ky, kx) - mu_a * mu_b
    den = (var_a + var_b) * (mu_a ** 2 + mu_b ** 2)
    tiny = den < UQI_EPS
    q = np.empty_like(den)
    q[~tiny] = 4 * cov[~tiny] * mu_a[~tiny] * mu_b[~tiny] / den[~tiny]
    c = UQI_C
    q[tiny] = ((2 * mu_a[tiny] * mu_b[tiny] + c) * (2 * cov[tiny] + c)
               / ((mu_a[tiny] ** 2 + mu_b[tiny] ** 2 + c) * (var_a[tiny] + var_b[tiny] + c)))
    return float(np.mean(q))


def blur_reflect(img, sigma=1.0, truncate=4.0):
    """Gaussian blur, kernel cut at ``truncate`` sigmas, mirror-padded edges."""
    r = int(truncate * sigma + 0.5)
    k = gaussian_kernel(2 * r + 1, sigma)
    return filter_valid(np.pad(img, r, mode="symmetric"), k, k)


def halve(img):
    """Centred 2x decimation along both axes.

    Odd extents keep every other sample starting at the first; even extents
    average neighbouring pairs, i.e. sample halfway between them. Both are
    mirror symmetric, so a flipped image decimates to the flipped result.
    """
    for axis in (0, 1):
        img = np.moveaxis(img, axis, 0)
        img = img[::2] if img.shape[0] % 2 else 0.5 * (img[0::2] + img[1::2])
        img = np.moveaxis(img, 0, axis)
    return img


def vif_pyramid(img, scales=VIF_SCALES):
    """Scale 1 is the image itself; each further scale blurs (sigma 1) and halves."""
    levels = [img]
    for _ in range(scales - 1):
        levels.append(halve(blur_reflect(levels[-1])))
    return levels


def _vif_terms(a, b):
    k = np.full(3, 1.0 / 3.0)
    mu_a, mu_b = filter_valid(a, k, k), filter_valid(b, k, k)
    var_a = np.maximum(filter_valid(a * a, k, k) - mu_a ** 2, 0.0)
    var_b = np.maximum(filter_valid(b * b, k, k) - mu_b ** 2, 0.0)
    cov = filter_valid(a * b, k, k) - mu_a * mu_b
    g = cov / (var_a + VIF_EPS)
    sv = np.maximum(var_b - g * cov, VIF_EPS)
    num = np.log1p(g * g * var_a / (sv + VIF_NOISE_VAR)).sum()
    den = np.log1p(var_a / VIF_NOISE_VAR).sum()
    return num, den


def vif(a, b):
    """Pixel-domain visual information fidelity of ``b`` against reference ``a``.

    Computed on 0-255 scaled intensities so the visual-noise variance of 2.0
    is in grey levels squared.
    """
    a, b = _pair(a, b, VIF_MIN_SIZE, what="vif")
    num = den = 0.0
    for la, lb in zip(vif_pyramid(a * 255.0), vif_pyramid(b * 255.0)):
        n, d = _vif_terms(la, lb)
        num += n
        den += d
    if den == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(num / den)


@dataclass
class MetricReport:
    id: str
    psnr: float
    ssim: float
    uqi: float
    vif: float

    def row(self):
        return "\t".join([self.id] + [repr(float(v)) for v in (self.psnr, self.ssim, self.uqi, self.vif)])


REPORT_HEADER = "id\tpsnr\tssim\tuqi\tvif"


def evaluate_pair(output, reference, id="") -> MetricReport:
    """All four metrics with ``reference`` as the ground truth."""
    return MetricReport(id, psnr(output, reference), ssim(output, reference), uqi(output, reference),
                        vif(reference, output))


def mean_report(reports, id="mean") -> MetricReport:
    """Unweighted arithmetic mean of each field."""
    if not reports:
        raise ValueError("no reports to average")
    cols = [np.array([getattr(r, f) for r in reports], dtype=np.float64) for f in ("psnr", "ssim", "uqi", "vif")]
    return MetricReport(id, *(float(np.mean(c)) for c in cols))


def write_report(path, reports):
    """Header, one row per image, then the mean row. Returns the mean report."""
    mean = mean_report(reports)
    lines = [REPORT_HEADER] + [r.row() for r in reports] + [mean.row()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return mean


def read_report(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError(f"{path}: not a metric report")
    out = []
    for ln in lines[1:]:
        f = ln.split("\t")
        out.append(MetricReport(f[0], *(float(v) for v in f[1:5])))
    return out
