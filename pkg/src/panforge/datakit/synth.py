"""Seeded procedural paired tasks.

Every generator is a pure function of its arguments: all randomness comes
from the integer seed. Images are built in [0, 1] and handed
out as float32 (3, H, W) arrays in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from panforge.errors import ConfigError

TASKS = ("streak", "inpaint", "labels")

# label colors, background first; chromaticities are pairwise distinct
PALETTE = np.array([
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.15],
    [0.70, 0.25, 0.80],
])


@dataclass
class PairedSample:
    input: np.ndarray
    target: np.ndarray
    id: str
    task: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input.shape != self.target.shape or self.input.ndim != 3 or self.input.shape[0] != 3:
            raise ValueError(f"paired images must both be 3 x H x W, got {self.input.shape} and {self.target.shape}")


def to_signed(img01):
    return (np.asarray(img01, dtype=np.float64) * 2.0 - 1.0).astype(np.float32)


def to_unit(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _check_size(size):
    h, w = (size, size) if np.isscalar(size) else size
    h, w = int(h), int(w)
    if h <= 0 or w <= 0 or h % 64 or w % 64:
        raise ConfigError(f"image size {h}x{w} invalid: height and width must be positive multiples of 64",
                          field="size")
    return h, w


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _soft(signed_dist, softness=1.2):
    """Coverage from a signed distance (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(signed_dist / softness, -50, 50)))


def _shape_sdf(rng, yy, xx, h, w):
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
    if rng.random() < 0.5:
        # ellipse: scaled radial distance, approximately in pixels
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        return (r - 1.0) * min(ry, rx)
    dy, dx = np.abs(yy - cy) - ry, np.abs(xx - cx) - rx
    outside = np.sqrt(np.maximum(dy, 0) ** 2 + np.maximum(dx, 0) ** 2)
    return outside + np.minimum(np.maximum(dy, dx), 0)


def scene(rng, h, w):
    """Smooth colour background with a few soft-edged shapes, (3, H, W) in [0, 1]."""
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * (xx / w - 0.5) + np.sin(theta) * (yy / h - 0.5)) + 0.5
    c0, c1 = rng.uniform(0.1, 0.7, 3), rng.uniform(0.1, 0.7, 3)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    fy, fx, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
    img += 0.05 * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + ph)[None]
    for _ in range(rng.integers(2, 5)):
        cover = _soft(_shape_sdf(rng, yy, xx, h, w))
        color = rng.uniform(0.05, 0.8, 3)
        img = img * (1 - cover[None]) + color[:, None, None] * cover[None]
    return np.clip(img, 0.0, 1.0)


def _segment_coverage(yy, xx, y0, x0, y1, x1, width):
    py, px = yy - y0, xx - x0
    dy, dx = y1 - y0, x1 - x0
    t = np.clip((py * dy + px * dx) / max(dy * dy + dx * dx, 1e-12), 0.0, 1.0)
    d = np.hypot(py - t * dy, px - t * dx)
    return np.clip(1.0 - d / width, 0.0, 1.0)


def streak_layer(rng, h, w, count, length=(6.0, 16.0), angle=(-30.0, 30.0), intensity=(0.5, 0.9),
                 width=1.0):
    """Opacity map in [0, 1] holding ``count`` oriented streak segments.

    The streak draws are sequential, so a larger count extends a smaller one
    with the same generator state.
    """
    alpha = np.zeros((h, w))
    base = rng.uniform(*angle)
    yy, xx = _grid(h, w)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ln = rng.uniform(*length)
        ang = np.deg2rad(base + rng.uniform(-5.0, 5.0))
        a = rng.uniform(*intensity)
        hy, hx = 0.5 * ln * np.cos(ang), 0.5 * ln * np.sin(ang)
        pad = int(np.ceil(ln / 2 + width)) + 1
        r0, r1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
        c0, c1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
        cov = _segment_coverage(yy[r0:r1, c0:c1], xx[r0:r1, c0:c1], cy - hy, cx - hx, cy + hy, cx + hx, width)
        alpha[r0:r1, c0:c1] = np.maximum(alpha[r0:r1, c0:c1], a * cov)
    return alpha


def gen_streak_pair(seed, size=(64, 64), density=0.004, length=(6.0, 16.0), angle=(-30.0, 30.0),
                    intensity=(0.5, 0.9)) -> PairedSample:
    """Clean scene as target; the input alpha-blends bright streaks over it.

    ``density`` is the expected number of streaks per pixel; the count is
    ``round(density * H * W)``.
    """
    h, w = _check_size(size)
    if density < 0:
        raise ConfigError(f"streak density must be nonnegative, got {density}", field="density")
    scene_rng, streak_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    target = scene(scene_rng, h, w)
    count = int(round(density * h * w))
    alpha = streak_layer(streak_rng, h, w, count, length, angle, intensity)[None]
    noisy = target * (1.0 - alpha) + alpha
    return PairedSample(to_signed(noisy), to_signed(target), f"streak-{seed}", "streak",
                        {"density": density, "streaks": count})


def hole_box(size, hole_fraction):
    """(top, left, height, width) of the centred square hole."""
    h, w = size
    hh, hw = int(round(hole_fraction * h)), int(round(hole_fraction * w))
    return (h - hh) // 2, (w - hw) // 2, hh, hw


def gen_inpaint_pair(seed, size=(64, 64), hole_fraction=0.25) -> PairedSample:
    """Target scene with its centre square set to 0 (mid-gray) as the input."""
    h, w = _check_size(size)
    if not 0 < hole_fraction < 1:
        raise ConfigError(f"hole_fraction must lie in (0, 1), got {hole_fraction}", field="hole_fraction")
    target = to_signed(scene(np.random.default_rng(seed), h, w))
    top, left, hh, hw = hole_box((h, w), hole_fraction)
    inp = target.copy()
    inp[:, top:top + hh, left:left + hw] = 0.0
    return PairedSample(inp, target, f"inpaint-{seed}", "inpaint",
                        {"hole": (top, left, hh, hw), "hole_fraction": hole_fraction})


def label_layout(rng, h, w, n_shapes, n_classes=len(PALETTE) - 1):
    """Integer class map; 0 is background, later shapes paint over earlier ones."""
    yy, xx = _grid(h, w)
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, n_classes + 1))
        labels[_shape_sdf(rng, yy, xx, h, w) < 0] = cls
    return labels


def render_labels(labels):
    """Flat per-class colours, (3, H, W) in [0, 1]."""
    return PALETTE[labels].transpose(2, 0, 1)


def render_appearance(labels):
    """Per-class base colour times a shading field in [0.55, 1].

    The shading combines a fixed lighting ramp with a class-specific stripe
    texture, and depends only on position and class, never on a seed.
    Shading multiplies all three channels equally, so chromaticity still
    identifies the class.
    """
    h, w = labels.shape
    yy, xx = _grid(h, w)
    light = 1.0 - 0.25 * (yy / h + xx / w) / 2.0
    k = labels.astype(np.float64)
    freq = 2.0 + 1.5 * k
    orient = 0.6 * k
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(orient) * xx / w + np.sin(orient) * yy / h))
    shade = 0.55 + 0.45 * light * (0.75 + 0.25 * stripes)
    return PALETTE[labels].transpose(2, 0, 1) * shade[None]


def gen_label_shape_pair(seed, size=(64, 64), n_shapes=3) -> PairedSample:
    h, w = _check_size(size)
    if n_shapes < 1:
        raise ConfigError(f"n_shapes must be >= 1, got {n_shapes}", field="n_shapes")
    rng = np.random.default_rng(seed)
    labels = label_layout(rng, h, w, n_shapes)
    return PairedSample(to_signed(render_labels(labels)), to_signed(render_appearance(labels)),
                        f"labels-{seed}", "labels", {"n_shapes": n_shapes})


def class_from_color(img01):
    """Nearest-palette class per pixel by chromaticity; an oracle for tests."""
    chroma = img01 / np.maximum(img01.sum(axis=0, keepdims=True), 1e-12)
    pal = PALETTE / PALETTE.sum(axis=1, keepdims=True)
    d = ((chroma[None] - pal[:, :, None, None]) ** 2).sum(axis=1)
    return d.argmin(axis=0)


GENERATORS = {"streak": gen_streak_pair, "inpaint": gen_inpaint_pair, "labels": gen_label_shape_pair}


def generate(task, seed, size=(64, 64), **params) -> PairedSample:
    if task not in GENERATORS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}", field="task")
    return GENERATORS[task](seed, size, **params)
