"""Synthetic fundus-like ROIs with exact disc/cup ellipse ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .postprocess import EllipseParams, SegMasks, vertical_diameter

# per-channel gains turning the grey intensity model into a reddish RGB image
CHANNEL_GAINS = (1.0, 0.78, 0.5)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    size: int = 128
    disc_radius: tuple = (21.0, 29.0)     # vertical semi-axis range, px
    disc_aspect: tuple = (0.85, 1.0)      # horizontal / vertical semi-axis
    disc_tilt: tuple = (-0.3, 0.3)        # rad, about the vertical
    center_jitter: float = 8.0            # px, disc center offset from ROI center
    cdr_range: tuple = (0.3, 0.9)
    cup_aspect: tuple = (0.85, 1.0)
    cup_offset: float = 2.0               # px, max cup-center shift inside the disc
    background: float = 0.35
    disc_level: float = 0.7
    cup_level: float = 0.9
    texture: float = 0.05
    noise: float = 0.03
    vessels: tuple = (2, 5)
    vessel_depth: float = 0.3
    disc_edge: float = 1.5                # px, width of the soft disc edge
    cup_edge: float = 3.0                 # px, cup edge is deliberately low contrast
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cdr_range
        if not 0 < lo <= hi < 1:
            raise SynthError(f"cdr_range must lie inside (0, 1), got {self.cdr_range}")
        r_lo, r_hi = self.disc_radius
        if r_lo <= 0 or r_hi < r_lo:
            raise SynthError(f"invalid disc_radius range {self.disc_radius}")
        if r_hi + self.center_jitter >= self.size / 2:
            raise SynthError("disc does not fit in the ROI for the given radius and jitter")
        if min(self.disc_aspect) <= 0 or min(self.cup_aspect) <= 0:
            raise SynthError("aspect ratios must be positive")


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    masks: SegMasks
    center: tuple       # (u, v) = disc ellipse center
    cdr: float
    disc: EllipseParams
    cup: EllipseParams
    label: int = field(default=-1)


def _soft_region(e: EllipseParams, xx, yy, width: float) -> np.ndarray:
    """Approximately 1 inside the ellipse, 0 outside, with a logistic edge ``width`` px wide."""
    c, s = math.cos(e.angle), math.sin(e.angle)
    dx, dy = xx - e.cx, yy - e.cy
    along, across = dx * c + dy * s, -dx * s + dy * c
    rho = np.sqrt((along / e.a) ** 2 + (across / e.b) ** 2)
    dist = (rho - 1.0) * math.sqrt(e.a * e.b)
    return 0.5 * (1.0 - np.tanh(dist / width))


def _smooth_texture(rng, size: int, cells: int = 6) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    idx = np.linspace(0, cells - 1, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def _vessel_map(rng, spec: SynthSpec, center, xx, yy) -> np.ndarray:
    n = int(rng.integers(spec.vessels[0], spec.vessels[1] + 1))
    out = np.zeros_like(xx)
    t = np.linspace(0.0, 1.0, 96)[:, None]
    for _ in range(n):
        a0 = rng.uniform(0, 2 * math.pi)
        a1 = a0 + math.pi + rng.uniform(-0.8, 0.8)
        reach = spec.size * 0.75
        p0 = np.array([center[0] + reach * math.cos(a0), center[1] + reach * math.sin(a0)])
        p2 = np.array([center[0] + reach * math.cos(a1), center[1] + reach * math.sin(a1)])
        p1 = np.array(center) + rng.uniform(-10, 10, size=2)
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        d2 = np.full(xx.shape, np.inf)
        for px, py in pts:
            d2 = np.minimum(d2, (xx - px) ** 2 + (yy - py) ** 2)
        width = rng.uniform(1.0, 2.2)
        out = np.maximum(out, np.exp(-d2 / (2 * width ** 2)))
    return out


def _cup_inside(disc: EllipseParams, cup: EllipseParams) -> bool:
    t = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    c, s = math.cos(cup.angle), math.sin(cup.angle)
    x = cup.cx + cup.a * np.cos(t) * c - cup.b * np.sin(t) * s
    y = cup.cy + cup.a * np.cos(t) * s + cup.b * np.sin(t) * c
    shrunk = EllipseParams(disc.cx, disc.cy, disc.a - 1.0, disc.b - 1.0, disc.angle)
    return bool(shrunk.contains(x, y).all())


def _draw_geometry(rng, spec: SynthSpec, cdr: float):
    half = (spec.size - 1) / 2.0
    cx = half + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cy = half + rng.uniform(-spec.center_jitter, spec.center_jitter)
    a = rng.uniform(*spec.disc_radius)
    b = a * rng.uniform(*spec.disc_aspect)
    disc = EllipseParams(cx, cy, a, b, math.pi / 2 + rng.uniform(*spec.disc_tilt))
    vdd = vertical_diameter(disc)
    for attempt in range(50):
        shift = spec.cup_offset * (1 - attempt / 50)
        ox, oy = rng.uniform(-shift, shift, size=2)
        ratio = rng.uniform(*spec.cup_aspect)
        angle = disc.angle + rng.uniform(-0.2, 0.2)
        unit = vertical_diameter(EllipseParams(0, 0, 1.0, ratio, angle))
        k = cdr * vdd / unit
        cup = EllipseParams(cx + ox, cy + oy, k, k * ratio, angle)
        if _cup_inside(disc, cup):
            return disc, cup
    # concentric scaled copy always fits since cdr < 1
    cup = EllipseParams(cx, cy, disc.a * cdr, disc.b * cdr, disc.angle)
    if not _cup_inside(disc, cup):
        raise SynthError(f"cup with CDR {cdr:.3f} cannot fit inside a disc of semi-axes {disc.a:.1f}x{disc.b:.1f}")
    return disc, cup


def render(rng, spec: SynthSpec, disc: EllipseParams, cup: EllipseParams) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    grey = spec.background + spec.texture * _smooth_texture(rng, spec.size)
    grey = grey + (spec.disc_level - spec.background) * _soft_region(disc, xx, yy, spec.disc_edge)
    grey = grey + (spec.cup_level - spec.disc_level) * _soft_region(cup, xx, yy, spec.cup_edge)
    grey = grey * (1.0 - spec.vessel_depth * _vessel_map(rng, spec, (disc.cx, disc.cy), xx, yy))
    rgb = grey[..., None] * np.array(CHANNEL_GAINS)
    rgb = rgb + spec.noise * rng.standard_normal(rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def _draw_cdr(rng, spec: SynthSpec, exclude=None) -> float:
    for _ in range(10000):
        cdr = rng.uniform(*spec.cdr_range)
        if exclude is None or not exclude[0] < cdr < exclude[1]:
            return cdr
    raise SynthError(f"no CDR in {spec.cdr_range} outside the excluded band {exclude}")


def make_sample(spec: SynthSpec, seed_seq, exclude=None) -> Sample:
    rng = np.random.default_rng(seed_seq)
    cdr_target = _draw_cdr(rng, spec, exclude)
    disc, cup = _draw_geometry(rng, spec, cdr_target)
    image = render(rng, spec, disc, cup)
    shape = (spec.size, spec.size)
    masks = SegMasks(disc.rasterize(shape), cup.rasterize(shape))
    cdr = vertical_diameter(cup) / vertical_diameter(disc)
    return Sample(image=image, masks=masks, center=(disc.cx, disc.cy), cdr=cdr, disc=disc, cup=cup)


def generate(spec: SynthSpec, n: int, exclude=None) -> list:
    """``n`` reproducible samples; sample i depends only on (spec.seed, i).

    ``exclude`` = (lo, hi) keeps generated CDRs out of that open interval.
    """
    if n < 0:
        raise SynthError(f"n must be non-negative, got {n}")
    seqs = np.random.SeedSequence(spec.seed).spawn(n)
    return [make_sample(spec, s, exclude) for s in seqs]


def labeled_screening_set(spec: SynthSpec, n: int, cdr_cutoff: float, margin: float = 0.0):
    """Samples labelled glaucomatous when CDR_G > ``cdr_cutoff``.

    With ``margin`` > 0 no generated CDR falls within ``margin`` of the cutoff.
    Returns (samples, labels, positive_fraction).
    """
    if not 0.0 <= cdr_cutoff <= 1.0:
        raise SynthError(f"cdr_cutoff must lie in [0, 1], got {cdr_cutoff}")
    exclude = (cdr_cutoff - margin, cdr_cutoff + margin) if margin > 0 else None
    samples = generate(spec, n, exclude)
    labels = np.array([int(s.cdr > cdr_cutoff) for s in samples], dtype=np.int64)
    for s, lab in zip(samples, labels):
        s.label = int(lab)
    frac = float(labels.mean()) if n else 0.0
    return samples, labels, frac
