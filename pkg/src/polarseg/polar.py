"""Polar resampling of fundus images around the disc center.

Conventions
-----------
Image arrays are indexed ``[v, u]`` (row, column), optionally with a trailing
channel axis. A polar image has shape ``(radial_bins, angular_bins)``: row ``i``
samples radius ``r_i = i * R / radial_bins`` and column ``j`` samples angle
``theta_j = 2*pi*j / angular_bins``. The source point of ``(r, theta)`` is
``(u_o + r cos theta, v_o + r sin theta)``; because rows grow downward this turns
clockwise on screen. Samples that fall outside the source read as zero.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


class PolarConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolarConfig:
    center: tuple  # (u_o, v_o) in pixels: column, row
    radius: float = 400.0
    angular_bins: int = 400
    radial_bins: Optional[int] = None

    def __post_init__(self):
        if self.radius <= 0:
            raise PolarConfigError(f"radius must be positive, got {self.radius}")
        if self.angular_bins < 4:
            raise PolarConfigError(f"angular_bins must be >= 4, got {self.angular_bins}")
        if self.radial_bins is None:
            object.__setattr__(self, "radial_bins", int(round(self.radius)))
        if self.radial_bins < 1:
            raise PolarConfigError(f"radial_bins must be >= 1, got {self.radial_bins}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def shape(self) -> tuple:
        return (self.radial_bins, self.angular_bins)

    def check_inside(self, image_shape) -> None:
        h, w = image_shape[:2]
        u, v = self.center
        if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
            raise PolarConfigError(f"center {self.center} lies outside the {w}x{h} source image")

    def replace(self, **changes) -> "PolarConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PolarConfig":
        d = json.loads(text)
        return cls(center=tuple(d["center"]), radius=d["radius"],
                   angular_bins=d["angular_bins"], radial_bins=d["radial_bins"])


def _sample_bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples with zero padding outside the image."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((1, 1), (1, 1)) + ((0, 0),) * (image.ndim - 2))
    # shift into padded coordinates; clip so every sample beyond the border hits zeros
    r = np.clip(rows + 1.0, 0.0, h + 1.0)
    c = np.clip(cols + 1.0, 0.0, w + 1.0)
    r0 = np.minimum(np.floor(r).astype(np.intp), h)
    c0 = np.minimum(np.floor(c).astype(np.intp), w)
    fr = r - r0
    fc = c - c0
    if image.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    top = padded[r0, c0] * (1 - fc) + padded[r0, c0 + 1] * fc
    bot = padded[r0 + 1, c0] * (1 - fc) + padded[r0 + 1, c0 + 1] * fc
    return top * (1 - fr) + bot * fr


def _sample_nearest(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    ri = np.floor(rows + 0.5).astype(np.intp)
    ci = np.floor(cols + 0.5).astype(np.intp)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = image[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
    if image.ndim == 3:
        inside = inside[..., None]
    return np.where(inside, out, 0).astype(image.dtype)


def polar_grid(cfg: PolarConfig) -> tuple:
    """Source (row, col) coordinates of every polar pixel."""
    radii = np.arange(cfg.radial_bins) * (cfg.radius / cfg.radial_bins)
    thetas = np.arange(cfg.angular_bins) * (2.0 * math.pi / cfg.angular_bins)
    u_o, v_o = cfg.center
    rows = v_o + radii[:, None] * np.sin(thetas)[None, :]
    cols = u_o + radii[:, None] * np.cos(thetas)[None, :]
    return rows, cols


def to_polar(image: np.ndarray, cfg: PolarConfig, interpolation: str = "bilinear") -> np.ndarray:
    """Resample ``image`` onto the (radius, angle) grid of ``cfg``.

    For label masks use ``"mask"`` (bilinear, then >= 0.5) or ``"nearest"``;
    both keep the output binary. ``"mask"`` follows the smooth boundary rather
    than the pixel staircase, so nested convex regions stay radially ordered.
    """
    image = np.asarray(image)
    cfg.check_inside(image.shape)
    rows, cols = polar_grid(cfg)
    if interpolation == "mask":
        hit = _sample_bilinear(image.astype(np.float64), rows, cols) >= 0.5
        return hit if image.dtype == bool else hit.astype(image.dtype)
    if interpolation == "bilinear":
        return _sample_bilinear(image.astype(np.float64), rows, cols).astype(
            image.dtype if image.dtype.kind == "f" else np.float64)
    if interpolation == "nearest":
        return _sample_nearest(image, rows, cols)
    raise ValueError(f"unknown interpolation {interpolation!r}")


def to_cartesian(polar: np.ndarray, cfg: PolarConfig, out_shape, interpolation: str = "bilinear") -> np.ndarray:
    """Map a polar image back onto an ``out_shape`` = (height, width) Cartesian grid.

    Pixels farther than ``R`` from the center are zero. The angular axis wraps
    around; radii between the last row and ``R`` reuse the last row.
    """
    polar = np.asarray(polar)
    if polar.shape[:2] != cfg.shape:
        raise PolarConfigError(f"polar image shape {polar.shape[:2]} does not match config {cfg.shape}")
    h, w = out_shape[:2]
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    du = uu - cfg.center[0]
    dv = vv - cfg.center[1]
    r = np.hypot(du, dv)
    theta = np.mod(np.arctan2(dv, du), 2.0 * math.pi)
    ri = np.minimum(r * (cfg.radial_bins / cfg.radius), cfg.radial_bins - 1)
    ai = theta * (cfg.angular_bins / (2.0 * math.pi))
    nr, na = cfg.shape
    if interpolation == "nearest":
        r0 = np.minimum(np.floor(ri + 0.5).astype(np.intp), nr - 1)
        a0 = np.floor(ai + 0.5).astype(np.intp) % na
        out = polar[r0, a0]
    elif interpolation == "bilinear":
        src = polar.astype(np.float64)
        r0 = np.floor(ri).astype(np.intp)
        r1 = np.minimum(r0 + 1, nr - 1)
        fr = ri - r0
        a0f = np.floor(ai)
        fa = ai - a0f
        a0 = a0f.astype(np.intp) % na
        a1 = (a0 + 1) % na
        if src.ndim == 3:
            fr, fa = fr[..., None], fa[..., None]
        out = ((src[r0, a0] * (1 - fa) + src[r0, a1] * fa) * (1 - fr)
               + (src[r1, a0] * (1 - fa) + src[r1, a1] * fa) * fr)
        out = out.astype(polar.dtype if polar.dtype.kind == "f" else np.float64)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    outside = r > cfg.radius
    if out.ndim == 3:
        outside = outside[..., None]
    return np.where(outside, 0, out).astype(out.dtype)


def region_proportion(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        return 0.0
    return float(np.count_nonzero(mask)) / mask.size


def augment_polar(image: np.ndarray, cfg: PolarConfig, offset=(0.0, 0.0), scale: float = 1.0,
                  interpolation: str = "bilinear") -> np.ndarray:
    """Polar transform with the center moved by ``offset`` and the radius scaled by ``scale``.

    Moving the center acts as a drift crop and changing the radius as a zoom
    on the polar image, so augmentation happens inside the resampling itself.
    """
    if scale <= 0:
        raise PolarConfigError(f"scale must be positive, got {scale}")
    shifted = cfg.replace(center=(cfg.center[0] + offset[0], cfg.center[1] + offset[1]),
                          radius=cfg.radius * scale)
    return to_polar(image, shifted, interpolation)
