"""From probability maps to clinical geometry: masks, ellipses, CDR and RDAR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class EllipseFitError(ValueError):
    pass


@dataclass(frozen=True)
class SegMasks:
    disc: np.ndarray
    cup: np.ndarray

    def __post_init__(self):
        if self.disc.shape != self.cup.shape:
            raise ValueError(f"disc mask {self.disc.shape} and cup mask {self.cup.shape} differ in shape")
        object.__setattr__(self, "disc", np.asarray(self.disc, dtype=bool))
        object.__setattr__(self, "cup", np.asarray(self.cup, dtype=bool))

    @property
    def grid(self) -> tuple:
        return self.disc.shape

    def stack(self) -> np.ndarray:
        """(2, H, W) float32 target in class order (disc, cup)."""
        return np.stack([self.disc, self.cup]).astype(np.float32)


@dataclass(frozen=True)
class EllipseParams:
    """Ellipse in pixel coordinates: x is the column, y the row.

    ``angle`` is the direction of the major axis measured from +x toward +y,
    reduced to [0, pi).
    """

    cx: float
    cy: float
    a: float
    b: float
    angle: float

    def __post_init__(self):
        a, b, phi = float(self.a), float(self.b), float(self.angle)
        if b > a:
            a, b, phi = b, a, phi + math.pi / 2
        if not b > 0:
            raise EllipseFitError(f"semi-axes must be positive, got a={a}, b={b}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "angle", math.fmod(phi, math.pi) % math.pi)

    def as_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "angle": self.angle}

    def contains(self, x, y) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = np.asarray(x) - self.cx, np.asarray(y) - self.cy
        along = dx * c + dy * s
        across = -dx * s + dy * c
        return (along / self.a) ** 2 + (across / self.b) ** 2 <= 1.0

    def rasterize(self, shape) -> np.ndarray:
        """Boolean mask of pixels whose centers lie inside the ellipse."""
        yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
        return self.contains(xx, yy)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where ``prob >= threshold`` (ties count as foreground)."""
    return np.asarray(prob) >= threshold


_EIGHT = np.ones((3, 3), dtype=bool)


def largest_connected_component(mask: np.ndarray) -> np.ndarray:
    """Keep the 8-connected component with the most pixels.

    Equal-sized components are resolved in favour of the one whose first pixel
    comes first in row-major order.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def boundary_pixels(mask: np.ndarray) -> tuple:
    """(x, y) of foreground pixels with at least one background 4-neighbour."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    edge = mask & ~interior
    ys, xs = np.nonzero(edge)
    return xs.astype(np.float64), ys.astype(np.float64)


def fit_ellipse_points(x, y) -> EllipseParams:
    """Direct least-squares ellipse fit (ellipse-specific constraint 4ac - b^2 = 1).

    Uses the numerically stable split of the scatter matrix into quadratic and
    linear blocks, on centred and scaled coordinates.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size < 6:
        raise EllipseFitError(f"need at least 6 points for an ellipse fit, got {x.size}")
    mx, my = x.mean(), y.mean()
    scale = max(np.sqrt(((x - mx) ** 2 + (y - my) ** 2).mean()), 1e-12)
    xs, ys = (x - mx) / scale, (y - my) / scale

    d1 = np.column_stack([xs * xs, xs * ys, ys * ys])
    d2 = np.column_stack([xs, ys, np.ones_like(xs)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise EllipseFitError("degenerate point set (collinear or repeated points)") from None
    m = s1 + s2 @ t
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    good = np.nonzero(cond > 0)[0]
    if good.size == 0:
        raise EllipseFitError("no elliptical solution for the point set")
    a1 = evecs[:, good[0]]
    conic = np.concatenate([a1, t @ a1])
    return conic_to_params(conic, (mx, my), scale)


def conic_to_params(conic, shift=(0.0, 0.0), scale: float = 1.0) -> EllipseParams:
    """Geometric parameters of ``A x^2 + B xy + C y^2 + D x + E y + F = 0``.

    ``shift``/``scale`` undo a normalisation x_norm = (x - shift) / scale.
    """
    A, B, C, D, E, F = conic
    M = np.array([[2 * A, B], [B, 2 * C]])
    det = 4 * A * C - B * B
    if det <= 0:
        raise EllipseFitError("conic is not an ellipse")
    x0, y0 = np.linalg.solve(M, [-D, -E])
    f0 = F + (D * x0 + E * y0) / 2.0
    q = np.array([[A, B / 2.0], [B / 2.0, C]])
    lam, vec = np.linalg.eigh(q)
    if f0 == 0 or np.any(-f0 / lam <= 0):
        raise EllipseFitError("conic does not describe a real ellipse")
    axes = np.sqrt(-f0 / lam)
    major = int(np.argmax(axes))
    direction = vec[:, major]
    angle = math.atan2(direction[1], direction[0])
    return EllipseParams(
        cx=float(x0 * scale + shift[0]),
        cy=float(y0 * scale + shift[1]),
        a=float(axes[major] * scale),
        b=float(axes[1 - major] * scale),
        angle=angle,
    )


def fit_ellipse(mask: np.ndarray) -> EllipseParams:
    """Fit an ellipse to the boundary pixels of a binary region."""
    x, y = boundary_pixels(mask)
    if x.size < 6:
        raise EllipseFitError(f"region has {x.size} boundary pixels, at least 6 needed")
    return fit_ellipse_points(x, y)


def vertical_diameter(e: EllipseParams) -> float:
    """Full extent of the ellipse along the image rows."""
    s, c = math.sin(e.angle), math.cos(e.angle)
    return 2.0 * math.sqrt((e.a * s) ** 2 + (e.b * c) ** 2)


def compute_cdr(disc: EllipseParams, cup) -> float:
    """Vertical cup-to-disc ratio; ``cup=None`` (no cup found) gives 0."""
    vdd = vertical_diameter(disc)
    if vdd <= 0:
        raise ValueError("vertical disc diameter is zero")
    if cup is None:
        return 0.0
    return vertical_diameter(cup) / vdd


def compute_rdar(disc: np.ndarray, cup: np.ndarray) -> float:
    """Rim-to-disc area ratio |disc \\ cup| / |disc|."""
    disc = np.asarray(disc, dtype=bool)
    cup = np.asarray(cup, dtype=bool)
    area = np.count_nonzero(disc)
    if area == 0:
        raise ValueError("disc mask is empty; RDAR undefined")
    return np.count_nonzero(disc & ~cup) / area


@dataclass
class Geometry:
    """Per-image clinical record produced from a fused probability map."""

    masks: SegMasks
    raw: SegMasks
    disc: object  # EllipseParams or None
    cup: object
    cdr: float
    rdar: float
    cup_missing: bool
    cup_outside_disc: bool


def _region_ellipse(mask):
    comp = largest_connected_component(mask)
    if not comp.any():
        return comp, None
    try:
        return comp, fit_ellipse(comp)
    except EllipseFitError:
        return comp, None


def extract_geometry(prob: np.ndarray, threshold: float = 0.5) -> Geometry:
    """Threshold, keep the largest region, fit ellipses, derive CDR and RDAR.

    ``prob`` is a (2, H, W) map in class order (disc, cup). The cup ellipse is
    not clipped to the disc; ``cup_outside_disc`` flags when it pokes out.
    """
    disc_raw, cup_raw = binarize(prob[0], threshold), binarize(prob[1], threshold)
    disc_cc, disc_e = _region_ellipse(disc_raw)
    cup_cc, cup_e = _region_ellipse(cup_raw)
    shape = prob.shape[1:]
    disc_mask = disc_e.rasterize(shape) if disc_e is not None else disc_cc
    cup_mask = cup_e.rasterize(shape) if cup_e is not None else cup_cc
    if disc_e is None:
        cdr = float("nan")
    else:
        cdr = compute_cdr(disc_e, cup_e)
    rdar = compute_rdar(disc_mask, cup_mask) if disc_mask.any() else float("nan")
    return Geometry(
        masks=SegMasks(disc_mask, cup_mask),
        raw=SegMasks(disc_cc, cup_cc),
        disc=disc_e,
        cup=cup_e,
        cdr=cdr,
        rdar=rdar,
        cup_missing=cup_e is None,
        cup_outside_disc=bool(np.any(cup_mask & ~disc_mask)),
    )
