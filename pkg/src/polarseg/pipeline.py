"""End-to-end glue: polar preparation of training pairs and image segmentation."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .evaluation import EvalRecord, evaluate_case
from .model import LayerGraph, predict
from .polar import PolarConfig, to_cartesian, to_polar
from .postprocess import Geometry, extract_geometry


@dataclass(frozen=True)
class PolarSetup:
    """How Cartesian ROIs are mapped to network inputs.

    ``radius=None`` uses half the ROI side. With ``enabled=False`` the network
    sees the Cartesian ROI directly.
    """

    enabled: bool = True
    size: int = 128
    radius: Optional[float] = None

    def config(self, center, roi_shape) -> PolarConfig:
        radius = self.radius if self.radius is not None else min(roi_shape[:2]) / 2.0
        return PolarConfig(center=tuple(center), radius=radius, angular_bins=self.size, radial_bins=self.size)


def estimate_disc_center(image: np.ndarray, blur: int = 5, top_fraction: float = 0.02) -> tuple:
    """Centroid (u, v) of the brightest ``top_fraction`` of pixels after a box blur.

    A stand-in for a real disc detector; good enough for bright synthetic discs.
    """
    grey = np.asarray(image, dtype=np.float64)
    if grey.ndim == 3:
        grey = grey.mean(axis=2)
    smooth = ndimage.uniform_filter(grey, size=blur, mode="nearest")
    cut = np.quantile(smooth, 1.0 - top_fraction)
    vs, us = np.nonzero(smooth >= cut)
    return float(us.mean()), float(vs.mean())


def network_input(image: np.ndarray, center, setup: PolarSetup) -> np.ndarray:
    """(C, H, W) float32 network input for an (H, W, C) ROI."""
    image = np.asarray(image, dtype=np.float32)
    if setup.enabled:
        image = to_polar(image, setup.config(center, image.shape))
    elif image.shape[:2] != (setup.size, setup.size):
        raise ValueError(f"ROI of shape {image.shape[:2]} does not match network size {setup.size}")
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32)


def network_target(masks, center, setup: PolarSetup) -> np.ndarray:
    """(2, H, W) float32 multi-label target: channel 0 disc, channel 1 cup."""
    target = masks.stack()
    if setup.enabled:
        cfg = setup.config(center, masks.grid)
        target = np.stack([to_polar(t, cfg, interpolation="mask") for t in target])
    return np.ascontiguousarray(target, dtype=np.float32)


def training_pairs(samples, setup: PolarSetup) -> list:
    return [(network_input(s.image, s.center, setup), network_target(s.masks, s.center, setup))
            for s in samples]


@dataclass
class Segmentation:
    prob: np.ndarray        # (2, H, W) Cartesian probabilities
    geometry: Geometry
    seconds: float


def segment(graph: LayerGraph, image: np.ndarray, center, setup: PolarSetup, threshold: float = 0.5) -> Segmentation:
    """Polar transform, network, inverse transform, then clinical geometry."""
    t0 = time.perf_counter()
    x = network_input(image, center, setup)
    prob = predict(graph, x)
    if setup.enabled:
        cfg = setup.config(center, image.shape)
        # back-project probabilities before thresholding so edges interpolate smoothly
        prob = to_cartesian(prob.transpose(1, 2, 0), cfg, image.shape[:2]).transpose(2, 0, 1)
    geometry = extract_geometry(prob, threshold)
    return Segmentation(prob=prob, geometry=geometry, seconds=time.perf_counter() - t0)


def evaluate_sample(name: str, seg: Segmentation, masks, cdr_g: float, use_raw: bool = False) -> EvalRecord:
    pred = seg.geometry.raw if use_raw else seg.geometry.masks
    cdr_s = seg.geometry.cdr if np.isfinite(seg.geometry.cdr) else 0.0
    return evaluate_case(name, pred.disc, pred.cup, masks.disc, masks.cup, cdr_s, cdr_g)
