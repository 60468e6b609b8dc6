"""Multi-label Dice loss, its gradient, and the side-output fusion objective.

Each class k contributes a smoothed Dice term

    term_k = 2 w_k (sum_i p_ki g_ki + eps) / (sum_i p_ki^2 + sum_i g_ki^2 + 2 eps)

and the loss is ``1 - sum_k term_k``. With eps > 0 a class that is empty in
both prediction and ground truth contributes a full ``w_k`` (perfect score)
instead of 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, _result

EPS = 1e-6


def _class_rows(a: np.ndarray) -> np.ndarray:
    """View a (K, N), (K, H, W) or (B, K, H, W) array as (K, N)."""
    a = np.asarray(a)
    if a.ndim == 4:
        return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)
    if a.ndim >= 2:
        return a.reshape(a.shape[0], -1)
    raise ShapeError(f"expected a class-first array, got shape {a.shape}")


def _check(p, g, w):
    p, g = np.asarray(p), np.asarray(g)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match ground truth shape {g.shape}")
    pk, gk = _class_rows(p), _class_rows(g)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (pk.shape[0],):
        raise ShapeError(f"{w.size} class weights for {pk.shape[0]} classes")
    return pk, gk, w


def dice_terms(p, g, w, eps: float = EPS) -> np.ndarray:
    """Weighted per-class Dice terms ``term_k``; the loss is ``1 - terms.sum()``."""
    pk, gk, w = _check(p, g, w)
    pk = pk.astype(np.float64)
    gk = gk.astype(np.float64)
    inter = (pk * gk).sum(axis=1)
    denom = (pk * pk).sum(axis=1) + (gk * gk).sum(axis=1)
    return 2.0 * w * (inter + eps) / (denom + 2.0 * eps)


def dice_multilabel_loss(p, g, w, eps: float = EPS) -> float:
    return float(1.0 - dice_terms(p, g, w, eps).sum())


def dice_loss_grad(p, g, w, eps: float = EPS) -> np.ndarray:
    """Gradient of :func:`dice_multilabel_loss` with respect to ``p`` (same shape as ``p``)."""
    pk, gk, w = _check(p, g, w)
    pk64 = pk.astype(np.float64)
    gk64 = gk.astype(np.float64)
    inter = (pk64 * gk64).sum(axis=1, keepdims=True) + eps
    denom = (pk64 * pk64).sum(axis=1, keepdims=True) + (gk64 * gk64).sum(axis=1, keepdims=True) + 2.0 * eps
    wk = w[:, None]
    grad = 2.0 * wk * (-gk64 / denom + 2.0 * pk64 * inter / denom ** 2)
    p = np.asarray(p)
    if p.ndim == 4:
        b, k, h, wd = p.shape
        return grad.reshape(k, b, h, wd).transpose(1, 0, 2, 3).astype(p.dtype)
    return grad.reshape(p.shape).astype(p.dtype)


def dice_loss(pred: Tensor, target, class_weights, eps: float = EPS) -> Tensor:
    """Differentiable Dice loss on a (B, K, H, W) probability tensor; scalar output.

    Gradients flow into ``pred`` only; the target is a constant.
    """
    target = np.asarray(target)
    value = dice_multilabel_loss(pred.data, target, class_weights, eps)

    def backward(gout):
        pred._accumulate(dice_loss_grad(pred.data, target, class_weights, eps) * gout.reshape(()))

    return _result(np.asarray(value, dtype=pred.dtype), (pred,), backward)


@dataclass
class LossReport:
    total: float
    per_side: list
    per_class: list
    fused: Optional[float] = None


def side_output_objective(
    side_maps: Sequence[Tensor],
    target,
    side_weights: Sequence[float],
    class_weights: Sequence[float],
    fused: Optional[Tensor] = None,
    fused_weight: float = 0.0,
    eps: float = EPS,
) -> tuple[Tensor, LossReport]:
    """Weighted sum of per-side Dice losses.

    Returns the scalar loss tensor (call ``.backward()`` on it) and a report.
    ``fused_weight`` > 0 adds a term on the mean-fused map as well; by default
    the fused map is prediction-only.
    """
    if len(side_maps) != len(side_weights):
        raise ShapeError(f"{len(side_maps)} side maps but {len(side_weights)} side weights")
    if fused_weight and fused is None:
        raise ValueError("fused_weight given without a fused map")
    target = np.asarray(target)
    losses = [dice_loss(m, target, class_weights, eps) for m in side_maps]
    per_side = [float(l.data) for l in losses]
    total_value = float(sum(a * v for a, v in zip(side_weights, per_side)))
    fused_loss = None
    if fused is not None:
        fused_loss = dice_multilabel_loss(fused.data, target, class_weights, eps)
        per_class_src = fused.data
    else:
        per_class_src = side_maps[-1].data
    unit = np.ones(len(class_weights))
    per_class = [float(1.0 - d) for d in dice_terms(per_class_src, target, unit, eps)]
    parents = list(losses)
    weights = list(side_weights)
    if fused_weight:
        parents.append(dice_loss(fused, target, class_weights, eps))
        weights.append(fused_weight)
        total_value += fused_weight * fused_loss
    dtype = side_maps[0].dtype

    def backward(gout):
        for a, l in zip(weights, parents):
            if l.requires_grad:
                l._accumulate(np.asarray(a * gout, dtype=dtype))

    total = _result(np.asarray(total_value, dtype=dtype), parents, backward)
    report = LossReport(total=total_value, per_side=per_side, per_class=per_class, fused=fused_loss)
    return total, report
