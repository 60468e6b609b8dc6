"""Independent reference computations used to check the package.

Nothing here imports the code paths under test beyond plain data containers.
"""

from collections import deque
from itertools import product

import numpy as np


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at float64 ``x`` (perturbed in place, restored)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def direct_conv(x, w, stride=1, pad=0):
    """Quadruple-loop cross-correlation with symmetric zero padding."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n, k, i, j in product(range(b), range(o), range(ho), range(wo)):
        patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
        out[n, k, i, j] = np.sum(patch * w[k])
    return out


def dice_coefficient(pred, truth) -> float:
    """Plain 2·Σpg / (Σp² + Σg²) with explicit loops."""
    num = den_p = den_g = 0.0
    for p, g in zip(np.ravel(pred), np.ravel(truth)):
        num += p * g
        den_p += p * p
        den_g += g * g
    return 2.0 * num / (den_p + den_g)


def flood_fill_components(mask) -> list:
    """8-connected components as lists of (row, col), found by breadth-first search."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            comp, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                comp.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            comps.append(comp)
    return comps


def pairwise_auc(scores, labels) -> float:
    """Mann-Whitney: fraction of (positive, negative) pairs ranked correctly, ties count 1/2."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    count = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                count += 1.0
            elif p == n:
                count += 0.5
    return count / (len(pos) * len(neg))


def psnr(a, b, peak=1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak ** 2 / mse)
