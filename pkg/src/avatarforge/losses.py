"""Training objectives and image metrics.

Image-space losses are mean-reduced; the Laplacian energy is a plain sum over
vertices. Every loss accepts Tensors (for training) or arrays (for metrics)
and returns the same kind.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .mesh import unique_edges, weld_map

LOSS_NAMES = ("img", "mask", "normal", "part", "lap")
PAPER_LAMBDAS = {"img": 1.0, "mask": 1.0, "normal": 1.0, "part": 0.5, "lap": 2.0}
PYRAMID_LEVELS = 3
PSNR_CAP = 99.0
METRIC_COLUMNS = ("step", "L_img", "L_mask", "L_normal", "L_part", "L_lap", "L_total", "psnr", "ssim")


def _t(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _out(value: Tensor, keep_tensor: bool):
    return value if keep_tensor else float(value.data)


def _same_shape(a, b, op):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")


def _weighted_mse(a: Tensor, b: Tensor, w: np.ndarray) -> Tensor:
    """sum(w * (a - b)^2) / (sum(w) * C) with per-pixel weights ``w`` (H x W)."""
    C = a.shape[2]
    total = float(w.sum()) * C
    if total == 0:
        return Tensor(np.zeros((), dtype=a.dtype))
    W = Tensor(np.repeat(w[..., None], C, axis=2).astype(a.dtype))
    d = a - b
    return ad.scale(ad.tsum(d * d * W), 1.0 / total)


def loss_img(rendered, target, mask=None):
    """Masked MSE plus a 3-level average-pool pyramid MSE (perceptual stand-in).

    Each pyramid level pools the masked images and weights texels by the
    pooled mask coverage.
    """
    keep = isinstance(rendered, Tensor)
    a, b = _t(rendered), _t(target, rendered)
    _same_shape(a, b, "loss_img")
    H, W, C = a.shape
    m = np.ones((H, W)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(H, W)
    total = _weighted_mse(a, b, m)
    M = Tensor(np.repeat(m[..., None], C, axis=2).astype(a.dtype))
    am, bm = a * M, b * M
    for s in range(1, PYRAMID_LEVELS + 1):
        k = 2**s
        if H % k or W % k:
            raise ShapeError(f"loss_img: {H}x{W} image is not divisible by pyramid factor {k}")
        ws = m.reshape(H // k, k, W // k, k).mean(axis=(1, 3))
        pa, pb = ad.avg_pool(am, k), ad.avg_pool(bm, k)
        if mask is not None:
            # undo the coverage dilution so partially covered cells are not biased to 0
            inv = np.where(ws > 0, 1.0 / np.where(ws > 0, ws, 1.0), 0.0)
            Inv = Tensor(np.repeat(inv[..., None], C, axis=2).astype(a.dtype))
            pa, pb = pa * Inv, pb * Inv
        total = total + _weighted_mse(pa, pb, ws)
    return _out(total, keep)


def loss_mask(rendered, target):
    """Full-frame mean squared silhouette difference."""
    keep = isinstance(rendered, Tensor)
    a, b = _t(rendered), _t(target, rendered)
    _same_shape(a, b, "loss_mask")
    return _out(ad.mse(a, b), keep)


def loss_normal(rendered, target, mask):
    """Per-pixel squared normal difference summed over xyz, averaged over the mask."""
    keep = isinstance(rendered, Tensor)
    a, b = _t(rendered), _t(target, rendered)
    _same_shape(a, b, "loss_normal")
    m = np.asarray(mask, dtype=np.float64).reshape(a.shape[:2])
    n = float(m.sum())
    if n == 0:
        return _out(Tensor(np.zeros((), dtype=a.dtype)), keep)
    Wm = Tensor(np.repeat(m[..., None], a.shape[2], axis=2).astype(a.dtype))
    d = a - b
    return _out(ad.scale(ad.tsum(d * d * Wm), 1.0 / n), keep)


def loss_part(rendered, target):
    """Mean squared error over every pixel and part channel."""
    keep = isinstance(rendered, Tensor)
    a, b = _t(rendered), _t(target, rendered)
    _same_shape(a, b, "loss_part")
    return _out(ad.mse(a, b), keep)


def laplacian_operator(vertices: np.ndarray, faces: np.ndarray, weld: bool = True):
    """Uniform umbrella operator ``L`` (groups x N) with ``(L V)_i = v_i - mean(one-ring)``.

    With ``weld`` coincident vertices (UV-seam copies) count as one vertex and
    contribute once. Vertices without neighbours get a zero row.
    """
    n = len(vertices)
    if weld:
        rep, group = weld_map(vertices)
    else:
        rep, group = np.arange(n), np.arange(n)
    g = len(rep)
    edges, _ = unique_edges(group[np.asarray(faces)])
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(g, g))
    A.data[:] = 1.0
    deg = np.asarray(A.sum(axis=1)).reshape(-1)
    isolated = deg == 0
    inv = np.where(isolated, 0.0, 1.0 / np.where(isolated, 1.0, deg))
    L = sp.diags((~isolated).astype(np.float64)) - sp.diags(inv) @ A
    pick = sp.csr_matrix((np.ones(g), (np.arange(g), rep)), shape=(g, n))
    return (L @ pick).tocsr(), isolated


def loss_laplacian(vertices, faces, weld: bool = True):
    """sum_i || v_i - mean_{j in N(i)} v_j ||^2 (isolated vertices excluded with a warning)."""
    keep = isinstance(vertices, Tensor)
    V = _t(vertices)
    L, isolated = laplacian_operator(V.data, faces, weld)
    if isolated.any():
        warnings.warn(f"loss_laplacian: {int(isolated.sum())} isolated vertices excluded", stacklevel=2)
    d = ad.sparse_matmul(L, V)
    return _out(ad.tsum(d * d), keep)


def combine_losses(terms: dict, lambdas: dict | None = None):
    """lambda-weighted sum of the five per-iteration terms."""
    lambdas = PAPER_LAMBDAS if lambdas is None else lambdas
    unknown = set(terms) - set(LOSS_NAMES)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = None
    for name in LOSS_NAMES:
        if name not in terms:
            continue
        lam = float(lambdas[name])
        v = terms[name]
        if isinstance(v, Tensor):
            part = ad.scale(v, lam)
        else:
            part = lam * float(v)
        total = part if total is None else total + part
    return 0.0 if total is None else total


def per_iteration_loss(render: dict, gt: dict, lambdas: dict | None = None):
    """L_t and its named terms.

    ``render`` holds ``image``, ``mask``, ``normal``, ``part``, ``vertices``
    and ``faces``; ``gt`` holds ``image``, ``mask``, ``normal`` and ``part``.
    Image and normal terms are restricted to the ground-truth head mask; mask
    and part terms compare full frames.
    """
    terms = {
        "img": loss_img(render["image"], gt["image"], gt["mask"]),
        "mask": loss_mask(render["mask"], gt["mask"]),
        "normal": loss_normal(render["normal"], gt["normal"], gt["mask"]),
        "part": loss_part(render["part"], gt["part"]),
        "lap": loss_laplacian(render["vertices"], render["faces"]),
    }
    return combine_losses(terms, lambdas), terms


def total_loss(per_iteration, gamma: float, N: int | None = None):
    """sum_{t=1..N} gamma^(N - t) L_t: later iterations weigh more."""
    per_iteration = list(per_iteration)
    N = len(per_iteration) if N is None else N
    if len(per_iteration) != N:
        raise ValueError(f"expected {N} per-iteration losses, got {len(per_iteration)}")
    if N < 1:
        raise ValueError("total_loss needs at least one iteration")
    total = None
    for t, L in enumerate(per_iteration, start=1):
        w = gamma ** (N - t)
        term = ad.scale(L, w) if isinstance(L, Tensor) else w * float(L)
        total = term if total is None else total + term
    return total


# -- metrics ------------------------------------------------------------------------

def _masked(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric: shapes {a.shape} and {b.shape} do not conform")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    m = np.ones(a.shape[:2], dtype=bool) if mask is None else np.asarray(mask).reshape(a.shape[:2]) > 0
    return a, b, m


def psnr(a, b, mask=None) -> float:
    """Peak-1 PSNR over masked pixels, capped at 99 dB for identical inputs."""
    a, b, m = _masked(a, b, mask)
    if not m.any():
        return PSNR_CAP
    err = float(((a - b)[m] ** 2).mean())
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(a, b, mask=None, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid (unpadded) windows whose centre lies in the mask."""
    a, b, m = _masked(a, b, mask)
    H, W, C = a.shape
    if H < size or W < size:
        raise ShapeError(f"ssim needs images of at least {size}x{size}, got {H}x{W}")
    g = gaussian_window(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    r = size // 2

    def blur(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r : H - r, r : W - r]

    vals = []
    for c in range(C):
        x, y = a[..., c], b[..., c]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s)
    smap = np.stack(vals, axis=-1)
    mc = m[r : H - r, r : W - r]
    if not mc.any():
        return 1.0
    return float(smap[mc].mean())


def write_metrics(rows, path) -> None:
    """``metrics.csv`` with the fixed column order."""
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
