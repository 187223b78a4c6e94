"""Ray generation, stratified sampling, volume compositing, and its backward pass.

Compositing follows the classical emission-absorption model: with per-sample
densities sigma_k, colors c_k and segment lengths delta_k = t_{k+1} - t_k,

    C_hat = sum_k T_k * (1 - exp(-sigma_k * delta_k)) * c_k,
    T_k   = exp(-sum_{j<k} sigma_j * delta_j).

Transmittance uses the strictly-before-k prefix, so T_1 = 1. The last
segment's delta uses the far bound. Residual transmittance blends with a
constant background color (default black).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0


@dataclass
class PixelBatch:
    view_index: np.ndarray  # (B,)
    px: np.ndarray          # (B,) column index
    py: np.ndarray          # (B,) row index
    colors: np.ndarray      # (B, 3) ground truth in [0, 1]


@dataclass
class RayBatch:
    origins: np.ndarray     # (B, 3)
    directions: np.ndarray  # (B, 3) unit
    gt_colors: np.ndarray   # (B, 3)
    pixel_ids: np.ndarray   # (B,)


def sample_pixels(scene, batch_size: int, rng: np.random.Generator,
                  replace: bool = True) -> PixelBatch:
    """Uniformly sample pixels across every training view.

    With replace=False the batch must equal the total pixel count and covers
    every pixel exactly once (in permuted order).
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    n_views = len(scene.views)
    if n_views == 0:
        raise ValueError("scene has no training views")
    w, h = scene.camera.width, scene.camera.height
    total = n_views * w * h
    if replace:
        flat = rng.integers(0, total, size=batch_size)
    else:
        if batch_size != total:
            raise ValueError("without replacement, batch_size must equal the pixel count")
        flat = rng.permutation(total)
    view = flat // (w * h)
    rem = flat % (w * h)
    py, px = rem // w, rem % w
    images = np.stack([img for _, img in scene.views])
    colors = images[view, py, px]
    return PixelBatch(view.astype(np.int64), px.astype(np.int64), py.astype(np.int64),
                      colors)


def pixel_to_ray(camera: Camera, pose: np.ndarray, px, py):
    """Rays through pixel centers of a pinhole camera (looking down -z).

    px, py may be float; the landing point on the image plane is
    (px + 0.5, py + 0.5). Returns (origins (n,3), directions (n,3) unit).
    """
    pose = np.asarray(pose, dtype=np.float64)
    rot = pose[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-8:
        raise ValueError("singular pose matrix")
    px = np.atleast_1d(np.asarray(px, dtype=np.float64))
    py = np.atleast_1d(np.asarray(py, dtype=np.float64))
    d_cam = np.stack([
        (px + 0.5 - camera.cx) / camera.focal,
        -(py + 0.5 - camera.cy) / camera.focal,
        -np.ones_like(px),
    ], axis=1)
    d_world = d_cam @ rot.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose[:3, 3], d_world.shape).copy()
    return origins, d_world


def rays_for_batch(scene, batch: PixelBatch) -> RayBatch:
    origins = np.empty((len(batch.px), 3))
    dirs = np.empty_like(origins)
    for v in np.unique(batch.view_index):
        m = batch.view_index == v
        o, d = pixel_to_ray(scene.camera, scene.views[int(v)][0], batch.px[m], batch.py[m])
        origins[m], dirs[m] = o, d
    pixel_ids = batch.view_index * (scene.camera.width * scene.camera.height) \
        + batch.py * scene.camera.width + batch.px
    return RayBatch(origins, dirs, batch.colors, pixel_ids)


def sample_along_ray(near: float, far: float, n: int, rng: np.random.Generator | None = None,
                     stratified: bool = False, n_rays: int = 1) -> np.ndarray:
    """Distances t_1..t_n per ray, ascending. Stratified mode draws one uniform
    sample per equal sub-interval; deterministic mode uses midpoints."""
    if near >= far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    if n < 1:
        raise ValueError("need at least one sample")
    edges = np.linspace(near, far, n + 1)
    width = (far - near) / n
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((n_rays, n))
        return edges[:-1][None, :] + u * width
    mids = 0.5 * (edges[:-1] + edges[1:])
    return np.broadcast_to(mids, (n_rays, n)).copy()


@dataclass
class CompositeCache:
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray      # T_k, exclusive prefix
    trans_end: np.ndarray  # transmittance past the last sample
    background: np.ndarray


def composite(sigma: np.ndarray, color: np.ndarray, t: np.ndarray, far,
              background=None):
    """Predicted colors (B, 3) plus a cache for the backward pass.

    sigma (B, N) non-negative, color (B, N, 3), t (B, N) ascending, far either
    a scalar or per-ray (B,) bound supplying t_{N+1}.
    """
    sigma = np.atleast_2d(sigma)
    t = np.atleast_2d(t)
    color = np.asarray(color)
    if color.ndim == 2:
        color = color[None]
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if np.any(np.diff(t, axis=1) <= 0):
        raise ValueError("sample distances must be strictly increasing")
    far_arr = np.broadcast_to(np.asarray(far, dtype=t.dtype), (t.shape[0],))
    delta = np.concatenate([np.diff(t, axis=1), (far_arr - t[:, -1])[:, None]], axis=1)
    if background is None:
        background = np.zeros(3, dtype=sigma.dtype)
    background = np.asarray(background, dtype=sigma.dtype)
    s = sigma * delta
    csum = np.cumsum(s, axis=1)
    trans = np.exp(-(csum - s))          # exclusive prefix: T_1 = 1
    alpha = 1.0 - np.exp(-s)
    weights = trans * alpha
    trans_end = np.exp(-csum[:, -1])
    out = np.einsum("bn,bnc->bc", weights, color) + trans_end[:, None] * background
    cache = CompositeCache(t, delta, sigma, color, alpha, trans, trans_end, background)
    return out, cache


def composite_backward(cache: CompositeCache, d_out: np.ndarray):
    """Analytic gradients (dsigma (B,N), dcolor (B,N,3)) of composite."""
    d_out = np.atleast_2d(d_out)
    if d_out.shape[0] != cache.sigma.shape[0]:
        raise ValueError("upstream gradient batch does not match the cached forward")
    weights = cache.trans * cache.alpha
    dcolor = weights[:, :, None] * d_out[:, None, :]
    # u_k = w_k (c_k . dC); occluding sample k attenuates everything after it.
    u = weights * np.einsum("bnc,bc->bn", cache.color, d_out)
    suffix = np.cumsum(u[:, ::-1], axis=1)[:, ::-1] - u  # sum over j > k
    own = cache.trans * (1.0 - cache.alpha) * np.einsum("bnc,bc->bn", cache.color, d_out)
    bg_term = (cache.trans_end * (cache.background[None, :] * d_out).sum(axis=1))[:, None]
    dsigma = cache.delta * (own - suffix - bg_term)
    return dsigma, dcolor


def reconstruction_loss(predicted: np.ndarray, ground_truth: np.ndarray) -> float:
    """Total squared error over the batch."""
    predicted = np.asarray(predicted)
    ground_truth = np.asarray(ground_truth)
    if predicted.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {ground_truth.shape}")
    diff = predicted - ground_truth
    return float(np.sum(diff * diff))
