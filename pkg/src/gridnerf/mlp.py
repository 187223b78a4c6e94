"""The small feature network: 3 fully connected layers, 64 hidden units.

Input is the concatenated grid embedding plus a sinusoidally encoded view
direction; outputs are a softplus-activated density and a sigmoid-activated
RGB color. Forward and backward passes are written out by hand so the
gradient path stays inspectable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HIDDEN = 64
N_FREQUENCIES = 4
MLP_SECTION_TAG = b"MLP0"
# Density-head bias offset: softplus(-3) ~ 0.05, so space starts almost empty.
# Starting from fog (softplus(0) ~ 0.7 everywhere) occludes every ray and
# stalls the early iterations.
DENSITY_BIAS_INIT = -3.0


def encode_direction(dirs: np.ndarray, n_freq: int = N_FREQUENCIES) -> np.ndarray:
    """Sinusoidal features [sin(2^k d), cos(2^k d)] per axis, k < n_freq -> (n, 6*n_freq)."""
    dirs = np.atleast_2d(dirs)
    freqs = 2.0 ** np.arange(n_freq)
    ang = dirs[:, None, :] * freqs[None, :, None]  # (n, n_freq, 3)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)
    return enc.reshape(dirs.shape[0], 6 * n_freq)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def create(cls, embedding_dim: int, seed: int = 0, hidden: int = HIDDEN,
               n_freq: int = N_FREQUENCIES, dtype=np.float32) -> "MlpParams":
        """Uniform +-sqrt(6/(fan_in+fan_out)) initialization with a fixed seed."""
        rng = np.random.default_rng(seed)
        in_dim = embedding_dim + 6 * n_freq

        def layer(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            return w, np.zeros(fan_out, dtype=dtype)

        w1, b1 = layer(in_dim, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, 4)  # density + 3 color channels
        b3[0] = DENSITY_BIAS_INIT
        return cls(w1, b1, w2, b2, w3, b3)

    @property
    def embedding_dim(self) -> int:
        return self.w1.shape[0] - self.encoded_dir_dim

    @property
    def encoded_dir_dim(self) -> int:
        # Layer shapes pin the split; the encoding width is fixed at build time.
        return 6 * N_FREQUENCIES

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def layer_dims(self):
        """[(in, out)] per matmul, for the accelerator cycle model."""
        return [(self.w1.shape[0], self.w1.shape[1]),
                (self.w2.shape[0], self.w2.shape[1]),
                (self.w3.shape[0], self.w3.shape[1])]


@dataclass
class MlpGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class MlpCache:
    params: MlpParams
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    z3: np.ndarray
    sigma: np.ndarray
    color: np.ndarray


def mlp_forward(params: MlpParams, embedding: np.ndarray, direction: np.ndarray,
                check: bool = True):
    """(sigma, color, cache) for embeddings (n, E) and unit directions (n, 3)."""
    embedding = np.atleast_2d(embedding)
    direction = np.atleast_2d(direction)
    if check:
        if not (np.all(np.isfinite(embedding)) and np.all(np.isfinite(direction))):
            raise ValueError("non-finite MLP inputs")
        norms = np.linalg.norm(direction, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("directions must be unit vectors")
    x = np.concatenate([embedding, encode_direction(direction)], axis=1)
    z1 = x @ params.w1 + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.w2 + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ params.w3 + params.b3
    sigma = _softplus(z3[:, 0])
    color = _sigmoid(z3[:, 1:])
    cache = MlpCache(params, x, z1, a1, z2, a2, z3, sigma, color)
    return sigma, color, cache


def mlp_backward(params: MlpParams, cache: MlpCache, dsigma: np.ndarray,
                 dcolor: np.ndarray):
    """Gradients for all parameters and for the input embedding.

    The cache must come from a forward pass with these same params.
    """
    if cache.params is not params:
        raise ValueError("stale cache: forward was run with different parameters")
    dsigma = np.atleast_1d(dsigma)
    dcolor = np.atleast_2d(dcolor)
    dz3 = np.empty_like(cache.z3)
    dz3[:, 0] = dsigma * _sigmoid(cache.z3[:, 0])        # d softplus
    dz3[:, 1:] = dcolor * cache.color * (1.0 - cache.color)  # d sigmoid
    dw3 = cache.a2.T @ dz3
    db3 = dz3.sum(axis=0)
    da2 = dz3 @ params.w3.T
    dz2 = da2 * (cache.z2 > 0)
    dw2 = cache.a1.T @ dz2
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ params.w2.T
    dz1 = da1 * (cache.z1 > 0)
    dw1 = cache.x.T @ dz1
    db1 = dz1.sum(axis=0)
    dx = dz1 @ params.w1.T
    dembedding = dx[:, : params.w1.shape[0] - 6 * N_FREQUENCIES]
    return MlpGrads(dw1, db1, dw2, db2, dw3, db3), dembedding


def save_mlp(fh, params: MlpParams):
    """Append the MLP checkpoint section: tag, array count, then (rows, cols, f4 data)."""
    fh.write(MLP_SECTION_TAG)
    arrays = params.arrays()
    fh.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a2 = np.atleast_2d(a).astype("<f4")
        fh.write(struct.pack("<II", a2.shape[0], a2.shape[1]))
        fh.write(a2.tobytes())


def load_mlp(fh) -> MlpParams:
    tag = fh.read(4)
    if tag != MLP_SECTION_TAG:
        raise ValueError(f"bad MLP section tag {tag!r}")
    (count,) = struct.unpack("<I", fh.read(4))
    arrays = []
    for _ in range(count):
        rows, cols = struct.unpack("<II", fh.read(8))
        raw = fh.read(rows * cols * 4)
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(rows, cols))
    w1, b1, w2, b2, w3, b3 = arrays
    return MlpParams(w1, b1.ravel(), w2, b2.ravel(), w3, b3.ravel())
