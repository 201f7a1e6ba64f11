"""Latent-space distances.

d_hat is the sqrt-form diffuse metric sqrt(|a|^2 + |b|^2 - a.b): symmetric,
triangle-obeying, with self-distance equal to the vector norm. iqe is the
asymmetric interval quasimetric built from per-component interval unions.
The angular, cosine, and L1 distances are the baselines d_hat replaces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class IqeShape:
    """Reshape spec for the interval quasimetric: k components of l intervals,
    mixed by alpha*max + (1-alpha)*mean."""

    k: int
    l: int
    alpha: float

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ValueError(f"k and l must be positive, got k={self.k}, l={self.l}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def dim(self) -> int:
        return self.k * self.l


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def d_hat_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise d_hat over the last axis; the radicand is clamped at 0 to
    absorb round-off (it is analytically non-negative)."""
    a, b = _pair(a, b)
    rad = (np.sum(a * a, axis=-1) + np.sum(b * b, axis=-1)
           - np.sum(a * b, axis=-1))
    return np.sqrt(np.maximum(rad, 0.0))


def d_hat(a, b) -> float:
    """sqrt(|a|^2 + |b|^2 - a.b); self-distance is |a|."""
    return float(d_hat_rows(np.atleast_1d(a), np.atleast_1d(b)))


def mico_angular(a, b, beta: float = 0.1) -> float:
    """(|a|^2 + |b|^2)/2 + beta * angle(a, b), the angular behavioral-metric
    approximation. The zero-vector angle is defined as 0."""
    a, b = _pair(np.atleast_1d(a), np.atleast_1d(b))
    na = float(np.dot(a, a))
    nb = float(np.dot(b, b))
    denom = np.sqrt(na) * np.sqrt(nb)
    if denom == 0.0:
        theta = 0.0
    else:
        cos = float(np.dot(a, b)) / denom
        theta = float(np.arccos(np.clip(cos, -1.0, 1.0)))
    return 0.5 * (na + nb) + beta * theta


def cosine_distance(a, b) -> float:
    """1 - cos(angle), in [0, 2]; zero vectors are rejected."""
    a, b = _pair(np.atleast_1d(a), np.atleast_1d(b))
    na = float(np.dot(a, a))
    nb = float(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero vectors")
    cos = float(np.dot(a, b)) / np.sqrt(na * nb)
    return 1.0 - float(np.clip(cos, -1.0, 1.0))


def l1_distance(a, b) -> float:
    a, b = _pair(np.atleast_1d(a), np.atleast_1d(b))
    return float(np.sum(np.abs(a - b)))


def interval_union_lengths(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Lengths of union_j [starts[..., j], ends[..., j]] along the last axis,
    by sorting interval starts and sweeping; requires ends >= starts."""
    order = np.argsort(starts, axis=-1, kind="stable")
    s = np.take_along_axis(starts, order, axis=-1)
    e = np.take_along_axis(ends, order, axis=-1)
    running = np.maximum.accumulate(e, axis=-1)
    prev = np.concatenate([s[..., :1], running[..., :-1]], axis=-1)
    return np.clip(e - np.maximum(s, prev), 0.0, None).sum(axis=-1)


def iqe_rows(a: np.ndarray, b: np.ndarray, shape: IqeShape) -> np.ndarray:
    """Row-wise interval quasimetric over the last axis (length k*l)."""
    a, b = _pair(a, b)
    if a.shape[-1] != shape.dim:
        raise ValueError(f"last axis has length {a.shape[-1]}, "
                         f"expected k*l = {shape.dim}")
    starts = a.reshape(a.shape[:-1] + (shape.k, shape.l))
    ends = np.maximum(starts, b.reshape(starts.shape))
    comp = interval_union_lengths(starts, ends)
    return shape.alpha * comp.max(axis=-1) + (1.0 - shape.alpha) * comp.mean(axis=-1)


def iqe(a, b, shape: IqeShape) -> float:
    """Interval quasimetric: per component i the length of
    union_j [a_ij, max(a_ij, b_ij)], mixed as alpha*max + (1-alpha)*mean.
    Asymmetric; zero self-distance."""
    return float(iqe_rows(np.atleast_1d(a), np.atleast_1d(b), shape))
