"""Key-point orderings (space-filling curves, nearest-neighbour chain, random)
and the partition of sorted key points into equal groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, SizeError

METHODS = ("random", "knn", "z_order", "trans_z_order", "hilbert")


@dataclass(frozen=True)
class OrderingResult:
    """``permutation[j]`` is the original index of the point at sorted position j."""

    permutation: np.ndarray
    inverse: np.ndarray
    method: str
    k: int

    @property
    def n(self) -> int:
        return len(self.permutation)

    @property
    def m(self) -> int:
        return self.n // self.k

    def groups(self) -> list[np.ndarray]:
        """Original indices of each group, in sorted order."""
        return [self.permutation[i * self.m:(i + 1) * self.m] for i in range(self.k)]


def quantize(points: np.ndarray, bounds, bits: int) -> np.ndarray:
    """Map coordinates to integer cells in ``[0, 2**bits)`` per axis."""
    if not 1 <= bits <= 21:
        raise RangeError(f"bits must be in [1, 21], got {bits}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(pts < lo) or np.any(pts > hi):
        raise RangeError("point outside quantization bounds")
    levels = 1 << bits
    extent = hi - lo
    safe = np.where(extent > 0, extent, 1.0)
    q = np.floor((pts - lo) / safe * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def interleave(cells: np.ndarray, bits: int, axes=(0, 1, 2)) -> np.ndarray:
    """Interleave per-axis bits from the most significant down, in ``axes`` order."""
    cells = np.atleast_2d(cells)
    code = np.zeros(cells.shape[0], dtype=np.int64)
    for b in range(bits - 1, -1, -1):
        for a in axes:
            code = (code << 1) | ((cells[:, a] >> b) & 1)
    return code


def z_order_key(point, bounds, bits: int = 10, axes=(0, 1, 2)):
    """Morton code of one point (int) or of an (N, 3) array (int64 array)."""
    single = np.ndim(point) == 1
    codes = interleave(quantize(point, bounds, bits), bits, axes)
    return int(codes[0]) if single else codes


def hilbert_key(cells: np.ndarray, bits: int) -> np.ndarray:
    """3-D Hilbert index of integer cells (Skilling's transpose algorithm)."""
    x = np.array(np.atleast_2d(cells), dtype=np.int64, copy=True)
    ndim = x.shape[1]
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(ndim):
            hit = (x[:, i] & q) != 0
            x[hit, 0] ^= p
            t = (x[~hit, 0] ^ x[~hit, i]) & p
            x[~hit, 0] ^= t
            x[~hit, i] ^= t
        q >>= 1
    for i in range(1, ndim):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(x.shape[0], dtype=np.int64)
    q = 1 << (bits - 1)
    while q > 1:
        t ^= np.where((x[:, ndim - 1] & q) != 0, q - 1, 0)
        q >>= 1
    x ^= t[:, None]
    return interleave(x, bits, tuple(range(ndim)))


def _knn_chain(points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    d = np.sqrt(np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1))
    visited = np.zeros(n, dtype=bool)
    order = np.empty(n, dtype=np.int64)
    cur = 0
    for j in range(n):
        order[j] = cur
        visited[cur] = True
        if j + 1 < n:
            cand = np.where(visited, np.inf, d[cur])
            cur = int(np.argmin(cand))
    return order


def sort_keypoints(keypoints: np.ndarray, method: str = "trans_z_order", k: int = 4,
                   seed: int = 0, bits: int = 10) -> OrderingResult:
    keypoints = np.asarray(keypoints, dtype=np.float64)
    n = keypoints.shape[0]
    if method not in METHODS:
        raise ConfigError(f"unknown ordering method {method!r}; expected one of {METHODS}")
    if k < 1 or n % k:
        raise ConfigError(f"group count k={k} must divide n={n}")
    bounds = (keypoints.min(axis=0), keypoints.max(axis=0))
    if method == "random":
        perm = np.random.default_rng(seed).permutation(n)
    elif method == "knn":
        perm = _knn_chain(keypoints)
    else:
        cells = quantize(keypoints, bounds, bits)
        if method == "z_order":
            codes = interleave(cells, bits, (0, 1, 2))
        elif method == "trans_z_order":
            codes = interleave(cells, bits, (2, 1, 0))
        else:
            codes = hilbert_key(cells, bits)
        # stable sort: equal codes keep original index order
        perm = np.argsort(codes, kind="stable")
    perm = perm.astype(np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(n)
    return OrderingResult(permutation=perm, inverse=inverse, method=method, k=k)


def sort_rows(values: np.ndarray, ordering: OrderingResult) -> np.ndarray:
    """Original order -> sorted order."""
    if values.shape[0] != ordering.n:
        raise SizeError(f"expected {ordering.n} rows, got {values.shape[0]}")
    return values[ordering.permutation]


def reorder_tokens(values: np.ndarray, ordering: OrderingResult) -> np.ndarray:
    """Sorted order -> original order: row j lands at ``permutation[j]``."""
    if values.shape[0] != ordering.n:
        raise SizeError(f"expected {ordering.n} rows, got {values.shape[0]}")
    return values[ordering.inverse]
