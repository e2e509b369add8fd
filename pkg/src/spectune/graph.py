"""Key-point graphs: scaled-distance adjacency, Laplacian, and dense Jacobi
eigendecomposition into spectral bases.

All functions accept a leading batch dimension so a whole dataset's bases
can be computed in one vectorised pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError, SizeError
from .ordering import OrderingResult

DEGENERATE_MIN_DISTANCE = 1e-9
COINCIDENT_CLAMP = 1e-6
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass
class WeightedGraph:
    adjacency: np.ndarray
    scope: str = "global"


@dataclass
class SpectralBasis:
    """Columns of ``eigenvectors`` are orthonormal; ``eigenvalues`` ascend."""

    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    scope: str = "global"

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[-1]


def pairwise_distances(keypoints: np.ndarray) -> np.ndarray:
    pts = np.asarray(keypoints, dtype=np.float64)
    if pts.shape[-2] < 2:
        raise SizeError("need at least two points for a distance matrix")
    diff = pts[..., :, None, :] - pts[..., None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    # exact symmetry regardless of summation order
    d = 0.5 * (d + np.swapaxes(d, -1, -2))
    idx = np.arange(d.shape[-1])
    d[..., idx, idx] = 0.0
    return d


def build_adjacency(dist: np.ndarray, scope: str = "global") -> WeightedGraph:
    """``w_ij = 1 / (d_ij / min_offdiag_positive(d) + [i == j])``.

    If every off-diagonal distance is zero the scale falls back to
    ``DEGENERATE_MIN_DISTANCE``; coincident pairs are clamped to
    ``scale * COINCIDENT_CLAMP`` so their weight stays finite.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[-1]
    if n < 2:
        raise SizeError(f"adjacency needs n >= 2, got {n}")
    eye = np.eye(n, dtype=bool)
    off = np.where(eye | (dist <= 0), np.inf, dist)
    scale = off.min(axis=(-2, -1), keepdims=True)
    scale = np.where(np.isfinite(scale), scale, DEGENERATE_MIN_DISTANCE)
    d = np.where(~eye & (dist <= 0), scale * COINCIDENT_CLAMP, dist)
    w = 1.0 / (d / scale + eye)
    return WeightedGraph(adjacency=w, scope=scope)


def laplacian(graph: WeightedGraph | np.ndarray) -> np.ndarray:
    """Unnormalised ``L = D - W``; the degree includes the self weight, which cancels."""
    w = graph.adjacency if isinstance(graph, WeightedGraph) else np.asarray(graph)
    lap = -w.copy()
    idx = np.arange(w.shape[-1])
    # off-diagonal row sum directly, so rows sum to exactly zero up to one rounding
    offsum = w.sum(axis=-1) - w[..., idx, idx]
    lap[..., idx, idx] = offsum
    return lap


def round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: ``n - 1`` rounds (``n`` if odd) of disjoint index pairs
    that together visit every pair exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        pairs.sort()
        rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi on a stack of symmetric matrices.

    Each sweep visits every off-diagonal pair once, in round-robin order so that
    each round's disjoint rotations are applied as one batched matmul. Returns unsorted
    eigenvalues ``(..., n)`` and eigenvectors ``(..., n, n)``. Converged when
    every matrix has off-diagonal Frobenius norm below ``tol * ||A||_F``.
    """
    a = np.asarray(a, dtype=np.float64)
    shape = a.shape
    n = shape[-1]
    A = a.reshape(-1, n, n).copy()
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    fro = np.sqrt(np.sum(A * A, axis=(1, 2)))
    thresh = tol * np.where(fro > 0, fro, 1.0)
    iu = np.triu_indices(n, 1)
    rounds = round_robin_pairs(n)

    def converged():
        off = np.sqrt(2.0 * np.sum(A[:, iu[0], iu[1]] ** 2, axis=1))
        return bool(np.all(off < thresh))

    diag = np.arange(n)
    bsz = A.shape[0]
    for _ in range(max_sweeps):
        if converged():
            break
        for P, Q in rounds:
            apq = A[:, P, Q]
            app = A[:, P, P]
            aqq = A[:, Q, Q]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(apq == 0, 0.0, np.copysign(t, theta))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # disjoint rotations of one round assembled into a single orthogonal J
            J = np.zeros((bsz, n, n))
            J[:, diag, diag] = 1.0
            J[:, P, P] = c
            J[:, Q, Q] = c
            J[:, P, Q] = s
            J[:, Q, P] = -s
            A = np.swapaxes(J, 1, 2) @ A @ J
            A[:, P, Q] = 0.0
            A[:, Q, P] = 0.0
            V = V @ J
        A = 0.5 * (A + np.swapaxes(A, 1, 2))
    else:
        if not converged():
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps")
    evals = np.diagonal(A, axis1=1, axis2=2).copy()
    return evals.reshape(shape[:-1]), V.reshape(shape)


def fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive (first index on ties)."""
    arg = np.argmax(np.abs(vecs), axis=-2)
    pivot = np.take_along_axis(vecs, arg[..., None, :], axis=-2)
    return vecs * np.where(pivot < 0, -1.0, 1.0)


def eigendecompose(lap: np.ndarray, scope: str = "global") -> SpectralBasis:
    lap = np.asarray(lap, dtype=np.float64)
    if lap.shape[-1] != lap.shape[-2]:
        raise ContractError(f"matrix must be square, got {lap.shape}")
    asym = np.max(np.abs(lap - np.swapaxes(lap, -1, -2))) if lap.size else 0.0
    if asym > 1e-12 * max(1.0, float(np.max(np.abs(lap), initial=0.0))):
        raise ContractError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    evals, evecs = jacobi_eigh(lap)
    order = np.argsort(evals, axis=-1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=-1)
    evecs = np.take_along_axis(evecs, order[..., None, :], axis=-1)
    return SpectralBasis(eigenvectors=fix_signs(evecs), eigenvalues=evals, scope=scope)


def graph_basis(keypoints: np.ndarray, scope: str = "global") -> SpectralBasis:
    return eigendecompose(laplacian(build_adjacency(pairwise_distances(keypoints))), scope)


@dataclass
class MultiscaleBases:
    global_basis: SpectralBasis
    local_bases: list[SpectralBasis]
    ordering: OrderingResult


def build_multiscale_bases(keypoints: np.ndarray, ordering: OrderingResult) -> MultiscaleBases:
    """One global basis over all key points plus one per group of ``m`` sorted points."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.shape[0] != ordering.n:
        raise SizeError(f"ordering covers {ordering.n} points, got {keypoints.shape[0]}")
    glob = graph_basis(keypoints, "global")
    grouped = keypoints[ordering.permutation].reshape(ordering.k, ordering.m, 3)
    if ordering.m >= 2:
        loc = graph_basis(grouped, "local")
        local = [SpectralBasis(loc.eigenvectors[i], loc.eigenvalues[i], f"local({i})")
                 for i in range(ordering.k)]
    else:
        local = [SpectralBasis(np.ones((1, 1)), np.zeros(1), f"local({i})") for i in range(ordering.k)]
    return MultiscaleBases(glob, local, ordering)


def batch_bases(keypoints: np.ndarray, permutations: np.ndarray, k: int):
    """Global ``(B, n, n)`` and local ``(B, k, m, m)`` eigenvector stacks for a batch."""
    B, n, _ = keypoints.shape
    m = n // k
    glob = graph_basis(keypoints).eigenvectors
    if m < 2:
        return glob, np.ones((B, k, 1, 1))
    sorted_pts = np.take_along_axis(keypoints, permutations[..., None], axis=1)
    loc = graph_basis(sorted_pts.reshape(B, k, m, 3)).eigenvectors
    return glob, loc


def dump_spectral(directory: str | Path, keypoints: np.ndarray, ordering: OrderingResult) -> None:
    """Write W, L, U and eigenvalues of the global and local graphs as text matrices."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    groups = [("global", keypoints)]
    groups += [(f"local{i}", keypoints[idx]) for i, idx in enumerate(ordering.groups())]
    for name, pts in groups:
        if len(pts) < 2:
            continue
        w = build_adjacency(pairwise_distances(pts)).adjacency
        lap = laplacian(w)
        basis = eigendecompose(lap)
        np.savetxt(out / f"{name}_W.txt", w, fmt="%.17g")
        np.savetxt(out / f"{name}_L.txt", lap, fmt="%.17g")
        np.savetxt(out / f"{name}_U.txt", basis.eigenvectors, fmt="%.17g")
        np.savetxt(out / f"{name}_eigenvalues.txt", basis.eigenvalues, fmt="%.17g")
