"""Graph Fourier transform, its inverse, total variation, and a DCT-II basis
that can stand in for a graph basis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeError
from .graph import SpectralBasis


@dataclass
class SpectralTokens:
    coefficients: np.ndarray
    basis_scope: str = "global"


def _vectors(basis) -> np.ndarray:
    return basis.eigenvectors if isinstance(basis, SpectralBasis) else np.asarray(basis)


def gft(signal: np.ndarray, basis) -> SpectralTokens:
    """Coefficients ``U^T x``, column by column."""
    U = _vectors(basis)
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] != U.shape[0]:
        raise SizeError(f"signal has {signal.shape[0]} rows, basis has {U.shape[0]}")
    scope = basis.scope if isinstance(basis, SpectralBasis) else "global"
    return SpectralTokens(U.T @ signal, scope)


def igft(coeffs, basis) -> np.ndarray:
    U = _vectors(basis)
    c = coeffs.coefficients if isinstance(coeffs, SpectralTokens) else np.asarray(coeffs)
    if c.shape[0] != U.shape[1]:
        raise SizeError(f"coefficients have {c.shape[0]} rows, basis has {U.shape[1]}")
    return U @ c


def total_variation(signal: np.ndarray, lap: np.ndarray, basis: SpectralBasis) -> tuple[float, float]:
    """Return ``(x^T L x, sum_i lambda_i * xhat_i^2)`` for a single column signal."""
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.shape[0] != lap.shape[0] or lap.shape[0] != basis.n:
        raise SizeError("signal, Laplacian and basis sizes disagree")
    spatial = float(x @ lap @ x)
    xhat = basis.eigenvectors.T @ x
    spectral = float(np.sum(basis.eigenvalues * xhat * xhat))
    return spatial, spectral


def dct_basis(n: int) -> SpectralBasis:
    """Orthonormal DCT-II; column ``k`` is frequency ``k``, which also fills the eigenvalue slot."""
    if n < 1:
        raise SizeError(f"DCT size must be >= 1, got {n}")
    j = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    U = np.cos(np.pi * (j + 0.5) * k / n) * np.sqrt(2.0 / n)
    U[:, 0] = 1.0 / np.sqrt(n)
    return SpectralBasis(eigenvectors=U, eigenvalues=np.arange(n, dtype=np.float64), scope="dct")
