"""Point-cloud spectral adapter.

Tokens are down-projected, transformed with a global graph basis and with
per-group local bases, adjusted by a shared zero-initialised linear layer
(Swish, residual), brought back to the spatial domain, reordered, and
up-projected through a zero-initialised matrix with a fixed scale.

All arrays carry a leading batch dimension; ``pcsa_forward`` also accepts a
single ``(n, C)`` sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeError
from .graph import MultiscaleBases
from .ordering import OrderingResult


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x):
    return x * sigmoid(x)


def swish_grad(x):
    sg = sigmoid(x)
    return sg + x * sg * (1.0 - sg)


@dataclass
class AdapterParams:
    w_down: np.ndarray  # (r, C)
    lin_w: np.ndarray  # (r, r)
    lin_b: np.ndarray  # (r,)
    w_up: np.ndarray  # (C, r)
    scale: float = 1.0

    TRAINABLE = ("w_down", "lin_w", "lin_b", "w_up")

    @classmethod
    def init(cls, channels: int, rank: int, rng: np.random.Generator, scale: float = 1.0):
        if not 0 <= rank < channels:
            raise SizeError(f"adapter rank r={rank} must satisfy 0 <= r < C={channels}")
        bound = 1.0 / np.sqrt(channels)
        return cls(
            w_down=rng.uniform(-bound, bound, (rank, channels)),
            lin_w=np.zeros((rank, rank)),
            lin_b=np.zeros(rank),
            w_up=np.zeros((channels, rank)),
            scale=float(scale),
        )

    @property
    def rank(self) -> int:
        return self.w_down.shape[0]

    @property
    def channels(self) -> int:
        return self.w_down.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TRAINABLE}


@dataclass
class AdapterContext:
    """Per-sample spectral bases shared by every layer of the encoder.

    ``global_basis`` is ``(B, n, n)``, ``local_bases`` is ``(B, k, m, m)`` and
    ``permutation``/``inverse`` are ``(B, n)`` (sorted position -> original
    index and back).
    """

    global_basis: np.ndarray
    local_bases: np.ndarray
    permutation: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_bases(cls, bases: MultiscaleBases) -> "AdapterContext":
        o = bases.ordering
        return cls(
            global_basis=bases.global_basis.eigenvectors[None],
            local_bases=np.stack([b.eigenvectors for b in bases.local_bases])[None],
            permutation=o.permutation[None],
            inverse=o.inverse[None],
        )

    @classmethod
    def from_arrays(cls, global_basis, local_bases, orderings: list[OrderingResult]):
        perm = np.stack([o.permutation for o in orderings])
        inv = np.stack([o.inverse for o in orderings])
        return cls(np.asarray(global_basis), np.asarray(local_bases), perm, inv)

    @property
    def n(self) -> int:
        return self.global_basis.shape[-1]

    @property
    def k(self) -> int:
        return self.local_bases.shape[1]

    @property
    def m(self) -> int:
        return self.local_bases.shape[-1]

    def take(self, idx) -> "AdapterContext":
        return AdapterContext(self.global_basis[idx], self.local_bases[idx],
                              self.permutation[idx], self.inverse[idx])


def _gather_rows(x, index):
    return np.take_along_axis(x, index[..., None], axis=1)


def _check(t_in, params: AdapterParams, ctx: AdapterContext):
    B, n, C = t_in.shape
    if C != params.channels:
        raise SizeError(f"tokens have {C} channels, adapter expects {params.channels}")
    if ctx.global_basis.shape[0] != B or ctx.n != n:
        raise SizeError(f"context covers {ctx.global_basis.shape[:2]} but tokens are {(B, n)}")
    if ctx.k * ctx.m != n:
        raise SizeError(f"k*m = {ctx.k}*{ctx.m} does not equal n = {n}")


def _spectral_branch(x, U, params):
    """``U (f + swish(f A^T + b))`` with ``f = U^T x``; x is ``(..., n, r)``."""
    f = np.swapaxes(U, -1, -2) @ x
    z = f @ params.lin_w.T + params.lin_b
    out = U @ (f + swish(z))
    return out, (f, z)


def pcsa_forward(t_in: np.ndarray, params: AdapterParams, ctx: AdapterContext,
                 return_cache: bool = False):
    single = t_in.ndim == 2
    x = t_in[None] if single else t_in
    _check(x, params, ctx)
    B, n, _ = x.shape
    k, m, r = ctx.k, ctx.m, params.rank

    ts = x @ params.w_down.T
    hg, gcache = _spectral_branch(ts, ctx.global_basis, params)
    blocks = _gather_rows(ts, ctx.permutation).reshape(B, k, m, r)
    hl_blocks, lcache = _spectral_branch(blocks, ctx.local_bases, params)
    hl = _gather_rows(hl_blocks.reshape(B, n, r), ctx.inverse)
    mixed = swish(ts) + hg + hl
    out = params.scale * (mixed @ params.w_up.T)

    if single:
        out = out[0]
    if return_cache:
        return out, (x, ts, gcache, lcache, mixed)
    return out


def _spectral_branch_backward(dout, U, params, cache, grads):
    f, z = cache
    df_prime = np.swapaxes(U, -1, -2) @ dout
    dz = df_prime * swish_grad(z)
    r = params.rank
    grads["lin_w"] += dz.reshape(-1, r).T @ f.reshape(-1, r)
    grads["lin_b"] += dz.reshape(-1, r).sum(0)
    df = df_prime + dz @ params.lin_w
    return U @ df


def pcsa_backward(t_in, params: AdapterParams, ctx: AdapterContext, upstream: np.ndarray,
                  cache=None):
    """Gradients of ``sum(upstream * pcsa_forward(t_in))``.

    Returns ``(param_grads, d_t_in)``; the bases act as fixed linear maps.
    """
    single = upstream.ndim == 2
    if cache is None:
        _, cache = pcsa_forward(t_in, params, ctx, return_cache=True)
    x, ts, gcache, lcache, mixed = cache
    g = upstream[None] if single else upstream
    B, n, C = x.shape
    k, m, r = ctx.k, ctx.m, params.rank
    s = params.scale

    grads = {
        "w_up": s * g.reshape(-1, C).T @ mixed.reshape(-1, r),
        "lin_w": np.zeros_like(params.lin_w),
        "lin_b": np.zeros_like(params.lin_b),
    }
    dmixed = s * (g @ params.w_up)
    dts = dmixed * swish_grad(ts)
    dts += _spectral_branch_backward(dmixed, ctx.global_basis, params, gcache, grads)
    dblocks = _gather_rows(dmixed, ctx.permutation).reshape(B, k, m, r)
    dsorted = _spectral_branch_backward(dblocks, ctx.local_bases, params, lcache, grads)
    dts += _gather_rows(dsorted.reshape(B, n, r), ctx.inverse)

    grads["w_down"] = dts.reshape(-1, r).T @ x.reshape(-1, C)
    dx = dts @ params.w_down
    return grads, (dx[0] if single else dx)


def count_trainable(rank: int, channels: int, layers: int, head: int = 0) -> int:
    """Adapter parameters across ``layers`` (down, up, shared linear weight and bias) plus ``head``."""
    return layers * (2 * rank * channels + rank * rank + rank) + head
