"""Spectral invariant suite run by ``spectune selfcheck``.

Each check returns a :class:`CheckResult`; nothing raises on a failed
property, failures are report content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterParams
from .backbone import embed_tokens, encoder_forward, init_adapters, init_backbone, loss_and_grads
from .config import ExperimentConfig
from .data import build_context
from .graph import build_adjacency, graph_basis, laplacian, pairwise_distances
from .spectral import gft, igft, total_variation

ORTHO_TOL = 1e-8
ROUND_TRIP_TOL = 1e-10
PARSEVAL_TOL = 1e-10
TV_TOL = 1e-8
LAMBDA0_TOL = 1e-8
ZERO_INIT_TOL = 1e-12
GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-8
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def _corrupt(U: np.ndarray) -> np.ndarray:
    """Synthesis copy with one entry of the second column sign-flipped."""
    bad = U.copy()
    col = min(1, U.shape[1] - 1)
    row = int(np.argmax(np.abs(bad[:, col])))
    bad[row, col] = -bad[row, col]
    return bad


def spectral_suite(rng: np.random.Generator, count: int = 100, sizes=(8, 16, 32, 64),
                   corrupt_basis: bool = False) -> list[CheckResult]:
    worst = dict(ortho=0.0, round_trip=0.0, parseval=0.0, tv=0.0, lambda0=0.0, kernel=0.0)
    for i in range(count):
        n = sizes[i % len(sizes)]
        pts = rng.normal(size=(n, 3))
        lap = laplacian(build_adjacency(pairwise_distances(pts)))
        basis = graph_basis(pts)
        U, lam = basis.eigenvectors, basis.eigenvalues
        synth = _corrupt(U) if corrupt_basis else U
        x = rng.normal(size=(n, 4))
        xhat = gft(x, basis).coefficients
        worst["ortho"] = max(worst["ortho"], np.abs(U.T @ U - np.eye(n)).max())
        worst["round_trip"] = max(worst["round_trip"], np.abs(igft(xhat, synth) - x).max())
        par = np.abs((x * x).sum(0) - (xhat * xhat).sum(0)) / (x * x).sum(0)
        worst["parseval"] = max(worst["parseval"], par.max())
        spatial, spectral = total_variation(x[:, 0], lap, basis)
        worst["tv"] = max(worst["tv"], abs(spatial - spectral) / max(abs(spatial), 1e-300))
        worst["lambda0"] = max(worst["lambda0"], abs(lam[0]))
        worst["kernel"] = max(worst["kernel"], np.abs(U[:, 0] - 1.0 / np.sqrt(n)).max())
    tag = f"{count} clouds, n in {tuple(sizes)}"
    return [
        CheckResult("orthonormality", worst["ortho"] < ORTHO_TOL,
                    f"max|U^T U - I| = {worst['ortho']:.2e} ({tag})"),
        CheckResult("round_trip", worst["round_trip"] < ROUND_TRIP_TOL,
                    f"max|igft(gft(x)) - x| = {worst['round_trip']:.2e}"),
        CheckResult("parseval", worst["parseval"] < PARSEVAL_TOL,
                    f"max relative energy error = {worst['parseval']:.2e}"),
        CheckResult("total_variation", worst["tv"] < TV_TOL,
                    f"max relative |x^T L x - sum lambda xhat^2| = {worst['tv']:.2e}"),
        CheckResult("lambda0", worst["lambda0"] < LAMBDA0_TOL and worst["kernel"] < ORTHO_TOL,
                    f"max|lambda_0| = {worst['lambda0']:.2e}, "
                    f"max|u_0 - 1/sqrt(n)| = {worst['kernel']:.2e}"),
    ]


def analytic_checks() -> list[CheckResult]:
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    expected = np.array([[1, 1, 1 / 3], [1, 1, 1 / 2], [1 / 3, 1 / 2, 1]])
    W = build_adjacency(pairwise_distances(pts)).adjacency
    W_scaled = build_adjacency(pairwise_distances(7.5 * pts)).adjacency
    err = max(np.abs(W - expected).max(), np.abs(W_scaled - expected).max())

    two = graph_basis(np.array([[0.0, 0, 0], [0.4, -0.2, 1.0]]))
    h = 1 / np.sqrt(2)
    err2 = max(np.abs(two.eigenvectors - np.array([[h, h], [h, -h]])).max(),
               np.abs(two.eigenvalues - [0.0, 2.0]).max())
    return [
        CheckResult("adjacency_analytic", err < 1e-12, f"x=0,1,3 (and x7.5) max error {err:.2e}"),
        CheckResult("two_node_basis", err2 < 1e-12, f"U=[[1,1],[1,-1]]/sqrt2, lambda=(0,2): error {err2:.2e}"),
    ]


def _toy(rng, n=8, g=4, d=8, layers=2, heads=2, r=4, k=2, batch=2, classes=3):
    params = init_backbone(d, layers, heads, classes, 6, rng)
    adapters = init_adapters(params, r, 1.0, rng)
    keypoints = rng.normal(size=(batch, n, 3))
    patches = rng.normal(size=(batch, n, g, 3)) * 0.3
    ctx = build_context(keypoints, "trans_z_order", k)
    labels = rng.integers(0, classes, batch)
    return params, adapters, keypoints, patches, ctx, labels


def zero_init_check(rng: np.random.Generator, trials: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        params, adapters, kp, patches, ctx, _ = _toy(rng)
        t0 = embed_tokens(patches, kp, params)[0]
        frozen = encoder_forward(t0, params)[0]
        adapted = encoder_forward(t0, params, adapters, ctx)[0]
        worst = max(worst, np.abs(frozen - adapted).max())
    return CheckResult("zero_init", worst < ZERO_INIT_TOL,
                       f"{trials} toy backbones, max|frozen - adapted| = {worst:.2e}")


def _perturb(rng, adapters: list[AdapterParams]):
    for a in adapters:
        a.lin_w[...] = rng.normal(0.0, 0.5, a.lin_w.shape)
        a.lin_b[...] = rng.normal(0.0, 0.5, a.lin_b.shape)
        a.w_up[...] = rng.normal(0.0, 0.5, a.w_up.shape)


def gradient_errors(rng: np.random.Generator, mode: str = "pcsa", h: float = FD_STEP):
    """Yield ``(name, index, analytic, numeric)`` for every trainable scalar of a toy model."""
    params, adapters, kp, patches, ctx, labels = _toy(rng)
    _perturb(rng, adapters)
    _, grads, _ = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)

    def ref(name):
        if name.startswith("adapters."):
            _, i, f = name.split(".")
            return getattr(adapters[int(i)], f)
        return params.tensors[name]

    for name, g in grads.items():
        t = ref(name)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            lp = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)[0]
            t[idx] = old - h
            lm = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)[0]
            t[idx] = old
            yield name, idx, float(g[idx]), (lp - lm) / (2 * h)


def grad_close(analytic: float, numeric: float, rel: float = GRAD_TOL, floor: float = GRAD_FLOOR) -> bool:
    """Relative agreement, with an absolute floor for gradients that are analytically zero."""
    diff = abs(analytic - numeric)
    return diff <= rel * max(abs(analytic), abs(numeric)) or diff <= floor


def gradient_check(rng: np.random.Generator, mode: str = "pcsa") -> CheckResult:
    bad, total, worst = [], 0, 0.0
    for name, idx, a, nfd in gradient_errors(rng, mode):
        total += 1
        if not grad_close(a, nfd):
            bad.append(f"{name}{list(idx)}")
        worst = max(worst, abs(a - nfd) / max(abs(a), abs(nfd), GRAD_FLOOR / GRAD_TOL))
    detail = f"{total} scalars ({mode}), worst relative error {worst:.2e}"
    if bad:
        detail += f"; mismatches: {', '.join(bad[:5])}"
    return CheckResult(f"gradients_{mode}", not bad, detail)


def run_selfcheck(cfg: ExperimentConfig | None = None, corrupt_basis: bool = False,
                  count: int = 100) -> list[CheckResult]:
    cfg = cfg or ExperimentConfig()
    rng = np.random.default_rng([cfg.dataset.seed, 11])
    results = spectral_suite(rng, count, corrupt_basis=corrupt_basis)
    results += analytic_checks()
    results.append(zero_init_check(rng))
    results.append(gradient_check(rng, "pcsa"))
    return results
