import math

import numpy as np
import pytest

from spectune.adapter import AdapterContext
from spectune.backbone import (BackboneParams, LayerTrace, classify, cross_entropy, embed_tokens,
                               encoder_forward, forward_logits, init_adapters, init_backbone,
                               loss_and_grads, trainable_names)
from spectune.data import build_context
from spectune.errors import ConfigError, DataError, SizeError


def toy(seed, n=4, d=8, layers=2, heads=2, g=3, batch=1, r=4, k=2, classes=3, perturb=True):
    rng = np.random.default_rng(seed)
    params = init_backbone(d, layers, heads, classes, 5, rng)
    for name, t in params.tensors.items():
        if name.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            t[...] = rng.normal(0, 0.1, t.shape)
    adapters = init_adapters(params, r, 1.5, rng)
    if perturb:
        for a in adapters:
            a.lin_w[...] = rng.normal(0, 0.5, a.lin_w.shape)
            a.lin_b[...] = rng.normal(0, 0.5, a.lin_b.shape)
            a.w_up[...] = rng.normal(0, 0.5, a.w_up.shape)
    kp = rng.normal(size=(batch, n, 3))
    patches = rng.normal(size=(batch, n, g, 3)) * 0.3
    ctx = build_context(kp, "trans_z_order", k)
    labels = rng.integers(0, classes, batch)
    return params, adapters, kp, patches, ctx, labels


# -- independent straight-line evaluator --------------------------------------

def s_layer_norm(row, g, b):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + 1e-6) * gi + bi for v, gi, bi in zip(row, g, b)]


def s_affine(W, b, row):
    return [sum(W[o][i] * row[i] for i in range(len(row))) + b[o] for o in range(len(W))]


def s_gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


def s_swish(v):
    return v / (1 + math.exp(-v))


def s_matvec_t(U, x):  # U^T x for one column
    return [sum(U[i][j] * x[i] for i in range(len(x))) for j in range(len(U[0]))]


def s_matvec(U, x):
    return [sum(U[i][j] * x[j] for j in range(len(x))) for i in range(len(U))]


def s_branch(U, cols, A, bias):
    """Columns (one per rank channel) through GFT, shared linear + swish, iGFT."""
    r = len(cols)
    f = [s_matvec_t(U, c) for c in cols]  # f[c][freq]
    n = len(f[0])
    out_f = [[0.0] * n for _ in range(r)]
    for j in range(n):
        row = [f[c][j] for c in range(r)]
        z = [sum(A[o][i] * row[i] for i in range(r)) + bias[o] for o in range(r)]
        for c in range(r):
            out_f[c][j] = row[c] + s_swish(z[c])
    return [s_matvec(U, out_f[c]) for c in range(r)]


def s_pcsa(tokens, ad, U, Ul, perm):
    n = len(tokens)
    r = ad.w_down.shape[0]
    ts = [s_affine(ad.w_down.tolist(), [0.0] * r, t) for t in tokens]
    cols = [[ts[i][c] for i in range(n)] for c in range(r)]
    hg = s_branch(U.tolist(), cols, ad.lin_w.tolist(), ad.lin_b.tolist())
    k, m = Ul.shape[0], Ul.shape[1]
    hl = [[0.0] * n for _ in range(r)]
    for blk in range(k):
        idx = [int(perm[blk * m + j]) for j in range(m)]
        bcols = [[cols[c][i] for i in idx] for c in range(r)]
        res = s_branch(Ul[blk].tolist(), bcols, ad.lin_w.tolist(), ad.lin_b.tolist())
        for c in range(r):
            for j, i in enumerate(idx):
                hl[c][i] = res[c][j]
    out = []
    for i in range(n):
        mixed = [s_swish(ts[i][c]) + hg[c][i] + hl[c][i] for c in range(r)]
        out.append([ad.scale * v for v in s_affine(ad.w_up.tolist(), [0.0] * ad.w_up.shape[0], mixed)])
    return out


def straight_line_logits(params, adapters, patches, kp, U, Ul, perm):
    t = {k: v.tolist() for k, v in params.tensors.items()}
    d, H = params.dim, params.heads
    dh = d // H
    tokens = [list(t["cls_token"])]
    for pi in range(len(patches)):
        pooled = None
        for pt in patches[pi]:
            hid = [max(0.0, v) for v in s_affine(t["embed.w1"], t["embed.b1"], list(pt))]
            pooled = hid if pooled is None else [max(a, b) for a, b in zip(pooled, hid)]
        tok = s_affine(t["embed.w2"], t["embed.b2"], pooled)
        pos = s_affine(t["pos.w2"], t["pos.b2"],
                       [s_gelu(v) for v in s_affine(t["pos.w1"], t["pos.b1"], list(kp[pi]))])
        tokens.append([a + b for a, b in zip(tok, pos)])
    N = len(tokens)
    for L in range(params.layers):
        pre = f"layers.{L}."
        h1 = [s_layer_norm(x, t[pre + "ln1.g"], t[pre + "ln1.b"]) for x in tokens]
        q = [s_affine(t[pre + "attn.wq"], t[pre + "attn.bq"], x) for x in h1]
        kk = [s_affine(t[pre + "attn.wk"], t[pre + "attn.bk"], x) for x in h1]
        v = [s_affine(t[pre + "attn.wv"], t[pre + "attn.bv"], x) for x in h1]
        o = [[0.0] * d for _ in range(N)]
        for head in range(H):
            sl = range(head * dh, (head + 1) * dh)
            for i in range(N):
                sc = [sum(q[i][c] * kk[j][c] for c in sl) / math.sqrt(dh) for j in range(N)]
                mx = max(sc)
                e = [math.exp(s - mx) for s in sc]
                z = sum(e)
                for c in sl:
                    o[i][c] = sum(e[j] / z * v[j][c] for j in range(N))
        att = [s_affine(t[pre + "attn.wo"], t[pre + "attn.bo"], x) for x in o]
        x1 = [[a + b for a, b in zip(xa, xb)] for xa, xb in zip(tokens, att)]
        h2 = [s_layer_norm(x, t[pre + "ln2.g"], t[pre + "ln2.b"]) for x in x1]
        ff = [s_affine(t[pre + "ffn.w2"], t[pre + "ffn.b2"],
                       [s_gelu(u) for u in s_affine(t[pre + "ffn.w1"], t[pre + "ffn.b1"], x)]) for x in h2]
        out = [[a + b for a, b in zip(xa, xb)] for xa, xb in zip(x1, ff)]
        if adapters is not None:
            delta = s_pcsa(h2[1:], adapters[L], U, Ul, perm)
            for i in range(1, N):
                out[i] = [a + b for a, b in zip(out[i], delta[i - 1])]
        tokens = out
    mean = [sum(tokens[i][c] for i in range(1, N)) / (N - 1) for c in range(d)]
    feat = tokens[0] + mean
    return s_affine(t["head.w"], t["head.b"], feat)


@pytest.mark.parametrize("with_adapters", [False, True])
def test_matches_straight_line_evaluator(with_adapters):
    params, adapters, kp, patches, ctx, _ = toy(0, n=4, d=8)
    ad = adapters if with_adapters else None
    got = forward_logits(patches, kp, params, ad, ctx if ad else None)[0]
    want = straight_line_logits(params, ad, patches[0], kp[0], ctx.global_basis[0],
                                ctx.local_bases[0], ctx.permutation[0])
    assert np.abs(got - np.array(want)).max() < 1e-10


def test_zero_init_adapters_change_nothing():
    for seed in range(5):
        params, adapters, kp, patches, ctx, _ = toy(seed, batch=3, perturb=False)
        t0 = embed_tokens(patches, kp, params)[0]
        a = encoder_forward(t0, params)
        b = encoder_forward(t0, params, adapters, ctx)
        assert np.abs(a[0] - b[0]).max() <= 1e-12
        assert np.abs(a[1] - b[1]).max() <= 1e-12


def test_zero_weights_pass_input_through():
    params, *_ = toy(1, perturb=False)
    for name, t in params.tensors.items():
        if name.startswith("layers.") and ".ln" not in name:
            t[...] = 0.0
    x = np.random.default_rng(0).normal(size=(2, 5, params.dim))
    np.testing.assert_array_equal(encoder_forward(x, params)[0], x)


def test_attention_rows_sum_to_one_and_trace():
    params, adapters, kp, patches, ctx, _ = toy(2, batch=2)
    trace: list[LayerTrace] = []
    t0 = embed_tokens(patches, kp, params)[0]
    out = encoder_forward(t0, params, adapters, ctx, trace=trace)[0]
    assert len(trace) == params.layers
    for tr in trace:
        assert np.abs(tr.attention_probs.sum(-1) - 1).max() < 1e-10
        assert np.all(np.isfinite(tr.after_attention))
    np.testing.assert_array_equal(trace[-1].outputs, out)
    np.testing.assert_array_equal(trace[0].inputs, t0)


def test_encoder_shape_checks():
    params, adapters, kp, patches, ctx, _ = toy(3)
    with pytest.raises(SizeError):
        encoder_forward(np.zeros((1, 5, params.dim + 1)), params)
    t0 = embed_tokens(patches, kp, params)[0]
    with pytest.raises(SizeError):
        encoder_forward(t0, params, adapters[:1], ctx)
    with pytest.raises(SizeError):
        encoder_forward(t0, params, adapters, None)


def test_classify_examples():
    feat = np.array([[2.0, -1.0]])
    assert not classify(feat, np.zeros((3, 2)), np.zeros(3)).any()
    np.testing.assert_array_equal(classify(feat, np.eye(2), np.zeros(2)), feat)
    W = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]])
    np.testing.assert_array_equal(classify(feat, W, np.array([0.5, 0.0, -1.0])), [[0.5, 1.0, 4.5]])


def test_cross_entropy():
    loss, d = cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert loss == pytest.approx(math.log(3), abs=1e-15)
    np.testing.assert_allclose(d.sum(1), 0, atol=1e-16)
    with pytest.raises(DataError):
        cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_mode_contract():
    params, adapters, kp, patches, ctx, labels = toy(4)
    _, g, _ = loss_and_grads(patches, kp, labels, params, adapters, ctx, "pcsa")
    assert set(g) == {f"adapters.{i}.{f}" for i in range(2) for f in ("w_down", "lin_w", "lin_b", "w_up")} | {"head.w", "head.b"}
    _, g, _ = loss_and_grads(patches, kp, labels, params, adapters, ctx, "linear_probe")
    assert set(g) == {"head.w", "head.b"}
    _, g, _ = loss_and_grads(patches, kp, labels, params, None, None, "full")
    assert set(g) == set(params.tensors)
    with pytest.raises(ConfigError):
        trainable_names(params, adapters, "lora")
    with pytest.raises(ConfigError):
        loss_and_grads(patches, kp, labels, params, adapters, ctx, "full", tokens=np.zeros((1, 5, 8)))


def _fd(params, adapters, kp, patches, ctx, labels, mode):
    _, grads, _ = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)
    h = 1e-5
    bad = []
    for name, g in grads.items():
        if name.startswith("adapters."):
            _, i, f = name.split(".")
            t = getattr(adapters[int(i)], f)
        else:
            t = params.tensors[name]
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            lp = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)[0]
            t[idx] = old - h
            lm = loss_and_grads(patches, kp, labels, params, adapters, ctx, mode)[0]
            t[idx] = old
            num, ana = (lp - lm) / (2 * h), g[idx]
            diff = abs(num - ana)
            # key biases are analytically zero (softmax shift invariance); the floor covers them
            if not (diff <= 1e-4 * max(abs(num), abs(ana)) or diff <= 1e-8):
                bad.append((name, idx, ana, num))
    return bad


@pytest.mark.parametrize("mode", ["linear_probe", "pcsa", "full"])
def test_finite_differences_one_sample(mode):
    params, adapters, kp, patches, ctx, labels = toy(5, n=4, d=8, batch=1)
    assert _fd(params, adapters, kp, patches, ctx, labels, mode) == []


def test_key_bias_gradient_is_zero():
    params, adapters, kp, patches, ctx, labels = toy(6, batch=2)
    _, g, _ = loss_and_grads(patches, kp, labels, params, adapters, ctx, "full")
    assert np.abs(g["layers.0.attn.bk"]).max() < 1e-14


def test_pcsa_gradients_leave_frozen_tensors_alone():
    params, adapters, kp, patches, ctx, labels = toy(7, batch=2)
    before = params.copy()
    loss_and_grads(patches, kp, labels, params, adapters, ctx, "pcsa")
    for k, v in before.tensors.items():
        np.testing.assert_array_equal(params.tensors[k], v)


def test_deterministic():
    a = toy(8, batch=3)
    b = toy(8, batch=3)
    la = loss_and_grads(a[3], a[2], a[5], a[0], a[1], a[4], "pcsa")
    lb = loss_and_grads(b[3], b[2], b[5], b[0], b[1], b[4], "pcsa")
    assert la[0] == lb[0]
    for k in la[1]:
        np.testing.assert_array_equal(la[1][k], lb[1][k])


def test_init_rejects_bad_heads():
    with pytest.raises(ConfigError):
        init_backbone(10, 1, 3, 2, 4, np.random.default_rng(0))
