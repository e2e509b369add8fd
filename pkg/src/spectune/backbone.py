"""A small pre-norm transformer encoder over point tokens, written with
explicit forward/backward passes so the trainable subset can be chosen per
fine-tuning mode."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterContext, AdapterParams, pcsa_backward, pcsa_forward
from .errors import ConfigError, DataError, SizeError
from .pointcloud import embed_backward, embed_forward

MODES = ("full", "linear_probe", "pcsa")
LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


# -- primitives ---------------------------------------------------------------

def layer_norm(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    d = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(0)
    dbias = dy.reshape(-1, d).sum(0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgain, dbias


def gelu(x):
    """tanh-approximated GELU; also returns the tanh term for the backward pass."""
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t=None):
    if t is None:
        t = gelu(x)[1]
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _linear_grads(dy, x):
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy2.T @ x.reshape(-1, x.shape[-1]), dy2.sum(0)


def attention(x, p, prefix, heads):
    B, N, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ p[prefix + "wq"].T + p[prefix + "bq"])
    k = split(x @ p[prefix + "wk"].T + p[prefix + "bk"])
    v = split(x @ p[prefix + "wv"].T + p[prefix + "bv"])
    probs = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
    o = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
    y = o @ p[prefix + "wo"].T + p[prefix + "bo"]
    return y, (x, q, k, v, probs, o)


def attention_backward(dy, p, prefix, heads, cache, grads, need_weights):
    x, q, k, v, probs, o = cache
    B, N, d = x.shape
    dh = d // heads
    if need_weights:
        grads[prefix + "wo"], grads[prefix + "bo"] = _linear_grads(dy, o)
    do = (dy @ p[prefix + "wo"]).reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    dprobs = do @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ do
    dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) / np.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        dt = dt.transpose(0, 2, 1, 3).reshape(B, N, d)
        if need_weights:
            grads[prefix + "w" + name], grads[prefix + "b" + name] = _linear_grads(dt, x)
        dx += dt @ p[prefix + "w" + name]
    return dx


def ffn(x, p, prefix):
    h = x @ p[prefix + "w1"].T + p[prefix + "b1"]
    a, t = gelu(h)
    return a @ p[prefix + "w2"].T + p[prefix + "b2"], (x, h, a, t)


def ffn_backward(dy, p, prefix, cache, grads, need_weights):
    x, h, a, t = cache
    if need_weights:
        grads[prefix + "w2"], grads[prefix + "b2"] = _linear_grads(dy, a)
    dh = (dy @ p[prefix + "w2"]) * gelu_grad(h, t)
    if need_weights:
        grads[prefix + "w1"], grads[prefix + "b1"] = _linear_grads(dh, x)
    return dh @ p[prefix + "w1"]


# -- parameters ---------------------------------------------------------------

@dataclass
class BackboneParams:
    """Named float64 tensors of the frozen model plus its classification head."""

    tensors: dict[str, np.ndarray]
    layers: int
    heads: int = 1
    frozen: set[str] = field(default_factory=set)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dim(self) -> int:
        return self.tensors["cls_token"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.tensors["head.w"].shape[0]

    def copy(self) -> "BackboneParams":
        return BackboneParams({k: v.copy() for k, v in self.tensors.items()},
                              self.layers, self.heads, set(self.frozen))

    def head_names(self) -> list[str]:
        return ["head.w", "head.b"]

    def body_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("head.")]

    def count(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names))


def init_backbone(dim: int, layers: int, heads: int, num_classes: int, embed_hidden: int,
                  rng: np.random.Generator) -> BackboneParams:
    if dim % heads:
        raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
    t: dict[str, np.ndarray] = {}
    t["embed.w1"] = rng.normal(0.0, np.sqrt(2.0 / 3.0), (embed_hidden, 3))
    t["embed.b1"] = np.zeros(embed_hidden)
    t["embed.w2"] = rng.normal(0.0, np.sqrt(1.0 / embed_hidden), (dim, embed_hidden))
    t["embed.b2"] = np.zeros(dim)
    t["pos.w1"] = rng.normal(0.0, 1.0, (embed_hidden, 3))
    t["pos.b1"] = np.zeros(embed_hidden)
    t["pos.w2"] = rng.normal(0.0, np.sqrt(1.0 / embed_hidden), (dim, embed_hidden))
    t["pos.b2"] = np.zeros(dim)
    t["cls_token"] = rng.normal(0.0, 0.02, dim)
    hidden = 4 * dim
    for i in range(layers):
        pre = f"layers.{i}."
        t[pre + "ln1.g"] = np.ones(dim)
        t[pre + "ln1.b"] = np.zeros(dim)
        for name in ("q", "k", "v", "o"):
            t[pre + "attn.w" + name] = rng.normal(0.0, np.sqrt(1.0 / dim), (dim, dim))
            t[pre + "attn.b" + name] = np.zeros(dim)
        t[pre + "ln2.g"] = np.ones(dim)
        t[pre + "ln2.b"] = np.zeros(dim)
        t[pre + "ffn.w1"] = rng.normal(0.0, np.sqrt(1.0 / dim), (hidden, dim))
        t[pre + "ffn.b1"] = np.zeros(hidden)
        t[pre + "ffn.w2"] = rng.normal(0.0, np.sqrt(1.0 / hidden), (dim, hidden))
        t[pre + "ffn.b2"] = np.zeros(dim)
    p = BackboneParams(t, layers, heads)
    reset_head(p, num_classes, rng)
    return p


def reset_head(params: BackboneParams, num_classes: int, rng: np.random.Generator) -> None:
    d = params.dim
    params.tensors["head.w"] = rng.normal(0.0, np.sqrt(1.0 / (2 * d)), (num_classes, 2 * d))
    params.tensors["head.b"] = np.zeros(num_classes)


def init_adapters(params: BackboneParams, rank: int, scale: float,
                  rng: np.random.Generator) -> list[AdapterParams]:
    return [AdapterParams.init(params.dim, rank, rng, scale) for _ in range(params.layers)]


def trainable_names(params: BackboneParams, adapters, mode: str) -> list[str]:
    """Qualified names of the tensors optimised under ``mode``."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    adapter_names = [f"adapters.{i}.{n}" for i in range(len(adapters or []))
                     for n in AdapterParams.TRAINABLE]
    if mode == "linear_probe":
        return params.head_names()
    if mode == "pcsa":
        if not adapters:
            raise ConfigError("pcsa mode needs adapters")
        return adapter_names + params.head_names()
    return params.body_names() + params.head_names() + adapter_names


# -- forward ------------------------------------------------------------------

def position_forward(keypoints, p):
    """Key-point positional embedding ``W2 gelu(W1 c + b1) + b2``."""
    z = keypoints @ p["pos.w1"].T + p["pos.b1"]
    h, t = gelu(z)
    return h @ p["pos.w2"].T + p["pos.b2"], (keypoints, z, h, t)


def position_backward(dout, p, cache):
    c, z, h, t = cache
    dz = (dout @ p["pos.w2"]) * gelu_grad(z, t)
    w2, b2 = _linear_grads(dout, h)
    w1, b1 = _linear_grads(dz, c)
    return {"pos.w1": w1, "pos.b1": b1, "pos.w2": w2, "pos.b2": b2}


def embed_tokens(patches, keypoints, params: BackboneParams):
    """Patch embedding plus key-point position, behind the class token: ``(B, n + 1, d)``."""
    p = params.tensors
    tokens, ecache = embed_forward(patches, p["embed.w1"], p["embed.b1"], p["embed.w2"], p["embed.b2"])
    pos, pcache = position_forward(np.asarray(keypoints, dtype=np.float64), p)
    B = tokens.shape[0]
    cls = np.broadcast_to(p["cls_token"], (B, 1, params.dim))
    return np.concatenate([cls, tokens + pos], axis=1), (ecache, pcache)


@dataclass
class LayerTrace:
    inputs: np.ndarray
    after_attention: np.ndarray
    outputs: np.ndarray
    attention_probs: np.ndarray


def encoder_forward(t0: np.ndarray, params: BackboneParams, adapters=None,
                    ctx: AdapterContext | None = None, keep_cache: bool = False,
                    trace: list | None = None):
    """Run every layer; returns ``(final_tokens, pooled, caches)``.

    Per layer: ``T' = Attn(LN(T)) + T``, then
    ``T = FFN(LN(T')) + T' + [0; PCSA(LN(T')[1:])]``. The pooled feature is the
    class token concatenated with the mean point token.
    """
    p = params.tensors
    if t0.ndim != 3 or t0.shape[-1] != params.dim:
        raise SizeError(f"tokens must be (B, n+1, {params.dim}), got {t0.shape}")
    if adapters is not None:
        if len(adapters) != params.layers:
            raise SizeError(f"{len(adapters)} adapters for {params.layers} layers")
        if ctx is None:
            raise SizeError("adapters need a spectral context")
    x = t0
    caches = []
    for i in range(params.layers):
        pre = f"layers.{i}."
        h1, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a, att = attention(h1, p, pre + "attn.", params.heads)
        x1 = x + a
        h2, ln2 = layer_norm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f, ff = ffn(h2, p, pre + "ffn.")
        out = x1 + f
        pc = None
        if adapters is not None:
            delta, pc = pcsa_forward(h2[:, 1:], adapters[i], ctx, return_cache=True)
            out = out.copy()
            out[:, 1:] += delta
        if trace is not None:
            trace.append(LayerTrace(x, x1, out, att[4]))
        if keep_cache:
            caches.append((ln1, att, ln2, ff, pc))
        x = out
    pooled = np.concatenate([x[:, 0], x[:, 1:].mean(axis=1)], axis=-1)
    return x, pooled, caches


def classify(pooled, head_w, head_b):
    return pooled @ np.asarray(head_w).T + head_b


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise DataError(f"label out of range for {K} classes")
    shifted = logits - logits.max(-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(-1))
    B = logits.shape[0]
    loss = float(np.mean(logz - shifted[np.arange(B), labels]))
    dlogits = softmax(logits)
    dlogits[np.arange(B), labels] -= 1.0
    return loss, dlogits / B


def pooled_features(patches, keypoints, params: BackboneParams, adapters=None, ctx=None, tokens=None):
    t0 = embed_tokens(patches, keypoints, params)[0] if tokens is None else tokens
    return encoder_forward(t0, params, adapters, ctx)[1]


def forward_logits(patches, keypoints, params: BackboneParams, adapters=None, ctx=None, tokens=None):
    pooled = pooled_features(patches, keypoints, params, adapters, ctx, tokens)
    return classify(pooled, params["head.w"], params["head.b"])


def loss_and_grads(patches, keypoints, labels, params: BackboneParams, adapters=None,
                   ctx: AdapterContext | None = None, mode: str = "pcsa", tokens=None):
    """Mean cross-entropy and gradients for exactly the trainable set of ``mode``.

    Gradient keys are the qualified names from :func:`trainable_names`.
    ``tokens`` may carry precomputed embeddings when the embedder is frozen.
    """
    names = trainable_names(params, adapters, mode)
    p = params.tensors
    use_adapters = adapters if mode in ("pcsa", "full") and adapters else None
    if tokens is not None:
        if mode == "full":
            raise ConfigError("precomputed tokens cannot be used when the embedder trains")
        t0, ecache = tokens, None
    else:
        t0, ecache = embed_tokens(patches, keypoints, params)
    x, pooled, caches = encoder_forward(t0, params, use_adapters, ctx, keep_cache=(mode != "linear_probe"))
    logits = classify(pooled, p["head.w"], p["head.b"])
    loss, dlogits = cross_entropy(logits, labels)

    grads = {"head.w": dlogits.T @ pooled, "head.b": dlogits.sum(0)}
    if mode == "linear_probe":
        return loss, grads, logits

    full = mode == "full"
    d = params.dim
    dpooled = dlogits @ p["head.w"]
    n = x.shape[1] - 1
    dx = np.zeros_like(x)
    dx[:, 0] = dpooled[:, :d]
    dx[:, 1:] = dpooled[:, None, d:] / n
    body: dict[str, np.ndarray] = {}
    for i in reversed(range(params.layers)):
        pre = f"layers.{i}."
        ln1, att, ln2, ff, pc = caches[i]
        dx1 = dx.copy()
        dh2 = ffn_backward(dx, p, pre + "ffn.", ff, body, full)
        if use_adapters is not None:
            ag, dtin = pcsa_backward(None, use_adapters[i], ctx, dx[:, 1:], cache=pc)
            for k, v in ag.items():
                grads[f"adapters.{i}.{k}"] = v
            dh2[:, 1:] += dtin
        dln, dg, db = layer_norm_backward(dh2, p[pre + "ln2.g"], ln2)
        if full:
            body[pre + "ln2.g"], body[pre + "ln2.b"] = dg, db
        dx1 += dln
        dh1 = attention_backward(dx1, p, pre + "attn.", params.heads, att, body, full)
        dln, dg, db = layer_norm_backward(dh1, p[pre + "ln1.g"], ln1)
        if full:
            body[pre + "ln1.g"], body[pre + "ln1.b"] = dg, db
        dx = dx1 + dln
    if full:
        body["cls_token"] = dx[:, 0].sum(0)
        eg = embed_backward(dx[:, 1:], ecache[0], p["embed.w1"], p["embed.w2"])
        for k, v in eg.items():
            body["embed." + k] = v
        body.update(position_backward(dx[:, 1:], p, ecache[1]))
        grads.update(body)
    return loss, {k: grads[k] for k in names}, logits
