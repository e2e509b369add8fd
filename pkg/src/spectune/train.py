"""Pre-training, fine-tuning, evaluation and ablation sweeps."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import checkpoint as ckpt_io
from .adapter import AdapterParams
from .backbone import (BackboneParams, forward_logits, init_adapters, init_backbone,
                       loss_and_grads, reset_head, trainable_names, cross_entropy,
                       classify, embed_tokens, pooled_features)
from .checkpoint import Checkpoint
from .config import ExperimentConfig, dumps, get_key, set_key
from .data import PreparedSplit, build_context, load_split, prepare
from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

MODEL_KEYS = ("n", "g", "d", "layers", "heads", "embed_hidden")
SWEEPABLE_SECTIONS = ("adapter.", "ordering.", "optim.")
GRID_ALIASES = {"r": "adapter.r", "s": "adapter.s", "basis": "adapter.basis",
                "k": "ordering.k", "ordering": "ordering.method"}


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    train_correct: int
    train_total: int
    test_correct: int
    test_total: int
    trainable: int
    total: int
    lr: float
    wall_clock: float = 0.0

    @property
    def train_acc(self) -> float:
        return float(Fraction(self.train_correct, self.train_total))

    @property
    def test_acc(self) -> float:
        return float(Fraction(self.test_correct, self.test_total))

    @property
    def trainable_ratio(self) -> float:
        return self.trainable / self.total

    def to_json(self) -> dict[str, Any]:
        """Reproducible fields only; wall-clock goes to a separate timing stream."""
        d = asdict(self)
        d.pop("wall_clock")
        d.update(train_acc=self.train_acc, test_acc=self.test_acc,
                 trainable_ratio=self.trainable_ratio)
        return d


# -- tensor plumbing ----------------------------------------------------------

def tensor_ref(params: BackboneParams, adapters, name: str) -> np.ndarray:
    if name.startswith("adapters."):
        _, i, field = name.split(".")
        return getattr(adapters[int(i)], field)
    return params.tensors[name]


def model_size(params: BackboneParams, adapters) -> int:
    extra = sum(t.size for a in adapters or [] for t in a.tensors().values())
    return params.count() + int(extra)


def to_checkpoint(params: BackboneParams, adapters, trainable, meta) -> Checkpoint:
    tensors = dict(params.tensors)
    for i, a in enumerate(adapters or []):
        for k, v in a.tensors().items():
            tensors[f"adapters.{i}.{k}"] = v
    return Checkpoint({k: v.copy() for k, v in tensors.items()}, set(trainable), meta)


def from_checkpoint(ck: Checkpoint):
    meta = ck.meta
    model = meta["model"]
    body = {k: v.copy() for k, v in ck.tensors.items() if not k.startswith("adapters.")}
    params = BackboneParams(body, model["layers"], model["heads"])
    adapters = None
    if any(k.startswith("adapters.") for k in ck.tensors):
        adapters = []
        for i in range(params.layers):
            t = {f: ck.tensors[f"adapters.{i}.{f}"].copy() for f in AdapterParams.TRAINABLE}
            adapters.append(AdapterParams(**t, scale=float(meta.get("scale", 1.0))))
    return params, adapters


# -- data ---------------------------------------------------------------------

_PREP_CACHE: dict[tuple, PreparedSplit] = {}


def load_prepared(data_dir, domain: str, split: str, cfg: ExperimentConfig,
                  with_context: bool) -> PreparedSplit:
    """Prepared split, memoised per process (bases are computed once per sample)."""
    base_key = (str(Path(data_dir).resolve()), domain, split, cfg.model.n, cfg.model.g)
    key = base_key + ((cfg.ordering.method, cfg.ordering.k, cfg.adapter.basis, cfg.optim.seed)
                      if with_context else ())
    if key in _PREP_CACHE:
        return _PREP_CACHE[key]
    if base_key in _PREP_CACHE:
        base = _PREP_CACHE[base_key]
    else:
        raw = load_split(data_dir, domain, split)
        base = prepare(raw.clouds, raw.classes, cfg.model.n, cfg.model.g)
        _PREP_CACHE[base_key] = base
    if not with_context:
        return base
    ctx = build_context(base.keypoints, cfg.ordering.method, cfg.ordering.k, cfg.adapter.basis,
                        seed=cfg.optim.seed)
    prep = PreparedSplit(base.patches, base.keypoints, base.labels, base.classes, ctx)
    _PREP_CACHE[key] = prep
    return prep


def clear_cache() -> None:
    _PREP_CACHE.clear()


# -- evaluation / optimisation ------------------------------------------------

def evaluate(split: PreparedSplit, params: BackboneParams, adapters=None, batch: int = 256):
    """Mean loss and exact correct/total over a split."""
    total_loss = 0.0
    correct = 0
    N = len(split)
    for lo in range(0, N, batch):
        sl = slice(lo, min(lo + batch, N))
        ctx = split.ctx.take(sl) if adapters is not None else None
        logits = forward_logits(split.patches[sl], split.keypoints[sl], params, adapters, ctx)
        loss, _ = cross_entropy(logits, split.labels[sl])
        total_loss += loss * (sl.stop - sl.start)
        correct += int(np.sum(np.argmax(logits, axis=1) == split.labels[sl]))
    return total_loss / N, correct, N


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


class _FrozenCache:
    """Precomputes whatever the mode leaves frozen: pooled features for linear
    probing, patch tokens for adapter tuning. Mathematically the same as the
    uncached path, only cheaper."""

    def __init__(self, split: PreparedSplit, params: BackboneParams, mode: str, chunk: int = 256):
        self.split = split
        self.mode = mode
        self.tokens = self.features = None
        if mode == "full":
            return
        parts = []
        for lo in range(0, len(split), chunk):
            sl = slice(lo, lo + chunk)
            if mode == "linear_probe":
                parts.append(pooled_features(split.patches[sl], split.keypoints[sl], params))
            else:
                parts.append(embed_tokens(split.patches[sl], split.keypoints[sl], params)[0])
        if mode == "linear_probe":
            self.features = np.concatenate(parts)
        else:
            self.tokens = np.concatenate(parts)

    def loss_and_grads(self, idx, params, adapters):
        s = self.split
        if self.features is not None:
            pooled = self.features[idx]
            logits = classify(pooled, params["head.w"], params["head.b"])
            loss, dlogits = cross_entropy(logits, s.labels[idx])
            return loss, {"head.w": dlogits.T @ pooled, "head.b": dlogits.sum(0)}
        ctx = s.ctx.take(idx) if adapters is not None else None
        tokens = self.tokens[idx] if self.tokens is not None else None
        loss, grads, _ = loss_and_grads(s.patches[idx], s.keypoints[idx], s.labels[idx], params, adapters, ctx,
                                        self.mode, tokens=tokens)
        return loss, grads

    def evaluate(self, params, adapters, batch: int = 256):
        s = self.split
        total_loss, correct, N = 0.0, 0, len(s)
        for lo in range(0, N, batch):
            sl = slice(lo, min(lo + batch, N))
            if self.features is not None:
                logits = classify(self.features[sl], params["head.w"], params["head.b"])
            else:
                ctx = s.ctx.take(sl) if adapters is not None else None
                tokens = self.tokens[sl] if self.tokens is not None else None
                logits = forward_logits(s.patches[sl], s.keypoints[sl], params, adapters, ctx, tokens)
            loss, _ = cross_entropy(logits, s.labels[sl])
            total_loss += loss * (sl.stop - sl.start)
            correct += int(np.sum(np.argmax(logits, axis=1) == s.labels[sl]))
        return total_loss / N, correct, N


def fit(params: BackboneParams, adapters, train: PreparedSplit, test: PreparedSplit, mode: str,
        lr: float, epochs: int, batch_size: int, seed: int,
        on_record: Callable[[MetricsRecord], None] | None = None) -> list[MetricsRecord]:
    """Plain SGD with per-step cosine decay; one record per epoch, epoch 0 before any step."""
    names = trainable_names(params, adapters, mode)
    use_adapters = adapters if mode != "linear_probe" else None
    n_total = model_size(params, use_adapters)
    n_trainable = sum(tensor_ref(params, adapters, n).size for n in names)
    train_c = _FrozenCache(train, params, mode)
    test_c = _FrozenCache(test, params, mode)
    rng = np.random.default_rng([seed, 7])
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total_steps = steps_per_epoch * epochs
    records = []
    start = time.perf_counter()

    def emit(epoch, loss, step_lr):
        tr_loss, tr_c, tr_n = train_c.evaluate(params, use_adapters)
        _, te_c, te_n = test_c.evaluate(params, use_adapters)
        rec = MetricsRecord(epoch, tr_loss if loss is None else loss, tr_c, tr_n, te_c, te_n,
                            int(n_trainable), int(n_total), step_lr, time.perf_counter() - start)
        records.append(rec)
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, rec.loss, rec.train_acc, rec.test_acc)
        if on_record:
            on_record(rec)

    emit(0, None, lr)
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(train), batch_size):
            idx = np.sort(order[lo:lo + batch_size])
            with np.errstate(over="ignore", invalid="ignore"):  # non-finite loss is reported below
                loss, grads = train_c.loss_and_grads(idx, params, use_adapters)
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged to {loss} at epoch {epoch}, step {step} (lr {lr})")
            step_lr = cosine_lr(lr, step, total_steps)
            for name, g in grads.items():
                tensor_ref(params, adapters, name)[...] -= step_lr * g
            losses.append(loss * len(idx))
            step += 1
        emit(epoch, float(np.sum(losses) / len(train)), cosine_lr(lr, step, total_steps))
    return records


# -- run outputs ----------------------------------------------------------------

class RunWriter:
    """metrics.jsonl (reproducible), timing.jsonl (wall-clock), manifest.json."""

    def __init__(self, out_dir):
        self.out = Path(out_dir) if out_dir is not None else None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "metrics.jsonl").write_text("")
            (self.out / "timing.jsonl").write_text("")

    def record(self, rec: MetricsRecord) -> None:
        if self.out is None:
            return
        with open(self.out / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        with open(self.out / "timing.jsonl", "a") as fh:
            fh.write(json.dumps({"epoch": rec.epoch, "wall_clock": rec.wall_clock}) + "\n")

    def manifest(self, data: dict[str, Any]) -> None:
        if self.out is not None:
            (self.out / "manifest.json").write_text(dumps(data) + "\n")

    def checkpoint(self, ck: Checkpoint) -> Path | None:
        if self.out is None:
            return None
        path = self.out / "checkpoint.spck"
        ckpt_io.save(ck, path)
        return path


def _model_meta(cfg: ExperimentConfig) -> dict[str, int]:
    return {k: getattr(cfg.model, k) for k in MODEL_KEYS}


def run_pretrain(cfg: ExperimentConfig, data_dir, out_dir=None):
    """Train every parameter on the source classes; the saved checkpoint is all-frozen."""
    cfg.validate()
    train = load_prepared(data_dir, "source", "train", cfg, with_context=False)
    test = load_prepared(data_dir, "source", "test", cfg, with_context=False)
    rng = np.random.default_rng([cfg.optim.seed, 1])
    m = cfg.model
    params = init_backbone(m.d, m.layers, m.heads, len(train.classes), m.embed_hidden, rng)
    writer = RunWriter(out_dir)
    records = fit(params, None, train, test, "full", cfg.optim.pretrain_lr, cfg.optim.pretrain_epochs,
                  cfg.optim.batch_size, cfg.optim.seed, writer.record)
    meta = {"kind": "pretrained", "model": _model_meta(cfg), "classes": train.classes,
            "config": cfg.to_dict()}
    ck = to_checkpoint(params, None, (), meta)
    path = writer.checkpoint(ck)
    writer.manifest({"command": "pretrain", "config": cfg.to_dict(),
                     "data": str(Path(data_dir).resolve()), "seeds": _seeds(cfg),
                     "checkpoint": str(path) if path else None,
                     "trainable": records[-1].trainable, "total": records[-1].total,
                     "trainable_ratio": records[-1].trainable_ratio})
    return ck, records


def _seeds(cfg: ExperimentConfig) -> dict[str, int]:
    return {"dataset": cfg.dataset.seed, "optim": cfg.optim.seed}


def _load_ck(checkpoint) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else ckpt_io.load(checkpoint)


def build_tuning_model(cfg: ExperimentConfig, ck: Checkpoint, num_classes: int, mode: str):
    """Frozen backbone from ``ck`` with a fresh head, plus adapters when the mode uses them."""
    if ck.meta.get("kind") != "pretrained":
        raise ConfigError(f"tuning needs a pre-trained checkpoint, got kind={ck.meta.get('kind')!r}")
    if ck.meta.get("model") != _model_meta(cfg):
        raise ConfigError(f"checkpoint model {ck.meta.get('model')} does not match config {_model_meta(cfg)}")
    params, _ = from_checkpoint(ck)
    rng = np.random.default_rng([cfg.optim.seed, 2])
    reset_head(params, num_classes, rng)
    adapters = None
    if mode == "pcsa":
        adapters = init_adapters(params, cfg.adapter.r, cfg.adapter.s, np.random.default_rng([cfg.optim.seed, 3]))
    return params, adapters


def run_tune(cfg: ExperimentConfig, checkpoint, data_dir, out_dir=None, mode: str | None = None,
             checkpoint_path: str | None = None):
    """Fine-tune on the target classes. Returns ``(tuned checkpoint, records)``."""
    mode = mode or cfg.mode
    cfg = cfg.copy()
    cfg.mode = mode
    cfg.validate()
    ck = _load_ck(checkpoint)
    with_ctx = mode == "pcsa"
    train = load_prepared(data_dir, "target", "train", cfg, with_context=with_ctx)
    test = load_prepared(data_dir, "target", "test", cfg, with_context=with_ctx)
    params, adapters = build_tuning_model(cfg, ck, len(train.classes), mode)
    writer = RunWriter(out_dir)
    o = cfg.optim
    records = fit(params, adapters, train, test, mode, o.lr, o.epochs, o.batch_size, o.seed, writer.record)
    names = trainable_names(params, adapters, mode)
    meta = {"kind": "tuned", "mode": mode, "model": _model_meta(cfg), "classes": train.classes,
            "scale": cfg.adapter.s, "config": cfg.to_dict()}
    tuned = to_checkpoint(params, adapters, names, meta)
    path = writer.checkpoint(tuned)
    last = records[-1]
    if checkpoint_path is None and not isinstance(checkpoint, Checkpoint):
        checkpoint_path = str(Path(checkpoint).resolve())
    writer.manifest({"command": "tune", "mode": mode, "config": cfg.to_dict(),
                     "data": str(Path(data_dir).resolve()), "checkpoint": checkpoint_path,
                     "seeds": _seeds(cfg), "output_checkpoint": str(path) if path else None,
                     "trainable": last.trainable, "total": last.total,
                     "trainable_ratio": last.trainable_ratio,
                     "final": last.to_json()})
    return tuned, records


def run_eval(checkpoint, data_dir, split: str = "test") -> dict[str, Any]:
    ck = _load_ck(checkpoint)
    cfg = ExperimentConfig.from_dict(ck.meta["config"])
    params, adapters = from_checkpoint(ck)
    domain = "source" if ck.meta["kind"] == "pretrained" else "target"
    prep = load_prepared(data_dir, domain, split, cfg, with_context=adapters is not None)
    loss, correct, total = evaluate(prep, params, adapters)
    return {"domain": domain, "split": split, "loss": loss, "correct": correct, "total": total,
            "accuracy": float(Fraction(correct, total))}


# -- ablation -----------------------------------------------------------------

def parse_grid(specs: list[str]) -> dict[str, list[str]]:
    """``["s=0.01,0.1", "ordering=z_order,hilbert"]`` -> ``{"adapter.s": [...], ...}``."""
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid entry {spec!r} must look like key=v1,v2")
        key, values = spec.split("=", 1)
        key = GRID_ALIASES.get(key.strip(), key.strip())
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not grid[key]:
            raise ConfigError(f"grid entry {spec!r} has no values")
    return grid


def spectral_signature(prep: PreparedSplit, index: int = 0) -> tuple[str, float]:
    """Digest of the global coefficients of one sample's key-point coordinates, and the
    fraction of their energy in the lowest quarter of frequencies."""
    U = prep.ctx.global_basis[index]
    coeffs = U.T @ prep.keypoints[index]
    digest = hashlib.sha256(np.ascontiguousarray(coeffs).tobytes()).hexdigest()[:16]
    energy = np.sum(coeffs ** 2, axis=1)
    low = float(energy[: max(1, len(energy) // 4)].sum() / energy.sum())
    return digest, low


def run_ablation(cfg: ExperimentConfig, grid: dict[str, list], checkpoint, data_dir, out_dir=None,
                 checkpoint_path: str | None = None) -> list[dict[str, Any]]:
    """Run :func:`run_tune` (pcsa mode unless swept) on every cell of the grid.

    A cell whose loss diverges still gets a row, with ``status="diverged"``.
    """
    for key in grid:
        get_key(cfg, key)  # unknown keys raise ConfigError
        if not key.startswith(SWEEPABLE_SECTIONS) and key != "mode":
            raise ConfigError(f"{key!r} cannot be swept against a fixed checkpoint")
    ck = _load_ck(checkpoint)
    keys = list(grid)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for ci, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        cell = cfg.copy()
        for k, v in zip(keys, values):
            set_key(cell, k, v)
        cell.validate()
        cell_dir = out / f"cell{ci:03d}" if out is not None else None
        row = {"cell": ci}
        row.update({k: get_key(cell, k) for k in keys})
        row["mode"] = cell.mode
        try:
            _, recs = run_tune(cell, ck, data_dir, cell_dir, checkpoint_path=checkpoint_path)
        except NumericError as exc:
            # a diverging cell is a result of the sweep, not a reason to stop it
            log.warning("cell %d diverged: %s", ci, exc)
            row.update(status="diverged", error=str(exc), test_acc=None, train_acc=None, loss=None)
            if cell_dir is not None:
                cell_dir.mkdir(parents=True, exist_ok=True)
                (cell_dir / "manifest.json").write_text(dumps({
                    "command": "tune", "mode": cell.mode, "status": "diverged", "error": str(exc),
                    "config": cell.to_dict(), "data": str(Path(data_dir).resolve()),
                    "checkpoint": checkpoint_path, "seeds": _seeds(cell)}) + "\n")
            rows.append(row)
            continue
        last = recs[-1]
        row.update(status="ok", test_acc=last.test_acc, train_acc=last.train_acc, loss=last.loss,
                   trainable=last.trainable, trainable_ratio=last.trainable_ratio)
        if cell.mode == "pcsa":
            prep = load_prepared(data_dir, "target", "test", cell, with_context=True)
            row["coeff_digest"], row["low_freq_energy"] = spectral_signature(prep)
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        cols = list(dict.fromkeys(c for r in rows for c in r))
        lines = ["\t".join(cols)] + ["\t".join(str(r.get(c, "")) for c in cols) for r in rows]
        (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
        (out / "manifest.json").write_text(dumps({
            "command": "ablate", "config": cfg.to_dict(), "grid": grid,
            "data": str(Path(data_dir).resolve()), "checkpoint": checkpoint_path,
            "seeds": _seeds(cfg)}) + "\n")
    return rows
