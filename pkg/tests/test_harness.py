import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from spectune import checkpoint as ckpt_io
from spectune.config import (ExperimentConfig, format_config, get_key, load_config,
                             parse_config_text, set_key)
from spectune.data import gen_synthetic, load_split, prepare_with_context, sample_shape
from spectune.errors import ConfigError, DataError, NumericError
from spectune.train import (evaluate, from_checkpoint, load_prepared, parse_grid, run_ablation,
                            run_eval, run_pretrain, run_tune, spectral_signature)

from conftest import tiny_config


def files_of(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- data -----------------------------------------------------------------------

def test_noise_free_sphere_is_on_the_unit_sphere():
    pts = sample_shape("sphere", 500, 0.0, np.random.default_rng(0))
    assert np.abs(np.linalg.norm(pts, axis=1) - 1).max() < 1e-9


@pytest.mark.parametrize("shape", ["sphere", "cube", "torus", "cylinder", "cone", "two_sphere"])
def test_every_shape_samples_finite_points(shape):
    pts = sample_shape(shape, 300, 0.01, np.random.default_rng(1))
    assert pts.shape == (300, 3) and np.all(np.isfinite(pts))


def test_surfaces_without_noise():
    rng = np.random.default_rng(2)
    cube = sample_shape("cube", 400, 0.0, rng, rotate=False)
    assert np.allclose(np.abs(cube).max(1), 0.6)
    torus = sample_shape("torus", 400, 0.0, rng, rotate=False)
    ring = np.hypot(torus[:, 0], torus[:, 1])
    np.testing.assert_allclose(np.hypot(ring - 0.7, torus[:, 2]), 0.3, atol=1e-12)


def test_unknown_shape():
    with pytest.raises(ConfigError):
        sample_shape("klein_bottle", 10, 0.0, np.random.default_rng(0))
    cfg = ExperimentConfig()
    cfg.dataset.target_shapes = ["cylinder", "pyramid"]
    with pytest.raises(ConfigError):
        cfg.validate()


def test_same_seed_byte_identical(tmp_path, tiny_cfg):
    a = files_of(gen_synthetic(tiny_cfg, tmp_path / "a"))
    b = files_of(gen_synthetic(tiny_cfg, tmp_path / "b"))
    assert a == b
    other = tiny_cfg.copy()
    other.dataset.seed = 1
    assert files_of(gen_synthetic(other, tmp_path / "c")) != a


def test_manifest_counts(tiny_data, tiny_cfg):
    manifest = json.loads((tiny_data / "manifest.json").read_text())
    for domain, shapes in (("source", tiny_cfg.dataset.source_shapes),
                           ("target", tiny_cfg.dataset.target_shapes)):
        entry = manifest["domains"][domain]
        assert entry["classes"] == shapes
        assert entry["splits"]["train"]["counts"] == {s: 12 for s in shapes}
        assert entry["splits"]["test"]["counts"] == {s: 6 for s in shapes}
        split = load_split(tiny_data, domain, "train")
        assert [c.label for c in split.clouds].count(0) == 12


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        load_split(tmp_path, "source", "train")


def test_dct_and_gft_coefficients_differ(tiny_data, tiny_cfg):
    raw = load_split(tiny_data, "target", "test")
    gft_cfg = tiny_cfg.copy()
    dct_cfg = tiny_cfg.copy()
    dct_cfg.adapter.basis = "dct"
    a = prepare_with_context(raw, gft_cfg)
    b = prepare_with_context(raw, dct_cfg)
    np.testing.assert_array_equal(a.keypoints[0], b.keypoints[0])
    assert not np.allclose(a.ctx.global_basis[0].T @ a.keypoints[0], b.ctx.global_basis[0].T @ b.keypoints[0])
    assert spectral_signature(a)[0] != spectral_signature(b)[0]


# -- config -----------------------------------------------------------------------

def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.adapter.r = 4
    cfg.dataset.target_shapes = ["cone", "cylinder"]
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n" + format_config(cfg))
    assert load_config(path).to_dict() == cfg.to_dict()
    assert load_config(path, {"adapter.s": "2.5"}).adapter.s == 2.5


@pytest.mark.parametrize("key, value", [
    ("ordering.k", 5), ("adapter.r", 32), ("adapter.r", 0), ("model.layers", 0),
    ("ordering.method", "peano"), ("adapter.basis", "fft"), ("mode", "lora"), ("dataset.noise", -1.0),
])
def test_config_invariants(key, value):
    cfg = ExperimentConfig()
    set_key(cfg, key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_key_errors():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        set_key(cfg, "adapter.rank", 3)
    with pytest.raises(ConfigError):
        get_key(cfg, "nope")
    with pytest.raises(ConfigError):
        set_key(cfg, "model.n", "many")
    with pytest.raises(ConfigError):
        parse_config_text("model.n 32\n")


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_bytes_round_trip(tiny_pretrained):
    ck = tiny_pretrained[0]
    raw = ckpt_io.to_bytes(ck)
    back = ckpt_io.from_bytes(raw)
    assert ckpt_io.to_bytes(back) == raw
    assert back.trainable == set() and back.meta == ck.meta
    for k, v in ck.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(DataError):
        ckpt_io.from_bytes(b"NOPE" + bytes(20))
    raw = bytearray(ckpt_io.to_bytes(ckpt_io.Checkpoint({"a": np.ones(2)})))
    raw[4] = 9
    with pytest.raises(DataError):
        ckpt_io.from_bytes(bytes(raw))
    with pytest.raises(DataError):
        ckpt_io.load(tmp_path / "missing.spck")


# -- pretrain / tune ------------------------------------------------------------------

def test_pretrain_outputs(tiny_pretrained):
    ck, records, out = tiny_pretrained
    assert ck.meta["kind"] == "pretrained" and ck.trainable == set()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == len(records) == 4
    first = json.loads(lines[0])
    assert "wall_clock" not in first
    assert first["train_acc"] == float(Fraction(first["train_correct"], first["train_total"]))
    assert len((out / "timing.jsonl").read_text().splitlines()) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["n"] == 8
    assert manifest["seeds"] == {"dataset": 0, "optim": 0}
    assert manifest["trainable_ratio"] == 1.0


def test_reload_reproduces_eval_loss(tiny_pretrained, tiny_cfg, tiny_data):
    ck, _, out = tiny_pretrained
    params, _ = from_checkpoint(ckpt_io.load(out / "checkpoint.spck"))
    direct, _ = from_checkpoint(ck)
    split = load_prepared(tiny_data, "source", "test", tiny_cfg, with_context=False)
    a = evaluate(split, params)
    b = evaluate(split, direct)
    assert abs(a[0] - b[0]) <= 1e-12 and a[1:] == b[1:]
    assert run_eval(out / "checkpoint.spck", tiny_data)["loss"] == pytest.approx(a[0], abs=1e-12)


def test_divergence_is_reported(tiny_data):
    cfg = tiny_config(**{"optim.pretrain_lr": 1e8})
    with pytest.raises(NumericError, match="diverged"):
        run_pretrain(cfg, tiny_data)


def test_ablation_records_diverged_cells(tiny_pretrained, tiny_cfg, tiny_data, tmp_path):
    rows = run_ablation(tiny_cfg, {"optim.lr": [0.05, 1e8]}, tiny_pretrained[0], tiny_data, tmp_path)
    assert [r["status"] for r in rows] == ["ok", "diverged"]
    assert rows[1]["test_acc"] is None and "diverged" in rows[1]["error"]
    lines = (tmp_path / "ablation.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[1])["optim.lr"] == 1e8
    assert len((tmp_path / "ablation.tsv").read_text().splitlines()) == 3
    cell = json.loads((tmp_path / "cell001" / "manifest.json").read_text())
    assert cell["status"] == "diverged" and cell["config"]["optim"]["lr"] == 1e8


def test_linear_probe_delta_has_no_adapters(tiny_pretrained, tiny_cfg, tiny_data):
    tuned, records = run_tune(tiny_cfg, tiny_pretrained[0], tiny_data, mode="linear_probe")
    assert set(tuned.delta()) == {"head.w", "head.b"}
    assert not any(k.startswith("adapters.") for k in tuned.tensors)
    assert records[-1].trainable == 3 * (2 * 8) + 3  # head over concat(cls, mean)


def test_pcsa_contract(tiny_pretrained, tiny_cfg, tiny_data, tmp_path):
    pre = tiny_pretrained[0]
    tuned, records = run_tune(tiny_cfg, pre, tiny_data, tmp_path, mode="pcsa")
    probe, probe_records = run_tune(tiny_cfg, pre, tiny_data, mode="linear_probe")
    # step-0 evaluation with zero-initialised adapters is the frozen model
    assert abs(records[0].loss - probe_records[0].loss) <= 1e-12
    assert records[0].test_correct == probe_records[0].test_correct
    adapter_keys = {k for k in tuned.delta() if k.startswith("adapters.")}
    assert len(adapter_keys) == 4 * tiny_cfg.model.layers
    assert set(tuned.delta()) == adapter_keys | {"head.w", "head.b"}
    # frozen tensors are bit-identical to the pre-trained ones
    for k, v in pre.tensors.items():
        if not k.startswith("head."):
            np.testing.assert_array_equal(tuned.tensors[k], v)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["trainable"] == records[-1].trainable
    assert 0 < manifest["trainable_ratio"] < 1
    for r in records:
        assert 0 <= r.train_acc <= 1 and 0 <= r.test_acc <= 1
        assert r.test_acc == float(Fraction(r.test_correct, r.test_total))
    lrs = [r.lr for r in records]
    assert lrs[0] == tiny_cfg.optim.lr and lrs[-1] == pytest.approx(0.0, abs=1e-15)


def test_tuning_is_deterministic(tiny_pretrained, tiny_cfg, tiny_data, tmp_path):
    run_tune(tiny_cfg, tiny_pretrained[0], tiny_data, tmp_path / "a")
    run_tune(tiny_cfg, tiny_pretrained[0], tiny_data, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "checkpoint.spck").read_bytes() == (tmp_path / "b" / "checkpoint.spck").read_bytes()


def test_tuned_checkpoint_evaluates(tiny_pretrained, tiny_cfg, tiny_data, tmp_path):
    _, records = run_tune(tiny_cfg, tiny_pretrained[0], tiny_data, tmp_path)
    res = run_eval(tmp_path / "checkpoint.spck", tiny_data)
    assert res["domain"] == "target"
    assert res["correct"] == records[-1].test_correct


def test_mode_checkpoint_mismatch(tiny_pretrained, tiny_cfg, tiny_data):
    tuned, _ = run_tune(tiny_cfg, tiny_pretrained[0], tiny_data, mode="linear_probe")
    with pytest.raises(ConfigError):
        run_tune(tiny_cfg, tuned, tiny_data)
    other = tiny_config(**{"model.d": 12})
    with pytest.raises(ConfigError):
        run_tune(other, tiny_pretrained[0], tiny_data)


# -- ablation -----------------------------------------------------------------------------

def test_scale_sweep_rows(tiny_pretrained, tiny_cfg, tiny_data, tmp_path):
    grid = parse_grid(["s=0.01,0.1,1,2,5,10"])
    cfg = tiny_cfg.copy()
    cfg.optim.epochs = 1
    rows = run_ablation(cfg, grid, tiny_pretrained[0], tiny_data, tmp_path)
    assert [r["adapter.s"] for r in rows] == [0.01, 0.1, 1.0, 2.0, 5.0, 10.0]
    assert len((tmp_path / "ablation.tsv").read_text().splitlines()) == 7
    assert len((tmp_path / "ablation.jsonl").read_text().splitlines()) == 6
    for i, row in enumerate(rows):
        cell = json.loads((tmp_path / f"cell{i:03d}" / "manifest.json").read_text())
        assert cell["config"]["adapter"]["s"] == row["adapter.s"]


def test_product_grid_and_basis_digests(tiny_pretrained, tiny_cfg, tiny_data):
    cfg = tiny_cfg.copy()
    cfg.optim.epochs = 1
    rows = run_ablation(cfg, parse_grid(["basis=gft,dct", "k=1,2"]), tiny_pretrained[0], tiny_data)
    assert [(r["adapter.basis"], r["ordering.k"]) for r in rows] == [("gft", 1), ("gft", 2), ("dct", 1), ("dct", 2)]
    assert rows[0]["coeff_digest"] != rows[2]["coeff_digest"]


@pytest.mark.parametrize("spec", ["adapter.rank=1,2", "model.d=4,8", "nonsense"])
def test_bad_grid(spec, tiny_pretrained, tiny_cfg, tiny_data):
    with pytest.raises(ConfigError):
        run_ablation(tiny_cfg, parse_grid([spec]), tiny_pretrained[0], tiny_data)


# -- default-scale baseline -------------------------------------------------------------

def test_default_pretrain_baseline(tmp_path):
    """Default toy config: source train accuracy above 0.9, loss falling for 5 epochs."""
    cfg = ExperimentConfig()
    data = gen_synthetic(cfg, tmp_path / "data")
    _, records = run_pretrain(cfg, data)
    losses = [r.loss for r in records[:6]]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert records[-1].train_acc > 0.9
    assert all(math.isfinite(r.loss) for r in records)
