"""Synthetic shape datasets and their preparation into patches and spectral
contexts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .adapter import AdapterContext
from .config import SHAPES, DatasetConfig, ExperimentConfig, dumps
from .errors import ConfigError, DataError
from .graph import batch_bases
from .ordering import sort_keypoints
from .pointcloud import PointCloud, farthest_point_sampling, group_patches, load_xyz, save_xyz
from .spectral import dct_basis

DOMAINS = ("source", "target")
SPLITS = ("train", "test")


def _sphere(rng, count, radius=1.0, center=(0.0, 0.0, 0.0)):
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v + np.asarray(center)


def _cube(rng, count, half=0.6):
    face = rng.integers(0, 6, count)
    pts = rng.uniform(-half, half, (count, 3))
    axis = face // 2
    pts[np.arange(count), axis] = np.where(face % 2 == 0, -half, half)
    return pts


def _torus(rng, count, major=0.7, minor=0.3):
    out = np.empty((0, 3))
    while len(out) < count:
        u = rng.uniform(0, 2 * np.pi, 2 * count)
        v = rng.uniform(0, 2 * np.pi, 2 * count)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(0, major + minor, 2 * count) < major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], 1)])
    return out[:count]


def _disk(rng, count, radius, z):
    rad = radius * np.sqrt(rng.uniform(0, 1, count))
    ang = rng.uniform(0, 2 * np.pi, count)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang), np.full(count, z)], 1)


def _cylinder(rng, count, radius=0.5, height=1.6):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    which = rng.choice(3, size=count, p=np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.empty((count, 3))
    ns = int(np.sum(which == 0))
    ang = rng.uniform(0, 2 * np.pi, ns)
    pts[which == 0] = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                                rng.uniform(-height / 2, height / 2, ns)], 1)
    pts[which == 1] = _disk(rng, int(np.sum(which == 1)), radius, -height / 2)
    pts[which == 2] = _disk(rng, int(np.sum(which == 2)), radius, height / 2)
    return pts


def _cone(rng, count, radius=0.7, height=1.4):
    slant = np.hypot(radius, height)
    side = np.pi * radius * slant
    base = np.pi * radius ** 2
    on_side = rng.uniform(0, side + base, count) < side
    pts = np.empty((count, 3))
    ns = int(on_side.sum())
    # lateral area grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(0, 1, ns))
    ang = rng.uniform(0, 2 * np.pi, ns)
    pts[on_side] = np.stack([t * radius * np.cos(ang), t * radius * np.sin(ang),
                             height / 2 - t * height], 1)
    pts[~on_side] = _disk(rng, count - ns, radius, -height / 2)
    return pts


def _two_sphere(rng, count, radius=0.5, offset=0.6):
    left = rng.uniform(0, 1, count) < 0.5
    pts = np.empty((count, 3))
    pts[left] = _sphere(rng, int(left.sum()), radius, (-offset, 0, 0))
    pts[~left] = _sphere(rng, int((~left).sum()), radius, (offset, 0, 0))
    return pts


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "torus": _torus,
    "cylinder": _cylinder,
    "cone": _cone,
    "two_sphere": _two_sphere,
}
assert set(_GENERATORS) == set(SHAPES)


def sample_shape(shape: str, count: int, noise: float, rng: np.random.Generator,
                 rotate: bool = True) -> np.ndarray:
    if shape not in _GENERATORS:
        raise ConfigError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    pts = _GENERATORS[shape](rng, count)
    if rotate:
        pts = Rotation.random(random_state=rng).apply(pts)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts


def _sample_rng(seed: int, domain: int, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, label, index])


def generate_clouds(cfg: DatasetConfig, domain: str) -> dict[str, list[PointCloud]]:
    shapes = cfg.source_shapes if domain == "source" else cfg.target_shapes
    dom = DOMAINS.index(domain)
    per_split = {"train": cfg.train_per_class, "test": cfg.test_per_class}
    out: dict[str, list[PointCloud]] = {s: [] for s in SPLITS}
    for label, shape in enumerate(shapes):
        i = 0
        for split in SPLITS:
            for _ in range(per_split[split]):
                rng = _sample_rng(cfg.seed, dom, label, i)
                pts = sample_shape(shape, cfg.points, cfg.noise, rng)
                out[split].append(PointCloud(pts, label, f"{domain}_{split}_{shape}_{i:05d}"))
                i += 1
    return out


def gen_synthetic(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Write every cloud as an ``.xyz`` file plus ``manifest.json``; deterministic per seed."""
    out = Path(out_dir)
    ds = cfg.dataset
    manifest = {"dataset": cfg.to_dict()["dataset"], "domains": {}}
    for domain in DOMAINS:
        clouds = generate_clouds(ds, domain)
        shapes = ds.source_shapes if domain == "source" else ds.target_shapes
        entry = {"classes": list(shapes), "splits": {}}
        for split, items in clouds.items():
            d = out / domain / split
            d.mkdir(parents=True, exist_ok=True)
            for c in items:
                save_xyz(c, d / f"{c.id}.xyz")
            counts = {s: sum(1 for c in items if c.label == i) for i, s in enumerate(shapes)}
            entry["splits"][split] = {"files": [f"{domain}/{split}/{c.id}.xyz" for c in items],
                                      "counts": counts}
        manifest["domains"][domain] = entry
    (out / "manifest.json").write_text(dumps(manifest) + "\n")
    return out


@dataclass
class RawSplit:
    clouds: list[PointCloud]
    classes: list[str]


def load_split(data_dir: str | Path, domain: str, split: str) -> RawSplit:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    try:
        entry = manifest["domains"][domain]
        files = entry["splits"][split]["files"]
    except KeyError:
        raise DataError(f"dataset at {root} has no {domain}/{split} split") from None
    clouds = [load_xyz(root / f) for f in files]
    for c in clouds:
        if c.label is None:
            raise DataError(f"cloud {c.id} has no label")
    return RawSplit(clouds, entry["classes"])


@dataclass
class PreparedSplit:
    """Patches, key points and labels ready for the model; ``ctx`` holds the spectral bases."""

    patches: np.ndarray  # (N, n, g, 3)
    keypoints: np.ndarray  # (N, n, 3)
    labels: np.ndarray
    classes: list[str]
    ctx: AdapterContext | None = None

    def __len__(self) -> int:
        return len(self.labels)


def prepare(clouds: list[PointCloud], classes: list[str], n: int, g: int) -> PreparedSplit:
    patches, keypoints, labels = [], [], []
    for c in clouds:
        idx = farthest_point_sampling(c, n, start=0)
        ps = group_patches(c, idx, g)
        patches.append(ps.patches)
        keypoints.append(ps.keypoints)
        labels.append(c.label)
    return PreparedSplit(np.stack(patches), np.stack(keypoints), np.array(labels, dtype=np.int64), classes)


def build_context(keypoints: np.ndarray, method: str, k: int, basis: str = "gft",
                  seed: int = 0) -> AdapterContext:
    """Orderings and bases for every sample; computed once, shared by every layer."""
    B, n, _ = keypoints.shape
    orderings = [sort_keypoints(keypoints[b], method, k, seed=seed + b) for b in range(B)]
    perm = np.stack([o.permutation for o in orderings])
    if basis == "dct":
        m = n // k
        glob = np.broadcast_to(dct_basis(n).eigenvectors, (B, n, n)).copy()
        loc = np.broadcast_to(dct_basis(m).eigenvectors, (B, k, m, m)).copy()
    else:
        glob, loc = batch_bases(keypoints, perm, k)
    return AdapterContext.from_arrays(glob, loc, orderings)


def prepare_with_context(split: RawSplit, cfg: ExperimentConfig, seed: int = 0) -> PreparedSplit:
    prep = prepare(split.clouds, split.classes, cfg.model.n, cfg.model.g)
    prep.ctx = build_context(prep.keypoints, cfg.ordering.method, cfg.ordering.k, cfg.adapter.basis, seed)
    return prep
