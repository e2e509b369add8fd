"""Point-cloud ingestion, farthest point sampling, kNN patch grouping and a
small PointNet-style patch embedder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, SizeError


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SizeError(f"points must be (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise DataError(f"cloud {self.id!r} has non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    keypoints: np.ndarray  # (n, 3)
    patches: np.ndarray  # (n, g, 3), centered on keypoints
    indices: np.ndarray  # (n, g) indices into the source cloud

    @property
    def n(self) -> int:
        return self.keypoints.shape[0]

    @property
    def g(self) -> int:
        return self.patches.shape[1]


@dataclass
class TokenMatrix:
    values: np.ndarray
    order_tag: str = "original"


def load_xyz(path: str | Path, id: str | None = None) -> PointCloud:
    """Read a cloud written as ``x y z`` lines, with an optional ``# label <int>`` header."""
    path = Path(path)
    label = None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "label":
                    try:
                        label = int(parts[1])
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad label {parts[1]!r}") from None
                    continue
                raise DataError(f"{path}:{lineno}: unrecognised header {line!r}")
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
            if not all(np.isfinite(xyz)):
                raise DataError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(xyz)
    if not rows:
        raise DataError(f"{path}: no points")
    return PointCloud(np.array(rows), label=label, id=id if id is not None else path.stem)


def format_xyz(cloud: PointCloud) -> str:
    lines = []
    if cloud.label is not None:
        lines.append(f"# label {int(cloud.label)}")
    # repr round-trips float64 exactly
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist())
    return "\n".join(lines) + "\n"


def save_xyz(cloud: PointCloud, path: str | Path) -> None:
    Path(path).write_text(format_xyz(cloud))


def farthest_point_sampling(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each new index maximises the distance to the already-selected set; ties go
    to the lowest index (``np.argmax`` returns the first maximum).
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    size = pts.shape[0]
    if n > size:
        raise SizeError(f"cannot sample {n} points from a cloud of {size}")
    if not 0 <= start < size:
        raise SizeError(f"start index {start} out of range for {size} points")
    selected = np.empty(n, dtype=np.int64)
    if n == 0:
        return selected
    mind = np.full(size, np.inf)
    idx = start
    for i in range(n):
        selected[i] = idx
        d = np.sum((pts - pts[idx]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[idx] = -1.0  # never pick an index twice, even with duplicate points
        idx = int(np.argmax(mind))
    return selected


def group_patches(points, keypoints: np.ndarray, g: int) -> PatchSet:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    keypoints = np.asarray(keypoints)
    if g > pts.shape[0]:
        raise SizeError(f"group size {g} exceeds cloud size {pts.shape[0]}")
    centers = pts[keypoints]
    d = np.sum((centers[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    # keypoint first even when a lower-index duplicate shares distance 0
    d[np.arange(len(keypoints)), keypoints] = -1.0
    nbr = np.argsort(d, axis=1, kind="stable")[:, :g]
    patches = pts[nbr] - centers[:, None, :]
    return PatchSet(keypoints=centers, patches=patches, indices=nbr)


@dataclass
class EmbedParams:
    """Weights of the patch embedder: per-point affine + ReLU, max-pool, affine."""

    w1: np.ndarray  # (h, 3)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)

    @classmethod
    def init(cls, hidden: int, dim: int, rng: np.random.Generator) -> "EmbedParams":
        return cls(
            w1=rng.normal(0.0, np.sqrt(2.0 / 3.0), (hidden, 3)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, np.sqrt(1.0 / hidden), (dim, hidden)),
            b2=np.zeros(dim),
        )


def embed_forward(patches: np.ndarray, w1, b1, w2, b2):
    """Batched embedder over ``patches[..., g, 3]``; returns tokens and a backward cache."""
    for w in (w1, b1, w2, b2):
        if not np.all(np.isfinite(w)):
            raise NumericError("non-finite embedding weights")
    h = patches @ w1.T + b1
    pooled = np.maximum(h, 0.0).max(axis=-2)
    out = pooled @ w2.T + b2
    return out, (patches, h, pooled)


def embed_backward(dout: np.ndarray, cache, w1, w2):
    patches, h, pooled = cache
    hidden = w1.shape[0]
    # first point attaining the max receives the gradient
    arg = np.argmax(np.maximum(h, 0.0), axis=-2)
    dw2 = dout.reshape(-1, dout.shape[-1]).T @ pooled.reshape(-1, hidden)
    db2 = dout.reshape(-1, dout.shape[-1]).sum(0)
    dpooled = dout @ w2
    da = np.zeros_like(h)
    np.put_along_axis(da, arg[..., None, :], dpooled[..., None, :], axis=-2)
    dh = da * (h > 0)
    dw1 = dh.reshape(-1, hidden).T @ patches.reshape(-1, 3)
    db1 = dh.reshape(-1, hidden).sum(0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def embed_patches(patchset: PatchSet, params: EmbedParams) -> TokenMatrix:
    out, _ = embed_forward(patchset.patches, params.w1, params.b1, params.w2, params.b2)
    return TokenMatrix(out)
