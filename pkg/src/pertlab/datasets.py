"""Binary-labeled datasets: synthetic Gaussians and IDX-backed image pairs.

A dataset is (x, y, meta) with x float64 (N, d), y int8 in {-1, +1}, and a
JSON-serializable meta block that fully determines the data: regenerating
from meta reproduces the arrays bit for bit (synthetic kinds) or re-reads the
same files (idx kind).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialize import load_container, load_idx, save_container

# synthetic holdouts draw with seed = train seed + this fixed offset, so a
# sweep never has to store its test data
TEST_SEED_OFFSET = 1_000_003


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y)
        if self.x.dtype != np.float64 or self.x.ndim != 2:
            raise ValueError("x must be a float64 matrix of shape (N, d)")
        if self.y.dtype != np.int8 or self.y.shape != (self.x.shape[0],):
            raise ValueError("y must be int8 with one entry per row of x")
        if not np.all(np.abs(self.y) == 1):
            raise ValueError("labels must be -1 or +1")
        if self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise ValueError("need at least one sample and one feature")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def save(self, path) -> None:
        save_container(path, self.x, self.y, self.meta)

    @classmethod
    def load(cls, path) -> "Dataset":
        rows, labels, meta = load_container(path)
        return cls(x=rows, y=labels, meta=meta)


def gen_zero_mean_gaussian(n: int, d: int, seed: int) -> Dataset:
    """x ~ N(0, I_d), labels independent uniform on {-1, +1}."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = (rng.integers(0, 2, size=n) * 2 - 1).astype(np.int8)
    meta = {"kind": "zero_mean", "n": n, "d": d, "seed": int(seed)}
    return Dataset(x=x, y=y, meta=meta)


def _shifted_rows(n: int, d: int, seed: int, shift: float) -> Dataset:
    rng = np.random.default_rng(seed)
    y = np.ones(n, dtype=np.int8)
    y[(n + 1) // 2 :] = -1
    x = shift * y[:, None].astype(np.float64) + rng.standard_normal((n, d))
    meta = {"kind": "shifted", "n": n, "d": d, "seed": int(seed), "shift": float(shift)}
    return Dataset(x=x, y=y, meta=meta)


def gen_shifted_gaussian(n: int, d: int, seed: int, shift: float = 0.3) -> Dataset:
    """x ~ N(shift * y * 1, I_d); first n/2 samples labeled +1, rest -1."""
    if n < 2 or n % 2:
        raise ValueError("shifted generator needs an even, positive n")
    if d < 1:
        raise ValueError("d must be positive")
    return _shifted_rows(n, d, seed, shift)


def load_idx_pair(
    images_path,
    labels_path,
    *,
    class_pos: int,
    class_neg: int,
    pixel_scale: float = 1.0,
) -> Dataset:
    """Two IDX classes as a binary problem; class_pos maps to +1 by argument
    position regardless of its numeric value. Pixels land in [0, pixel_scale].
    """
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected an IDX image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected an IDX label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    if class_pos == class_neg:
        raise ValueError("class_pos and class_neg must differ")
    keep = np.isin(labels, (class_pos, class_neg))
    if not np.any(labels[keep] == class_pos) or not np.any(labels[keep] == class_neg):
        raise ValueError("at least one requested class has no samples")
    x = images[keep].reshape(keep.sum(), -1).astype(np.float64) / 255.0 * pixel_scale
    y = np.where(labels[keep] == class_pos, 1, -1).astype(np.int8)
    meta = {
        "kind": "idx",
        "images": str(images_path),
        "labels": str(labels_path),
        "class_pos": int(class_pos),
        "class_neg": int(class_neg),
        "pixel_scale": float(pixel_scale),
    }
    return Dataset(x=x, y=y, meta=meta)


def regenerate(meta: dict) -> Dataset:
    """Rebuild a dataset from its meta block (bit-identical for synthetics)."""
    kind = meta.get("kind")
    if kind == "zero_mean":
        return gen_zero_mean_gaussian(meta["n"], meta["d"], meta["seed"])
    if kind == "shifted":
        return gen_shifted_gaussian(meta["n"], meta["d"], meta["seed"], meta["shift"])
    if kind == "idx":
        return load_idx_pair(
            meta["images"],
            meta["labels"],
            class_pos=meta["class_pos"],
            class_neg=meta["class_neg"],
            pixel_scale=meta["pixel_scale"],
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


def holdout(meta: dict, n_test: int, seed: int) -> Dataset:
    """Fresh iid draw from the same synthetic distribution.

    File-backed datasets have a real test split on disk, so asking for a
    synthetic holdout from them is an error.
    """
    kind = meta.get("kind")
    if kind == "zero_mean":
        return gen_zero_mean_gaussian(n_test, meta["d"], seed)
    if kind == "shifted":
        # evaluation sets have no balance requirement, so odd counts are fine
        return _shifted_rows(n_test, meta["d"], seed, meta["shift"])
    raise ValueError(f"holdout is only defined for synthetic datasets, not {kind!r}")


def dataset_to_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx_pair for square images: write pixels and original
    class values back out (identity round trip when pixel_scale > 0)."""
    if ds.meta.get("kind") != "idx":
        raise ValueError("only idx-backed datasets can be written back to IDX")
    side = int(round(ds.d**0.5))
    if side * side != ds.d:
        raise ValueError("pixel rows do not form square images")
    from .serialize import write_idx

    scale = ds.meta["pixel_scale"]
    images = np.rint(ds.x * (255.0 / scale)).astype(np.uint8).reshape(ds.n, side, side)
    labels = np.where(
        ds.y == 1, ds.meta["class_pos"], ds.meta["class_neg"]
    ).astype(np.uint8)
    write_idx(images_path, images)
    write_idx(labels_path, labels)
