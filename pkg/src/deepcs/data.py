"""Patch datasets drawn from image directories with image-level splits."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .images import list_images, load_image

SPLITS = ("train", "val", "test")


def assign_splits(names: Sequence[str], seed: int = 0, fractions=(0.7, 0.15, 0.15)) -> dict[str, str]:
    """Whole images go to one split; order is by a seeded hash of the name.

    Sorting by hash and cutting at the fractions keeps the proportions exact
    for small corpora while staying independent of the listing order.
    """
    keyed = sorted(names, key=lambda n: hashlib.sha256(f"{seed}:{n}".encode()).hexdigest())
    n = len(keyed)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = max(n_val, 1)
    out = {}
    for i, name in enumerate(keyed):
        out[name] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return out


@dataclass
class PatchDataset:
    source: str
    names: list[str]
    images: list[np.ndarray]
    index: list[tuple[int, int, int]]  # (image id, y, x)
    patch_size: int
    split: str = "all"
    seed: int = 0
    image_split: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def channels(self) -> int:
        return self.images[0].shape[2]

    def patch(self, k: int) -> np.ndarray:
        i, y, x = self.index[k]
        p = self.patch_size
        return self.images[i][y : y + p, x : x + p]

    def batch(self, ks: Sequence[int]) -> np.ndarray:
        return np.stack([self.patch(k) for k in ks]).astype(np.float32)

    def patch_name(self, k: int) -> str:
        i, y, x = self.index[k]
        return f"{self.names[i]}@{y},{x}"

    def image_ids(self) -> set[str]:
        return {self.names[i] for i, _, _ in self.index}

    def select(self, split: str) -> "PatchDataset":
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        keep = [t for t in self.index if self.image_split.get(self.names[t[0]]) == split]
        return PatchDataset(self.source, self.names, self.images, keep, self.patch_size, split, self.seed,
                            self.image_split)

    def limit(self, n: int, seed: int = 0) -> "PatchDataset":
        """At most ``n`` patches, chosen by a seeded permutation (order kept)."""
        if len(self.index) <= n:
            return self
        keep = sorted(np.random.default_rng(seed).permutation(len(self.index))[:n])
        return PatchDataset(self.source, self.names, self.images, [self.index[k] for k in keep],
                            self.patch_size, self.split, self.seed, self.image_split)


def extract_patches(images, patch_size: int, stride: int | None = None, *, names: Sequence[str] | None = None,
                    source: str = "<memory>", seed: int = 0) -> PatchDataset:
    """Raster-order patch index over every image large enough to hold one patch."""
    stride = stride or patch_size
    if isinstance(images, dict):
        names = list(images)
        images = [images[n] for n in names]
    images = [np.asarray(im, dtype=np.float32) for im in images]
    names = list(names) if names is not None else [f"img{i:03d}" for i in range(len(images))]
    index = []
    for i, im in enumerate(images):
        h, w = im.shape[:2]
        if h < patch_size or w < patch_size:
            warnings.warn(f"skipping {names[i]}: {h}x{w} smaller than patch {patch_size}")
            continue
        for y in range(0, h - patch_size + 1, stride):
            for x in range(0, w - patch_size + 1, stride):
                index.append((i, y, x))
    return PatchDataset(source, names, images, index, patch_size, "all", seed, assign_splits(names, seed))


def load_patch_dataset(directory, patch_size: int, stride: int | None = None, split: str | None = None,
                       channels: int | None = None, seed: int = 0) -> PatchDataset:
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    images = {p.name: load_image(p, channels) for p in paths}
    ds = extract_patches(images, patch_size, stride, source=str(directory), seed=seed)
    if split is not None:
        ds = ds.select(split)
    if len(ds) == 0:
        raise ValueError(f"no {split or ''} patches of size {patch_size} in {directory}")
    return ds


def corpus_dir() -> Path:
    """Directory of the small bundled image corpus."""
    return Path(__file__).resolve().parent / "corpus"
