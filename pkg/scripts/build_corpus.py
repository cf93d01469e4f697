"""Regenerate the bundled 128x128 desk corpus in src/deepcs/corpus/.

Natural images come from scikit-image's sample data (public-domain / CC0
entries only); the rest are procedurally generated. Run once; the PNGs are
committed so tests never need this script or scikit-image.
"""

from pathlib import Path

import numpy as np
from PIL import Image
import skimage.data as skd

OUT = Path(__file__).resolve().parents[1] / "src" / "deepcs" / "corpus"
SIZE = 128

# (name, loader, list of (top, left, crop size))
NATURAL = [
    ("astronaut", skd.astronaut, [(30, 150, 256), (250, 0, 256)]),
    ("coffee", skd.coffee, [(40, 150, 256), (120, 300, 256)]),
    ("chelsea", skd.chelsea, [(20, 60, 256), (40, 180, 256)]),
    ("rocket", skd.rocket, [(60, 250, 256), (150, 0, 256)]),
    ("hubble", skd.hubble_deep_field, [(100, 100, 256), (500, 600, 256)]),
    ("ihc", skd.immunohistochemistry, [(0, 0, 256), (256, 256, 256)]),
    ("colorwheel", skd.colorwheel, [(50, 50, 256)]),
    ("camera", skd.camera, [(40, 150, 256)]),
    ("coins", skd.coins, [(20, 60, 256)]),
    ("brick", skd.brick, [(0, 0, 256)]),
    ("grass", skd.grass, [(128, 128, 256)]),
    ("gravel", skd.gravel, [(0, 256, 256)]),
    ("moon", skd.moon, [(128, 128, 256)]),
]


def to_rgb(a):
    a = np.asarray(a)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    return a[..., :3]


def crop_resize(a, top, left, size):
    c = to_rgb(a)[top : top + size, left : left + size]
    return np.asarray(Image.fromarray(c).resize((SIZE, SIZE), Image.BOX))


def synthetic(rng):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / (SIZE - 1)
    out = {}
    out["syn_gradient"] = np.stack([xx, yy, 1 - 0.5 * (xx + yy)], -1)
    img = np.zeros((SIZE, SIZE, 3))
    for _ in range(12):
        cy, cx, r = rng.uniform(0, 1, 2).tolist() + [rng.uniform(0.05, 0.25)]
        col = rng.uniform(0, 1, 3)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = col
    out["syn_disks"] = img
    f = rng.uniform(3, 9)
    out["syn_stripes"] = np.stack([0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * np.cos(a) + yy * np.sin(a)))
                                   for a in (0.3, 1.1, 2.0)], -1)
    blob = np.zeros((SIZE, SIZE, 3))
    for _ in range(20):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.03, 0.15)
        blob += rng.uniform(0, 1, 3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))[..., None]
    out["syn_blobs"] = blob / blob.max()
    check = (((yy * 8).astype(int) + (xx * 8).astype(int)) % 2).astype(float)
    out["syn_checker"] = np.stack([0.2 + 0.6 * check, 0.5 * np.ones_like(check), 0.8 - 0.6 * check * xx], -1)
    return {k: (np.clip(v, 0, 1) * 255 + 0.5).astype(np.uint8) for k, v in out.items()}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, loader, crops in NATURAL:
        src = loader()
        for i, (t, l, s) in enumerate(crops):
            Image.fromarray(crop_resize(src, t, l, s)).save(OUT / f"{name}_{i}.png")
    for name, arr in synthetic(np.random.default_rng(7)).items():
        Image.fromarray(arr).save(OUT / f"{name}.png")


if __name__ == "__main__":
    main()
