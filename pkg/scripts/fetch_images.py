"""Download an image archive (zip or tar) and unpack its images as PNG.

Optional helper for larger checks on benchmark sets such as Set5 or Set14:

    python3 scripts/fetch_images.py URL data/set14

The URL is whatever mirror of the archive you have access to; none is
hard-coded. Nested folders are flattened and every readable image is
re-encoded as 8-bit RGB PNG so ``deepcs evaluate`` can read it directly.
"""

import argparse
import io
import tarfile
import urllib.request
import zipfile
from pathlib import Path

from PIL import Image

SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm", ".pgm"}


def members(blob: bytes):
    if zipfile.is_zipfile(io.BytesIO(blob)):
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            for info in zf.infolist():
                if not info.is_dir():
                    yield info.filename, zf.read(info)
        return
    with tarfile.open(fileobj=io.BytesIO(blob)) as tf:
        for info in tf.getmembers():
            if info.isfile():
                yield info.name, tf.extractfile(info).read()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("url")
    ap.add_argument("dest")
    args = ap.parse_args(argv)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(args.url) as resp:
        blob = resp.read()
    count = 0
    for name, data in members(blob):
        p = Path(name)
        if p.suffix.lower() not in SUFFIXES or p.name.startswith("."):
            continue
        try:
            with Image.open(io.BytesIO(data)) as im:
                im.convert("RGB").save(dest / f"{p.stem}.png")
        except OSError as exc:
            print(f"skipping {name}: {exc}")
            continue
        count += 1
    print(f"wrote {count} images to {dest}")
    return 0 if count else 1


if __name__ == "__main__":
    raise SystemExit(main())
