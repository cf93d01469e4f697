"""Binary model container.

Layout (little endian)::

    b"R2CS"  u16 version
    u32 header length, header bytes (UTF-8 ``key=value`` lines)
    u32 tensor count
    per tensor: u16 name length, name bytes, 4 x u32 shape, f32 payload

Nothing is returned until the whole file has parsed, so a bad version or a
truncated payload never yields a half-loaded bundle.
"""

from __future__ import annotations

import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .images import _atomic_write
from .measurement import SamplingConfig, build_mask
from .model import ModelBundle, build_variant
from .reconstructor import ReconWidths

MAGIC = b"R2CS"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _header(bundle: ModelBundle) -> dict[str, str]:
    h = {"variant": bundle.variant, "steps": str(bundle.steps), "mask": bundle.mask.mode,
         "gd_steps": str(bundle.gd_steps), "gd_lr": repr(float(bundle.gd_lr))}
    for k, v in asdict(bundle.cfg).items():
        h[f"sampling.{k}"] = repr(v)
    for k, v in asdict(bundle.widths).items():
        h[f"widths.{k}"] = str(v)
    for k in sorted(bundle.train_meta):
        h[f"meta.{k}"] = str(bundle.train_meta[k])
    return h


def _encode_header(h: dict[str, str]) -> bytes:
    lines = []
    for k, v in h.items():
        if "\n" in k or "=" in k or "\n" in str(v):
            raise ModelFileError(f"header entry {k!r} cannot contain newlines or '=' in the key")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def to_bytes(bundle: ModelBundle) -> bytes:
    out = [MAGIC, struct.pack("<H", VERSION)]
    head = _encode_header(_header(bundle))
    out.append(struct.pack("<I", len(head)))
    out.append(head)
    arrays = bundle.named_arrays()
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim > 4:
            raise ModelFileError(f"tensor {name} has rank {arr.ndim} > 4")
        shape = (1,) * (4 - arr.ndim) + arr.shape
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<4I", *shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_model(path, bundle: ModelBundle) -> None:
    blob = to_bytes(bundle)
    _atomic_write(Path(path), lambda tmp: Path(tmp).write_bytes(blob))


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelFileError(f"{self.source}: truncated {what} at offset {self.pos} "
                                 f"(need {n} bytes, {len(self.blob) - self.pos} left)")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(blob, source)
    if r.take(4, "magic") != MAGIC:
        raise ModelFileError(f"{source}: bad magic at offset 0, not a model file")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ModelFileError(f"{source}: unsupported format version {version} at offset 4 (expected {VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        text = r.take(hlen, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFileError(f"{source}: header at offset {at} is not UTF-8: {exc}") from None
    header = {}
    for line in text.split("\n") if text else []:
        if "=" not in line:
            raise ModelFileError(f"{source}: malformed header line {line!r} in block at offset {at}")
        k, v = line.split("=", 1)
        header[k] = v
    (count,) = r.unpack("<I", "tensor count")
    arrays = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFileError(f"{source}: tensor name at offset {at} is not UTF-8") from None
        shape = r.unpack("<4I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(blob):
        raise ModelFileError(f"{source}: {len(blob) - r.pos} trailing bytes at offset {r.pos}")
    return header, arrays


def _get(header: dict, key: str, cast, source: str):
    if key not in header:
        raise ModelFileError(f"{source}: header lacks {key!r}")
    try:
        return cast(header[key])
    except ValueError as exc:
        raise ModelFileError(f"{source}: bad header value {key}={header[key]!r}: {exc}") from None


def from_bytes(blob: bytes, source: str = "<bytes>") -> ModelBundle:
    header, arrays = parse(blob, source)
    cfg = SamplingConfig(**{k: _get(header, f"sampling.{k}", float if k == "rate" else int, source)
                            for k in ("block_h", "block_w", "channels", "rate")})
    widths = ReconWidths(**{k: _get(header, f"widths.{k}", int, source) for k in asdict(ReconWidths())})
    mode = _get(header, "mask", str, source)
    bundle = build_variant(_get(header, "variant", str, source), cfg, 0,
                           steps=_get(header, "steps", int, source), widths=widths,
                           mask_mode="dct" if mode == "custom" else mode,
                           gd_steps=_get(header, "gd_steps", int, source),
                           gd_lr=_get(header, "gd_lr", float, source))
    if mode == "custom":
        if "mask.kernel" not in arrays:
            raise ModelFileError(f"{source}: custom mask declared but no mask.kernel tensor")
        bundle.mask = build_mask("custom", cfg, arrays["mask.kernel"])
    expected = {p.name: p.shape for p in bundle.parameters()}
    for name, shape in expected.items():
        if name not in arrays:
            raise ModelFileError(f"{source}: missing tensor {name}")
        if arrays[name].shape != tuple(shape):
            raise ModelFileError(f"{source}: tensor {name} has shape {arrays[name].shape}, expected {tuple(shape)}")
    try:
        bundle.load_arrays(arrays)
    except KeyError as exc:
        raise ModelFileError(f"{source}: {exc}") from None
    bundle.train_meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return bundle


def load_model(path) -> ModelBundle:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    return from_bytes(p.read_bytes(), str(p))
