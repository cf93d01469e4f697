"""Block-wise sensing: a fixed coded mask followed by a 1x1 measurement matrix.

The mask is a strided convolution with kernel ``[N1, N2, Nch, N1*N2*Nch]``
that maps every ``N1 x N2 x Nch`` block to one spatial position with
``N1*N2*Nch`` channels. The measurement matrix then takes ``m`` linear
combinations of those channels per block. Together the two layers form a
structured random matrix: transform first, then subsample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

MASK_MODES = ("dct", "identity", "custom")


class UnsupportedMaskError(ValueError):
    pass


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class SamplingConfig:
    block_h: int = 8
    block_w: int = 8
    channels: int = 3
    rate: float = 0.25

    def __post_init__(self):
        if self.block_h < 1 or self.block_w < 1 or self.channels < 1:
            raise ValueError(f"block dims and channels must be >= 1, got {self.block_h}x{self.block_w}x{self.channels}")
        if not (0.0 < self.rate <= 1.0):
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.rate}")
        if self.m < 1:
            raise ValueError(f"rate {self.rate} yields zero measurements for a {self.block_entries}-entry block")

    @property
    def block_entries(self) -> int:
        return self.block_h * self.block_w * self.channels

    @property
    def m(self) -> int:
        return round_half_up(self.rate * self.block_entries)

    def latent_shape(self, n: int, h: int, w: int) -> tuple[int, int, int, int]:
        return n, h // self.block_h, w // self.block_w, self.block_entries


@dataclass
class CodedMask:
    mode: str
    kernel: np.ndarray  # [N1, N2, Nch, N1*N2*Nch]

    frozen = True

    @property
    def matrix(self) -> np.ndarray:
        """Block-vector to channel map ``Q`` with ``y1 = vec(block) @ Q``."""
        kh, kw, c, out = self.kernel.shape
        return self.kernel.reshape(kh * kw * c, out)

    def is_orthonormal(self, tol: float = 1e-5) -> bool:
        q = self.matrix.astype(np.float64)
        if q.shape[0] != q.shape[1]:
            return False
        return bool(np.abs(q.T @ q - np.eye(q.shape[0])).max() < tol)


def _dct_alpha(k: int) -> float:
    return 1.0 / math.sqrt(2.0) if k == 0 else 1.0


def build_dct_mask(cfg: SamplingConfig) -> CodedMask:
    """Orthonormal per-channel 2-D DCT-II basis as a strided conv kernel.

    Output channel ``k + k1*Nch + k2*N1*Nch`` holds frequency ``(k1, k2)`` of
    colour channel ``k``; other input channels are zero.
    """
    n1, n2, nch = cfg.block_h, cfg.block_w, cfg.channels
    i = np.arange(n1)[:, None]
    j = np.arange(n2)[:, None]
    kernel = np.zeros((n1, n2, nch, n1 * n2 * nch), dtype=np.float64)
    ci = np.cos((2 * i + 1) * np.pi * np.arange(n1)[None, :] / (2 * n1))  # [i, k1]
    cj = np.cos((2 * j + 1) * np.pi * np.arange(n2)[None, :] / (2 * n2))  # [j, k2]
    scale = math.sqrt(2.0 / n1) * math.sqrt(2.0 / n2)
    for k1 in range(n1):
        for k2 in range(n2):
            basis = scale * _dct_alpha(k1) * _dct_alpha(k2) * np.outer(ci[:, k1], cj[:, k2])
            for k in range(nch):
                kernel[:, :, k, k + k1 * nch + k2 * n1 * nch] = basis
    return CodedMask("dct", kernel.astype(T.default_dtype()))


def build_identity_mask(cfg: SamplingConfig) -> CodedMask:
    """Pixel ``(i, j, k)`` of a block goes to channel ``k + i*Nch + j*N1*Nch``."""
    n1, n2, nch = cfg.block_h, cfg.block_w, cfg.channels
    kernel = np.zeros((n1, n2, nch, n1 * n2 * nch), dtype=T.default_dtype())
    for i in range(n1):
        for j in range(n2):
            for k in range(nch):
                kernel[i, j, k, k + i * nch + j * n1 * nch] = 1.0
    return CodedMask("identity", kernel)


def build_mask(mode: str, cfg: SamplingConfig, kernel: np.ndarray | None = None) -> CodedMask:
    if mode == "dct":
        return build_dct_mask(cfg)
    if mode == "identity":
        return build_identity_mask(cfg)
    if mode == "custom":
        if kernel is None:
            raise ValueError("custom mask needs an explicit kernel")
        want = (cfg.block_h, cfg.block_w, cfg.channels, cfg.block_entries)
        if kernel.shape != want:
            raise ShapeError(f"custom mask kernel must be {want}, got {kernel.shape}")
        return CodedMask("custom", np.asarray(kernel, dtype=T.default_dtype()))
    raise ValueError(f"unknown mask mode {mode!r}; choose from {MASK_MODES}")


def _check_divisible(shape, cfg: SamplingConfig):
    _, h, w, c = shape
    if c != cfg.channels:
        raise ShapeError(f"image has {c} channels, sampling config expects {cfg.channels}")
    if h % cfg.block_h or w % cfg.block_w:
        ph = (-h) % cfg.block_h
        pw = (-w) % cfg.block_w
        raise ShapeError(
            f"image {h}x{w} is not a multiple of the {cfg.block_h}x{cfg.block_w} block; "
            f"pad by {ph} rows and {pw} columns (e.g. --pad reflect)")


def apply_mask(image, mask: CodedMask, cfg: SamplingConfig) -> Tensor:
    """Strided mask convolution; the mask itself never receives gradients."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    _check_divisible(image.shape, cfg)
    kernel = Tensor(mask.kernel.astype(image.data.dtype, copy=False))
    return T.conv2d(image, kernel, stride=(cfg.block_h, cfg.block_w), padding="valid")


def invert_mask(y, mask: CodedMask, cfg: SamplingConfig) -> Tensor:
    """Inverse of :func:`apply_mask` for orthonormal masks (DCT, identity)."""
    if mask.mode == "custom" and not mask.is_orthonormal():
        raise UnsupportedMaskError("invert_mask needs an orthonormal mask; this custom mask is not")
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape[3] != cfg.block_entries:
        raise ShapeError(f"latent has {y.shape[3]} channels, expected {cfg.block_entries}")
    kernel = Tensor(mask.kernel.astype(y.data.dtype, copy=False))
    return T.conv_transpose2d(y, kernel, stride=(cfg.block_h, cfg.block_w))


@dataclass
class MeasurementMatrix:
    weights: Parameter  # kernel [1, 1, N1*N2*Nch, m]
    learnable: bool = True

    @property
    def m(self) -> int:
        return self.weights.shape[3]

    @property
    def matrix(self) -> np.ndarray:
        return self.weights.data[0, 0]


def init_measurement_matrix(cfg: SamplingConfig, scheme: str = "learned_init",
                            rng: np.random.Generator | None = None, name: str = "measure.weight") -> MeasurementMatrix:
    """Gaussian ``N(0, 1/(N1*N2*Nch))`` entries; ``random_fixed`` freezes them."""
    if scheme not in ("learned_init", "random_fixed"):
        raise ValueError(f"unknown measurement init scheme {scheme!r}")
    if cfg.m > cfg.block_entries:
        raise ValueError(f"m={cfg.m} exceeds block size {cfg.block_entries}")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = cfg.block_entries
    w = rng.normal(0.0, 1.0 / math.sqrt(n), size=(1, 1, n, cfg.m)).astype(T.default_dtype())
    return make_measurement_matrix(w, learnable=(scheme == "learned_init"), name=name)


def make_measurement_matrix(weights: np.ndarray, learnable: bool = True, name: str = "measure.weight") -> MeasurementMatrix:
    weights = np.asarray(weights)
    if weights.ndim == 2:
        weights = weights.reshape(1, 1, *weights.shape)
    if weights.shape[:2] != (1, 1):
        raise ShapeError(f"measurement kernel must be 1x1 spatially, got {weights.shape}")
    p = Parameter(name, weights)
    p.trainable = learnable
    p.value.requires_grad = learnable
    return MeasurementMatrix(p, learnable)


def measure(y1, mm: MeasurementMatrix) -> Tensor:
    y1 = y1 if isinstance(y1, Tensor) else Tensor(y1)
    if y1.shape[3] != mm.weights.shape[2]:
        raise ShapeError(f"measure: input has {y1.shape[3]} channels, matrix expects {mm.weights.shape[2]}")
    return T.conv2d(y1, mm.weights.value, stride=(1, 1), padding="valid")


def gaussian_noise(shape, sigma: float, rng: np.random.Generator, dtype) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    return rng.normal(0.0, sigma, size=shape).astype(dtype)


def measure_noisy(y1, mm: MeasurementMatrix, sigma: float, rng: np.random.Generator) -> Tensor:
    """:func:`measure` plus i.i.d. ``N(0, sigma^2)`` noise per element."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    clean = measure(y1, mm)
    if sigma == 0:
        return clean
    return T.add(clean, Tensor(gaussian_noise(clean.shape, sigma, rng, clean.data.dtype)))


def measure_pipeline(x, mask: CodedMask, mm: MeasurementMatrix, cfg: SamplingConfig) -> Tensor:
    return measure(apply_mask(x, mask, cfg), mm)


def basis_change(trained: CodedMask, new: CodedMask) -> np.ndarray:
    """Matrix ``B`` with ``apply_mask(x, trained) = apply_mask(x, new) @ B``."""
    if not new.is_orthonormal():
        raise UnsupportedMaskError("mask swap needs an orthonormal replacement mask")
    qn = new.matrix.astype(np.float64)
    qt = trained.matrix.astype(np.float64)
    return qn.T @ qt


def sensor_matrix_for(trained: CodedMask, new: CodedMask, mm: MeasurementMatrix) -> MeasurementMatrix:
    """Sensor-side matrix that yields the trained measurements behind ``new``.

    The reconstruction side keeps using ``mm``; only acquisition changes.
    """
    b = basis_change(trained, new)
    w = (b @ mm.matrix.astype(np.float64)).astype(mm.weights.data.dtype)
    return make_measurement_matrix(w, learnable=False, name="sensor.weight")


def pad_to_blocks(image: np.ndarray, cfg: SamplingConfig, mode: str = "reflect") -> np.ndarray:
    """Pad an ``[N,H,W,C]`` array at the bottom/right to block multiples."""
    _, h, w, _ = image.shape
    ph = (-h) % cfg.block_h
    pw = (-w) % cfg.block_w
    if not (ph or pw):
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw), (0, 0)), mode=mode)
