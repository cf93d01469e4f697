"""Residual convolutional decoder from block latents to images.

Layer map (1-based, matching the 21-stage layout):

====  ==========================================================
1-2   1x1 conv over latent channels, each followed by batchnorm
3     transposed conv ``N1 x N2`` with stride ``[N1, N2]`` -> image
4-6   11x11, 7x7, 1x1 convs with batchnorm; ReLU after 6
7-21  five residual blocks of three 3x3 convs; layers 9, 12, 15,
      18, 21 add the activation from three layers back
====  ==========================================================

The final image is ``ReLU`` of layer 21.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv, ConvTranspose
from .measurement import SamplingConfig
from .tensor import Parameter, ShapeError, Tensor

NUM_LAYERS = 21
SKIP_LAYERS = (9, 12, 15, 18, 21)


@dataclass(frozen=True)
class ReconWidths:
    enrich4: int = 64
    enrich5: int = 32
    residual: int = 32
    k4: int = 11
    k5: int = 7
    k_res: int = 3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"reconstruction width {name} must be >= 1, got {v}")
        for name in ("k4", "k5", "k_res"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"kernel size {name} must be odd so 'same' padding is symmetric")


@dataclass
class LayerSpec:
    index: int
    kind: str  # conv | conv_transpose | residual_add
    kernel: tuple
    stride: tuple
    cin: int
    cout: int
    bn: bool
    relu: bool
    skip_from: int | None = None


class ReconstructionNet:
    def __init__(self, cfg: SamplingConfig, widths: ReconWidths, rng: np.random.Generator):
        self.cfg = cfg
        self.widths = widths
        L, nch = cfg.block_entries, cfg.channels
        n1, n2 = cfg.block_h, cfg.block_w
        w = widths
        self.specs: list[LayerSpec] = [
            LayerSpec(1, "conv", (1, 1), (1, 1), L, L, True, False),
            LayerSpec(2, "conv", (1, 1), (1, 1), L, L, True, False),
            LayerSpec(3, "conv_transpose", (n1, n2), (n1, n2), L, nch, False, False),
            LayerSpec(4, "conv", (w.k4, w.k4), (1, 1), nch, w.enrich4, True, False),
            LayerSpec(5, "conv", (w.k5, w.k5), (1, 1), w.enrich4, w.enrich5, True, False),
            LayerSpec(6, "conv", (1, 1), (1, 1), w.enrich5, nch, True, True),
        ]
        for block in range(5):
            base = 7 + 3 * block
            self.specs += [
                LayerSpec(base, "conv", (w.k_res, w.k_res), (1, 1), nch, w.residual, True, True),
                LayerSpec(base + 1, "conv", (w.k_res, w.k_res), (1, 1), w.residual, w.residual, True, True),
                LayerSpec(base + 2, "residual_add", (w.k_res, w.k_res), (1, 1), w.residual, nch, False, False,
                          skip_from=base - 1),
            ]
        self.convs: dict[int, object] = {}
        self.bns: dict[int, BatchNorm] = {}
        for s in self.specs:
            name = f"recon.l{s.index}"
            if s.kind == "conv_transpose":
                self.convs[s.index] = ConvTranspose(name, s.kernel[0], s.kernel[1], s.cin, s.cout, rng, stride=s.stride)
            else:
                # residual-add convs start small so each block begins near identity
                gain = 0.1 if s.kind == "residual_add" else 1.0
                self.convs[s.index] = Conv(name, s.kernel[0], s.kernel[1], s.cin, s.cout, rng,
                                           padding="same", gain=gain)
            if s.bn:
                self.bns[s.index] = BatchNorm(f"{name}.bn", s.cout)

    def parameters(self) -> list[Parameter]:
        ps = []
        for s in self.specs:
            ps += self.convs[s.index].parameters()
            if s.index in self.bns:
                ps += self.bns[s.index].parameters()
        return ps

    def batchnorms(self) -> list[BatchNorm]:
        return [self.bns[k] for k in sorted(self.bns)]

    def layer_parameters(self, index: int) -> list[Parameter]:
        ps = list(self.convs[index].parameters())
        if index in self.bns:
            ps += self.bns[index].parameters()
        return ps

    def forward_stage(self, Z: Tensor, upto: int = NUM_LAYERS, train: bool = False) -> Tensor:
        if not 1 <= upto <= NUM_LAYERS:
            raise IndexError(f"layer index must be in 1..{NUM_LAYERS}, got {upto}")
        L = self.cfg.block_entries
        if Z.shape[3] != L:
            raise ShapeError(f"latent must have {L} channels for blocks "
                             f"{self.cfg.block_h}x{self.cfg.block_w}x{self.cfg.channels}, got {Z.shape}")
        acts: dict[int, Tensor] = {0: Z}
        h = Z
        for s in self.specs[:upto]:
            h = self.convs[s.index](h)
            if s.bn:
                h = self.bns[s.index](h, train)
            if s.relu:
                h = T.relu(h)
            if s.skip_from is not None:
                h = T.add(h, acts[s.skip_from])
            acts[s.index] = h
        return h

    def __call__(self, Z: Tensor, train: bool = False) -> Tensor:
        return reconstruct(self, Z, train)

    def layer_table(self, latent_shape) -> list[dict]:
        """Per-layer kind, kernel, output shape and parameter count for a given input."""
        n, hb, wb, _ = latent_shape
        h, w = hb, wb
        rows = []
        for s in self.specs:
            if s.kind == "conv_transpose":
                h, w = h * s.stride[0], w * s.stride[1]
            count = sum(p.value.data.size for p in self.layer_parameters(s.index))
            rows.append({"layer": s.index, "kind": s.kind, "kernel": "x".join(map(str, s.kernel)),
                         "stride": "x".join(map(str, s.stride)), "cin": s.cin, "cout": s.cout,
                         "bn": s.bn, "relu": s.relu, "skip": s.skip_from,
                         "out_shape": (n, h, w, s.cout), "params": count})
        return rows


def build_network(cfg: SamplingConfig, widths: ReconWidths | None = None, seed: int | np.random.Generator = 0) -> ReconstructionNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ReconstructionNet(cfg, widths or ReconWidths(), rng)


def reconstruct(net: ReconstructionNet, Z: Tensor, train: bool = False) -> Tensor:
    """Full decode: non-negative image ``[N, H, W, Nch]``."""
    return T.relu(net.forward_stage(Z, NUM_LAYERS, train))


def forward_stage(net: ReconstructionNet, Z: Tensor, upto: int, train: bool = False) -> Tensor:
    return net.forward_stage(Z, upto, train)
