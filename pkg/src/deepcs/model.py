"""Model bundles for the four pipeline variants and their forward passes.

``random_rcs``  fixed Gaussian measurement, feed-forward decode from Z_0
``rcs``         learned measurement, feed-forward decode from Z_0
``rcs_gd``      an ``rcs`` bundle refined at inference by gradient descent
``r2cs_net``    learned measurement plus the gated recurrence
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm
from .measurement import (CodedMask, MeasurementMatrix, SamplingConfig, apply_mask, build_mask,
                          gaussian_noise, init_measurement_matrix, measure, measure_pipeline,
                          sensor_matrix_for)
from .recurrent import LatentInit, RecurrentGates, gd_latent_optimize, init_state, run_recurrence
from .reconstructor import ReconstructionNet, ReconWidths, build_network, reconstruct
from .tensor import Parameter, Tensor

VARIANTS = ("random_rcs", "rcs", "rcs_gd", "r2cs_net")


@dataclass
class ModelBundle:
    variant: str
    cfg: SamplingConfig
    mask: CodedMask
    mm: MeasurementMatrix
    init: LatentInit
    net: ReconstructionNet
    gates: RecurrentGates | None = None
    steps: int = 5
    gd_steps: int = 100
    gd_lr: float = 0.05
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "random_rcs" and self.mm.learnable:
            raise ValueError("random_rcs requires a fixed measurement matrix")
        if self.variant == "r2cs_net" and self.gates is None:
            raise ValueError("r2cs_net requires recurrent gates")
        if self.variant != "r2cs_net" and self.gates is not None:
            raise ValueError(f"{self.variant} must not carry recurrent gates")

    @property
    def widths(self) -> ReconWidths:
        return self.net.widths

    def parameters(self) -> list[Parameter]:
        ps = [self.mm.weights]
        ps += self.gates.parameters() if self.gates is not None else self.init.parameters()
        return ps + self.net.parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def batchnorms(self) -> list[BatchNorm]:
        bns = self.gates.batchnorms() if self.gates is not None else self.init.batchnorms()
        return bns + self.net.batchnorms()

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every tensor that defines the model, in a stable order."""
        arrays: dict[str, np.ndarray] = {}
        if self.mask.mode == "custom":
            arrays["mask.kernel"] = self.mask.kernel
        for p in self.parameters():
            arrays[p.name] = p.data
        for bn in self.batchnorms():
            arrays.update(bn.buffers())
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [p.name for p in self.parameters() if p.name not in arrays]
        if missing:
            raise KeyError(f"model file lacks tensors: {missing[:5]}")
        for p in self.parameters():
            p.assign(arrays[p.name])
        for bn in self.batchnorms():
            bn.load_buffers(arrays)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def build_variant(variant: str, cfg: SamplingConfig, rng: np.random.Generator | int = 0, *,
                  steps: int = 5, widths: ReconWidths | None = None, mask_mode: str = "dct",
                  gd_steps: int = 100, gd_lr: float = 0.05) -> ModelBundle:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = build_mask(mask_mode, cfg)
    mm = init_measurement_matrix(cfg, "random_fixed" if variant == "random_rcs" else "learned_init", rng)
    gates = None
    if variant == "r2cs_net":
        gates = RecurrentGates(cfg.m, cfg.block_entries, steps, rng)
        init = gates.init
    else:
        init = LatentInit(cfg.m, cfg.block_entries, rng)
    net = build_network(cfg, widths, rng)
    return ModelBundle(variant, cfg, mask, mm, init, net, gates, steps=steps, gd_steps=gd_steps, gd_lr=gd_lr)


def with_gd(bundle: ModelBundle, gd_steps: int | None = None, gd_lr: float | None = None) -> ModelBundle:
    """The ``rcs_gd`` evaluation mode of an ``rcs`` bundle; all components are shared."""
    if bundle.variant not in ("rcs", "rcs_gd"):
        raise ValueError(f"gradient-descent refinement applies to rcs bundles, not {bundle.variant}")
    return ModelBundle("rcs_gd", bundle.cfg, bundle.mask, bundle.mm, bundle.init, bundle.net, None,
                       steps=bundle.steps, gd_steps=bundle.gd_steps if gd_steps is None else gd_steps,
                       gd_lr=bundle.gd_lr if gd_lr is None else gd_lr, train_meta=dict(bundle.train_meta))


def latent_measure(bundle: ModelBundle, sigma: float = 0.0, rng: np.random.Generator | None = None):
    """``F`` on latents: the learned matrix, optionally with measurement noise."""
    def F(Z: Tensor) -> Tensor:
        out = measure(Z, bundle.mm)
        if sigma > 0:
            out = T.add(out, Tensor(gaussian_noise(out.shape, sigma, rng, out.data.dtype)))
        return out
    return F


def image_measure(bundle: ModelBundle):
    """Full acquisition operator on images (mask then matrix), noise-free."""
    return lambda x: measure_pipeline(x, bundle.mask, bundle.mm, bundle.cfg)


def sample(bundle: ModelBundle, x: Tensor, sigma: float = 0.0, rng: np.random.Generator | None = None,
           sensor_mask: CodedMask | None = None) -> Tensor:
    """Sensor-side acquisition ``M``; ``sensor_mask`` swaps the coded mask.

    When swapping, the sensor matrix absorbs the change of basis so ``M`` is
    the same as with the trained mask.
    """
    if sensor_mask is None or sensor_mask.mode == bundle.mask.mode and np.array_equal(sensor_mask.kernel, bundle.mask.kernel):
        y1 = apply_mask(x, bundle.mask, bundle.cfg)
        M = measure(y1, bundle.mm)
    else:
        y1 = apply_mask(x, sensor_mask, bundle.cfg)
        M = measure(y1, sensor_matrix_for(bundle.mask, sensor_mask, bundle.mm))
    if sigma > 0:
        M = T.add(M, Tensor(gaussian_noise(M.shape, sigma, rng, M.data.dtype)))
    return M


def infer_latent(bundle: ModelBundle, M: Tensor, steps: int | None = None, train: bool = False,
                 sigma_recurrent: float = 0.0, rng: np.random.Generator | None = None,
                 return_states: bool = False):
    """Latent for decoding. ``steps`` means recurrence length for ``r2cs_net``
    and gradient-descent iterations for ``rcs_gd``; ignored otherwise."""
    if bundle.variant == "r2cs_net":
        n = bundle.steps if steps is None else steps
        F = latent_measure(bundle, sigma_recurrent, rng)
        if n == 0:
            Z = init_state(M, bundle.gates, train).Z
            return (Z, [Z]) if return_states else Z
        out = run_recurrence(M, bundle.gates, F, n, train=train, return_states=return_states)
        return (out[0], out[2]) if return_states else out[0]
    Z0 = init_state(M, bundle.init, train).Z
    if bundle.variant == "rcs_gd" and not train:
        n = bundle.gd_steps if steps is None else steps
        if n > 0:
            G = lambda z: reconstruct(bundle.net, z, False)
            Z0 = gd_latent_optimize(M, G, image_measure(bundle), n, bundle.gd_lr, Z0)
    return (Z0, [Z0]) if return_states else Z0


def reconstruct_images(bundle: ModelBundle, x: np.ndarray | Tensor, sigma: float = 0.0, steps: int | None = None,
                       rng: np.random.Generator | None = None, sensor_mask: CodedMask | None = None,
                       return_states: bool = False):
    """Sample then reconstruct a batch in eval mode."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=T.default_dtype()))
    rng = rng if rng is not None else np.random.default_rng(0)
    with T.no_grad():
        M = sample(bundle, x, sigma, rng, sensor_mask)
    if bundle.variant == "rcs_gd":
        Z = infer_latent(bundle, M, steps, False, return_states=return_states)
    else:
        with T.no_grad():
            Z = infer_latent(bundle, M, steps, False, return_states=return_states)
    states = None
    if return_states:
        Z, states = Z
    with T.no_grad():
        x_hat = reconstruct(bundle.net, Z, False)
    return (x_hat, states) if return_states else x_hat
