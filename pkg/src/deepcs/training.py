"""Losses and noise-injected end-to-end training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import PatchDataset
from .model import ModelBundle, image_measure, infer_latent, sample
from .optim import adam_step, clip_grad_norm
from .reconstructor import reconstruct
from .tensor import NonFiniteError, Tape, Tensor


class TrainingError(RuntimeError):
    pass


def _check_pair(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise T.ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_measurement(F, x_hat: Tensor, x: Tensor) -> Tensor:
    """Batch mean of ``(||F(x_hat - x)||^2 - ||x_hat - x||^2)^2``."""
    _check_pair(x_hat, x, "loss_measurement")
    d = T.sub(x_hat, x)
    gap = T.sub(T.sum_per_sample(T.square(F(d))), T.sum_per_sample(T.square(d)))
    return T.mean(T.square(gap))


def loss_recurrent(F, G, Z_hat: Tensor, x: Tensor) -> Tensor:
    """Batch mean of ``||F(G(Z_hat)) - F(x)||^2``."""
    x_hat = G(Z_hat)
    _check_pair(x_hat, x, "loss_recurrent")
    return T.mean(T.sum_per_sample(T.square(T.sub(F(x_hat), F(x)))))


def loss_mse(x_hat: Tensor, x: Tensor) -> Tensor:
    """Per-element mean squared error (so PSNR = -10 log10 of it for unit range)."""
    return T.mse(x_hat, x)


@dataclass
class TrainConfig:
    sampling_rate: float = 0.25
    T: int = 5
    sigma_train: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    epochs: int = 10
    patch_size: int = 32
    seed: int = 0
    loss_mode: str = "mse"
    lambda_m: float = 0.01
    lambda_r: float = 0.01
    clip_norm: float = 5.0
    max_steps: int = 0
    target_loss: float = 0.0

    def __post_init__(self):
        if self.sigma_train < 0:
            raise ValueError(f"sigma_train must be >= 0, got {self.sigma_train}")
        if not (0 < self.sampling_rate <= 1):
            raise ValueError(f"sampling_rate must lie in (0, 1], got {self.sampling_rate}")
        if self.loss_mode not in ("mse", "joint_aux"):
            raise ValueError(f"loss_mode must be 'mse' or 'joint_aux', got {self.loss_mode!r}")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("T and batch_size must be >= 1 and epochs >= 0")

    def check_blocks(self, block_h: int, block_w: int):
        if self.patch_size % block_h or self.patch_size % block_w:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by the {block_h}x{block_w} block")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)  # rows: epoch, split, loss, psnr
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0


def _psnr_from_mse(v: float) -> float:
    return 100.0 if v <= 0 else min(100.0, -10.0 * math.log10(v))


def forward_train(bundle: ModelBundle, x: Tensor, sigma: float, rng: np.random.Generator):
    """Noisy sampling, latent inference and decode with batch statistics."""
    M = sample(bundle, x, sigma, rng)
    Z = infer_latent(bundle, M, bundle.steps, train=True, sigma_recurrent=sigma, rng=rng)
    return reconstruct(bundle.net, Z, True), Z


def validation_loss(bundle: ModelBundle, data: PatchDataset, batch_size: int = 32) -> float:
    """Mean per-element MSE over a split in eval mode, noise-free, no refinement."""
    if len(data) == 0:
        return float("nan")
    from .model import reconstruct_images

    total, count = 0.0, 0
    for lo in range(0, len(data), batch_size):
        ks = range(lo, min(lo + batch_size, len(data)))
        x = data.batch(ks)
        steps = None if bundle.variant != "rcs_gd" else 0
        x_hat = reconstruct_images(bundle, x, 0.0, steps)
        err = (x_hat.data.astype(np.float64) - x) ** 2
        total += float(err.sum())
        count += err.size
    return total / count


def train(bundle: ModelBundle, data: PatchDataset, cfg: TrainConfig, val: PatchDataset | None = None,
          log=None) -> TrainResult:
    """Joint training of every stage under L_MSE (plus optional auxiliary terms).

    Deterministic given ``cfg.seed``. Returns per-epoch history rows and the
    per-step training losses.
    """
    if len(data) == 0:
        raise TrainingError("training dataset is empty")
    cfg.check_blocks(bundle.cfg.block_h, bundle.cfg.block_w)
    if data.patch_size != cfg.patch_size:
        raise TrainingError(f"dataset patch size {data.patch_size} differs from config {cfg.patch_size}")
    rng = np.random.default_rng(cfg.seed)
    params = bundle.trainable_parameters()
    result = TrainResult()
    F_img = image_measure(bundle)
    n = len(data)
    bs = min(cfg.batch_size, n)
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n - bs + 1, bs):
            x = Tensor(data.batch(order[lo : lo + bs]))
            try:
                with Tape() as tape:
                    x_hat, Z = forward_train(bundle, x, cfg.sigma_train, rng)
                    loss = loss_mse(x_hat, x)
                    mse_val = loss.item()
                    if cfg.loss_mode == "joint_aux":
                        lm = loss_measurement(F_img, x_hat, x)
                        lr_ = loss_recurrent(F_img, lambda _z: x_hat, Z, x)
                        loss = T.add(loss, T.add(T.scale(lm, cfg.lambda_m), T.scale(lr_, cfg.lambda_r)))
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                tape.backward(loss, params)
            except NonFiniteError as exc:
                last = result.step_losses[-1] if result.step_losses else float("nan")
                raise TrainingError(f"non-finite values at epoch {epoch}, step {result.steps + 1} "
                                    f"(last finite loss {last:.6g}): {exc}") from exc
            if cfg.clip_norm > 0:
                clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            result.steps += 1
            result.step_losses.append(mse_val)
            epoch_losses.append(mse_val)
            if cfg.target_loss > 0 and mse_val < cfg.target_loss:
                done = True
            if cfg.max_steps and result.steps >= cfg.max_steps:
                done = True
            if done:
                break
        tl = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        result.history.append({"epoch": epoch, "split": "train", "loss": tl, "psnr": _psnr_from_mse(tl)})
        if val is not None and len(val):
            vl = validation_loss(bundle, val)
            result.history.append({"epoch": epoch, "split": "val", "loss": vl, "psnr": _psnr_from_mse(vl)})
        if log is not None:
            log(result.history[-1] if val is None else result.history[-2:])
        if done:
            break
    bundle.train_meta.update({k: str(v) for k, v in cfg.as_dict().items()})
    bundle.train_meta["train_steps"] = str(result.steps)
    return result
