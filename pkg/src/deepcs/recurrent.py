"""Progressive latent refinement driven by measurement residuals.

A gated recurrent unit updates a block-wise latent tensor ``Z`` (same shape as
the coded-mask output) with parameters shared across steps::

    I_i = S(bn_in(F(Z_{i-1}) - I_0))
    H_i = C(I_i)
    Z_i = bn_out(R(Z_{i-1}, H_i) * Z_{i-1} + U(Z_{i-1}, H_i) * H_i)

with ``Z_0 = C(bn_in(M))`` and ``I_0 = M``. All gates are stacks of 1x1
convolutions, so blocks never interact. :func:`gd_latent_optimize` is the
plain gradient-descent counterpart used as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv
from .tensor import Parameter, ShapeError, Tape, Tensor


class DivergenceError(RuntimeError):
    pass


class GateStack:
    """Two 1x1 convs with a ReLU between and a gate-specific output stage.

    ``out``: ``"linear"`` (candidate), ``"sigmoid"`` (reset/update) or
    ``"tanh_gain"`` (scaling: tanh then a learned per-channel gain).
    """

    def __init__(self, name: str, cin: int, cout: int, out: str, rng: np.random.Generator,
                 final_bias: float = 0.0, init_gain: float = 1.0):
        self.name = name
        self.out = out
        self.l1 = Conv(f"{name}.conv1", 1, 1, cin, cout, rng, padding="valid")
        self.l2 = Conv(f"{name}.conv2", 1, 1, cout, cout, rng, padding="valid")
        if final_bias:
            self.l2.bias.assign(np.full(self.l2.bias.shape, final_bias))
        self.gain = None
        if out == "tanh_gain":
            self.gain = Parameter(f"{name}.gain", np.full((1, 1, 1, cout), init_gain, dtype=T.default_dtype()))
        elif out not in ("linear", "sigmoid"):
            raise ValueError(f"unknown gate output stage {out!r}")

    @property
    def cin(self) -> int:
        return self.l1.kernel_shape[2]

    @property
    def cout(self) -> int:
        return self.l2.kernel_shape[3]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[3] != self.cin:
            raise ShapeError(f"gate {self.name}: expected {self.cin} input channels, got {x.shape[3]}")
        h = self.l2(T.relu(self.l1(x)))
        if self.out == "sigmoid":
            return T.sigmoid(h)
        if self.out == "tanh_gain":
            return T.mul(T.tanh(h), self.gain.value)
        return h

    def parameters(self) -> list[Parameter]:
        ps = self.l1.parameters() + self.l2.parameters()
        return ps + ([self.gain] if self.gain is not None else [])


class LatentInit:
    """Candidate path alone: ``Z_0 = C(bn_in(M))``.

    Used directly by the feed-forward variants and shared with the recurrent
    unit (``C`` and ``bn_in`` are the same objects there).
    """

    def __init__(self, m: int, latent: int, rng: np.random.Generator, slots: int = 1):
        self.m = m
        self.latent = latent
        self.bn_in = BatchNorm("gates.bn_in", m, slots=slots)
        self.C = GateStack("gates.C", m, latent, "linear", rng)

    def __call__(self, M: Tensor, train: bool) -> Tensor:
        if M.shape[3] != self.m:
            raise ShapeError(f"init_state: measurements have {M.shape[3]} channels, gates expect {self.m}")
        return self.C(self.bn_in(M, train, slot=0))

    def parameters(self) -> list[Parameter]:
        return self.bn_in.parameters() + self.C.parameters()

    def batchnorms(self) -> list[BatchNorm]:
        return [self.bn_in]


class RecurrentGates:
    """Scaling, candidate, reset and update gates plus the two batchnorms.

    Batchnorm gamma/beta are shared across steps; running statistics are kept
    per step (``slots = T + 1``) because the residual statistics shrink as the
    recurrence converges.
    """

    def __init__(self, m: int, latent: int, steps: int, rng: np.random.Generator):
        self.m = m
        self.latent = latent
        self.steps = steps
        self.init = LatentInit(m, latent, rng, slots=steps + 1)
        self.S = GateStack("gates.S", m, m, "tanh_gain", rng)
        self.R = GateStack("gates.R", 2 * latent, latent, "sigmoid", rng)
        # negative update bias favours keeping the current state early in training
        self.U = GateStack("gates.U", 2 * latent, latent, "sigmoid", rng, final_bias=-1.0)
        self.bn_out = BatchNorm("gates.bn_out", latent, slots=steps + 1)

    @property
    def C(self) -> GateStack:
        return self.init.C

    @property
    def bn_in(self) -> BatchNorm:
        return self.init.bn_in

    def parameters(self) -> list[Parameter]:
        return (self.init.parameters() + self.S.parameters() + self.R.parameters()
                + self.U.parameters() + self.bn_out.parameters())

    def batchnorms(self) -> list[BatchNorm]:
        return [self.init.bn_in, self.bn_out]

    def gate_modules(self) -> dict[str, GateStack]:
        return {"S": self.S, "C": self.C, "R": self.R, "U": self.U}


def gate_forward(gates: RecurrentGates, gate: str, *inputs: Tensor) -> Tensor:
    """Evaluate one gate; ``R`` and ``U`` take ``(Z, H)``, ``S`` and ``C`` one tensor."""
    arity = {"S": 1, "C": 1, "R": 2, "U": 2}
    if gate not in arity:
        raise ValueError(f"unknown gate {gate!r}")
    if len(inputs) != arity[gate]:
        raise TypeError(f"gate {gate} takes {arity[gate]} input(s), got {len(inputs)}")
    mod = gates.gate_modules()[gate]
    if arity[gate] == 2:
        return mod(T.concat(inputs, axis=3))
    return mod(inputs[0])


@dataclass
class RecurrentState:
    Z: Tensor
    I0: Tensor
    step: int = 0
    history: list = field(default_factory=list)


def init_state(M: Tensor, gates, train: bool = False) -> RecurrentState:
    """``I_0 = M`` (kept as the same, never-modified tensor) and ``Z_0 = C(bn_in(M))``."""
    init = gates.init if isinstance(gates, RecurrentGates) else gates
    Z0 = init(M, train)
    return RecurrentState(Z=Z0, I0=M, step=0)


def recurrent_step(state: RecurrentState, gates: RecurrentGates, F: Callable[[Tensor], Tensor],
                   train: bool = False, max_steps: int | None = None) -> RecurrentState:
    limit = max_steps if max_steps is not None else getattr(gates, "steps", None)
    if limit is not None and state.step >= limit:
        raise IndexError(f"recurrent step {state.step + 1} exceeds configured length {limit}")
    i = state.step + 1
    z_prev = state.Z
    residual = T.sub(F(z_prev), state.I0)
    scaled = gates.S(gates.bn_in(residual, train, slot=i))
    H = gates.C(scaled)
    zh = T.concat([z_prev, H], axis=3)
    r = gates.R(zh)
    u = gates.U(zh)
    z_new = gates.bn_out(T.add(T.mul(r, z_prev), T.mul(u, H)), train, slot=i)
    return RecurrentState(Z=z_new, I0=state.I0, step=i,
                          history=state.history + [float((residual.data.astype(np.float64) ** 2).sum())])


def run_recurrence(M: Tensor, gates: RecurrentGates, F: Callable[[Tensor], Tensor], steps: int,
                   train: bool = False, return_states: bool = False):
    """``init_state`` followed by ``steps`` recurrent updates.

    Returns ``(Z_T, residual_trace)`` where ``residual_trace[i]`` is
    ``||F(Z_i) - I_0||^2`` for ``i = 0..steps``; with ``return_states`` the
    list of latents ``Z_0..Z_T`` is appended.
    """
    if steps < 1:
        raise ValueError(f"recurrence length must be >= 1, got {steps}")
    state = init_state(M, gates, train)
    states = [state.Z]
    for _ in range(steps):
        state = recurrent_step(state, gates, F, train, max_steps=max(steps, gates.steps))
        states.append(state.Z)
    with T.no_grad():
        last = T.sub(F(state.Z), state.I0)
    trace = state.history + [float((last.data.astype(np.float64) ** 2).sum())]
    if return_states:
        return state.Z, trace, states
    return state.Z, trace


def _objective(z: np.ndarray, m: Tensor, G, F, with_grad: bool):
    zt = Tensor(z, requires_grad=with_grad)
    with Tape() as tape:
        r = T.sub(F(G(zt)), m)
        loss = T.total(T.square(r))
    if not with_grad:
        return loss.item(), None
    grad = tape.gradients(loss, [zt])[id(zt)]
    return loss.item(), grad


def gd_latent_optimize(m: Tensor, G: Callable[[Tensor], Tensor], F: Callable[[Tensor], Tensor],
                       steps: int, lr: float, z0: Tensor | np.ndarray,
                       trace: list | None = None) -> Tensor:
    """Minimize ``||F(G(Z)) - m||^2`` over ``Z`` by gradient descent from ``z0``.

    If a step raises the objective it is undone and ``lr`` halved, so the
    accepted objective sequence never increases. ``trace`` (if given)
    receives the objective at each accepted iterate.
    """
    if steps < 1:
        raise ValueError(f"gd steps must be >= 1, got {steps}")
    if lr <= 0:
        raise ValueError(f"gd learning rate must be > 0, got {lr}")
    z = np.array(z0.data if isinstance(z0, Tensor) else z0, copy=True)
    f0, g = _objective(z, m, G, F, True)
    best_z, best_f, best_g = z, f0, g
    if trace is not None:
        trace.append(f0)
    for _ in range(steps):
        cand = (best_z - lr * best_g).astype(z.dtype)
        f, g = _objective(cand, m, G, F, True)
        if not np.isfinite(f) or f > 1e3 * max(f0, 1e-30):
            raise DivergenceError(f"gradient descent diverged (objective {f:.3g} vs initial {f0:.3g}); use a smaller lr than {lr}")
        if f <= best_f:
            best_z, best_f, best_g = cand, f, g
            if trace is not None:
                trace.append(f)
        else:
            lr *= 0.5
        if best_f == 0.0:
            break
    return Tensor(best_z)
