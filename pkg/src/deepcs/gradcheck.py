"""Central finite-difference checks for every differentiable path.

Each case is a scalar function of a few 64-bit leaves (and optionally some
parameters). The analytic gradient from the tape is compared against
``(f(x + eps) - f(x - eps)) / 2 eps`` using the norm-wise relative error
``||g_a - g_n|| / max(||g_a||, ||g_n||)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tape, Tensor

TOLERANCE = 1e-5
EPS = 1e-6


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[np.ndarray]
    params: Sequence[Parameter] = ()
    max_entries: int = 0  # per array; 0 checks every entry


@dataclass
class GradResult:
    name: str
    rel_error: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < TOLERANCE)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    if out.shape == (1, 1, 1, 1):
        return out
    w = Tensor(rng.standard_normal(out.shape))
    return T.total(T.hadamard(out, w))


def check_case(case: GradCase, eps: float = EPS, seed: int = 0, bits: int = 64) -> GradResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    with T.precision(bits):
        leaves = [Tensor(np.asarray(a, dtype=T.default_dtype()), requires_grad=True) for a in case.inputs]
        with Tape() as tape:
            loss = case.fn(*leaves)
        grads = tape.gradients(loss, leaves + [p.value for p in case.params])
        analytic = [grads[id(t)] for t in leaves] + [grads[id(p.value)] for p in case.params]
        arrays = [t.data for t in leaves] + [p.value.data for p in case.params]

        def f() -> float:
            with T.no_grad():
                return case.fn(*[Tensor(t.data) for t in leaves]).item()

        num, ana = [], []
        for arr, g in zip(arrays, analytic):
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if case.max_entries and flat.size > case.max_entries:
                idx = np.sort(rng.choice(flat.size, case.max_entries, replace=False))
            for k in idx:
                old = flat[k]
                flat[k] = old + eps
                fp = f()
                flat[k] = old - eps
                fm = f()
                flat[k] = old
                num.append((fp - fm) / (2 * eps))
                ana.append(g.reshape(-1)[k])
    num, ana = np.array(num), np.array(ana)
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    rel = float(np.linalg.norm(num - ana) / scale) if scale > 0 else 0.0
    return GradResult(case.name, rel, len(num), time.perf_counter() - t0)


def broken_square(x) -> Tensor:
    """``x^2`` whose backward is off by a factor, for exercising the harness."""
    x = T._as_tensor(x)
    xd = x.data
    return T._make(xd * xd, [x], lambda g: (3.0 * g * xd,), "broken_square")


def broken_case() -> GradCase:
    rng = np.random.default_rng(99)
    fn = lambda x: _weighted(broken_square(x), np.random.default_rng(1))
    return GradCase("broken_square (fixture)", fn, [rng.standard_normal((2, 3, 3, 2))])


def _jitter_biases(params, rng: np.random.Generator):
    # zero biases put dead-ReLU positions exactly on the kink of the next ReLU
    for p in params:
        if p.name.endswith(".bias"):
            p.assign(p.data + rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1.0, 1.0], p.shape))


def _w(fn, seed: int):
    return lambda *xs: _weighted(fn(*xs), np.random.default_rng(seed))


def default_cases() -> list[GradCase]:
    """The full suite. Must be called with 64-bit precision active for parameter dtypes."""
    from .measurement import SamplingConfig, apply_mask, build_dct_mask, invert_mask, make_measurement_matrix, measure
    from .model import build_variant, image_measure
    from .recurrent import RecurrentGates, run_recurrence
    from .reconstructor import ReconWidths, build_network, reconstruct
    from .training import loss_measurement, loss_mse, loss_recurrent

    rng = np.random.default_rng(2024)
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.2, 1.5, s) * rng.choice([-1.0, 1.0], s)  # stays clear of the ReLU kink
    cases = [
        GradCase("conv2d valid 3x3", _w(lambda x, k: T.conv2d(x, k), 1), [r(2, 6, 6, 3), r(3, 3, 3, 4)]),
        GradCase("conv2d same 3x3 + bias", _w(lambda x, k, b: T.conv2d(x, k, b, padding="same"), 2),
                 [r(2, 5, 6, 2), r(3, 3, 2, 3), r(1, 1, 1, 3)]),
        GradCase("conv2d same 5x5 (wide)", _w(lambda x, k: T.conv2d(x, k, padding="same"), 3),
                 [r(1, 6, 6, 4), r(5, 5, 4, 2)]),
        GradCase("conv2d 1x1", _w(lambda x, k, b: T.conv2d(x, k, b), 4), [r(2, 4, 4, 4), r(1, 1, 4, 3), r(1, 1, 1, 3)]),
        GradCase("conv2d stride 2 (patchify)", _w(lambda x, k: T.conv2d(x, k, stride=2), 5),
                 [r(2, 6, 6, 2), r(2, 2, 2, 4)]),
        GradCase("conv2d stride 2 same 3x3", _w(lambda x, k: T.conv2d(x, k, stride=2, padding="same"), 6),
                 [r(2, 6, 6, 2), r(3, 3, 2, 2)]),
        GradCase("conv_transpose2d stride 2", _w(lambda x, k, b: T.conv_transpose2d(x, k, b, stride=2), 7),
                 [r(2, 3, 3, 4), r(2, 2, 3, 4), r(1, 1, 1, 3)]),
        GradCase("conv_transpose2d 3x3 stride 1", _w(lambda x, k: T.conv_transpose2d(x, k), 8),
                 [r(1, 4, 4, 2), r(3, 3, 3, 2)]),
        GradCase("batchnorm train", _w(lambda x, g, b: T.batchnorm(x, g, b, "train"), 9),
                 [r(2, 4, 4, 3), pos(1, 1, 1, 3), r(1, 1, 1, 3)]),
        GradCase("relu", _w(T.relu, 10), [pos(2, 4, 4, 3)]),
        GradCase("sigmoid", _w(T.sigmoid, 11), [r(2, 4, 4, 3)]),
        GradCase("tanh", _w(T.tanh, 12), [r(2, 4, 4, 3)]),
        GradCase("add", _w(T.add, 13), [r(2, 3, 3, 4), r(2, 3, 3, 4)]),
        GradCase("add broadcast channel", _w(T.add, 14), [r(2, 3, 3, 4), r(1, 1, 1, 4)]),
        GradCase("sub", _w(T.sub, 15), [r(2, 3, 3, 4), r(2, 3, 3, 4)]),
        GradCase("mul broadcast channel", _w(T.mul, 16), [r(2, 3, 3, 4), r(1, 1, 1, 4)]),
        GradCase("hadamard", _w(T.hadamard, 17), [r(2, 3, 3, 4), r(2, 3, 3, 4)]),
        GradCase("scale", _w(lambda x: T.scale(x, -1.7), 18), [r(2, 3, 3, 4)]),
        GradCase("square", _w(T.square, 19), [r(2, 3, 3, 4)]),
        GradCase("concat", _w(lambda a, b: T.concat([a, b]), 20), [r(2, 3, 3, 2), r(2, 3, 3, 3)]),
        GradCase("total", T.total, [r(2, 3, 3, 4)]),
        GradCase("mean", T.mean, [r(2, 3, 3, 4)]),
        GradCase("sum_per_sample", _w(T.sum_per_sample, 21), [r(2, 3, 3, 4)]),
        GradCase("mse", T.mse, [r(2, 3, 3, 4), r(2, 3, 3, 4)]),
    ]

    cfg = SamplingConfig(2, 2, 1, 0.5)
    mm = make_measurement_matrix(rng.standard_normal((1, 1, cfg.block_entries, cfg.m)) * 0.5)
    mask = build_dct_mask(cfg)
    cases += [
        GradCase("apply_mask (input)", _w(lambda x: apply_mask(x, mask, cfg), 22), [r(2, 6, 6, 1)]),
        GradCase("invert_mask (input)", _w(lambda y: invert_mask(y, mask, cfg), 23), [r(2, 3, 3, 4)]),
        GradCase("measure (input + matrix)", _w(lambda y: measure(y, mm), 24), [r(2, 3, 3, 4)], [mm.weights]),
    ]

    bundle = build_variant("rcs", cfg, rng, widths=ReconWidths(3, 3, 3, 3, 3, 3))
    F_img = image_measure(bundle)
    K = bundle.net.convs[3].weight
    G = lambda z: T.conv_transpose2d(z, K.value, stride=2)
    cases += [
        GradCase("loss_measurement", lambda xh, x: loss_measurement(F_img, xh, x), [r(2, 4, 4, 1), r(2, 4, 4, 1)],
                 [bundle.mm.weights]),
        GradCase("loss_recurrent", lambda z, x: loss_recurrent(F_img, G, z, x), [r(2, 2, 2, 4), r(2, 4, 4, 1)],
                 [bundle.mm.weights, K]),
        GradCase("loss_mse", loss_mse, [r(2, 4, 4, 1), r(2, 4, 4, 1)]),
    ]

    gates = RecurrentGates(cfg.m, cfg.block_entries, 3, rng)
    _jitter_biases(gates.parameters(), rng)
    F_lat = lambda z: measure(z, mm)
    rec = lambda M: run_recurrence(M, gates, F_lat, 3, train=True)[0]
    cases.append(GradCase("recurrence T=3 (train mode)", _w(rec, 25), [r(2, 3, 3, cfg.m)],
                          list(gates.parameters()) + [mm.weights], max_entries=4))

    net = build_network(cfg, ReconWidths(4, 4, 4, 3, 3, 3), rng)
    _jitter_biases(net.parameters(), rng)
    dec = lambda z: reconstruct(net, z, True)
    cases.append(GradCase("21-layer net (train mode)", _w(dec, 26), [r(2, 3, 3, cfg.block_entries)],
                          net.parameters(), max_entries=3))
    return cases


def run_suite(cases: Sequence[GradCase] | None = None, extra: Sequence[GradCase] = (), bits: int = 64,
              eps: float = EPS) -> list[GradResult]:
    if bits not in (32, 64):
        raise ValueError(f"bits must be 32 or 64, got {bits}")
    with T.precision(bits):
        cases = list(default_cases() if cases is None else cases) + list(extra)
        return [check_case(c, eps, bits=bits) for c in cases]


def format_results(results: Sequence[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case':<{width}}  {'rel_error':>10}  {'n':>5}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.rel_error:>10.2e}  {r.checked:>5}  {'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
