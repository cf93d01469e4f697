"""PSNR, SSIM, empirical RIP spread and dataset sweeps."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
REPORT_COLUMNS = ("name", "sigma", "steps", "psnr_db", "ssim")


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(x_hat, x, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all pixels and channels, capped at 100 dB."""
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    a, b = _pair(x_hat, x, "psnr")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable: the window is an outer product of one 1-D kernel
    g = w.sum(axis=1)
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _as_hwc(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim == 3:
        return a
    raise ValueError(f"ssim expects [H, W] or [H, W, C] images, got shape {a.shape}")


def ssim(x_hat, x, peak: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian, sigma 1.5, valid windows), per channel then averaged."""
    a, b = _pair(x_hat, x, "ssim")
    a, b = _as_hwc(a), _as_hwc(b)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        p, q = a[:, :, c], b[:, :, c]
        mu_p = _filter_valid(p, win)
        mu_q = _filter_valid(q, win)
        s_pp = _filter_valid(p * p, win) - mu_p ** 2
        s_qq = _filter_valid(q * q, win) - mu_q ** 2
        s_pq = _filter_valid(p * q, win) - mu_p * mu_q
        num = (2 * mu_p * mu_q + c1) * (2 * s_pq + c2)
        den = (mu_p ** 2 + mu_q ** 2 + c1) * (s_pp + s_qq + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def rip_spread(measure_fn: Callable[[np.ndarray], np.ndarray], sample_pairs: Iterable[tuple]) -> float:
    """Largest ``| ||F(x1 - x2)||^2 / ||x1 - x2||^2 - 1 |`` over the pairs."""
    worst = None
    for k, (x1, x2) in enumerate(sample_pairs):
        d = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
        nd = float(np.sum(d * d))
        if nd == 0.0:
            warnings.warn(f"rip_spread: pair {k} has zero difference, skipped")
            continue
        fd = np.asarray(measure_fn(d), dtype=np.float64)
        ratio = abs(float(np.sum(fd * fd)) / nd - 1.0)
        worst = ratio if worst is None else max(worst, ratio)
    if worst is None:
        raise ValueError("rip_spread needs at least one pair with a nonzero difference")
    return worst


@dataclass
class QualityReport:
    rows: list[dict] = field(default_factory=list)  # name, sigma, steps, psnr_db, ssim

    def add(self, name: str, sigma: float, steps, psnr_db: float, ssim_val: float):
        self.rows.append({"name": name, "sigma": float(sigma), "steps": steps,
                          "psnr_db": float(psnr_db), "ssim": float(ssim_val)})

    def settings(self) -> list[tuple]:
        seen = []
        for r in self.rows:
            key = (r["sigma"], r["steps"])
            if key not in seen:
                seen.append(key)
        return seen

    def mean(self, sigma: float | None = None, steps=None, metric: str = "psnr_db") -> float:
        sel = [r[metric] for r in self.rows
               if (sigma is None or r["sigma"] == sigma) and (steps is None or r["steps"] == steps)]
        if not sel:
            raise KeyError(f"no rows for sigma={sigma} steps={steps}")
        return float(np.mean(sel))

    def means(self) -> list[dict]:
        return [{"sigma": s, "steps": t, "psnr_db": self.mean(s, t), "ssim": self.mean(s, t, "ssim"),
                 "count": sum(1 for r in self.rows if r["sigma"] == s and r["steps"] == t)}
                for s, t in self.settings()]

    def sigma_series(self, steps=None) -> list[tuple[float, float]]:
        return [(s, m["psnr_db"]) for m in self.means() for s in [m["sigma"]] if steps is None or m["steps"] == steps]

    def step_series(self, sigma: float = 0.0) -> list[tuple]:
        return [(m["steps"], m["psnr_db"]) for m in self.means() if m["sigma"] == sigma]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r["name"], f"{r['sigma']:g}", "" if r["steps"] is None else r["steps"],
                        f"{r['psnr_db']:.4f}", f"{r['ssim']:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'sigma':>6} {'steps':>6} {'n':>5} {'psnr_db':>9} {'ssim':>8}"]
        for m in self.means():
            st = "-" if m["steps"] is None else str(m["steps"])
            lines.append(f"{m['sigma']:>6g} {st:>6} {m['count']:>5} {m['psnr_db']:>9.4f} {m['ssim']:>8.6f}")
        return "\n".join(lines)


def _step_settings(bundle, step_list):
    if bundle.variant in ("r2cs_net", "rcs_gd"):
        default = bundle.steps if bundle.variant == "r2cs_net" else bundle.gd_steps
        return list(step_list) if step_list else [default]
    return [None]


def evaluate(bundle, dataset, sigma_list: Sequence[float] = (0.0,), step_list: Sequence[int] | None = None,
             seed: int = 0, batch_size: int = 32) -> QualityReport:
    """Score every sample of ``dataset`` under each noise level and step count.

    ``dataset`` is a PatchDataset or a ``{name: [H, W, C] array}`` mapping.
    Steps apply to ``r2cs_net`` (recurrence length) and ``rcs_gd`` (descent
    iterations); other variants get one row per sample with empty steps.
    Noise for a given (sigma, steps) setting is drawn from a generator seeded
    by ``seed`` alone, so every setting sees the same perturbation pattern.
    """
    from .model import reconstruct_images

    if isinstance(dataset, dict):
        names = list(dataset)
        groups = {}
        for n in names:
            groups.setdefault(np.asarray(dataset[n]).shape, []).append(n)
        batches = [(ns[lo:lo + batch_size], np.stack([np.asarray(dataset[n], np.float32) for n in ns[lo:lo + batch_size]]))
                   for ns in groups.values() for lo in range(0, len(ns), batch_size)]
    else:
        batches = []
        for lo in range(0, len(dataset), batch_size):
            ks = list(range(lo, min(lo + batch_size, len(dataset))))
            batches.append(([dataset.patch_name(k) for k in ks], dataset.batch(ks)))
    report = QualityReport()
    for sigma in sigma_list:
        for steps in _step_settings(bundle, step_list):
            rng = np.random.default_rng(seed)
            for names, x in batches:
                x_hat = reconstruct_images(bundle, x, float(sigma), steps, rng).data
                for name, a, b in zip(names, x_hat, x):
                    report.add(name, sigma, steps, psnr(a, b), ssim(a, b))
    return report
