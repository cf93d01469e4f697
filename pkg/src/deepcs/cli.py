"""Command-line entry points: train, reconstruct, evaluate, gradcheck, inspect."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .data import assign_splits, corpus_dir, load_patch_dataset
from .images import _atomic_write, list_images, load_image, save_image
from .measurement import build_mask, pad_to_blocks
from .metrics import evaluate, psnr
from .model import build_variant, reconstruct_images
from .modelfile import ModelFileError, load_model, parse, save_model
from .tensor import ShapeError
from .training import train

LOSS_COLUMNS = ("epoch", "split", "loss", "psnr")


class CommandError(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    _atomic_write(path, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))


def _float_list(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _int_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def loss_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for row in history:
        w.writerow([row["epoch"], row["split"], f"{row['loss']:.8g}", f"{row['psnr']:.6f}"])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    data_dir = Path(cfg.data_dir) if cfg.data_dir else corpus_dir()
    tc = cfg.train
    ds = load_patch_dataset(data_dir, tc.patch_size, cfg.patch_stride or None, channels=cfg.channels, seed=tc.seed)
    trn = ds.select("train")
    if cfg.max_patches:
        trn = trn.limit(cfg.max_patches, tc.seed)
    val = ds.select("val")
    if len(trn) == 0:
        raise CommandError(f"no training patches found in {data_dir}")
    bundle = build_variant(cfg.variant, cfg.sampling(), tc.seed, steps=tc.T, widths=cfg.widths,
                           mask_mode=cfg.mask, gd_steps=cfg.gd_steps, gd_lr=cfg.gd_lr)
    print(f"training {cfg.variant}: {len(trn)} train / {len(val)} val patches from {data_dir}")
    t0 = time.perf_counter()

    def log(rows):
        rows = rows if isinstance(rows, list) else [rows]
        print("  " + "  ".join(f"epoch {r['epoch']} {r['split']} loss {r['loss']:.6f} psnr {r['psnr']:.2f}" for r in rows))

    result = train(bundle, trn, tc, val=val, log=None if args.quiet else log)
    elapsed = time.perf_counter() - t0
    model_out, loss_out, manifest_out = Path(cfg.model_out), Path(cfg.loss_csv), Path(cfg.manifest)
    save_model(model_out, bundle)
    _write_text(loss_out, loss_csv(result.history))
    manifest = {
        "version": __version__,
        "seed": tc.seed,
        "config_path": str(args.config),
        "config": cfg.as_dict(),
        "data_dir": str(data_dir),
        "train_patches": len(trn),
        "val_patches": len(val),
        "train_images": sorted(trn.image_ids()),
        "val_images": sorted(val.image_ids()),
        "steps": result.steps,
        "seconds": round(elapsed, 3),
        "model_sha256": hashlib.sha256(model_out.read_bytes()).hexdigest(),
        "outputs": {"model": str(model_out), "loss_csv": str(loss_out)},
    }
    _write_text(manifest_out, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {model_out} ({result.steps} steps, {elapsed:.1f}s), {loss_out}, {manifest_out}")
    return 0


def _latent_png(states: list, cfg, shape) -> list[np.ndarray]:
    """First latent channel per step, blown up to pixel resolution, shared grey scale."""
    maps = [np.asarray(z.data[0, :, :, 0], dtype=np.float64) for z in states]
    lo = min(m.min() for m in maps)
    hi = max(m.max() for m in maps)
    span = hi - lo if hi > lo else 1.0
    out = []
    for m in maps:
        big = np.kron((m - lo) / span, np.ones((cfg.block_h, cfg.block_w)))
        out.append(big[: shape[0], : shape[1], None])
    return out


def cmd_reconstruct(args) -> int:
    bundle = load_model(args.model)
    cfg = bundle.cfg
    sensor = build_mask(args.mask, cfg) if args.mask else None
    out_dir = Path(args.out)
    rng = np.random.default_rng(args.seed)
    for path in args.images:
        p = Path(path)
        img = load_image(p, cfg.channels)
        h, w = img.shape[:2]
        if h % cfg.block_h or w % cfg.block_w:
            if args.pad != "reflect":
                ph, pw = -h % cfg.block_h, -w % cfg.block_w
                raise CommandError(f"{p}: {h}x{w} is not divisible by the {cfg.block_h}x{cfg.block_w} block "
                                   f"(needs {ph} more rows and {pw} more columns); pass --pad reflect")
            img_in = pad_to_blocks(img[None], cfg, "reflect")[0]
        else:
            img_in = img
        x_hat, states = reconstruct_images(bundle, img_in[None], args.sigma, args.steps, rng, sensor, return_states=True)
        rec = x_hat.data[0, :h, :w]
        target = out_dir / f"{p.stem}_recon.png"
        save_image(target, rec)
        print(f"{p} -> {target}  PSNR {psnr(np.clip(rec, 0, 1), img):.2f} dB")
        if args.dump_latent:
            for i, m in enumerate(_latent_png(states, cfg, img_in.shape)):
                save_image(out_dir / f"{p.stem}_latent_step{i}.png", m[:h, :w])
    return 0


def _load_eval_images(data_dir: Path, channels: int, split: str, seed: int, pad: str | None, cfg) -> dict:
    paths = list_images(data_dir)
    if not paths:
        raise CommandError(f"no images found in {data_dir}")
    if split != "all":
        splits = assign_splits([p.name for p in paths], seed)
        paths = [p for p in paths if splits[p.name] == split]
        if not paths:
            raise CommandError(f"no {split} images in {data_dir}")
    images = {}
    for p in paths:
        img = load_image(p, channels)
        if img.shape[0] % cfg.block_h or img.shape[1] % cfg.block_w:
            if pad != "reflect":
                raise CommandError(f"{p}: {img.shape[0]}x{img.shape[1]} is not divisible by the "
                                   f"{cfg.block_h}x{cfg.block_w} block; pass --pad reflect")
            img = pad_to_blocks(img[None], cfg, "reflect")[0]
        images[p.name] = img
    return images


def cmd_evaluate(args) -> int:
    bundle = load_model(args.model)
    data_dir = Path(args.data_dir)
    if args.patch:
        ds = load_patch_dataset(data_dir, args.patch, None, None if args.split == "all" else args.split,
                                bundle.cfg.channels, args.split_seed)
    else:
        ds = _load_eval_images(data_dir, bundle.cfg.channels, args.split, args.split_seed, args.pad, bundle.cfg)
    report = evaluate(bundle, ds, args.sigmas, args.steps_list, seed=args.seed)
    text = report.to_csv()
    if args.out:
        _write_text(Path(args.out), text)
        print(f"wrote {args.out} ({len(report.rows)} rows)")
    else:
        sys.stdout.write(text)
    print(report.summary())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import broken_case, format_results, run_suite

    t0 = time.perf_counter()
    results = run_suite(extra=[broken_case()] if args.inject_fault else (), bits=args.bits)
    print(format_results(results))
    print(f"runtime {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def inspect_text(bundle, blob: bytes) -> str:
    header, arrays = parse(blob)
    lines = [f"variant: {bundle.variant}",
             f"sampling: blocks {bundle.cfg.block_h}x{bundle.cfg.block_w}x{bundle.cfg.channels}, "
             f"rate {bundle.cfg.rate:g}, m {bundle.cfg.m} of {bundle.cfg.block_entries}",
             f"mask: {bundle.mask.mode}  measurement: {'learned' if bundle.mm.learnable else 'fixed'}",
             f"steps: {bundle.steps}  gd_steps: {bundle.gd_steps}  gd_lr: {bundle.gd_lr:g}"]
    meta = {k: v for k, v in header.items() if k.startswith("meta.")}
    if meta:
        lines.append("train_meta: " + ", ".join(f"{k[5:]}={v}" for k, v in meta.items()))
    patch = int(bundle.train_meta.get("patch_size", 32))
    latent = bundle.cfg.latent_shape(1, patch, patch)
    lines.append("")
    lines.append(f"reconstruction layers (input latent {latent}):")
    lines.append(f"{'layer':>5}  {'kind':<15} {'kernel':>7} {'stride':>6} {'cin':>4} {'cout':>4}  "
                 f"{'bn':<3} {'relu':<4} {'skip':>4}  {'output':<18} {'params':>8}")
    for row in bundle.net.layer_table(latent):
        lines.append(f"{row['layer']:>5}  {row['kind']:<15} {row['kernel']:>7} {row['stride']:>6} {row['cin']:>4} "
                     f"{row['cout']:>4}  {'yes' if row['bn'] else '-':<3} {'yes' if row['relu'] else '-':<4} "
                     f"{row['skip'] if row['skip'] else '-':>4}  {str(row['out_shape']):<18} {row['params']:>8}")
    if bundle.gates is not None:
        lines.append("")
        lines.append("recurrent gates:")
        for name, mod in bundle.gates.gate_modules().items():
            shapes = ", ".join(f"{p.name.rsplit('.', 1)[0].split('.')[-1]}.{p.name.rsplit('.', 1)[1]} "
                               f"{tuple(p.shape)}" for p in mod.parameters())
            lines.append(f"  {name} ({mod.out}, {mod.cin}->{mod.cout}): {shapes}")
        for bn in bundle.gates.batchnorms():
            lines.append(f"  {bn.name}: {bn.channels} channels, {len(bn.stats)} stat slots")
    lines.append("")
    param_names = {p.name for p in bundle.parameters()}
    lines.append(f"tensor table: {len(arrays)} tensors, {sum(a.size for a in arrays.values())} values")
    n_param = n_buf = 0
    for name, a in arrays.items():
        kind = "param" if name in param_names else "buffer"
        if kind == "param":
            n_param += a.size
        else:
            n_buf += a.size
        lines.append(f"  {name:<28} {kind:<6} {str(a.shape):<18} {a.size:>8}")
    lines.append(f"total parameters: {n_param}  (buffers: {n_buf})")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    p = Path(args.model)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    blob = p.read_bytes()
    bundle = load_model(p)
    print(inspect_text(bundle, blob))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepcs", description="Block compressive sensing with recurrent refinement.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="sample and reconstruct images")
    p.add_argument("model")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", default="recon", help="output directory (default: recon)")
    p.add_argument("--sigma", type=float, default=0.0, help="measurement noise std")
    p.add_argument("--steps", type=int, default=None,
                   help="recurrent steps (r2cs_net) or descent iterations (rcs_gd)")
    p.add_argument("--dump-latent", action="store_true", help="write the first latent channel per step")
    p.add_argument("--mask", choices=("dct", "identity"), default=None, help="sensor-side mask preset")
    p.add_argument("--pad", choices=("reflect",), default=None, help="pad images not divisible by the block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="PSNR/SSIM sweep over noise levels and step counts")
    p.add_argument("model")
    p.add_argument("data_dir")
    p.add_argument("--sigmas", type=_float_list, default=[0.0])
    p.add_argument("--steps-list", type=_int_list, default=None)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=0, help="score non-overlapping patches of this size instead of whole images")
    p.add_argument("--pad", choices=("reflect",), default=None)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--bits", type=int, choices=(32, 64), default=64)
    p.add_argument("--inject-fault", action="store_true", help="add a deliberately wrong op (harness self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigError, ModelFileError, FileNotFoundError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
