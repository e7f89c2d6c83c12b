"""Command line interface.

Subcommands: gen-data, train-denoiser, register, finetune, evaluate.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import data, deq, grid, pirate, render
from .config import ConfigError, deq_config, dump_config, load_config, pirate_config
from .denoiser import (
    CheckpointError,
    ConvNetDenoiser,
    DenoiserTrainingConfig,
    TrainingDivergedError,
    TVDenoiser,
    denoising_mse,
    init_convnet,
    load_checkpoint,
    save_checkpoint,
    select_denoiser,
    train_denoiser,
)
from .denoiser.checkpoint import checkpoint_paths
from .metrics import dsc, warp_mask
from .warp import warp

log = logging.getLogger("pnpreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class DivergenceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument helpers


def parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"dims must be comma-separated integers, got {text!r}") from None
    if len(dims) not in (2, 3):
        raise UsageError(f"dims must have 2 or 3 entries, got {text!r}")
    if min(dims) < data.MIN_PHANTOM_EXTENT:
        raise UsageError(f"every extent must be >= {data.MIN_PHANTOM_EXTENT}, got {text!r}")
    return dims


def parse_floats(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError("expected at least one value")
    return values


def _settings(args, **extra) -> dict:
    overrides = {
        "gamma0": getattr(args, "gamma0", None),
        "alpha": getattr(args, "alpha", None),
        "tau": getattr(args, "tau", None),
        "t_max": getattr(args, "t_max", None),
        "schedule": getattr(args, "schedule", None),
        "solver": getattr(args, "solver", None),
    }
    overrides.update(extra)
    return load_config(args.config, overrides)


def _add_common(p):
    p.add_argument("--config", default="desk",
                   help="preset name (desk, paper-scale) or key-value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (1 gives bit-reproducible output)")
    p.add_argument("--log-level", default="WARNING")


def _add_registration(p):
    p.add_argument("--gamma0", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--schedule", choices=["cosine", "fixed"])
    p.add_argument("--solver", choices=["plain", "anderson"])


def _add_denoisers(p):
    p.add_argument("--checkpoint", help="pre-trained ConvNet denoiser (R variants)")
    p.add_argument("--finetuned", help="fine-tuned ConvNet denoiser (D variants)")
    p.add_argument("--tv", type=float, metavar="WEIGHT",
                   help="use a TV denoiser with this weight as R instead of a checkpoint")


def _load_denoiser(path):
    try:
        params, meta, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return ConvNetDenoiser(params, meta.get("sigma"))


def _denoisers(args, settings):
    pretrained = finetuned = None
    if args.tv is not None and args.checkpoint:
        raise UsageError("--tv and --checkpoint are mutually exclusive")
    if args.tv is not None:
        pretrained = TVDenoiser(args.tv, iters=settings["tv_iters"])
    elif args.checkpoint:
        pretrained = _load_denoiser(args.checkpoint)
    if args.finetuned:
        finetuned = _load_denoiser(args.finetuned)
    return pretrained, finetuned


def _variant_cfg(base, variant, pretrained, finetuned):
    try:
        return pirate.variant_config(base, variant, pretrained, finetuned)
    except pirate.MissingDenoiserError as exc:
        hint = "--finetuned" if "fine-tuned" in str(exc) else "--checkpoint or --tv"
        raise DataError(f"{exc}; pass {hint}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _load_dataset(root):
    try:
        pairs, manifest = data.load_pairs(root)
    except FileNotFoundError:
        raise DataError(f"no dataset manifest under {root}") from None
    if not pairs:
        raise DataError(f"dataset {root} has no pairs")
    return pairs, manifest


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    dims = parse_dims(args.dims)
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    pairs = data.make_pairs(args.pairs, dims, args.seed, args.magnitude, args.smoothness,
                            args.complexity)
    params = {"dims": list(dims), "pairs": args.pairs, "seed": args.seed,
              "magnitude": args.magnitude, "smoothness_scale": args.smoothness,
              "complexity": args.complexity,
              "pair_seeds": {p.name: {"phantom": [args.seed, i, 0], "field": [args.seed, i, 1]}
                             for i, p in enumerate(pairs)}}
    path = data.save_pairs(args.out, pairs, params)
    print(f"wrote {len(pairs)} pairs and {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-denoiser


def _sigma_name(sigma: float) -> str:
    return f"sigma_{sigma!r}"


def cmd_train_denoiser(args) -> int:
    settings = _settings(args)
    sigmas = parse_floats(args.sigmas) if args.sigmas else settings["sigmas"]
    if any(s <= 0 for s in sigmas):
        raise UsageError("noise levels must be positive")
    dims = parse_dims(args.dims)
    epochs = settings["denoiser_epochs"] if args.epochs is None else args.epochs
    if epochs < 0:
        raise UsageError("--epochs must be >= 0")
    n = args.samples or settings["train_samples"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pirate_base = pirate_config(settings, dims)
    train = data.make_denoiser_dataset(n, sigmas, seed=[args.seed, 0], source=args.source,
                                       dims=dims, pirate_cfg=pirate_base)
    held_out = data.make_denoiser_dataset(max(n // 4, 1), sigmas, seed=[args.seed, 1],
                                          source="synthetic", dims=dims)
    report = {"criterion": "mean validation DSC of P+R+S registration",
              "source": args.source, "epochs": epochs, "candidates": []}
    candidates = {}
    log_rows = []
    for j, sigma in enumerate(sigmas):
        samples = [s for s in train if s.sigma == sigma]
        cfg = DenoiserTrainingConfig(sigma=sigma, epochs=epochs,
                                     learning_rate=settings["denoiser_lr"],
                                     batch_size=settings["batch_size"], seed=args.seed,
                                     hidden=settings["hidden"], layers=settings["layers"])
        ckpt = out / _sigma_name(sigma)
        init, adam, start = None, None, 0
        if args.resume and checkpoint_paths(ckpt)[0].exists():
            init, meta, adam = load_checkpoint(ckpt)
            start = int(meta.get("epoch", 0))
            if start > epochs:
                raise UsageError(f"{ckpt} already has {start} epochs > --epochs {epochs}")
        if init is None:
            init = init_convnet(len(dims), hidden=cfg.hidden, layers=cfg.layers, seed=args.seed)
        try:
            res = train_denoiser(samples, cfg, init=init, adam=adam, start_epoch=start)
        except TrainingDivergedError as exc:
            raise DivergenceError(f"sigma {sigma}: {exc}") from None
        for row in res.log:
            log_rows.append({"sigma": sigma, **row})
        meta = {"sigma": sigma, "seed": args.seed, "epoch": epochs, "source": args.source,
                "learning_rate": cfg.learning_rate, "batch_size": cfg.batch_size}
        save_checkpoint(ckpt, res.params, meta, res.adam)
        den = ConvNetDenoiser(res.params, sigma)
        candidates[sigma] = den
        test = [s for s in held_out if s.sigma == sigma]
        report["candidates"].append({
            "sigma": sigma, "checkpoint": checkpoint_paths(ckpt)[0].name,
            "heldout_mse": denoising_mse(den, test),
            "noisy_mse": denoising_mse(lambda z: z, test)})
        log.info("sigma %g trained (%d epochs)", sigma, epochs)

    with open(out / "training_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "epoch", "loss"])
        for row in log_rows:
            writer.writerow([repr(row["sigma"]), row["epoch"], repr(row["loss"])])

    if args.validation:
        val_pairs, _ = _load_dataset(args.validation)
        val_pairs = val_pairs[: args.val_pairs]
    else:
        val_pairs = data.make_pairs(args.val_pairs, dims, [args.seed, 2])
    base = pirate.variant_config(pirate_config(settings, val_pairs[0].fixed.shape,
                                               denoiser=next(iter(candidates.values()))),
                                 "P+R+S")
    best, table = select_denoiser(candidates, val_pairs, base)
    for entry, (_, score) in zip(report["candidates"], table):
        entry["validation_dsc"] = score
    best_sigma = next(s for s, d in candidates.items() if d is best)
    report["best"] = {"sigma": best_sigma,
                      "checkpoint": checkpoint_paths(out / _sigma_name(best_sigma))[0].name}
    _write_json(out / "selection.json", report)
    print(f"best denoiser: sigma {best_sigma!r} -> {report['best']['checkpoint']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register


def _read_inputs(args):
    if args.pair:
        root = Path(args.pair)
        fixed, moving = root / "fixed", root / "moving"
        fl, ml = root / "fixed_labels", root / "moving_labels"
        if not grid.grid_paths(fl)[0].exists():
            fl = ml = None
    else:
        if not (args.fixed and args.moving):
            raise UsageError("give --pair or both --fixed and --moving")
        fixed, moving, fl, ml = args.fixed, args.moving, args.fixed_labels, args.moving_labels
        if (fl is None) != (ml is None):
            raise UsageError("give both label masks or neither")
    try:
        f = grid.read_volume(fixed).astype(np.float64)
        m = grid.read_volume(moving).astype(np.float64)
        labels = (grid.read_mask(fl), grid.read_mask(ml)) if fl is not None else None
    except FileNotFoundError as exc:
        raise DataError(f"missing input file: {exc.filename}") from None
    if f.shape != m.shape:
        raise DataError(f"fixed {f.shape} and moving {m.shape} dims differ")
    if labels is not None and (labels[0].shape != f.shape or labels[1].shape != f.shape):
        raise DataError("label masks must match the image dims")
    return f, m, labels


def cmd_register(args) -> int:
    settings = _settings(args)
    f, m, labels = _read_inputs(args)
    pretrained, finetuned = _denoisers(args, settings)
    cfg = _variant_cfg(pirate_config(settings, f.shape), args.variant, pretrained, finetuned)
    res = pirate.register(f, m, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    warped = warp(m, res.field)
    grid.write_field(res.field, out / "field")
    grid.write_volume(warped, out / "warped")
    pirate.write_trace_csv(out / "trace.csv", res.trace)
    final = pirate.field_summary(f, m, res.field)
    metrics = {
        "variant": args.variant,
        "dims": list(f.shape),
        "iterations": len(res.trace),
        "nfe": res.nfe,
        "converged": bool(res.converged),
        "diverged": bool(res.diverged),
        "initial": res.initial,
        "final": final,
        "dsc": None, "dsc_initial": None, "dsc_per_label": None,
    }
    if labels is not None:
        fixed_labels, moving_labels = labels
        warped_labels = warp_mask(moving_labels, res.field)
        grid.write_mask(warped_labels, out / "warped_labels")
        per_label, mean = dsc(fixed_labels, warped_labels)
        metrics["dsc"] = mean
        metrics["dsc_per_label"] = {str(k): v for k, v in per_label.items()}
        metrics["dsc_initial"] = dsc(fixed_labels, moving_labels)[1]
    _write_json(out / "metrics.json", metrics)
    if res.diverged:
        raise DivergenceError("registration diverged; wrote the last finite field")
    print(json.dumps({k: metrics[k] for k in ("variant", "dsc", "dsc_initial")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune


def cmd_finetune(args) -> int:
    settings = _settings(args)
    pairs, _ = _load_dataset(args.data)
    if args.max_pairs:
        pairs = pairs[: args.max_pairs]
    try:
        params0, meta0, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    dcfg = deq_config(settings, epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    if dcfg.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    pcfg = pirate.variant_config(pirate_config(settings, pairs[0].fixed.shape,
                                               denoiser=ConvNetDenoiser(params0)), "P+R+S")
    res = deq.finetune(pairs, params0, dcfg, pcfg, timing=not args.no_timing)
    meta = {**meta0, "finetune_epochs": dcfg.epochs, "finetune_lr": dcfg.learning_rate,
            "finetune_seed": dcfg.seed}
    save_checkpoint(args.out, res.params, meta, res.adam if dcfg.epochs else None)
    log_path = Path(args.log) if args.log else checkpoint_paths(args.out)[0].with_name(
        checkpoint_paths(args.out)[0].name.replace(".ckpt.json", ".log.csv"))
    deq.write_log_csv(log_path, res.log)
    print(f"fine-tuned {dcfg.epochs} epochs, {res.skipped}/{res.attempted} forward solves "
          f"skipped; log: {log_path}")
    if res.attempted and res.skipped / res.attempted > 0.5:
        raise DivergenceError(f"{res.skipped} of {res.attempted} forward solves diverged")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    settings = _settings(args)
    pairs, _ = _load_dataset(args.data)
    if args.max_pairs:
        pairs = pairs[: args.max_pairs]
    pretrained, finetuned = _denoisers(args, settings)
    if args.variants:
        variants = [v.strip() for v in args.variants.split(",")]
        unknown = [v for v in variants if v not in pirate.VARIANTS]
        if unknown:
            raise UsageError(f"unknown variants {unknown}; choose from {pirate.VARIANTS}")
    else:
        variants = [v for v in pirate.VARIANTS
                    if ("R" not in v or pretrained is not None)
                    and ("D" not in v or finetuned is not None)]
    base = pirate_config(settings, pairs[0].fixed.shape)
    for v in variants:
        _variant_cfg(base, v, pretrained, finetuned)
    rows, per_pair = pirate.ablation_suite(pairs, base, pretrained, finetuned, variants,
                                           timing=not args.no_timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baseline = [pirate.baseline_dsc(p) for p in pairs]
    rows.insert(0, {"variant": "none", "dsc_mean": float(np.mean(baseline)),
                    "dsc_var": float(np.var(baseline)), "neg_jd_mean": 0.0,
                    "neg_jd_var": 0.0, "jac_loss_mean": 0.0, "runtime": 0.0, "diverged": 0})
    pirate.write_table_csv(out / "table.csv", rows)
    with open(out / "per_pair.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "pair", "dsc", "neg_jd_ratio", "jac_loss"])
        for v in variants:
            for p, d, nj, jl in zip(pairs, per_pair[v]["dsc"], per_pair[v]["neg_jd_ratio"],
                                    per_pair[v]["jac_loss"]):
                writer.writerow([v, p.name, repr(d), repr(nj), repr(jl)])
    (out / "config.txt").write_text(dump_config(settings))
    if args.images:
        pair = pairs[args.image_pair]
        for v in variants:
            vcfg = _variant_cfg(base, v, pretrained, finetuned)
            u = pirate.register(pair.fixed, pair.moving, vcfg, record_trace=False).field
            render.export_pair_images(out / "images" / v.replace("+", "_"), pair.fixed,
                                      pair.moving, warp(pair.moving, u), u, png=args.png)
    for row in rows:
        print(f"{row['variant']:>6}  dsc {row['dsc_mean']:.4f} +- {np.sqrt(row['dsc_var']):.4f}"
              f"  neg-jd {100 * row['neg_jd_mean']:.4f}%")
    if sum(r["diverged"] for r in rows) > 0:
        raise DivergenceError("some registrations diverged")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnpreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic registration pairs")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default="64,64")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--magnitude", type=float, default=data.DESK_MAGNITUDE)
    p.add_argument("--smoothness", type=float, default=data.DESK_SMOOTHNESS)
    p.add_argument("--complexity", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-denoiser", help="train ConvNet denoisers over a noise sweep")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sigmas", help="comma-separated noise levels (default: from config)")
    p.add_argument("--dims", default="64,64", help="image dims the fields come from")
    p.add_argument("--samples", type=int, help="clean fields per noise level")
    p.add_argument("--source", choices=["synthetic", "ps-baseline"], default="synthetic")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoints already in --out")
    p.add_argument("--validation", help="dataset directory used for selection")
    p.add_argument("--val-pairs", type=int, default=4)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("register", help="register one image pair")
    _add_common(p)
    _add_registration(p)
    _add_denoisers(p)
    p.add_argument("--pair", help="pair directory written by gen-data")
    p.add_argument("--fixed")
    p.add_argument("--moving")
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--variant", default="P+R+S", choices=pirate.VARIANTS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("finetune", help="fine-tune a denoiser through the fixed point")
    _add_common(p)
    _add_registration(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--no-timing", action="store_true", help="write 0 for wall times")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="ablation table over a dataset")
    _add_common(p)
    _add_registration(p)
    _add_denoisers(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(pirate.VARIANTS))
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--images", action="store_true", help="export PGM renderings of one pair")
    p.add_argument("--image-pair", type=int, default=0)
    p.add_argument("--png", action="store_true", help="also write PNG copies (needs Pillow)")
    p.add_argument("--no-timing", action="store_true", help="write 0 for runtimes")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("pnpreg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=args.threads)
    else:
        limit = nullcontext()
    try:
        with limit:
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"pnpreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, grid.GridFormatError, CheckpointError, data.FoldError) as exc:
        print(f"pnpreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as exc:
        print(f"pnpreg: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
