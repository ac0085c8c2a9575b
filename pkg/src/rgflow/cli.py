"""Command-line entry point.

One binary with subcommands for dataset generation, training, evaluation,
sampling, receptive-field analysis, latent sweeps, mixing, inpainting, and
causal-cone enumeration. Every run is seeded and writes a manifest of its
exact configuration next to its outputs, so any artifact can be regenerated
from the manifest alone.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

import rgflow
from rgflow import analysis, lattice
from rgflow.data import Dataset, Preprocessor, gen_msds, gen_pinwheel, save_image_grid
from rgflow.lattice import LatticeSpec, Region
from rgflow.model import RgFlowModel
from rgflow.training import TrainConfig, evaluate, load_training_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_region(text: str) -> Region:
    """HxW@row,col (e.g. 10x10@11,11)."""
    try:
        size, at = text.split("@")
        h, w = (int(v) for v in size.lower().split("x"))
        r, c = (int(v) for v in at.split(","))
        return Region(r, c, h, w)
    except (ValueError, TypeError) as err:
        raise UsageError(f"bad region {text!r}, expected HxW@row,col") from err


def _parse_n_layer(text: str):
    parts = [int(v) for v in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace, skip=("func",)) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k not in skip and not callable(v)}
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in payload.items()}
    manifest = {"command": command, "version": rgflow.__version__, "args": payload}
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_model(path) -> RgFlowModel:
    model, _ = RgFlowModel.load(path)
    model.eval()
    return model


def _load_image(data_dir, index: int, pre: Preprocessor) -> torch.Tensor:
    ds = Dataset.load(data_dir)
    if not 0 <= index < len(ds):
        raise UsageError(f"index {index} outside dataset of {len(ds)} images")
    x, _ = pre.forward(ds.images8[index : index + 1])
    return x.float()


def _save_images(path, x_model: torch.Tensor, pre: Preprocessor, ncol=None) -> None:
    imgs = pre.to_unit(x_model.detach()).clamp(0, 1).cpu().numpy()
    save_image_grid(path, imgs, ncol=ncol)


def cmd_gen_dataset(args) -> int:
    out = Path(args.out)
    ds = gen_msds(args.variant, args.n, L=args.L, seed=args.seed)
    ds.save(out)
    _write_run_manifest(out, "gen-dataset", args)
    print(f"wrote {len(ds)} images to {out}")
    return 0


def cmd_gen_pinwheel(args) -> int:
    out = Path(args.out)
    points, labels = gen_pinwheel(args.n, legs=args.legs, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "points.npz", points=points, labels=labels)
    _write_run_manifest(out, "gen-pinwheel", args)
    print(f"wrote {len(points)} points to {out / 'points.npz'}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())

    def pick(name, flag_value, default):
        if flag_value is not None:
            return flag_value
        return file_cfg.get(name, default)

    ds = Dataset.load(args.data)
    spec = LatticeSpec(ds.manifest.L, args.m, ds.manifest.C)
    model = RgFlowModel(
        spec,
        n_layer=_parse_n_layer(str(pick("n_layer", args.n_layer, "4"))),
        n_res=int(pick("n_res", args.n_res, 4)),
        hidden=int(pick("hidden", args.hidden, 512)),
        prior=pick("prior", args.prior, "laplacian"),
        prior_scale=float(pick("prior_scale", args.prior_scale, 1.0)),
        share_levels=bool(pick("share_levels", args.share_levels or None, False)),
        seed=args.seed,
    )
    config = TrainConfig(
        steps=int(pick("steps", args.steps, 1000)),
        batch_size=int(pick("batch_size", args.batch_size, 64)),
        lr=float(pick("lr", args.lr, 1e-3)),
        weight_decay=float(pick("weight_decay", args.weight_decay, 5e-5)),
        clip_norm=float(pick("clip_norm", args.clip_norm, 1.0)),
        seed=args.seed,
        checkpoint_interval=int(pick("checkpoint_interval", args.checkpoint_interval, 0)),
        out_dir=str(out),
        compile=bool(pick("compile", args.compile or None, False)),
    )
    _write_run_manifest(out, "train", args)
    if config.steps == 0:
        from rgflow.training import save_training_checkpoint
        from rgflow.nncore import AdamW

        opt = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
        save_training_checkpoint(out / "step00000000.ckpt", model, opt, 0, config)
        print(f"wrote initialization checkpoint to {out}")
        return 0
    log = train(model, ds, config, resume_from=args.resume)
    final = log.records[-1] if len(log) else {}
    print(f"trained {config.steps} steps; final loss {final.get('loss'):.3f} bpd {final.get('bpd'):.4f}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    ds = Dataset.load(args.data)
    result = evaluate(model, ds, seed=args.seed)
    print(json.dumps(result, indent=2))
    if args.out:
        out = Path(args.out)
        _write_run_manifest(out, "eval", args)
        (out / "eval.json").write_text(json.dumps(result, indent=2))
    return 0


def cmd_sample(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    temps = None
    if args.temps:
        vals = [float(v) for v in args.temps.split(",")]
        temps = vals[0] if len(vals) == 1 else vals
    with torch.no_grad():
        x = model.sample(args.n, temps=temps, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    _save_images(out / "samples.png", x, Preprocessor())
    _write_run_manifest(out, "sample", args)
    print(f"wrote {args.n} samples to {out / 'samples.png'}")
    return 0


def _parse_latent(model: RgFlowModel, text: str) -> int:
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 4:
        return lattice.flat_index(model.spec, lattice.LatentIndex(*parts))
    raise UsageError(f"latent must be a flat index or h,i,j,c, got {text!r}")


def cmd_rf(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    flat = _parse_latent(model, args.latent)
    rf = analysis.receptive_field(model, flat, n_samples=args.samples, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    peak = rf.map.max()
    scaled = rf.map / peak if peak > 0 else rf.map
    save_image_grid(out / "rf.png", scaled[None, :, :, None])
    np.savetxt(out / "rf.csv", rf.map, delimiter=",")
    report = {"latent": asdict(rf.index), "strength": rf.strength}
    (out / "rf.json").write_text(json.dumps(report, indent=2))
    _write_run_manifest(out, "rf", args)
    print(json.dumps(report))
    return 0


def cmd_rf_hist(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    hist = analysis.rf_histogram(model, args.level, n_samples=args.samples, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    analysis.save_histogram_csv(out / f"rf_hist_level{args.level}.csv", hist)
    _write_run_manifest(out, "rf-hist", args)
    print(f"level {args.level}: {hist['strengths'].size} latents, max strength {hist['strengths'].max():.4g}")
    return 0


def cmd_vary(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    pre = Preprocessor()
    x = _load_image(args.data, args.index, pre)
    flat = _parse_latent(model, args.latent)
    values = [float(v) for v in args.values.split(",")]
    with torch.no_grad():
        z, _ = model.encode_flat(x)
    frames = analysis.vary_latent(model, z, flat, values)
    out.mkdir(parents=True, exist_ok=True)
    _save_images(out / "vary.png", frames, pre, ncol=len(values))
    _write_run_manifest(out, "vary", args)
    print(f"wrote {len(values)} frames to {out / 'vary.png'}")
    return 0


def cmd_mix(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    pre = Preprocessor()
    xA = _load_image(args.data, args.index_a, pre)
    xB = _load_image(args.data, args.index_b, pre)
    if (args.theta is None) == (args.lam is None):
        raise UsageError("give exactly one of --theta or --lam")
    if args.theta is not None:
        mixed = analysis.mix_hyperbolic(model, xA, xB, args.theta)
        tag = f"theta{args.theta}"
    else:
        mixed = analysis.mix_linear(model, xA, xB, args.lam)
        tag = f"lam{args.lam:g}"
    out.mkdir(parents=True, exist_ok=True)
    _save_images(out / f"mix_{tag}.png", torch.cat([xA, mixed, xB]), pre, ncol=3)
    _write_run_manifest(out, "mix", args)
    print(f"wrote mix to {out}")
    return 0


def cmd_inpaint(args) -> int:
    out = Path(args.out)
    model = _load_model(args.model)
    pre = Preprocessor()
    region = parse_region(args.region)
    x_true = _load_image(args.data, args.index, pre)
    x_corrupt = analysis.corrupt_region(x_true, region)
    free_mask = None
    if args.restriction == "random":
        cone_count = lattice.inference_cone(model.spec, region).total()
        free_mask = lattice.random_latent_mask(model.spec, cone_count, seed=args.seed)
    result = analysis.inpaint(
        model, x_corrupt, region, budget=args.budget, free_mask=free_mask, n_init=args.n_init, seed=args.seed
    )
    out.mkdir(parents=True, exist_ok=True)
    _save_images(out / "inpaint.png", torch.cat([x_true, x_corrupt, result.image]), pre, ncol=3)
    value = analysis.psnr(
        pre.to_unit(x_true).clamp(0, 1).numpy(), pre.to_unit(result.image).clamp(0, 1).numpy()
    )
    report = {
        "psnr_db": value,
        "free_latents": result.free_count,
        "steps": result.steps_run,
        "converged": result.converged,
        "restriction": args.restriction,
    }
    (out / "inpaint.json").write_text(json.dumps(report, indent=2))
    _write_run_manifest(out, "inpaint", args)
    print(json.dumps(report))
    return 0


def cmd_cones(args) -> int:
    spec = LatticeSpec(args.L, args.m, args.C)
    if args.region:
        cone = lattice.inference_cone(spec, parse_region(args.region))
        for h, count in enumerate(cone.level_counts()):
            print(f"level {h}: {count}")
        print(f"total: {cone.total()} of {spec.n_variables}")
    elif args.latent is not None:
        parts = [int(v) for v in args.latent.split(",")]
        idx = lattice.latent_index(spec, parts[0]) if len(parts) == 1 else lattice.LatentIndex(*parts)
        cone = lattice.generation_cone(spec, idx)
        print(f"footprint: {int(cone.pixels.sum())} of {spec.L * spec.L} pixels")
    else:
        raise UsageError("give --region or --latent")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rgflow", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="internal parallelism cap (env RGFLOW_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate an oval-grid dataset")
    p.add_argument("--variant", type=int, choices=(1, 2), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--L", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("gen-pinwheel", help="generate a pinwheel point cloud")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--legs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_pinwheel)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file with defaults; flags win")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--clip-norm", type=float, default=None, dest="clip_norm")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--n-layer", default=None, dest="n_layer")
    p.add_argument("--n-res", type=int, default=None, dest="n_res")
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--prior", choices=("laplacian", "gaussian"), default=None)
    p.add_argument("--prior-scale", type=float, default=None, dest="prior_scale")
    p.add_argument("--share-levels", action="store_true", dest="share_levels")
    p.add_argument("--checkpoint-interval", type=int, default=None, dest="checkpoint_interval")
    p.add_argument("--resume", default=None)
    p.add_argument("--compile", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate NLL and bits per dimension")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample images from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--temps", default=None, help="single value or per-level comma list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("rf", help="receptive field of one latent")
    p.add_argument("--model", required=True)
    p.add_argument("--latent", required=True, help="flat index or h,i,j,c")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("rf-hist", help="histogram of receptive-field strengths")
    p.add_argument("--model", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rf_hist)

    p = sub.add_parser("vary", help="sweep one latent of an encoded image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--latent", required=True)
    p.add_argument("--values", required=True, help="comma list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vary)

    p = sub.add_parser("mix", help="mix two images in latent space")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index-a", type=int, required=True, dest="index_a")
    p.add_argument("--index-b", type=int, required=True, dest="index_b")
    p.add_argument("--theta", type=int, default=None, help="level threshold (scale-wise mixing)")
    p.add_argument("--lam", type=float, default=None, help="linear coefficient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("inpaint", help="restore a corrupted region")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--region", required=True, help="HxW@row,col")
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--n-init", type=int, default=200, dest="n_init")
    p.add_argument("--restriction", choices=("cone", "random"), default="cone")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("cones", help="enumerate causal cones")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--region", default=None, help="HxW@row,col")
    p.add_argument("--latent", default=None, help="flat index or h,i,j,c")
    p.set_defaults(func=cmd_cones)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = args.threads or int(os.environ.get("RGFLOW_THREADS", 0) or 0)
        if threads:
            torch.set_num_threads(threads)
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
