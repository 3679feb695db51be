"""Command-line surface.

Every command reads a config and/or checkpoint, writes file artifacts (PNG
grids, CSV reports) under --out, and is reproducible: identical config and
seed give identical bytes. Exit codes: 0 ok, 2 config error, 3 runtime or
non-finite-loss abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    dump_resolved,
    load_config,
)
from .coords import Extent
from .data import DataError, centroid_keypoints, make_synthetic, save_image_grid
from .gan import TrainingDiverged, train_loop
from .hypernet import load_generator_checkpoint, sample_latent
from .inr import evaluate, evaluate_lowres, lerp_params, superresolve, zoom
from .metrics import (
    MetricReport,
    NumericalStabilityError,
    ProjectionDiverged,
    count_macs,
    fid_proxy,
    kpl,
    linear_probe_mse,
    project_latent,
    upsampled_fid,
)


def _parse_extent(text: str) -> Extent:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"extent needs 4 comma-separated numbers, got {text!r}")
    try:
        return Extent(*(float(p) for p in parts)).validate()
    except ValueError as exc:
        raise ConfigError(str(exc))


def _build_dataset(cfg: RunConfig):
    if cfg.data.source == "synthetic":
        ds = make_synthetic(cfg.data.synthetic, cfg.data.count)
        ds.augment_hflip = cfg.data.hflip
        return ds
    return data_mod.load_folder(cfg.data.source, cfg.train.resolution, cfg.data.hflip)


def _load_generator(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    gen, metadata, _ = load_generator_checkpoint(path)
    gen.eval()
    return gen, metadata


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = dump_resolved(cfg, out / "config_resolved.yaml")
    dataset = _build_dataset(cfg)
    final = train_loop(
        cfg.train,
        cfg.generator,
        cfg.arch,
        dataset,
        out,
        resume=args.resume,
        config_hash=digest,
    )
    print(f"final checkpoint: {final}")
    return 0


def cmd_sample(args) -> int:
    gen, _ = _load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = sample_latent(args.count, gen.config.z_dim, args.seed)
    with torch.no_grad():
        images = gen.generate_images(z, psi=args.psi)
    path = out / "samples.png"
    save_image_grid(path, images)
    print(f"samples: {path}")
    return 0


def cmd_superres(args) -> int:
    gen, _ = _load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = sample_latent(args.count, gen.config.z_dim, args.seed)
    with torch.no_grad():
        w = gen.map_latent(z)
        params = gen.generate_params(w)
        native = evaluate(gen.arch, params)
        dense = superresolve(gen.arch, params, args.factor)
    save_image_grid(out / "native.png", native)
    save_image_grid(out / f"superres_x{args.factor}.png", dense)
    print(f"native: {out / 'native.png'}")
    print(f"superresolved: {out / f'superres_x{args.factor}.png'}")
    return 0


def cmd_zoom(args) -> int:
    gen, _ = _load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extent = _parse_extent(args.extent)
    z = sample_latent(args.count, gen.config.z_dim, args.seed)
    with torch.no_grad():
        w = gen.map_latent(z)
        images = zoom(gen.arch, gen.generate_params(w), extent)
    path = out / "zoom.png"
    save_image_grid(path, images)
    print(f"zoom {tuple(extent)}: {path}")
    return 0


def cmd_lowres(args) -> int:
    gen, metadata = _load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = sample_latent(args.count, gen.config.z_dim, args.seed)
    with torch.no_grad():
        w = gen.map_latent(z)
        images = evaluate_lowres(gen.arch, gen.generate_params(w), args.resolution)
    png = out / f"lowres_{args.resolution}.png"
    save_image_grid(png, images)
    report = MetricReport(config_hash=metadata.get("config_hash", ""), seed=args.seed)
    for res in (gen.arch.resolution, args.resolution):
        mac = count_macs(gen.arch, gen.config, res)
        for name, value in mac.rows():
            report.add(f"macs.res{res}.{name}", value)
    csv = out / "macs.csv"
    report.write_csv(csv)
    print(f"lowres image: {png}")
    print(f"mac report: {csv}")
    return 0


def cmd_macs(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport(config_hash=config_hash(cfg), seed=0)
    res = cfg.arch.resolution
    while res >= 4:
        mac = count_macs(cfg.arch, cfg.generator, res)
        report.add(f"macs.res{res}.total", mac.total)
        res //= 2
    csv = out / "macs_sweep.csv"
    report.write_csv(csv)
    print(f"mac sweep: {csv}")
    return 0


def cmd_fid(args) -> int:
    gen, metadata = _load_generator(args.checkpoint)
    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        real_ds = data_mod.load_folder(args.dataset, gen.arch.resolution, False)
    else:
        spec = cfg.data.synthetic
        real_ds = make_synthetic(spec, max(cfg.eval.fid_samples, 64))
    n = min(len(real_ds), max(args.samples, 64))
    z = sample_latent(n, gen.config.z_dim, args.seed)
    with torch.no_grad():
        fake = torch.cat(
            [gen.generate_images(z[i : i + 64]) for i in range(0, n, 64)], dim=0
        )
    value = fid_proxy(real_ds.images[:n], fake, cfg.eval.extractor_seed)
    report = MetricReport(config_hash=metadata.get("config_hash", ""), seed=args.seed)
    report.add("fid_proxy", value)
    csv = out / "fid.csv"
    report.write_csv(csv)
    print(f"fid_proxy={value!r}")
    print(f"report: {csv}")
    return 0


def cmd_kpl(args) -> int:
    gen, metadata = _load_generator(args.checkpoint)
    cfg = load_config(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport(config_hash=metadata.get("config_hash", ""), seed=args.seed)
    if args.mode == "generated":
        result = kpl(
            gen,
            centroid_keypoints,
            n_train=args.n_train,
            n_test=args.n_test,
            latent_space=args.space,
            seed=args.seed,
        )
        report.add("kpl", result.value)
        report.add("kpl_random", result.random_baseline)
        report.metadata = {
            "space": result.latent_space,
            "error_metric": result.error_metric,
            "used_ridge": result.used_ridge,
        }
    else:  # projected: embed real images by optimization, score on true centers
        spec = cfg.data.synthetic
        real = make_synthetic(spec, args.n_test)
        z = sample_latent(args.n_train, gen.config.z_dim, args.seed)
        with torch.no_grad():
            w_tr = gen.map_latent(z)
            fake = torch.cat(
                [
                    evaluate(gen.arch, gen.generate_params(w_tr[i : i + 64]))
                    for i in range(0, args.n_train, 64)
                ],
                dim=0,
            )
        y_tr = centroid_keypoints(fake)
        codes_tr = w_tr.double().numpy()
        codes_ts = np.stack(
            [
                project_latent(
                    real.images[i],
                    gen,
                    steps=cfg.eval.projection_steps,
                    lr=cfg.eval.projection_lr,
                )[0].double().numpy()
                for i in range(len(real))
            ]
        )
        y_ts = centroid_keypoints(real.images)
        value, used_ridge = linear_probe_mse(codes_tr, y_tr, codes_ts, y_ts)
        report.add("kpl_projected", value)
        report.metadata = {"space": "W", "error_metric": "mse", "used_ridge": used_ridge}
    csv = out / "kpl.csv"
    report.write_csv(csv)
    print(str(report))
    print(f"report: {csv}")
    return 0


def cmd_interp(args) -> int:
    gen, _ = _load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z1 = sample_latent(1, gen.config.z_dim, args.z1_seed)
    z2 = sample_latent(1, gen.config.z_dim, args.z2_seed)
    ts = [i / (args.steps - 1) for i in range(args.steps)]
    frames = []
    with torch.no_grad():
        if args.space == "latent":
            for t in ts:
                frames.append(gen.generate_images(torch.lerp(z1, z2, t))[0])
        elif args.space == "inr_params":
            p1 = gen.generate_params(gen.map_latent(z1))
            p2 = gen.generate_params(gen.map_latent(z2))
            for t in ts:
                frames.append(evaluate(gen.arch, lerp_params(p1, p2, t))[0])
        else:  # pixel
            img1 = gen.generate_images(z1)[0]
            img2 = gen.generate_images(z2)[0]
            for t in ts:
                frames.append(torch.lerp(img1, img2, t))
    path = out / f"interp_{args.space}.png"
    data_mod.save_image_strip(path, torch.stack(frames))
    print(f"interpolation strip: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coordgan",
        description="Train and evaluate a coordinate-MLP image generator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, help="train a model from a config file")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)

    p = add("sample", cmd_sample, help="sample a PNG grid from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--psi", type=float, default=0.9)

    p = add("superres", cmd_superres, help="native vs densified-grid renders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)

    p = add("zoom", cmd_zoom, help="render beyond the training extent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extent", default="-0.3,1.3,-0.3,1.3")
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)

    p = add("lowres", cmd_lowres, help="sparse-grid render plus MAC report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = add("macs", cmd_macs, help="MAC sweep across output resolutions")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = add("fid", cmd_fid, help="FID proxy of a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = add("kpl", cmd_kpl, help="keypoint prediction loss of the latent space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["generated", "projected"], default="generated")
    p.add_argument("--space", choices=["Z", "W"], default="Z")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = add("interp", cmd_interp, help="interpolation strip between two seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z1-seed", type=int, default=0)
    p.add_argument("--z2-seed", type=int, default=1)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--space", choices=["latent", "inr_params", "pixel"], default="latent")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NumericalStabilityError, ProjectionDiverged) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
