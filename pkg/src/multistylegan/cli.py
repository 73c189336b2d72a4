"""Command-line entry point: ``multistylegan <subcommand> ...``."""

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .data import DatasetError, count_windows, index_dataset, load_batch, write_synthetic_dataset
from .export import pair_image, save_png, stack_rows
from .metrics import REFERENCE_TARGETS, IdentityEmbedder, RandomProjectionEmbedder, RandomSoftmaxClassifier, evaluate_pairs
from .trainer import fixed_latents, load_generator, read_checkpoint, run_training

log = logging.getLogger("multistylegan")


class UsageError(Exception):
    pass


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _generator(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return load_generator(args.checkpoint, ema=not args.no_ema)


def _checkpoint_config(path) -> RunConfig:
    return RunConfig.from_dict(read_checkpoint(path)["config"])


def _write_invocation(out: Path, args, cfg: RunConfig = None):
    if cfg is not None:
        dump_config(cfg, out / "config.yaml")
    inv = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "invocation.json").write_text(json.dumps(inv, indent=2, sort_keys=True, default=str) + "\n")


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    for flag, key in (("epochs", "training.epochs"), ("batch_size", "training.batch_size"),
                      ("seed", "training.seed"), ("max_steps", "training.max_steps")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key}={v}")
    cfg = apply_overrides(cfg, overrides)
    index = index_dataset(args.data, resolution=cfg.generator.resolution,
                          window_length=cfg.data.window_length, stride=cfg.data.stride)
    out = _out_dir(args.out)
    _write_invocation(out, args)
    trainer = run_training(cfg, index, out, resume=args.resume)
    print(f"trained {trainer.step} steps; checkpoint: {out / 'checkpoints' / 'latest.pt'}")


def cmd_sample(args):
    g = _generator(args)
    out = _out_dir(args.out)
    z = fixed_latents(args.seed, args.count, g.config.latent_dim)
    images = []
    with torch.no_grad():
        for i in range(args.count):
            img = g.synthesize(g.map_latent(z[i : i + 1], args.psi), noise="zero")
            im = pair_image(img.bf[0], img.gfp[0])
            save_png(im, out / f"sample_{i:03d}.png")
            images.append(im)
    save_png(stack_rows(images), out / "grid.png")
    _write_invocation(out, args, _checkpoint_config(args.checkpoint))
    print(f"wrote {args.count} samples to {out}")


def cmd_interpolate(args):
    g = _generator(args)
    out = _out_dir(args.out)
    z = fixed_latents(args.seed, 2, g.config.latent_dim)
    with torch.no_grad():
        frames = g.interpolate_latents(z[0:1], z[1:2], args.steps, args.psi)
    images = [pair_image(f.bf[0], f.gfp[0]) for f in frames]
    for i, im in enumerate(images):
        save_png(im, out / "frames" / f"step_{i:03d}.png")
    save_png(stack_rows(images), out / "interpolation.png")
    if args.gif:
        from PIL import Image

        pil = [Image.fromarray(im) for im in images]
        pil[0].save(out / "interpolation.gif", save_all=True, append_images=pil[1:], duration=120, loop=0)
    _write_invocation(out, args, _checkpoint_config(args.checkpoint))
    print(f"wrote {args.steps} interpolation steps to {out}")


def cmd_style_mix(args):
    g = _generator(args)
    out = _out_dir(args.out)
    # Source A is latent 0 of the seed, the same latent `sample --seed` renders first.
    za = fixed_latents(args.seed, 1, g.config.latent_dim)
    zb = fixed_latents(args.seed_b if args.seed_b is not None else args.seed + 1, 1, g.config.latent_dim)
    with torch.no_grad():
        wa, wb = g.map_latent(za, args.psi), g.map_latent(zb, args.psi)
        a = g.synthesize(wa, noise="zero")
        b = g.synthesize(wb, noise="zero")
        m = g.style_mix(wa, wb, args.crossover, noise="zero")
    ims = [pair_image(x.bf[0], x.gfp[0]) for x in (a, b, m)]
    save_png(ims[0], out / "source_a.png")
    save_png(ims[1], out / "source_b.png")
    save_png(ims[2], out / "mix.png")
    save_png(stack_rows(ims), out / "grid.png")
    _write_invocation(out, args, _checkpoint_config(args.checkpoint))
    print(f"style mix at stage {args.crossover} written to {out}")


def _embedder(spec: str, resolution: int, timesteps: int, seed: int):
    if spec == "random":
        return RandomProjectionEmbedder(64, pool=min(16, resolution), timesteps=timesteps, seed=seed)
    if spec == "identity":
        return IdentityEmbedder((resolution, resolution))
    module, _, attr = spec.partition(":")
    if not attr:
        raise UsageError(f"embedder must be 'random', 'identity' or 'module:factory', got {spec!r}")
    return getattr(importlib.import_module(module), attr)()


def cmd_evaluate(args):
    g = _generator(args)
    cfg = _checkpoint_config(args.checkpoint)
    index = index_dataset(args.data, resolution=cfg.generator.resolution,
                          window_length=cfg.data.window_length, stride=cfg.data.stride)
    n = count_windows(index)
    if n < 2:
        raise UsageError("evaluation needs at least 2 dataset windows")
    n_fake = args.num_fake or n
    out = _out_dir(args.out)
    embedder = _embedder(args.embedder, cfg.generator.resolution, cfg.generator.timesteps, args.seed)
    classifier = RandomSoftmaxClassifier(seed=args.seed)
    bs = args.batch_size

    def real_stream():
        for i in range(0, n, bs):
            yield load_batch(index, range(i, min(n, i + bs)))

    def fake_stream():
        rng = torch.Generator().manual_seed(args.seed)
        done = 0
        while done < n_fake:
            k = min(bs, n_fake - done)
            with torch.no_grad():
                z = torch.randn(k, g.config.latent_dim, generator=rng)
                img = g.synthesize(g.map_latent(z), noise="fresh", generator=rng)
            yield img.bf.clamp(-1, 1), img.gfp.clamp(-1, 1)
            done += k

    report = evaluate_pairs(real_stream(), fake_stream(), embedder, classifier,
                            generator=torch.Generator().manual_seed(args.seed + 1))
    lines = [f"{k}={v:.6f}" for k, v in sorted(report.items())]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    text = [f"evaluation of {args.checkpoint}", f"real windows: {n}, generated sequences: {n_fake}",
            f"embedder: {args.embedder}", ""]
    text += [f"{k:<16} {v:12.4f}   (reference {REFERENCE_TARGETS[k]})" if k in REFERENCE_TARGETS else f"{k:<16} {v:12.4f}"
             for k, v in sorted(report.items())]
    text += ["", "reference values were obtained with pretrained Inception-V3 / I3D features and are",
             "not comparable with stand-in embedders."]
    (out / "report.txt").write_text("\n".join(text) + "\n")
    _write_invocation(out, args, cfg)
    print("\n".join(lines))


def cmd_inspect(args):
    try:
        index = index_dataset(args.data, resolution=args.resolution, window_length=args.window, stride=args.stride)
    except DatasetError as exc:
        print(f"sequences: ?\nwindows: ?\nerrors: {len(exc.errors)}")
        for e in exc.errors:
            print(f"error: {e}")
        return 1
    print(f"root: {args.data}")
    print(f"sequences: {len(index.records)}")
    print(f"frames: {sum(r.length for r in index.records)} per domain")
    print(f"windows: {count_windows(index)} (length {index.window_length}, stride {index.stride})")
    print("errors: 0")
    for r in index.records:
        print(f"sequence {r.sequence_id}: length {r.length}")
    return 0


def cmd_make_synthetic(args):
    write_synthetic_dataset(args.out, n_sequences=args.count, length=args.length, resolution=args.resolution, seed=args.seed)
    print(f"wrote {args.count} synthetic sequences to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multistylegan", description="Two-domain time-lapse sequence GAN toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=False)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--psi", type=float, default=1.0, help="truncation strength in (0, 1]")
        p.add_argument("--no-ema", action="store_true", help="use the online instead of the EMA generator")
        return p

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = with_checkpoint(sub.add_parser("sample", help="render sequence pairs"))
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_sample)

    p = with_checkpoint(sub.add_parser("interpolate", help="walk between two latents"))
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--gif", action="store_true")
    p.set_defaults(func=cmd_interpolate)

    p = with_checkpoint(sub.add_parser("style-mix", help="mix two latents at a stage"))
    p.add_argument("--crossover", type=int, required=True)
    p.add_argument("--seed-b", type=int)
    p.set_defaults(func=cmd_style_mix)

    p = with_checkpoint(sub.add_parser("evaluate", help="FID / FVD / IS against a dataset"))
    p.add_argument("--data", required=True)
    p.add_argument("--embedder", default="random", help="'random', 'identity' or 'module:factory'")
    p.add_argument("--num-fake", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-dataset", help="validate a dataset tree")
    p.add_argument("--data", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-synthetic", help="write a toy moving-disk dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  {p}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
