"""Command-line surface for data generation, training, sampling, evaluation
and the three experiment studies.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command is deterministic given its flags and seeds, and every
output directory contains a manifest sufficient to re-run the command.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fileio
from .data import (
    Corpus,
    DataError,
    FilterConfig,
    ImageConfig,
    enumerate_pairs,
    filter_pairs,
    generate_corpus,
)
from .diffusion import SamplerConfig, sample
from .encoders import EmbeddingTable, EncoderSpec, precompute_embeddings
from .experiments import (
    ExperimentError,
    build_id,
    encoder_from,
    eval_encoder_from,
    evaluate_checkpoint,
    exp_collapse,
    exp_conditioning,
    exp_guidance,
    load_config,
    write_manifest,
)
from .metrics import extract_features
from .model import BatchedContext, Denoiser, load_checkpoint
from .schedule import ScheduleConfig
from .tensor import NonFiniteError, Tensor
from .training import TrainingDivergedError

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this tool reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, fileio.FormatError, DataError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR
    except (NonFiniteError, TrainingDivergedError, ExperimentError) as e:
        print(f"error: {e}", file=sys.stderr)
        return NUMERICAL_ERROR
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


def build_parser():
    parser = _Parser(prog="varidiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic episodic image shard")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--members", type=int, default=4)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precompute", help="write an embedding file for a shard")
    p.add_argument("--shard", required=True)
    p.add_argument("--out", required=True)
    _encoder_flags(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("filter-pairs", help="similarity-filter episode pairs")
    p.add_argument("--shard", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--low", type=float, required=True)
    p.add_argument("--high", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="pair", choices=["pair", "reconstruction", "label-grouped"])
    p.set_defaults(func=cmd_filter_pairs)

    p = sub.add_parser("train", help="train a denoiser in one objective mode")
    p.add_argument("--mode", required=True, choices=["recon", "pair", "label-grouped"])
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate variations of one conditioning image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cond-image", required=True, help="SHARD.epis:INDEX or a .npy image")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--guidance", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=24)
    p.add_argument("--eta", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="sample with raw instead of EMA weights")
    p.add_argument("--out", required=True)
    _encoder_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-fewshot", help="few-shot FID / precision-recall protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--testset", required=True, help="EPIS shard of held-out images")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--guidance", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _encoder_flags(p)
    p.add_argument("--eval-encoder-seed", type=int, default=1234)
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("exp-collapse", help="reconstruction vs pair objective study")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_exp_collapse)

    p = sub.add_parser("exp-conditioning", help="film vs cross-attention study")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_exp_conditioning)

    p = sub.add_parser("exp-guidance", help="guidance sweep on a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--g-list", required=True, help="comma-separated guidance values")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_exp_guidance)
    return parser


def _encoder_flags(p):
    p.add_argument("--encoder-kind", default="frozen-random-vit")
    p.add_argument("--encoder-seed", type=int, default=7)
    p.add_argument("--encoder-dc", type=int, default=32)


def _encoder_from_flags(args, image_size):
    return EncoderSpec(
        kind=args.encoder_kind,
        seed=args.encoder_seed,
        patch_size=4,
        t_c=(image_size // 4) * (image_size // 4),
        d_c=args.encoder_dc,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    icfg = ImageConfig(height=args.size, width=args.size)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    count = generate_corpus(args.episodes, args.members, icfg, args.seed, args.out)
    print(
        f"wrote {args.out}: {count} images "
        f"({args.episodes} episodes x {args.members} members, {args.size}x{args.size})"
    )
    return 0


def cmd_precompute(args):
    spec = _encoder_from_flags(args, _shard_image_size(args.shard))
    count = precompute_embeddings(spec, args.shard, args.out)
    print(f"wrote {args.out}: {count} embedding records from {spec.source_id}")
    return 0


def _shard_image_size(path):
    images, _ = fileio.read_shard(path)
    return images.shape[1]


def cmd_filter_pairs(args):
    corpus = Corpus.load(args.shard)
    table = EmbeddingTable.from_file(args.embeddings)
    spec = EncoderSpec(kind="imported", path=args.embeddings)
    cfg = FilterConfig(low_threshold=args.low, high_threshold=args.high, encoder=spec)
    pairs = enumerate_pairs(corpus, args.mode)
    kept = filter_pairs(pairs, cfg, table)
    fileio.write_pairs(
        args.out,
        [(p.cond_image_id, p.target_image_id, p.similarity, p.episode_id) for p in kept],
    )
    total = len(pairs)
    rate = 100.0 * len(kept) / total if total else 100.0
    print(f"kept {len(kept)} of {total} pairs ({rate:.1f}% retention) -> {args.out}")
    return 0


def cmd_train(args):
    from .experiments import load_or_build_corpus, train_one

    config = load_config(args.config, args.set)
    mode = {"recon": "reconstruction", "pair": "pair", "label-grouped": "label-grouped"}[args.mode]
    write_manifest(args.out, f"train-{args.mode}", config, seed=config["train.seed"])
    corpus, shard_path = load_or_build_corpus(config, args.out)
    mcfg, result = train_one(config, mode, corpus, args.out)
    first = result.losses[0][1]
    last = result.losses[-1][1] if result.losses else first
    print(
        f"trained {args.mode} model: {len(result.losses)} steps, "
        f"loss {first:.4f} -> {last:.4f}, checkpoint {result.checkpoint_path}"
    )
    return 0


def _load_cond_image(spec):
    if ":" in spec and not spec.endswith(".npy"):
        path, _, idx = spec.rpartition(":")
        images, _ = fileio.read_shard(path)
        return images[int(idx)]
    return np.load(spec)


def cmd_sample(args):
    mcfg, params, ema = load_checkpoint(args.checkpoint)
    weights = params if args.raw or ema is None else {k: Tensor(v) for k, v in ema.items()}
    cond = _load_cond_image(args.cond_image)
    enc = _encoder_from_flags(args, mcfg.height)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(
        args.out,
        "sample",
        {
            "checkpoint": args.checkpoint,
            "cond_image": args.cond_image,
            "n": args.n,
            "guidance": args.guidance,
            "steps": args.steps,
            "eta": args.eta,
            "weights": "raw" if args.raw else "ema",
            "encoder": enc.source_id,
        },
        seed=args.seed,
    )
    from .experiments import checkpoint_sampler

    scfg = SamplerConfig(num_steps=args.steps, variance_interp=args.eta, guidance=args.guidance)
    sampler = checkpoint_sampler(mcfg, weights, enc, scfg)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x5A3F]))
    samples = sampler(cond, args.n, rng)
    np.save(os.path.join(args.out, "samples.npy"), samples)
    grid = np.concatenate([cond[None], samples], axis=0)  # conditioning first
    fileio.write_png_grid(os.path.join(args.out, "grid.png"), grid)
    print(f"wrote {args.n} samples to {args.out} (grid.png, samples.npy)")
    return 0


def cmd_eval_fewshot(args):
    mcfg, params, ema = load_checkpoint(args.checkpoint)
    weights = {k: Tensor(v) for k, v in (ema or {k: p.data for k, p in params.items()}).items()}
    images, _ = fileio.read_shard(args.testset)
    if args.N % args.K:
        raise ValueError(f"K={args.K} does not divide N={args.N}")
    config = load_config(
        None,
        [
            f"eval.n={args.N}",
            f"eval.k={args.K}",
            f"eval.seed={args.seed}",
            f"sample.guidance={args.guidance}",
            f"sample.steps={args.steps}",
            f"data.encoder_kind={args.encoder_kind}",
            f"data.encoder_seed={args.encoder_seed}",
            f"data.image_size={mcfg.height}",
            f"eval.encoder_seed={args.eval_encoder_seed}",
        ],
    )
    report = evaluate_checkpoint(config, mcfg, weights, images)
    out = report.text()
    print(out, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        manifest = write_manifest(
            args.out,
            "eval-fewshot",
            {k: config[k] for k in sorted(config)},
            inputs={"checkpoint": args.checkpoint, "testset": args.testset},
            seed=args.seed,
        )
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(f"manifest: {os.path.basename(manifest)}\n")
            f.write(out)
    return 0


def cmd_exp_collapse(args):
    config = load_config(args.config, args.set)
    exp_collapse(config, args.out)
    print(f"collapse study complete -> {args.out}/comparison.csv")
    return 0


def cmd_exp_conditioning(args):
    config = load_config(args.config, args.set)
    exp_conditioning(config, args.out)
    print(f"conditioning study complete -> {args.out}/comparison.csv")
    return 0


def cmd_exp_guidance(args):
    config = load_config(args.config, args.set)
    g_values = [float(v) for v in args.g_list.split(",") if v.strip() != ""]
    if not g_values:
        raise ValueError("empty --g-list")
    mcfg, params, ema = load_checkpoint(args.checkpoint)
    weights = {k: Tensor(v) for k, v in (ema or {k: p.data for k, p in params.items()}).items()}
    config = dict(config)
    config["data.image_size"] = mcfg.height
    test_images = _test_images_for_guidance(config)
    exp_guidance(config, mcfg, weights, test_images, g_values, args.out)
    print(f"guidance sweep complete -> {args.out}/sweep.csv")
    return 0


def _test_images_for_guidance(config):
    from .experiments import test_images_from

    return test_images_from(config)


if __name__ == "__main__":
    sys.exit(main())
