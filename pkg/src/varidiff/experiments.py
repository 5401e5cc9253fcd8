"""Experiment drivers: resolved configs, manifests, and the three studies.

Each experiment writes its manifest before any other output, then runs
training/evaluation with per-purpose seeded streams so that ablation
arms differ only in the intended dimension. Outputs are deterministic
given the manifest: re-running a command with identical flags and seeds
reproduces every file byte for byte.
"""

from __future__ import annotations

import os
import subprocess
from dataclasses import dataclass

import numpy as np

from . import __version__, fileio
from .data import (
    Corpus,
    FilterConfig,
    ImageConfig,
    batch_iterator,
    build_corpus,
    embedding_table_for,
)
from .diffusion import SamplerConfig, sample
from .encoders import EncoderSpec, encode
from .metrics import FewShotConfig, MetricReport, fewshot_evaluate, guidance_sweep, sweep_csv_rows
from .model import BatchedContext, Denoiser, DenoiserConfig
from .schedule import ScheduleConfig
from .tensor import Tensor
from .training import TrainConfig, train

# every tunable an experiment reads, with its parsing type
CONFIG_DEFAULTS = {
    "data.shard": ("", str),
    "data.episodes": (300, int),
    "data.members": (4, int),
    "data.image_size": (16, int),
    "data.seed": (10, int),
    "data.test_episodes": (16, int),
    "data.test_seed": (9090, int),
    "data.encoder_kind": ("frozen-random-vit", str),
    "data.encoder_seed": (7, int),
    "data.filter": (0, int),
    "data.filter_low": (0.5, float),
    "data.filter_high": (0.999, float),
    "model.patch_size": (2, int),
    "model.d_model": (64, int),
    "model.num_blocks": (4, int),
    "model.num_heads": (4, int),
    "model.conditioning_mode": ("cross-attention", str),
    "model.t_c": (16, int),
    "model.d_c": (32, int),
    "model.time_embed_dim": (64, int),
    "model.context_dropout_prob": (0.1, float),
    "model.mlp_ratio": (2, int),
    "train.steps": (1200, int),
    "train.batch": (32, int),
    "train.lr": (2e-4, float),
    "train.beta1": (0.9, float),
    "train.beta2": (0.99, float),
    "train.adam_eps": (1e-12, float),
    "train.ema_decay": (0.995, float),
    "train.seed": (0, int),
    "train.data_seed": (3, int),
    "train.checkpoint_every": (500, int),
    "sample.steps": (24, int),
    "sample.eta": (0.2, float),
    "sample.guidance": (0.5, float),
    "eval.n": (64, int),
    "eval.k": (8, int),
    "eval.k_nn": (3, int),
    "eval.seed": (5, int),
    "eval.encoder_seed": (1234, int),
}


class ExperimentError(RuntimeError):
    """An experiment's asserted outcome did not hold."""


def load_config(path=None, overrides=()):
    """Resolve defaults <- config file <- key=value overrides."""
    resolved = {k: v for k, (v, _) in CONFIG_DEFAULTS.items()}
    raw = dict(fileio.read_kv(path)) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for k, v in raw.items():
        if k not in CONFIG_DEFAULTS:
            raise ValueError(f"unknown config key {k!r}")
        resolved[k] = CONFIG_DEFAULTS[k][1](v)
    return resolved


def build_id():
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            cwd=os.path.dirname(__file__),
            timeout=5,
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"varidiff-{__version__}" + (f"+{rev}" if rev else "")


def write_manifest(out_dir, experiment, config, inputs=None, seed=None):
    """Manifest first: enough to re-run the command that made this directory."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.txt")
    kv = {"experiment": experiment, "build": build_id()}
    if seed is not None:
        kv["seed"] = seed
    for k, v in (inputs or {}).items():
        kv[f"input.{k}"] = v
    for k in sorted(config):
        kv[f"config.{k}"] = config[k]
    fileio.write_kv(path, kv)
    return path


# ---------------------------------------------------------------------------
# pieces shared by the commands


def model_config_from(config, image_cfg: ImageConfig) -> DenoiserConfig:
    return DenoiserConfig(
        height=image_cfg.height,
        width=image_cfg.width,
        channels=image_cfg.channels,
        patch_size=config["model.patch_size"],
        d_model=config["model.d_model"],
        num_blocks=config["model.num_blocks"],
        num_heads=config["model.num_heads"],
        conditioning_mode=config["model.conditioning_mode"],
        t_c=config["model.t_c"],
        d_c=config["model.d_c"],
        time_embed_dim=config["model.time_embed_dim"],
        context_dropout_prob=config["model.context_dropout_prob"],
        mlp_ratio=config["model.mlp_ratio"],
    )


def train_config_from(config, mode, seed=None) -> TrainConfig:
    return TrainConfig(
        num_steps=config["train.steps"],
        learning_rate=config["train.lr"],
        betas=(config["train.beta1"], config["train.beta2"]),
        adam_eps=config["train.adam_eps"],
        ema_decay=config["train.ema_decay"],
        batch_size=config["train.batch"],
        context_dropout_prob=config["model.context_dropout_prob"],
        seed=config["train.seed"] if seed is None else seed,
        objective_mode=mode,
        checkpoint_every=config["train.checkpoint_every"],
    )


def encoder_from(config) -> EncoderSpec:
    size = config["data.image_size"]
    return EncoderSpec(
        kind=config["data.encoder_kind"],
        seed=config["data.encoder_seed"],
        patch_size=4,
        t_c=(size // 4) * (size // 4),
        d_c=config["model.d_c"],
    )


def eval_encoder_from(config) -> EncoderSpec:
    size = config["data.image_size"]
    return EncoderSpec(
        kind="frozen-random-vit",
        seed=config["eval.encoder_seed"],
        patch_size=4,
        t_c=(size // 4) * (size // 4),
        d_c=config["model.d_c"],
    )


def load_or_build_corpus(config, out_dir=None):
    """Use data.shard when set; otherwise render a corpus (and record it)."""
    if config["data.shard"]:
        return Corpus.load(config["data.shard"]), config["data.shard"]
    icfg = ImageConfig(height=config["data.image_size"], width=config["data.image_size"])
    images, episodes = build_corpus(
        config["data.episodes"], config["data.members"], icfg, config["data.seed"]
    )
    path = ""
    if out_dir is not None:
        path = os.path.join(out_dir, "train_data.epis")
        fileio.write_shard(
            path,
            images,
            [
                {
                    "episode_id": ep.episode_id,
                    "class_id": ep.class_id,
                    "hue": ep.hue,
                    "member_ids": ep.member_ids,
                    "nuisances": ep.nuisances,
                }
                for ep in episodes
            ],
        )
    return Corpus(images, episodes), path


def test_images_from(config):
    icfg = ImageConfig(height=config["data.image_size"], width=config["data.image_size"])
    members = max(config["data.members"], 2)
    images, _ = build_corpus(config["data.test_episodes"], members, icfg, config["data.test_seed"])
    return images


def train_one(config, mode, corpus, checkpoint_dir, seed=None):
    """Train one model on the corpus under the given objective mode."""
    icfg = ImageConfig(
        height=corpus.images.shape[1],
        width=corpus.images.shape[2],
        channels=corpus.images.shape[3],
    )
    mcfg = model_config_from(config, icfg)
    tcfg = train_config_from(config, mode, seed)
    enc = encoder_from(config)
    filter_cfg = None
    if config["data.filter"]:
        filter_cfg = FilterConfig(
            low_threshold=config["data.filter_low"],
            high_threshold=config["data.filter_high"],
            encoder=enc,
        )
    data_mode = {"reconstruction": "reconstruction", "pair": "pair", "label-grouped": "label-grouped"}[mode]
    iterator = batch_iterator(
        corpus,
        data_mode,
        filter_cfg,
        tcfg.batch_size,
        config["train.data_seed"],
        encoder=enc,
    )
    schedule_cfg = ScheduleConfig(image_resolution=mcfg.height)
    result = train(mcfg, tcfg, iterator, checkpoint_dir, schedule_cfg)
    return mcfg, result


def checkpoint_sampler(mcfg: DenoiserConfig, params, encoder: EncoderSpec, sampler_cfg: SamplerConfig):
    """Wrap a parameter set as the sampler_fn the few-shot protocol expects."""
    den = Denoiser(mcfg)
    tensors = {
        k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=False)
        for k, v in params.items()
    }
    model = den.bind(tensors)
    schedule_cfg = ScheduleConfig(image_resolution=mcfg.height)
    shape_tail = (mcfg.height, mcfg.width, mcfg.channels)

    def sampler(cond_image, n, rng):
        ct = encode(encoder, cond_image)
        ctx = BatchedContext(
            tokens=np.tile(ct.tokens[None], (n, 1, 1)), cls=np.tile(ct.cls[None], (n, 1))
        )
        return sample(model, ctx, sampler_cfg, schedule_cfg, (n,) + shape_tail, rng)

    return sampler


def fewshot_config_from(config, guidance=None) -> FewShotConfig:
    return FewShotConfig(
        n=config["eval.n"],
        k_conditions=config["eval.k"],
        guidance=config["sample.guidance"] if guidance is None else guidance,
        seed=config["eval.seed"],
        k_nn=config["eval.k_nn"],
    )


def evaluate_checkpoint(config, mcfg, params, test_images, guidance=None) -> MetricReport:
    g = config["sample.guidance"] if guidance is None else guidance
    scfg = SamplerConfig(
        num_steps=config["sample.steps"], variance_interp=config["sample.eta"], guidance=g
    )
    sampler = checkpoint_sampler(mcfg, params, encoder_from(config), scfg)
    return fewshot_evaluate(fewshot_config_from(config, g), test_images, sampler, eval_encoder_from(config))


# ---------------------------------------------------------------------------
# the three studies


@dataclass
class ComparisonRow:
    label: str
    report: MetricReport


def comparison_csv(path, rows, label_name="model"):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([label_name, "fid", "precision", "recall", "diversity", "proxy_distance"])
        for row in rows:
            r = row.report
            w.writerow(
                [
                    row.label,
                    f"{r.fid:.6f}",
                    f"{r.precision:.6f}",
                    f"{r.recall:.6f}",
                    f"{r.diversity:.6f}",
                    f"{r.proxy_distance:.6f}",
                ]
            )


def exp_collapse(config, out_dir, log=print):
    """Reconstruction objective vs episode-pair objective, matched budgets.

    Trains one model per objective on identical data order, evaluates
    both with the few-shot protocol, and asserts the headline contrast:
    the pair model must beat the reconstruction model on intra-condition
    diversity and on recall at matched-or-higher precision.
    """
    write_manifest(out_dir, "exp-collapse", config, seed=config["train.seed"])
    corpus, _ = load_or_build_corpus(config, out_dir)
    test_images = test_images_from(config)
    rows = []
    reports = {}
    for mode, label in (("reconstruction", "recon"), ("pair", "pair")):
        ckpt_dir = os.path.join(out_dir, label)
        log(f"[exp-collapse] training {label} model ({config['train.steps']} steps)")
        mcfg, result = train_one(config, mode, corpus, ckpt_dir)
        log(f"[exp-collapse] evaluating {label} model")
        report = evaluate_checkpoint(config, mcfg, result.state.ema, test_images)
        reports[label] = report
        rows.append(ComparisonRow(label, report))
        with open(os.path.join(ckpt_dir, "report.txt"), "w") as f:
            f.write(report.text())
    comparison_csv(os.path.join(out_dir, "comparison.csv"), rows)
    d_recon, d_pair = reports["recon"].diversity, reports["pair"].diversity
    r_recon, r_pair = reports["recon"].recall, reports["pair"].recall
    log(f"[exp-collapse] diversity recon={d_recon:.4f} pair={d_pair:.4f}")
    log(f"[exp-collapse] recall    recon={r_recon:.4f} pair={r_pair:.4f}")
    if not (d_pair > d_recon and r_pair > r_recon):
        raise ExperimentError(
            "collapse contrast did not hold: "
            f"diversity {d_recon:.4f} vs {d_pair:.4f}, recall {r_recon:.4f} vs {r_pair:.4f}"
        )
    return reports


def exp_conditioning(config, out_dir, log=print):
    """FiLM vs cross-attention conditioning at matched budgets.

    Both arms share the data order and training seed; the few-shot FID
    of each arm is reported, not asserted (the ordering is an empirical
    question at this scale).
    """
    write_manifest(out_dir, "exp-conditioning", config, seed=config["train.seed"])
    corpus, _ = load_or_build_corpus(config, out_dir)
    test_images = test_images_from(config)
    rows = []
    reports = {}
    for cond_mode in ("film", "cross-attention"):
        arm_cfg = dict(config)
        arm_cfg["model.conditioning_mode"] = cond_mode
        ckpt_dir = os.path.join(out_dir, cond_mode)
        log(f"[exp-conditioning] training {cond_mode} model")
        mcfg, result = train_one(arm_cfg, "pair", corpus, ckpt_dir)
        report = evaluate_checkpoint(arm_cfg, mcfg, result.state.ema, test_images)
        reports[cond_mode] = report
        rows.append(ComparisonRow(cond_mode, report))
        with open(os.path.join(ckpt_dir, "report.txt"), "w") as f:
            f.write(report.text())
    comparison_csv(os.path.join(out_dir, "comparison.csv"), rows, label_name="conditioning_mode")
    for cond_mode, rep in reports.items():
        log(f"[exp-conditioning] {cond_mode}: fid={rep.fid:.4f}")
    return reports


def exp_guidance(config, mcfg, params, test_images, g_values, out_dir, log=print):
    """Few-shot metrics across a guidance sweep, plus a PR scatter image."""
    write_manifest(
        out_dir,
        "exp-guidance",
        config,
        inputs={"g_values": ",".join(f"{g:g}" for g in g_values)},
        seed=config["eval.seed"],
    )
    enc = encoder_from(config)

    def make_sampler(g):
        scfg = SamplerConfig(
            num_steps=config["sample.steps"], variance_interp=config["sample.eta"], guidance=g
        )
        return checkpoint_sampler(mcfg, params, enc, scfg)

    fcfg = fewshot_config_from(config)
    reports = guidance_sweep(make_sampler, test_images, g_values, fcfg, eval_encoder_from(config))
    rows = sweep_csv_rows(g_values, reports)
    import csv

    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    scatter_path = os.path.join(out_dir, "precision_recall.png")
    render_pr_scatter(scatter_path, g_values, reports)
    for g, rep in zip(g_values, reports):
        log(
            f"[exp-guidance] g={g:g}: fid={rep.fid:.4f} precision={rep.precision:.4f} "
            f"recall={rep.recall:.4f} diversity={rep.diversity:.4f}"
        )
    return reports


def render_pr_scatter(path, g_values, reports, size=480, margin=50):
    """Recall on x, precision on y, one labeled point per guidance value."""
    from PIL import Image, ImageDraw

    img = Image.new("RGB", (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    lo, hi = margin, size - margin
    draw.rectangle([lo, lo, hi, hi], outline=(0, 0, 0))
    for frac in (0.25, 0.5, 0.75):
        y = lo + frac * (hi - lo)
        draw.line([(lo, y), (hi, y)], fill=(220, 220, 220))
        draw.line([(lo + frac * (hi - lo), lo), (lo + frac * (hi - lo), hi)], fill=(220, 220, 220))
    draw.text((size // 2 - 20, hi + 18), "recall", fill=(0, 0, 0))
    draw.text((4, size // 2 - 30), "precision", fill=(0, 0, 0))
    for k, (g, rep) in enumerate(zip(g_values, reports)):
        x = lo + rep.recall * (hi - lo)
        y = hi - rep.precision * (hi - lo)
        shade = int(200 * k / max(len(reports) - 1, 1))
        draw.ellipse([x - 5, y - 5, x + 5, y + 5], fill=(shade, 60, 200 - shade))
        draw.text((x + 7, y - 6), f"g={g:g}", fill=(0, 0, 0))
    img.save(path, format="PNG")
