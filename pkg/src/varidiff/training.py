"""Training loop: Adam, Polyak-averaged weights, context dropout, checkpoints.

Per step: pull a batch, drop each item's context with the configured
probability (the learned null context is substituted inside the model),
compute the denoising loss, backprop, Adam-update, refresh the EMA
copy. A non-finite loss or gradient aborts immediately; the last
written checkpoint stays on disk.

Random streams are split per purpose (timestep draw, noise draw,
context dropout) so that ablations sharing a seed differ only in the
intended dimension. The loss log is a deterministic CSV of
(step, loss); wall-clock timing goes to the progress callback only so
that re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .diffusion import diffusion_loss
from .model import BatchedContext, Denoiser, DenoiserConfig, drop_context, save_checkpoint
from .schedule import ScheduleConfig
from .tensor import NonFiniteError, Tensor, validate_finite

OBJECTIVE_MODES = ("reconstruction", "pair", "label-grouped")


class TrainingDivergedError(RuntimeError):
    """Loss or gradients went non-finite; last good checkpoint preserved."""


@dataclass(frozen=True)
class TrainConfig:
    num_steps: int
    learning_rate: float = 2e-4
    betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-12
    ema_decay: float = 0.9999
    batch_size: int = 64
    context_dropout_prob: float = 0.1
    seed: int = 0
    objective_mode: str = "pair"
    checkpoint_every: int = 500

    def __post_init__(self):
        if not (0.0 < self.ema_decay <= 1.0):
            raise ValueError("ema_decay must lie in (0, 1]")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ValueError(f"unknown objective mode {self.objective_mode!r}")


@dataclass
class OptimizerState:
    m: dict  # first-moment accumulators, keyed like the params
    v: dict  # second-moment accumulators
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            step=0,
        )


def adam_step(params, state: OptimizerState, cfg: TrainConfig):
    """Bias-corrected Adam with eps inside the denominator."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / (1.0 - b1**t)
        v_hat = state.v[k] / (1.0 - b2**t)
        p.data -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(
            p.data.dtype
        )


def ema_update(ema_params, params, decay):
    """ema <- decay * ema + (1 - decay) * params."""
    for k, p in params.items():
        ema_params[k] = decay * ema_params[k] + (1.0 - decay) * p.data


@dataclass
class TrainState:
    """Everything needed to continue training deterministically."""

    params: dict
    ema: dict
    opt: OptimizerState
    rng_t: np.random.Generator
    rng_eps: np.random.Generator
    rng_drop: np.random.Generator
    step: int = 0


@dataclass
class TrainResult:
    state: TrainState
    losses: list
    checkpoint_path: str | None
    loss_csv_path: str | None
    seconds: float = 0.0


def init_train_state(model_cfg: DenoiserConfig, train_cfg: TrainConfig) -> TrainState:
    den = Denoiser(model_cfg)
    params = den.init_params(train_cfg.seed)
    ema = {k: p.data.copy() for k, p in params.items()}
    root = np.random.SeedSequence([train_cfg.seed, 0x7EA1])
    s_t, s_eps, s_drop = root.spawn(3)
    return TrainState(
        params=params,
        ema=ema,
        opt=OptimizerState.init(params),
        rng_t=np.random.default_rng(s_t),
        rng_eps=np.random.default_rng(s_eps),
        rng_drop=np.random.default_rng(s_drop),
    )


def train(
    model_cfg: DenoiserConfig,
    train_cfg: TrainConfig,
    data_iterator,
    checkpoint_dir=None,
    schedule_cfg: ScheduleConfig | None = None,
    state: TrainState | None = None,
    progress=None,
) -> TrainResult:
    """Run the optimization loop; returns the final state and loss log.

    Pass a previously returned TrainState to continue a run: with the
    same iterator position and rng states the continued trajectory is
    identical to an uninterrupted one.
    """
    den = Denoiser(model_cfg)
    if schedule_cfg is None:
        schedule_cfg = ScheduleConfig(image_resolution=model_cfg.height)
    if state is None:
        state = init_train_state(model_cfg, train_cfg)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    model = den.bind(state.params)
    losses = []
    start = time.monotonic()
    last_ckpt = _ckpt_path(checkpoint_dir, "final") if checkpoint_dir else None

    for _ in range(train_cfg.num_steps):
        batch = next(data_iterator)
        keep = np.empty(len(batch.x), dtype=bool)
        for i in range(len(batch.x)):
            item = (batch.tokens[i], batch.cls[i])
            keep[i] = (
                drop_context(item, train_cfg.context_dropout_prob, state.rng_drop) is not None
            )
        context = BatchedContext(tokens=batch.tokens, cls=batch.cls, keep=keep)
        try:
            loss = diffusion_loss(
                batch.x, context, model, schedule_cfg, state.rng_t, state.rng_eps
            )
            validate_finite(loss, what="training loss")
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"aborted at step {state.step}: {e}; last checkpoint kept"
            ) from e
        for p in state.params.values():
            p.zero_grad()
        loss.backward()
        try:
            adam_step(state.params, state.opt, train_cfg)
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"aborted at step {state.step}: {e}; last checkpoint kept"
            ) from e
        ema_update(state.ema, state.params, train_cfg.ema_decay)
        state.step += 1
        losses.append((state.step, loss.item()))
        if progress is not None:
            progress(state.step, loss.item(), time.monotonic() - start)
        if (
            checkpoint_dir is not None
            and train_cfg.checkpoint_every > 0
            and state.step % train_cfg.checkpoint_every == 0
        ):
            _write_ckpt(_ckpt_path(checkpoint_dir, f"{state.step:06d}"), model_cfg, state)

    csv_path = None
    if checkpoint_dir is not None:
        _write_ckpt(last_ckpt, model_cfg, state)
        csv_path = os.path.join(checkpoint_dir, "loss.csv")
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for step, value in losses:
                w.writerow([step, f"{value:.8f}"])
    return TrainResult(
        state=state,
        losses=losses,
        checkpoint_path=last_ckpt,
        loss_csv_path=csv_path,
        seconds=time.monotonic() - start,
    )


def ema_tensors(state: TrainState):
    return {k: Tensor(v.copy(), requires_grad=False) for k, v in state.ema.items()}


def _ckpt_path(checkpoint_dir, tag):
    return os.path.join(checkpoint_dir, f"ckpt_{tag}.semc")


def _write_ckpt(path, model_cfg, state: TrainState):
    save_checkpoint(path, model_cfg, state.params, state.ema)
