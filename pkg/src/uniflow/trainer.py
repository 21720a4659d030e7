"""Joint training of encoder and flow decoder on ``lambda_d * L_dist + lambda_f * L_flow``."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, require, save_checkpoint
from .config import RunConfig
from .data import ImageBatch, ImageDataset, load_split
from .distill import distillation_loss
from .flowdec import flow_loss, lift_and_globalize
from .model import UniFlow, build_model

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 3
TEACHER_PRETRAIN_IMAGES = 2048


class TrainingAborted(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_dist: float
    loss_flow: float
    alphas: list[float]
    weights: list[float]
    lr: float
    wall_ms: float = 0.0
    clipped: bool = False

    def row(self) -> list:
        return [self.step, self.loss_total, self.loss_dist, self.loss_flow,
                *self.alphas, *self.weights, self.lr, round(self.wall_ms, 3)]

    def key(self) -> tuple:
        """Everything except wall-clock time, for determinism comparisons."""
        return (self.step, self.loss_total, self.loss_dist, self.loss_flow,
                tuple(self.alphas), tuple(self.weights), self.lr)


def csv_header(num_layers: int) -> list[str]:
    return (["step", "loss_total", "loss_dist", "loss_flow"]
            + [f"alpha_{l}" for l in range(1, num_layers + 1)]
            + [f"w_{l}" for l in range(1, num_layers + 1)] + ["lr", "wall_ms"])


@dataclass
class TrainState:
    model: UniFlow
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    records: list[StepRecord] = field(default_factory=list)
    skipped: int = 0
    consecutive_skips: int = 0
    clip_events: int = 0
    last_checkpoint: Path | None = None


def make_optimizer(model: UniFlow, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.trainable().values()), lr=cfg.learning_rate,
                             betas=cfg.optimizer_momenta, weight_decay=cfg.weight_decay)


def init_state(cfg: RunConfig, model: UniFlow | None = None, train: ImageDataset | None = None) -> TrainState:
    if model is None:
        images = labels = None
        if cfg.teacher_source == "pretrained_probe_teacher":
            train = train if train is not None else load_split(cfg, "train")
            if train.labels is None:
                raise ValueError("pretrained_probe_teacher needs a labeled training split")
            idx = np.arange(min(len(train), TEACHER_PRETRAIN_IMAGES))
            batch = train.batch(idx)
            images, labels = batch.data, batch.labels
        model = build_model(cfg, images, labels)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model, make_optimizer(model, cfg), gen)


def total_loss(images: torch.Tensor, state: TrainState, cfg: RunConfig) -> tuple[torch.Tensor, StepRecord]:
    model = state.model
    student, teacher = model.features(images)
    l_dist, w = distillation_loss(student, teacher, cfg.beta, cfg.distill_strategy)
    cond = lift_and_globalize(model.latent(student), model.decoder)
    l_flow = flow_loss(images, cond, model.decoder, state.generator)
    total = cfg.lambda_d * l_dist + cfg.lambda_f * l_flow
    record = StepRecord(
        step=state.step + 1,
        loss_total=total.item(),
        loss_dist=float(l_dist.item()) if torch.is_tensor(l_dist) else float(l_dist),
        loss_flow=l_flow.item(),
        alphas=w.penalties.tolist(),
        weights=w.weights.tolist(),
        lr=cfg.learning_rate,
    )
    if not math.isfinite(record.loss_total):
        where = state.last_checkpoint or "none written yet"
        raise TrainingAborted(f"non-finite loss at step {record.step}; last good checkpoint: {where}")
    expected = cfg.lambda_d * record.loss_dist + cfg.lambda_f * record.loss_flow
    assert math.isclose(record.loss_total, expected, rel_tol=1e-5, abs_tol=1e-6), "loss decomposition broken"
    return total, record


def train_step(batch: ImageBatch | torch.Tensor, state: TrainState, cfg: RunConfig) -> TrainState:
    images = batch.data if isinstance(batch, ImageBatch) else batch
    images = images.to(next(state.model.decoder.parameters()).dtype)
    t0 = time.perf_counter()
    state.model.train()
    loss, record = total_loss(images, state, cfg)
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    params = list(state.model.trainable().values())
    norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip if cfg.grad_clip > 0 else math.inf)
    if not torch.isfinite(norm):
        state.skipped += 1
        state.consecutive_skips += 1
        log.warning("non-finite gradient at step %d; update skipped", record.step)
        if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
            raise TrainingAborted(f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite gradients "
                                  f"(step {record.step}); last good checkpoint: {state.last_checkpoint}")
    else:
        state.consecutive_skips = 0
        if 0 < cfg.grad_clip < norm:
            record.clipped = True
            state.clip_events += 1
            log.debug("step %d: gradient norm %.3g clipped to %.3g", record.step, norm, cfg.grad_clip)
        state.optimizer.step()
    state.step += 1
    record.wall_ms = 1000.0 * (time.perf_counter() - t0)
    state.records.append(record)
    return state


# ---------------------------------------------------------------- persistence

def state_to_checkpoint(state: TrainState, cfg: RunConfig) -> Checkpoint:
    arrays = {n: t.detach().cpu().numpy().copy() for n, t in state.model.state_dict().items()}
    names = {p: n for n, p in state.model.trainable().items()}
    for p, slot in state.optimizer.state.items():
        for key, value in slot.items():
            arrays[f"optimizer.{names[p]}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    rng = state.generator.get_state().numpy().tobytes()
    return Checkpoint(cfg, arrays, state.step, rng)


def state_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> TrainState:
    cfg = cfg or ckpt.config
    model = build_model(cfg.replace(teacher_source="copy_of_student_init"))
    expected = model.state_dict()
    require(ckpt.named_arrays, expected.keys())
    model.load_state_dict({n: torch.from_numpy(ckpt.named_arrays[n]) for n in expected})
    state = TrainState(model, make_optimizer(model, cfg), torch.Generator())
    for name, p in model.trainable().items():
        prefix = f"optimizer.{name}."
        slot = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in ckpt.named_arrays.items()
                if k.startswith(prefix)}
        if slot:
            state.optimizer.state[p] = slot
    if ckpt.rng_state:
        state.generator.set_state(torch.from_numpy(np.frombuffer(ckpt.rng_state, dtype=np.uint8).copy()))
    else:
        state.generator.manual_seed(cfg.seed)
    model.cfg = cfg
    state.step = ckpt.step
    state.last_checkpoint = ckpt.path
    return state


def model_from_checkpoint(path_or_ckpt) -> UniFlow:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    model = state_from_checkpoint(ckpt).model
    model.eval()
    return model


def _prune(out_dir: Path, keep: int) -> None:
    ckpts = sorted(out_dir.glob("ckpt_step*.uflw"))
    for old in ckpts[:-keep]:
        old.unlink()


# ---------------------------------------------------------------- loop

def total_steps(cfg: RunConfig, data: ImageDataset) -> int:
    steps = cfg.epochs * data.steps_per_epoch(cfg.batch_size)
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


def iterate_from(data: ImageDataset, cfg: RunConfig, step: int) -> Iterable[ImageBatch]:
    """Batches of the training stream starting after ``step`` completed steps."""
    spe = data.steps_per_epoch(cfg.batch_size)
    epoch, offset = divmod(step, spe)
    while True:
        yield from data.iter_batches(cfg.batch_size, cfg.seed, epoch, shuffle=True,
                                     augment=cfg.augment, start=offset)
        epoch, offset = epoch + 1, 0


def fit(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | Checkpoint | None = None,
        data: ImageDataset | None = None, state: TrainState | None = None,
        stop_at: int | None = None, callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train for ``epochs`` (capped by ``max_steps``) and return the final state.

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints every
    ``checkpoint_every`` steps plus one at the end, keeping the newest
    ``keep_checkpoints``. ``stop_at`` halts early at that global step
    (used to simulate interruption).
    """
    data = data if data is not None else load_split(cfg, "train")
    if state is None:
        if resume is not None:
            ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
            state = state_from_checkpoint(ckpt, cfg)
        else:
            state = init_state(cfg, train=data)
    end = total_steps(cfg, data)
    if stop_at is not None:
        end = min(end, stop_at)

    out = Path(out_dir) if out_dir is not None else None
    writer = csv_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = state.step == 0 or not metrics_path.exists()
        if not fresh:
            _truncate_metrics(metrics_path, state.step)
        csv_file = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(csv_header(cfg.encoder_layers))

    def checkpoint() -> None:
        ckpt_path = out / f"ckpt_step{state.step:07d}.uflw"
        save_checkpoint(state_to_checkpoint(state, cfg), ckpt_path)
        state.last_checkpoint = ckpt_path
        _prune(out, cfg.keep_checkpoints)

    try:
        batches = iter(iterate_from(data, cfg, state.step))
        while state.step < end:
            train_step(next(batches), state, cfg)
            rec = state.records[-1]
            if writer is not None:
                writer.writerow(rec.row())
                if state.step % cfg.log_flush_every == 0:
                    csv_file.flush()
                if state.step % cfg.checkpoint_every == 0:
                    checkpoint()
            if state.step % 100 == 0:
                log.info("step %d  total %.4f  dist %.4f  flow %.4f", state.step,
                         rec.loss_total, rec.loss_dist, rec.loss_flow)
            if callback is not None:
                callback(state)
        if out is not None and (state.last_checkpoint is None or state.last_checkpoint.name
                                != f"ckpt_step{state.step:07d}.uflw"):
            checkpoint()
    finally:
        if csv_file is not None:
            csv_file.close()
    if state.clip_events:
        log.info("gradient clipping was active on %d step(s)", state.clip_events)
    return state


def train_loop(cfg: RunConfig, out_dir: str | Path | None = None, **kwargs) -> Checkpoint:
    state = fit(cfg, out_dir, **kwargs)
    final = state_to_checkpoint(state, cfg)
    final.path = state.last_checkpoint
    return final


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run appends a seamless stream."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(kept)
