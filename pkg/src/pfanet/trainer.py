"""Training loop, checkpoints and evaluation.

Randomness during training is counter-based: the batch order of an epoch is
drawn from ``(seed, epoch)`` and each sample's augmentation from
``(seed, epoch, sample index)``. A checkpoint therefore only needs the step
counter and the seed to resume bit-for-bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as config_mod
from . import serialize
from . import tensor as T
from .config import TrainConfig
from .data import (DepthSample, augment, batch_iter, collate, load_dataset, save_depth_png,
                   synth_dataset)
from .model import ModelConfig, PFANet
from .objectives import (MetricReport, aggregate_metrics, compute_metrics, format_table,
                         metrics_csv, total_loss)
from .optim import Adam, LrSchedule, NumericError
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = "step,lr,L_d,L_g,total"
CHECKPOINT = "checkpoint.pfat"
EMERGENCY = "emergency.pfat"


# -- checkpoints ------------------------------------------------------------


def _model_meta(cfg: ModelConfig) -> dict[str, np.ndarray]:
    out = {}
    for f in fields(ModelConfig):
        out[f"meta.model.{f.name}"] = np.atleast_1d(np.asarray(getattr(cfg, f.name),
                                                               dtype=np.float64))
    return out


def _model_from_meta(state: dict[str, np.ndarray]) -> ModelConfig:
    vals = {}
    for f in fields(ModelConfig):
        arr = state[f"meta.model.{f.name}"]
        if f.name == "block_channels":
            vals[f.name] = tuple(int(v) for v in arr)
        elif f.name == "max_depth":
            vals[f.name] = float(arr[0])
        else:
            vals[f.name] = int(arr[0])
    return ModelConfig(**vals)


def save_checkpoint(path, model: PFANet, optimizer: Adam | None, step: int, seed: int) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    tensors["meta.step"] = np.array(float(step))
    tensors["meta.seed"] = np.array(float(seed))
    tensors.update(_model_meta(model.config))
    serialize.save_file(path, tensors)


def load_checkpoint(path) -> tuple[PFANet, dict[str, np.ndarray]]:
    state = serialize.load_file(path)
    cfg = _model_from_meta(state)
    dtype = state["encoder.b1.c1.weight"].dtype
    model = PFANet(cfg, dtype=dtype)
    model.load_state_dict(state)
    return model, state


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int
    losses: list


def build_dataset(cfg: TrainConfig) -> list[DepthSample]:
    if cfg.data_dir:
        return load_dataset(cfg.data_dir, cfg.split or None)
    return synth_dataset(cfg.synth_spec(), cfg.synth_count)


def _format_row(step: int, lr: float, l_d: float, l_g: float, total: float) -> str:
    return f"{step},{lr!r},{l_d!r},{l_g!r},{total!r}"


def train(cfg: TrainConfig, resume: str | Path | None = None,
          dataset: Sequence[DepthSample] | None = None) -> TrainResult:
    """Optimise a fresh (or resumed) model on ``cfg``'s dataset.

    Writes ``train_log.csv`` and ``checkpoint.pfat`` into ``cfg.out_dir``.
    Raises :class:`NumericError` after saving ``emergency.pfat`` when a loss
    or gradient goes non-finite.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_mod.to_text(cfg), encoding="utf-8")
    dtype = np.dtype(cfg.precision)
    data = list(dataset) if dataset is not None else build_dataset(cfg)
    if not data:
        raise ValueError("training dataset is empty")
    aug_cfg = cfg.augment_config()
    n_batches = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    if cfg.lr_step == "iteration":
        schedule = LrSchedule(cfg.lr, cfg.lr_power, max(total_steps, 1))
    else:
        schedule = LrSchedule(cfg.lr, cfg.lr_power, max(cfg.epochs, 1))

    with T.precision(dtype):
        model = PFANet(cfg.model_config(), dtype=dtype)
    opt = Adam(model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    step = 0
    log_path = out_dir / "train_log.csv"
    if resume is not None:
        state = serialize.load_file(resume)
        model.load_state_dict(state)
        opt.load_state_dict(state)
        step = int(state["meta.step"])
        kept = log_path.read_text().splitlines()[:step + 1] if log_path.exists() else [LOG_HEADER]
        log_path.write_text("\n".join(kept) + "\n")
    else:
        log_path.write_text(LOG_HEADER + "\n")

    ckpt = out_dir / CHECKPOINT
    losses = []
    with open(log_path, "a") as log_file:
        for epoch in range(cfg.epochs):
            if (epoch + 1) * n_batches <= step:
                continue
            for b, batch in enumerate(batch_iter(data, cfg.batch_size, cfg.seed, epoch)):
                global_step = epoch * n_batches + b
                if global_step < step:
                    continue
                samples = [augment(data[i], aug_cfg, np.random.default_rng([cfg.seed, epoch, i]))
                           for i in batch.indices]
                batch = collate(samples, batch.indices)
                lr = schedule.lr_at(global_step if cfg.lr_step == "iteration" else epoch)

                model.zero_grad()
                pred = model(Tensor(batch.rgb, dtype=dtype))
                try:
                    report = total_loss(pred, batch.depth, batch.mask, cfg.alpha, cfg.beta,
                                        cfg.si_lambda, cfg.spacings)
                    if not math.isfinite(report.value):
                        raise NumericError(f"non-finite loss {report.value}")
                    T.backward(report.total)
                    opt.step(lr)
                except NumericError as exc:
                    save_checkpoint(out_dir / EMERGENCY, model, opt, step, cfg.seed)
                    raise NumericError(f"step {step + 1}, batch {batch.ids}: {exc}") from None
                step += 1
                losses.append(report.value)
                log_file.write(_format_row(step, lr, report.l_d, report.l_g, report.value) + "\n")
                if cfg.stop_after_steps and step >= cfg.stop_after_steps:
                    log_file.flush()
                    save_checkpoint(ckpt, model, opt, step, cfg.seed)
                    return TrainResult(ckpt, log_path, step, losses)
            log_file.flush()
            save_checkpoint(ckpt, model, opt, step, cfg.seed)
            log.info("epoch %d/%d  step %d  loss %.4f", epoch + 1, cfg.epochs, step,
                     losses[-1] if losses else float("nan"))
    save_checkpoint(ckpt, model, opt, step, cfg.seed)
    return TrainResult(ckpt, log_path, step, losses)


# -- evaluation -------------------------------------------------------------


@dataclass
class EvalResult:
    ids: list
    reports: list
    aggregate: MetricReport | None
    skipped: list

    def table(self) -> str:
        rows = list(zip(self.ids, self.reports))
        if self.aggregate is not None:
            rows.append(("mean", self.aggregate))
        out = format_table(rows)
        if self.skipped:
            out += f"\nskipped {len(self.skipped)} sample(s): {', '.join(self.skipped)}"
        return out


def model_predictor(model: PFANet) -> Callable[[DepthSample], np.ndarray]:
    return lambda s: model.predict(s.rgb)


def evaluate(predictor: Callable[[DepthSample], np.ndarray], dataset: Sequence[DepthSample],
             out_dir=None, dump_depth=None) -> EvalResult:
    """Per-sample metrics plus their valid-pixel-weighted aggregate.

    Samples whose size is not divisible by 32 are skipped with a warning.
    """
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    ids, reports, skipped = [], [], []
    if dump_depth is not None:
        Path(dump_depth).mkdir(parents=True, exist_ok=True)
    for sample in dataset:
        h, w = sample.size
        if h % 32 or w % 32:
            log.warning("skipping %s: %dx%d is not divisible by 32", sample.id, h, w)
            skipped.append(sample.id)
            continue
        pred = np.asarray(predictor(sample)).reshape(sample.depth.shape)
        reports.append(compute_metrics(pred, sample.depth, sample.mask))
        ids.append(sample.id)
        if dump_depth is not None:
            save_depth_png(Path(dump_depth) / f"{sample.id}.png", pred)
            save_preview(Path(dump_depth) / f"{sample.id}_color.png", pred)
    agg = aggregate_metrics(reports) if reports else None
    result = EvalResult(ids, reports, agg, skipped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if agg is not None:
            (out_dir / "metrics.csv").write_text(metrics_csv([agg]))
        (out_dir / "per_sample.csv").write_text(metrics_csv(reports, ids))
        (out_dir / "metrics.txt").write_text(result.table() + "\n")
    return result


def save_preview(path, depth: np.ndarray, max_depth: float = 80.0) -> None:
    """False-colour rendering of a depth map (near = bright)."""
    from matplotlib import colormaps
    from PIL import Image

    d = np.asarray(depth, dtype=np.float64).reshape(depth.shape[-2:])
    t = 1.0 - np.clip(d / max_depth, 0.0, 1.0)
    rgb = (colormaps["magma"](t)[..., :3] * 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)
