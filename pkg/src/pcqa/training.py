"""Training recipe: normalized-MOS regression with AdamW, warmup + cosine, grad clipping."""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import MosStats, Sample, check_unique_ids, compute_mos_stats, normalize_mos
from .encoders import (assert_frozen, build_hybrid_text_encoder, build_vision_encoder,
                       parameter_checksum)
from .errors import ConfigError, DataError, NumericError
from .fusion import CONCAT, MIXERS, PCQAModel
from .media import load_clip, sample_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_max: float = 2e-5
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.05
    grad_clip_norm: float = 1.0
    resolution: tuple[int, int] = (448, 640)
    seed: int = 0
    mixer_kind: str = CONCAT
    max_frames: int = 16
    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.9, 1.0)
    brightness_jitter: float = 0.1
    contrast_jitter: float = 0.1
    mixed_precision: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_dim: int = 1024
    head_hidden: int = 256
    vision_encoder: str = "toy"
    vision_dim: int = 32
    text_encoders: str = "toy/open_clip:48,toy/eva_clip:32"
    freeze_text: bool = True

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.crop_scale = tuple(float(v) for v in self.crop_scale)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.lr_max >= 0, "lr_max must be >= 0")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(0 < self.warmup_fraction < 1, "warmup_fraction must be in (0, 1)")
        need(self.grad_clip_norm > 0, "grad_clip_norm must be > 0")
        need(len(self.resolution) == 2 and min(self.resolution) >= 1, "resolution must be HxW")
        need(self.mixer_kind in MIXERS, f"mixer_kind must be one of {MIXERS}")
        need(self.max_frames >= 1, "max_frames must be >= 1")
        need(0 <= self.flip_prob <= 1, "flip_prob must be in [0, 1]")
        lo, hi = self.crop_scale
        need(0 < lo <= hi <= 1, "crop_scale must satisfy 0 < lo <= hi <= 1")
        need(0 <= self.brightness_jitter < 1, "brightness_jitter must be in [0, 1)")
        need(0 <= self.contrast_jitter < 1, "contrast_jitter must be in [0, 1)")
        need(self.latent_dim >= 1 and self.head_hidden >= 1 and self.vision_dim >= 1,
             "dimensions must be positive")

    # run-config file: `key = value` per line, `#` comments

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif f.name == "resolution":
                s = f"{v[0]}x{v[1]}"
            elif isinstance(v, tuple):
                s = ",".join(repr(x) for x in v)
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in kwargs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            kwargs[key] = _parse_value(key, value, types[key].default)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        return cls.loads(path.read_text(encoding="utf-8"))


def _parse_value(key, value, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if key == "resolution":
            h, w = value.lower().replace(" ", "").split("x")
            return (int(h), int(w))
        if isinstance(default, tuple):
            return tuple(float(x) for x in value.split(","))
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def build_model(cfg: TrainConfig, mos_stats: MosStats | None = None) -> PCQAModel:
    g = torch.Generator().manual_seed(cfg.seed)
    vision = build_vision_encoder(cfg.vision_encoder, cfg.vision_dim, g)
    text = build_hybrid_text_encoder(cfg.text_encoders, freeze=cfg.freeze_text)
    return PCQAModel(vision, text, latent_dim=cfg.latent_dim, mixer=cfg.mixer_kind,
                     head_hidden=cfg.head_hidden, mos_stats=mos_stats, generator=g)


def mse_loss(pred, target):
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("empty prediction vector")
    return ((pred - target) ** 2).mean()


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return max(1, math.floor(cfg.warmup_fraction * total_steps + 0.5))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over W steps, then half-cosine decay to 0 at `total_steps`."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step < w:
        return cfg.lr_max * step / w
    span = max(1, total_steps - w)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


def global_grad_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(math.fsum(float(g.double().pow(2).sum()) for g in grads))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale `grads` in place so their global L2 norm is at most `max_norm`.

    Returns the norm before clipping. Gradients under the threshold are not touched.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [g for g in grads if g is not None]
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm ({norm})")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_srcc: float
    val_plcc: float
    val_score: float
    lr_last: float


METRICS_HEADER = "epoch,train_loss,val_srcc,val_plcc,val_score,lr_last"


def format_metrics_row(m: EpochMetrics) -> str:
    return f"{m.epoch},{m.train_loss!r},{m.val_srcc!r},{m.val_plcc!r},{m.val_score!r},{m.lr_last!r}"


@dataclass
class TrainResult:
    model: PCQAModel
    best_state: dict
    best_epoch: int
    mos_stats: MosStats
    metrics: list[EpochMetrics] = field(default_factory=list)
    steps: int = 0

    def best_model(self) -> PCQAModel:
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_state)
        return m


def _autocast(enabled: bool):
    if enabled:
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def train(cfg: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] | None = None,
          out_dir: str | os.PathLike | None = None, max_steps: int | None = None) -> TrainResult:
    """Fit a model on `train_set`, keeping the epoch with the best validation Val Score.

    With `out_dir`, writes best/last checkpoints, the metrics CSV and the
    resolved config there. `max_steps` stops early (used by tests).
    """
    from . import checkpoint
    from .evaluation import predict, srcc, plcc

    if not train_set:
        raise DataError("training set is empty")
    check_unique_ids(train_set)
    stats = compute_mos_stats(train_set)
    if val_set is not None:
        missing = [s.id for s in val_set if s.mos is None]
        if missing:
            raise DataError(f"validation samples without mos: {missing[:5]}")

    torch.manual_seed(cfg.seed)
    model = build_model(cfg, stats)
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=cfg.lr_max, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    frozen = model.text_encoder.frozen
    text_sum = [parameter_checksum(m) for m in model.text_encoder.members] if frozen else None
    text_cache: dict[str, torch.Tensor] = {}
    if frozen:
        prompts = sorted({s.prompt for s in train_set})
        for prompt, row in zip(prompts, model.encode_prompts(prompts)):
            text_cache[prompt] = row

    targets = {s.id: normalize_mos(s.mos, stats) for s in train_set}
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        metrics_file = open(out / "metrics.csv", "w", encoding="utf-8")
        metrics_file.write(METRICS_HEADER + "\n")
    else:
        metrics_file = None

    result = TrainResult(model, copy.deepcopy(model.state_dict()), 0, stats)
    best_score = -math.inf
    step = 0
    lr = 0.0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = np.random.default_rng([cfg.seed & 0xFFFFFFFF, epoch]).permutation(n)
            loss_sum = 0.0
            seen = 0
            for start in range(0, n, cfg.batch_size):
                if max_steps is not None and step >= max_steps:
                    break
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                clips = [load_clip(s, cfg.resolution, cfg.max_frames,
                                   rng=sample_rng(cfg.seed, s.id, epoch), cfg=cfg) for s in batch]
                if frozen:
                    tf = torch.stack([text_cache[s.prompt] for s in batch])
                else:
                    tf = model.text_encoder([s.prompt for s in batch])
                y = torch.tensor([targets[s.id] for s in batch], dtype=torch.float32)

                with _autocast(cfg.mixed_precision):
                    pred = model(clips, text_features=tf)
                loss = mse_loss(pred.float(), y)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                clip_gradients([p.grad for p in params if p.grad is not None], cfg.grad_clip_norm)
                lr = lr_at(step, total_steps, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.step()
                step += 1
                loss_sum += loss.item() * len(batch)
                seen += len(batch)

            if frozen:
                after = [parameter_checksum(m) for m in model.text_encoder.members]
                for m, b, a in zip(model.text_encoder.members, text_sum, after):
                    if not assert_frozen(m, b, a):
                        raise NumericError(f"frozen text encoder {m.name!r} changed during training")

            if val_set:
                preds = predict(model, val_set, cfg.resolution, cfg.max_frames)
                gt = [s.mos for s in val_set]
                scores = preds.values()
                vs, vp = srcc(scores, gt), plcc(scores, gt)
            else:
                vs = vp = float("nan")
            val = (vs + vp) / 2
            m = EpochMetrics(epoch, loss_sum / max(seen, 1), vs, vp, val, lr)
            result.metrics.append(m)
            log.info("epoch %d loss %.5f srcc %.4f plcc %.4f val %.4f lr %.3g",
                     epoch, m.train_loss, vs, vp, val, lr)
            if metrics_file is not None:
                metrics_file.write(format_metrics_row(m) + "\n")
                metrics_file.flush()
            # without a validation set the last epoch is kept
            if not val_set or val > best_score:
                best_score = val if val_set else best_score
                result.best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    result.steps = step
    if out is not None:
        checkpoint.save_checkpoint(out / "last.ckpt", model, cfg, stats)
        checkpoint.save_checkpoint(out / "best.ckpt", result.best_model(), cfg, stats)
    return result
