# src/train.py
"""
Training loops: CE pretraining, teacher correction, CE retraining and
logit-only forward-KL distillation, all driven by one resumable Trainer.

Schedule: linear warmup to the peak rate, then cosine decay to the minimum
rate. Optimizer: Adam with decoupled weight decay on matrices only, gradients
clipped by global norm.
"""

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from src.data import Corpus, build_batches
from src.errors import ConfigError, DivergenceError, ShapeError
from src.evalx import eval_val_loss
from src.model import LossSpec, ParamSet, backward, forward, forward_kl  # noqa: F401

logger = logging.getLogger(__name__)

LOSS_MODES = ("ce", "kl")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_steps: int = 20
    schedule: str = "cosine"
    batch_size: int = 16
    seq_len: int = 128
    total_tokens: int = 2_048_000
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    loss_mode: str = "ce"
    eval_interval: int = 100
    log_interval: int = 10
    eval_batches: int = 4
    ce_mix: float = 0.0
    deterministic: bool = True

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    def validate(self) -> "TrainConfig":
        problems = []
        if self.peak_lr < 0 or self.min_lr < 0:
            problems.append("learning rates must be >= 0")
        if self.min_lr > self.peak_lr:
            problems.append(f"min_lr {self.min_lr} exceeds peak_lr {self.peak_lr}")
        if self.warmup_steps < 0:
            problems.append("warmup_steps must be >= 0")
        if self.schedule != "cosine":
            problems.append(f"unsupported schedule {self.schedule!r}")
        if self.batch_size < 1 or self.seq_len < 1:
            problems.append("batch_size and seq_len must be >= 1")
        elif self.total_tokens < self.tokens_per_step:
            problems.append(f"total_tokens {self.total_tokens} is less than one batch "
                            f"({self.batch_size} x {self.seq_len})")
        if self.loss_mode not in LOSS_MODES:
            problems.append(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            problems.append("betas must lie in [0, 1)")
        if self.eps <= 0 or self.grad_clip <= 0:
            problems.append("eps and grad_clip must be positive")
        if self.weight_decay < 0 or self.ce_mix < 0:
            problems.append("weight_decay and ce_mix must be >= 0")
        if self.eval_interval < 0 or self.log_interval < 1 or self.eval_batches < 1:
            problems.append("eval_interval >= 0, log_interval >= 1 and eval_batches >= 1 required")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path} does not hold a mapping")
        return cls.from_dict(data)


def lr_at(step: int, tc: TrainConfig, total_steps: int) -> float:
    """Learning rate for optimizer update ``step`` (1-based; step 0 is the start)."""
    if step < tc.warmup_steps:
        return tc.peak_lr * step / tc.warmup_steps
    decay_steps = total_steps - tc.warmup_steps
    if decay_steps <= 0:
        return tc.peak_lr
    progress = (step - tc.warmup_steps) / decay_steps
    if progress <= 0:
        return tc.peak_lr
    if progress >= 1:
        return tc.min_lr
    return tc.min_lr + (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay, updating a ParamSet in place."""

    def __init__(self, params: ParamSet, tc: TrainConfig):
        self.tc = tc
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def update(self, params: ParamSet, grads, lr: float) -> None:
        tc = self.tc
        self.t += 1
        bias1 = 1.0 - tc.beta1 ** self.t
        bias2 = 1.0 - tc.beta2 ** self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * np.square(g)
            if tc.weight_decay and p.ndim == 2:
                p -= (lr * tc.weight_decay) * p
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + tc.eps)


@dataclass
class MetricsLog:
    tokens_per_step: Optional[int] = None
    records: List[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError(f"metrics step {record['step']} does not follow "
                             f"{self.records[-1]['step']}")
        if self.tokens_per_step is not None and \
                record["tokens_seen"] != record["step"] * self.tokens_per_step:
            raise ValueError(f"tokens_seen {record['tokens_seen']} != step x batch x seq")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def final_val_loss(self) -> Optional[float]:
        for record in reversed(self.records):
            if record.get("val_loss") is not None:
                return record["val_loss"]
        return None

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        if not self.records:
            Path(path).write_text("")
            return
        lines = [json.dumps(record, default=lambda v: v.item()) for record in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, tokens_per_step: int = None) -> "MetricsLog":
        log = cls(tokens_per_step)
        if Path(path).stat().st_size == 0:
            return log
        frame = pd.read_json(path, orient="records", lines=True, precise_float=True,
                             convert_dates=False)
        for row in frame.to_dict(orient="records"):
            log.append({k: (None if isinstance(v, float) and math.isnan(v) else v)
                        for k, v in row.items()})
        return log


class Trainer:
    """Resumable step loop; ``run`` may be called repeatedly until the budget is spent."""

    def __init__(self, params: ParamSet, corpus: Corpus, tc: TrainConfig, *,
                 teacher: ParamSet = None, val_corpus: Corpus = None, label: str = "train",
                 progress: bool = False):
        self.tc = tc.validate()
        if tc.loss_mode == "kl":
            if teacher is None:
                raise ConfigError("kl training needs a teacher")
            if teacher.config.vocab != params.config.vocab:
                raise ShapeError(f"teacher vocab {teacher.config.vocab} differs from "
                                 f"student vocab {params.config.vocab}")
        self.params = params.copy()
        self.teacher = teacher
        self.val_corpus = val_corpus
        self.label = label
        self.progress = progress
        self.optimizer = AdamW(self.params, tc)
        self.batches = build_batches(corpus, tc.seq_len, tc.batch_size, tc.seed,
                                     epochs=None, drop_last=True)
        self.total_steps = tc.total_steps
        self.step = 0
        self.log = MetricsLog(tc.tokens_per_step)
        self._started = time.perf_counter()

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    def run(self, n_steps: int = None) -> Tuple[ParamSet, MetricsLog]:
        stop = self.total_steps if n_steps is None else min(self.step + n_steps, self.total_steps)
        for _ in tqdm(range(self.step, stop), desc=self.label, disable=not self.progress):
            self._train_step()
        return self.params, self.log

    def _loss_spec(self, batch) -> LossSpec:
        if self.tc.loss_mode == "ce":
            return LossSpec.ce(batch.targets)
        teacher_logits, _ = forward(self.teacher, batch.inputs)
        targets = batch.targets if self.tc.ce_mix else None
        return LossSpec.kl(teacher_logits, targets, self.tc.ce_mix)

    def _train_step(self) -> None:
        tc = self.tc
        batch = next(self.batches)
        step = self.step + 1
        lr = lr_at(step, tc, self.total_steps)
        loss, grads = backward(self.params, batch.inputs, self._loss_spec(batch), step=step)
        norm = grads.global_norm()
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient norm", step)
        if norm > tc.grad_clip:
            grads.scale(tc.grad_clip / (norm + 1e-6))
        self.optimizer.update(self.params, grads, lr)
        self.step = step

        last = step == self.total_steps
        evaluate = self.val_corpus is not None and (
            (tc.eval_interval and step % tc.eval_interval == 0) or last)
        if evaluate or step % tc.log_interval == 0 or last:
            record = {"step": step, "tokens_seen": step * tc.tokens_per_step, "lr": lr,
                      "train_loss": loss, "val_loss": None}
            if evaluate:
                record["val_loss"] = eval_val_loss(self.params, self.val_corpus, tc.eval_batches,
                                                   batch_size=tc.batch_size, seq_len=tc.seq_len)
            if not tc.deterministic:
                record["wall_time"] = time.perf_counter() - self._started
            self.log.append(record)
            logger.debug("%s step %d lr %.2e loss %.4f val %s", self.label, step, lr, loss,
                         record["val_loss"])


def train_ce(params: ParamSet, corpus: Corpus, tc: TrainConfig, *, val_corpus: Corpus = None,
             progress: bool = False) -> Tuple[ParamSet, MetricsLog]:
    if tc.loss_mode != "ce":
        raise ConfigError(f"train_ce needs loss_mode 'ce', got {tc.loss_mode!r}")
    trainer = Trainer(params, corpus, tc, val_corpus=val_corpus, label="train-ce",
                      progress=progress)
    out, log = trainer.run()
    logger.info("CE training finished after %d steps, final val loss %s", trainer.step,
                log.final_val_loss())
    return out, log


def correct_teacher(teacher_params: ParamSet, corpus_b: Corpus, tc: TrainConfig, *,
                    val_corpus: Corpus = None, progress: bool = False) -> Tuple[ParamSet, MetricsLog]:
    """CE fine-tune of the teacher on the distillation corpus."""
    if tc.total_tokens == 0:
        corrected = teacher_params.copy()
        corrected.meta["corrected_teacher"] = True
        return corrected, MetricsLog(tc.tokens_per_step)
    corrected, log = train_ce(teacher_params, corpus_b, tc.replace(loss_mode="ce"),
                              val_corpus=val_corpus, progress=progress)
    corrected.meta["corrected_teacher"] = True
    return corrected, log


def distill(student_params: ParamSet, teacher_params: ParamSet, corpus: Corpus, tc: TrainConfig, *,
            val_corpus: Corpus = None, progress: bool = False) -> Tuple[ParamSet, MetricsLog]:
    """Forward-KL logit distillation; the teacher is only ever run forward."""
    if tc.loss_mode != "kl":
        raise ConfigError(f"distill needs loss_mode 'kl', got {tc.loss_mode!r}")
    trainer = Trainer(student_params, corpus, tc, teacher=teacher_params, val_corpus=val_corpus,
                      label="distill", progress=progress)
    out, log = trainer.run()
    logger.info("Distillation finished after %d steps, final val loss %s", trainer.step,
                log.final_val_loss())
    return out, log


def correction_budget(distill_tokens: int) -> int:
    """Teacher-correction token budget: one third of the distillation budget."""
    return distill_tokens // 3


def interleaved_distill(student_params: ParamSet, teacher_params: ParamSet, corpus: Corpus,
                        distill_tc: TrainConfig, correction_tc: TrainConfig, *, segments: int = 4,
                        val_corpus: Corpus = None, progress: bool = False
                        ) -> Tuple[ParamSet, MetricsLog, ParamSet]:
    """Distill from a teacher that keeps being corrected.

    The two budgets are each split into ``segments`` equal chunks; every segment
    runs one correction chunk and then one distillation chunk against the teacher
    as corrected so far. Returns (student, distillation log, corrected teacher).
    """
    if segments < 1:
        raise ConfigError("segments must be >= 1")
    if distill_tc.loss_mode != "kl":
        raise ConfigError(f"distillation needs loss_mode 'kl', got {distill_tc.loss_mode!r}")
    correction = None
    if correction_tc.total_tokens > 0:
        correction = Trainer(teacher_params, corpus, correction_tc.replace(loss_mode="ce"),
                             label="correct", progress=progress)
    teacher = correction.params if correction else teacher_params
    student = Trainer(student_params, corpus, distill_tc, teacher=teacher,
                      val_corpus=val_corpus, label="distill", progress=progress)
    distill_chunk = -(-student.total_steps // segments)
    correction_chunk = -(-correction.total_steps // segments) if correction else 0
    while not student.done or (correction and not correction.done):
        if correction and not correction.done:
            correction.run(correction_chunk)
        if not student.done:
            student.run(distill_chunk)
    corrected = correction.params if correction else teacher_params.copy()
    corrected.meta["corrected_teacher"] = True
    return student.params, student.log, corrected
