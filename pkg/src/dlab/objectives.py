"""Training objectives: teacher-forced cross-entropy and LwF distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from dlab import autograd as ag
from dlab.autograd import Tensor
from dlab.groups import ConfigError
from dlab.model import InputError, TinyLmm, forward

log = logging.getLogger(__name__)


@dataclass
class TaskBatch:
    """Examples sharing prompt and answer lengths.

    prompts (B, Sp) ids, visual (B, S_v, d_v), answers (B, Sa) ids.
    ``answer_mask`` (B, Sa) marks answer positions that count toward the loss.
    """

    prompts: np.ndarray
    visual: np.ndarray
    answers: np.ndarray
    answer_mask: np.ndarray | None = None

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.int64)
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.answers = np.asarray(self.answers, dtype=np.int64)
        if self.answer_mask is None:
            self.answer_mask = np.ones(self.answers.shape, dtype=bool)
        else:
            self.answer_mask = np.asarray(self.answer_mask, dtype=bool)
        b = len(self.visual)
        if not (len(self.prompts) == len(self.answers) == len(self.answer_mask) == b):
            raise InputError("batch fields disagree on batch size")

    def __len__(self) -> int:
        return len(self.visual)

    def subset(self, idx) -> "TaskBatch":
        return TaskBatch(self.prompts[idx], self.visual[idx], self.answers[idx], self.answer_mask[idx])

    @property
    def answer_start(self) -> int:
        """Sequence index of the first answer token."""
        return self.prompts.shape[1] + self.visual.shape[1]


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    tau: float = 2.0
    max_positions: int = 1000

    def __post_init__(self):
        if self.lam < 0 or self.tau <= 0 or self.max_positions < 1:
            raise ConfigError(f"invalid distillation config {self}")


def _logits(model: TinyLmm, batch: TaskBatch, leaves=None) -> Tensor:
    # the last answer token is never an input under teacher forcing
    return forward(model, batch.prompts, batch.visual, batch.answers[:, :-1], leaves)


def _task_term(z: Tensor, batch: TaskBatch) -> Tensor:
    start = batch.answer_start - 1
    sa = batch.answers.shape[1]
    logp = ag.log_softmax(z[:, start:start + sa, :])
    mask = batch.answer_mask
    keep = mask.any(axis=1)
    if not keep.any():
        raise InputError("every example in the batch has an empty answer span")
    if not keep.all():
        log.warning("skipping %d examples with empty answer spans", int((~keep).sum()))
    onehot = np.zeros(logp.shape, dtype=logp.data.dtype)
    b_idx, t_idx = np.nonzero(mask)
    onehot[b_idx, t_idx, batch.answers[b_idx, t_idx]] = 1.0
    return ag.tsum(logp * onehot) * (-1.0 / int(keep.sum()))


def sample_positions(n: int, max_positions: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of ``range(n)`` of size ``min(n, max_positions)`` without replacement."""
    k = min(n, max_positions)
    if k == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def position_weights(batch_size: int, seq_len: int, max_positions: int, rng: np.random.Generator) -> np.ndarray:
    """Per-example averaging weights over the sampled distillation positions."""
    w = np.zeros((batch_size, seq_len))
    for b in range(batch_size):
        idx = sample_positions(seq_len, max_positions, rng)
        w[b, idx] = 1.0 / len(idx)
    return w


def _distill_term(z_student: Tensor, z_teacher: np.ndarray, cfg: DistillConfig, rng: np.random.Generator) -> Tensor:
    b, s, _ = z_student.shape
    log_q = ag.log_softmax(z_student, scale=1.0 / cfg.tau)
    zt = z_teacher.astype(z_student.data.dtype) / np.asarray(cfg.tau, z_student.data.dtype)
    zt = zt - zt.max(axis=-1, keepdims=True)
    log_p = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    # KL(p || q) = sum p log p - sum p log q
    kl = ag.tsum((Tensor(log_p) - log_q) * Tensor(p), axis=-1)  # (B, S)
    w = position_weights(b, s, cfg.max_positions, rng).astype(z_student.data.dtype)
    return ag.tsum(kl * Tensor(w)) * (cfg.tau ** 2 / b)


def _check_vocab(student: TinyLmm, teacher: TinyLmm) -> None:
    if student.config.vocab_size != teacher.config.vocab_size:
        raise ConfigError("student and teacher vocabularies differ")


def _run(model: TinyLmm, build, trainable) -> tuple[float, dict[str, np.ndarray]]:
    names = list(model.params) if trainable is None else [n for n in model.params if n in set(trainable)]
    with ag.Tape() as tape:
        leaves = {n: tape.watch(n, model.params[n]) for n in names}
        loss = build(leaves)
    return float(loss.data), ag.reverse_grad(tape, loss)


def task_loss(model: TinyLmm, batch: TaskBatch, trainable=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over examples of the summed answer-token negative log-likelihood, with gradients."""
    return _run(model, lambda lv: _task_term(_logits(model, batch, lv), batch), trainable)


def distill_loss(student: TinyLmm, teacher: TinyLmm, batch: TaskBatch, cfg: DistillConfig,
                 rng: np.random.Generator, trainable=None) -> tuple[float, dict[str, np.ndarray]]:
    """tau^2 * KL(teacher || student) averaged over sampled positions, with student gradients."""
    _check_vocab(student, teacher)
    with ag.no_tape():
        zt = _logits(teacher, batch).data
    return _run(student, lambda lv: _distill_term(_logits(student, batch, lv), zt, cfg, rng), trainable)


def combined_loss(student: TinyLmm, teacher: TinyLmm, batch: TaskBatch, cfg: DistillConfig,
                  rng: np.random.Generator, trainable=None) -> tuple[float, dict[str, np.ndarray]]:
    """task_loss + lam * distill_loss from a single student forward pass."""
    _check_vocab(student, teacher)
    with ag.no_tape():
        zt = _logits(teacher, batch).data

    def build(lv):
        z = _logits(student, batch, lv)
        return _task_term(z, batch) + _distill_term(z, zt, cfg, rng) * cfg.lam

    return _run(student, build, trainable)
