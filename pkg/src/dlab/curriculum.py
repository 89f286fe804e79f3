"""Stage-wise training, evaluation, sequence-level metrics and the paired t-test."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from dlab.groups import Adam, FreezeMask, ParamGroup, resolve_group
from dlab.mitigation import (DEFAULT_BETA, MITIGATION_KINDS, attach_lora, merge_lora, moe_wrap_all,
                             wise_ft_interpolate)
from dlab.model import EOA, ModelConfig, TinyLmm, greedy_decode_batch, init_model
from dlab.objectives import DistillConfig, TaskBatch, combined_loss, task_loss
from dlab.groups import ConfigError
from dlab.tasks import (HELD_OUT_KINDS, LABELS, SEQUENCES, Dataset, SyntheticTaskSpec, _stream,
                        generate_task)

log = logging.getLogger(__name__)

HELD_OUT = "held_out"


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 5e-3
    warmup_frac: float = 0.03


@dataclass
class Mitigation:
    kind: str = "none"
    lwf: DistillConfig = field(default_factory=DistillConfig)
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: str = "mlp"
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.kind not in MITIGATION_KINDS:
            raise ConfigError(f"unknown mitigation {self.kind!r}; expected one of {MITIGATION_KINDS}")


class AccessLedger:
    """Records which dataset each training step drew from."""

    def __init__(self):
        self.entries: list[tuple[int, str]] = []

    def record(self, stage: int, name: str) -> None:
        self.entries.append((stage, name))

    def touched(self, stage: int) -> set[str]:
        return {n for s, n in self.entries if s == stage}


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, steps: int | None = None):
    """Shuffled minibatch indices; one epoch unless ``steps`` asks for more."""
    total = steps if steps is not None else math.ceil(n / batch_size)
    order = rng.permutation(n)
    pos = 0
    for _ in range(total):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def train_steps(
    model: TinyLmm,
    data: TaskBatch,
    trainable,
    rng: np.random.Generator,
    cfg: TrainConfig = TrainConfig(),
    steps: int | None = None,
    teacher: TinyLmm | None = None,
    distill: DistillConfig | None = None,
    distill_rng: np.random.Generator | None = None,
    callback: Callable[[int, TinyLmm], None] | None = None,
    on_batch: Callable[[], None] | None = None,
) -> list[float]:
    """Adam on ``trainable`` only, one epoch by default; mutates ``model``.

    ``callback(step, model)`` runs after every step with the 1-based step count.
    """
    mask = FreezeMask.of(trainable)
    total = steps if steps is not None else math.ceil(len(data) / cfg.batch_size)
    opt = Adam(model, mask, lr=cfg.lr, total_steps=total, warmup_frac=cfg.warmup_frac)
    losses = []
    for i, idx in enumerate(iterate_batches(len(data), cfg.batch_size, rng, total)):
        if on_batch is not None:
            on_batch()
        batch = data.subset(idx)
        if teacher is not None:
            loss, grads = combined_loss(model, teacher, batch, distill, distill_rng, opt.names)
        else:
            loss, grads = task_loss(model, batch, opt.names)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {i + 1}")
        opt.step(grads)
        losses.append(loss)
        if callback is not None:
            callback(i + 1, model)
    return losses


# ---------------------------------------------------------------- evaluation


def decode_answers(model: TinyLmm, data: TaskBatch, chunk: int = 256) -> np.ndarray:
    """Greedy answers for every example, right-padded with -1 to the answer length."""
    sa = data.answers.shape[1]
    out = np.full((len(data), sa), -1, dtype=np.int64)
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        gen, _, lengths = greedy_decode_batch(model, data.prompts[sl], data.visual[sl], sa, EOA)
        for j, (row, n) in enumerate(zip(gen, lengths)):
            out[lo + j, :n] = row[:n]
    return out


def evaluate(model: TinyLmm, data: TaskBatch, decoder: Callable[[TaskBatch], np.ndarray] | None = None) -> float:
    """Exact-match accuracy in percent over full answers (EOA included).

    ``decoder`` overrides greedy decoding; it must return (B, Sa) token ids.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = decoder(data) if decoder is not None else decode_answers(model, data)
    correct = (pred == data.answers).all(axis=1)
    return 100.0 * float(correct.mean())


# ---------------------------------------------------------------- base model


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 5e-3
    train_n: int = 4096
    caption_weight: int = 3
    # answer labels the base model sees for each target task
    coverage: tuple = (
        ("classify", (0, 1, 2, 3)),
        ("count", (1, 2, 3, 4, 5)),
        ("yesno", (1,)),
        ("ocr", (0, 1, 2, 3, 4, 5)),
    )


def pretrain_base(config: ModelConfig = ModelConfig(), seed: int = 0, cfg: PretrainConfig = PretrainConfig()) -> TinyLmm:
    """Full-model training on a task mixture, producing the stage-0 checkpoint.

    The held-out captioning task is fully covered; target tasks only partly
    (and the clock task not at all), so every target has headroom to learn.
    """
    model = init_model(config, _stream(seed, "init"))
    mix: list[TaskBatch] = [generate_task(SyntheticTaskSpec("caption", seed + 10_000, cfg.train_n, 1)).train]
    weights = [cfg.caption_weight]
    for kind, labels in cfg.coverage:
        spec = SyntheticTaskSpec(kind, seed + 10_000, cfg.train_n, 1, tuple(labels))
        mix.append(generate_task(spec).train)
        weights.append(1)
    rng = _stream(seed, "pretrain")
    p = np.asarray(weights, float) / sum(weights)
    opt = Adam(model, FreezeMask.of(model.params), lr=cfg.lr, total_steps=cfg.steps, check_frozen=False)
    for _ in range(cfg.steps):
        data = mix[rng.choice(len(mix), p=p)]
        idx = rng.choice(len(data), size=cfg.batch_size, replace=False)
        loss, grads = task_loss(model, data.subset(idx))
        if not np.isfinite(loss):
            raise TrainingDiverged("pre-training diverged")
        opt.step(grads)
    return model


# ---------------------------------------------------------------- sequence


@dataclass
class AccuracyMatrix:
    """rows[k][task] = accuracy after stage k (row 0 = base model)."""

    tasks: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)

    def add_row(self, row: dict[str, float]) -> None:
        missing = [t for t in self.tasks if t not in row]
        if missing:
            raise ValueError(f"row lacks {missing}")
        self.rows.append({t: float(row[t]) for t in self.tasks})

    def __getitem__(self, key: tuple[int, str]) -> float:
        k, t = key
        return self.rows[k][t]

    @property
    def n_stages(self) -> int:
        return len(self.rows) - 1

    def to_csv(self) -> str:
        lines = ["stage,task,accuracy"]
        for k, row in enumerate(self.rows):
            for t in self.tasks:
                lines.append(f"{k},{t},{row[t]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows: dict[int, dict[str, float]] = {}
        tasks: list[str] = []
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "stage,task,accuracy":
            raise ValueError("matrix CSV must start with header 'stage,task,accuracy'")
        for ln in lines[1:]:
            k, t, a = ln.split(",")
            rows.setdefault(int(k), {})[t] = float(a)
            if t not in tasks:
                tasks.append(t)
        m = cls(tasks)
        for k in sorted(rows):
            m.add_row(rows[k])
        return m


@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    checkpoints: list[TinyLmm]  # model after each stage (training state, not interpolated)
    evaluated: list[TinyLmm]  # model actually evaluated per stage
    losses: list[list[float]]
    ledger: AccessLedger
    failed: bool = False


def evaluate_all(model: TinyLmm, targets: dict[str, Dataset], held_out: dict[str, Dataset]) -> dict[str, float]:
    row = {name: evaluate(model, ds.eval) for name, ds in targets.items()}
    row[HELD_OUT] = float(np.mean([evaluate(model, ds.eval) for ds in held_out.values()]))
    return row


def build_stages(order: tuple[str, ...] | str = "default", seed: int = 0, train_n: int = 512,
                 eval_n: int = 256) -> list[SyntheticTaskSpec]:
    kinds = SEQUENCES[order] if isinstance(order, str) else tuple(order)
    if len(set(kinds)) != len(kinds):
        raise ValueError("a task may appear only once in a sequence")
    return [SyntheticTaskSpec(k, seed, train_n, eval_n) for k in kinds]


def run_sequence(
    model: TinyLmm,
    stages: list[SyntheticTaskSpec],
    group: ParamGroup | str | None,
    mitigation: Mitigation = Mitigation(),
    seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    held_out: list[SyntheticTaskSpec] | None = None,
) -> SequenceResult:
    """Train each stage in order on that stage's data only; evaluate after each.

    ``group=None`` freezes everything.  The input model is not modified.
    """
    if not stages:
        raise ValueError("stages must be nonempty")
    if len({s.kind for s in stages}) != len(stages):
        raise ValueError("a task may appear only once in a sequence")
    if held_out is None:
        held_out = [SyntheticTaskSpec(k, seed, 0, stages[0].eval_n) for k in HELD_OUT_KINDS]
    targets = {s.kind: generate_task(s) for s in stages}
    held = {s.kind: generate_task(s) for s in held_out}
    base = model.copy()
    current = model.copy()
    if mitigation.kind == "moe":
        moe_names = moe_wrap_all(current)
        base = current.copy()
    matrix = AccuracyMatrix(list(targets) + [HELD_OUT])
    matrix.add_row(evaluate_all(base, targets, held))
    ledger = AccessLedger()
    result = SequenceResult(matrix, [], [], [], ledger)
    data_rng = _stream(seed, "data")
    distill_rng = _stream(seed, "distill")
    init_rng = _stream(seed, "init", "adapters")
    for k, spec in enumerate(stages, start=1):
        ds = targets[spec.kind]
        teacher = None
        if mitigation.kind == "moe":
            trainable = set(moe_names)
        elif mitigation.kind == "lora":
            lora_targets = resolve_group(mitigation.lora_targets, current)
            trainable = set(attach_lora(current, lora_targets, mitigation.lora_rank, mitigation.lora_alpha, init_rng))
        else:
            trainable = set() if group is None else resolve_group(group, current)
            if mitigation.kind == "lwf":
                teacher = current.copy()
        try:
            losses = train_steps(current, ds.train, trainable, data_rng, train_cfg, teacher=teacher,
                                 distill=mitigation.lwf, distill_rng=distill_rng,
                                 on_batch=lambda k=k, n=spec.kind: ledger.record(k, n))
        except TrainingDiverged as exc:
            log.error("stage %d (%s) aborted: %s", k, spec.kind, exc)
            result.failed = True
            break
        if mitigation.kind == "lora":
            current = merge_lora(current)
        result.losses.append(losses)
        result.checkpoints.append(current.copy())
        evaluated = wise_ft_interpolate(base, current, mitigation.beta) if mitigation.kind == "wise_ft" else current
        result.evaluated.append(evaluated)
        matrix.add_row(evaluate_all(evaluated, targets, held))
    return result


# ---------------------------------------------------------------- metrics


@dataclass
class SequenceMetrics:
    target_learning: float
    target_forgetting: float
    target_overall: float
    held_out_forgetting: float

    def as_dict(self) -> dict[str, float]:
        return {
            "target_learning": self.target_learning,
            "target_forgetting": self.target_forgetting,
            "target_overall": self.target_overall,
            "held_out_forgetting": self.held_out_forgetting,
        }


def compute_metrics(matrix: AccuracyMatrix, targets: list[str] | None = None, held_out: str = HELD_OUT) -> SequenceMetrics:
    """Sequence-level metrics in percentage points.

    ``targets`` lists target tasks in training order: stage k trained ``targets[k-1]``.
    """
    if targets is None:
        targets = [t for t in matrix.tasks if t != held_out]
    n = matrix.n_stages
    if n < len(targets):
        raise ValueError(f"matrix has {n} stages but {len(targets)} targets")
    for k, row in enumerate(matrix.rows):
        for t in list(targets) + [held_out]:
            if t not in row or row[t] is None or not np.isfinite(row[t]):
                raise ValueError(f"missing cell (stage {k}, task {t})")
    last = len(targets)
    learning = np.mean([matrix[k, t] - matrix[0, t] for k, t in enumerate(targets, start=1)])
    earlier = [matrix[last, t] - matrix[k, t] for k, t in enumerate(targets[:-1], start=1)]
    forgetting = float(np.mean(earlier)) if earlier else 0.0
    overall = np.mean([matrix[last, t] - matrix[0, t] for t in targets])
    held = matrix[last, held_out] - matrix[0, held_out]
    return SequenceMetrics(float(learning), forgetting, float(overall), float(held))


def paired_t_test(a, b) -> float:
    """Two-sided p-value of the paired t statistic with len(a) - 1 degrees of freedom.

    Zero-variance differences give p = 1 when all are zero, else p = 0.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired samples must be equal-length 1-d sequences of length >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if not d.any() else 0.0
    t = d.mean() / (sd / math.sqrt(len(d)))
    return float(2.0 * stats.t.sf(abs(t), len(d) - 1))
