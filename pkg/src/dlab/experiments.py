"""Drift experiments: tune a base model on Count and watch the held-out task.

Each run records the number-token bias of the held-out captioning probe on
the checkpoint grid, held-out accuracy after tuning, and the layer-wise
attribution of the final logit change.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dlab.curriculum import TrainConfig, evaluate, pretrain_base, train_steps
from dlab.groups import resolve_group
from dlab.model import ModelConfig, TinyLmm
from dlab.objectives import DistillConfig
from dlab.probes import (CHECKPOINT_GRID, AttributionReport, NumericTokenSet, layer_attribution, ntb,
                         probe_batch_from)
from dlab.tasks import NUMERIC_TOKENS, SyntheticTaskSpec, _stream, generate_task

log = logging.getLogger(__name__)

DRIFT_GROUPS = ("mlp", "mlp_gate_up", "sa_proj")


@dataclass
class DriftRun:
    group: str
    lwf: bool
    seed: int
    ntb: dict[int, float]  # step -> NTB, step 0 is the base model
    held_out_before: float
    held_out_after: float
    target_after: float
    attribution: AttributionReport | None = None

    @property
    def ntb_rise(self) -> float:
        return self.ntb[max(self.ntb)] - self.ntb[0]

    @property
    def held_out_drop(self) -> float:
        return self.held_out_before - self.held_out_after

    @property
    def label(self) -> str:
        return self.group + ("+lwf" if self.lwf else "")


@dataclass
class DriftSetup:
    """Everything a drift run shares across groups for one seed."""

    seed: int
    base: TinyLmm
    steps: int = 1000
    batch_size: int = 16
    lr: float = 5e-3
    probe_size: int = 100
    eval_n: int = 256
    grid: tuple[int, ...] = CHECKPOINT_GRID
    numeric: NumericTokenSet = field(default_factory=lambda: NumericTokenSet(NUMERIC_TOKENS))

    def __post_init__(self):
        self.count = generate_task(SyntheticTaskSpec("count", self.seed, self.steps * self.batch_size, self.eval_n))
        self.caption = generate_task(SyntheticTaskSpec("caption", self.seed, 0, self.eval_n))
        # the probe batch is sampled once and reused for every checkpoint and method
        self.probe = probe_batch_from(self.caption.eval, self.probe_size)
        self.attrib_batch = self.caption.eval.subset(np.arange(min(self.probe_size, len(self.caption.eval))))
        self.base_ntb = ntb(self.base, self.probe, self.numeric)
        self.base_held_out = evaluate(self.base, self.caption.eval)


def drift_run(setup: DriftSetup, group: str, lwf: DistillConfig | None = None) -> DriftRun:
    model = setup.base.copy()
    trace = {0: setup.base_ntb}
    grid = set(setup.grid)

    def on_step(step, m):
        if step in grid:
            trace[step] = ntb(m, setup.probe, setup.numeric)

    train_steps(model, setup.count.train, resolve_group(group, model),
                _stream(setup.seed, "data", "drift"), TrainConfig(setup.batch_size, setup.lr),
                steps=setup.steps, teacher=setup.base if lwf is not None else None, distill=lwf,
                distill_rng=_stream(setup.seed, "distill", "drift"), callback=on_step)
    if setup.steps not in trace:
        trace[setup.steps] = ntb(model, setup.probe, setup.numeric)
    report = layer_attribution(setup.base, model, setup.attrib_batch, step=setup.steps)
    return DriftRun(group, lwf is not None, setup.seed, trace, setup.base_held_out,
                    evaluate(model, setup.caption.eval), evaluate(model, setup.count.eval), report)


def drift_suite(seeds=(0, 1, 2), groups=DRIFT_GROUPS, lwf_group: str | None = "mlp",
                lwf: DistillConfig = DistillConfig(1.0, 2.0), config: ModelConfig = ModelConfig(),
                bases: dict[int, TinyLmm] | None = None, steps: int = 1000) -> list[DriftRun]:
    """Every group (plus one LwF run) on every seed; bases are pre-trained per seed if not given."""
    runs = []
    for seed in seeds:
        base = bases[seed] if bases and seed in bases else pretrain_base(config, seed)
        setup = DriftSetup(seed, base, steps=steps)
        for g in groups:
            runs.append(drift_run(setup, g))
            log.info("seed %d %s: ntb rise %.4f held-out drop %.1f", seed, g, runs[-1].ntb_rise,
                     runs[-1].held_out_drop)
        if lwf_group is not None:
            runs.append(drift_run(setup, lwf_group, lwf))
    return runs


def median_by_label(runs: list[DriftRun], attr: str) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in runs:
        by.setdefault(r.label, []).append(getattr(r, attr))
    return {k: float(np.median(v)) for k, v in by.items()}


def late_layer_sums(report: AttributionReport) -> tuple[float, float]:
    """(sum of MLP(l), sum of SA(l)) over the last ceil(L/2) layers."""
    L = len(report.sa)
    late = slice(L - (L + 1) // 2, L)
    return float(report.mlp[late].sum()), float(report.sa[late].sum())


def probe_rows(runs: list[DriftRun]) -> list[tuple[str, int, int, float]]:
    return [(r.label, r.seed, s, v) for r in runs for s, v in sorted(r.ntb.items())]
