"""Output-distribution probes: number-token bias and layer-wise logit attribution."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dlab.autograd import ContractError
from dlab.model import EOA, TinyLmm, forward, greedy_decode_batch
from dlab import autograd as ag
from dlab.objectives import TaskBatch

log = logging.getLogger(__name__)

CHECKPOINT_GRID = (1, 10, 100, 1000)


@dataclass(frozen=True)
class NumericTokenSet:
    ids: frozenset[int]

    def __init__(self, ids, vocab_size: int | None = None):
        ids = frozenset(int(i) for i in ids)
        if not ids:
            raise ValueError("numeric token set must be nonempty")
        if vocab_size is not None and max(ids) >= vocab_size:
            raise ValueError("numeric token id outside the vocabulary")
        object.__setattr__(self, "ids", ids)

    def index(self) -> np.ndarray:
        return np.asarray(sorted(self.ids))


@dataclass
class ProbeBatch:
    """Fixed (visual, prompt) pairs; sample once and reuse for every checkpoint."""

    prompts: np.ndarray
    visual: np.ndarray
    max_len: int = 8

    def __len__(self) -> int:
        return len(self.visual)


def probe_batch_from(data: TaskBatch, size: int = 100, max_len: int | None = None) -> ProbeBatch:
    n = min(size, len(data))
    return ProbeBatch(data.prompts[:n].copy(), data.visual[:n].copy(),
                      max_len if max_len is not None else data.answers.shape[1])


def ntb_from_distributions(step_probs: list[np.ndarray], C: NumericTokenSet) -> float:
    """NTB for pinned per-example step distributions: list of (T_i, V) arrays."""
    idx = C.index()
    per_example = [p[:, idx].max(axis=1).mean() for p in step_probs if len(p)]
    if len(per_example) < len(step_probs):
        log.warning("%d zero-length generations excluded", len(step_probs) - len(per_example))
    if not per_example:
        raise ValueError("no example produced any generation step")
    return float(np.mean(per_example))


def ntb(model: TinyLmm, batch: ProbeBatch, C: NumericTokenSet, stop_token: int | None = EOA) -> float:
    """Mean over examples of the mean over greedy steps of max_{v in C} p(v | history)."""
    if len(batch) == 0:
        raise ValueError("probe batch is empty")
    _, probs, lengths = greedy_decode_batch(model, batch.prompts, batch.visual, batch.max_len, stop_token)
    return ntb_from_distributions([probs[i, :n] for i, n in enumerate(lengths)], C)


# ---------------------------------------------------------------- attribution


@dataclass
class AttributionReport:
    """Per-layer RMS logit-space deltas of the attention and MLP pathways."""

    sa: np.ndarray  # (L,)
    mlp: np.ndarray  # (L,)
    step: int | None = None
    # per answer token: sum over layers of both pathways, and the direct logit delta
    summed_delta: np.ndarray = field(default=None, repr=False)
    logit_delta: np.ndarray = field(default=None, repr=False)

    def completeness_error(self) -> float:
        return float(np.abs(self.summed_delta - self.logit_delta).max())

    def rows(self) -> list[tuple[int | None, int, str, float]]:
        out = []
        for l in range(len(self.sa)):
            out.append((self.step, l, "sa", float(self.sa[l])))
            out.append((self.step, l, "mlp", float(self.mlp[l])))
        return out


def _record(model: TinyLmm, batch: TaskBatch):
    rec: list = []
    with ag.no_tape():
        z = forward(model, batch.prompts, batch.visual, batch.answers[:, :-1], record=rec)
    r0, layers, _ = rec
    return r0.data, [(a.data, f.data) for a, f, _ in layers], z.data


def layer_attribution(base: TinyLmm, tuned: TinyLmm, batch: TaskBatch, step: int | None = None) -> AttributionReport:
    """Project each sublayer's output difference through the shared head.

    Statistics are taken under teacher forcing over the answer span.  Both
    models must share the head and embeddings; otherwise the decomposition
    does not hold.
    """
    if base.config != tuned.config:
        raise ContractError("models differ in configuration")
    for name in ("head.w", "embed.w"):
        if not np.array_equal(base.params[name], tuned.params[name]):
            raise ContractError(f"{name} differs between models; attribution decomposition is invalid")
    U = base.params["head.w"].astype(np.float64)
    r0_b, lay_b, z_b = _record(base, batch)
    r0_t, lay_t, z_t = _record(tuned, batch)
    start = batch.answer_start - 1
    span = slice(start, start + batch.answers.shape[1])
    keep = batch.answer_mask  # (B, Sa)
    L = base.config.n_layers
    sa, mlp = np.zeros(L), np.zeros(L)
    total = np.zeros(z_b[:, span].shape)
    for l in range(L):
        dza = (lay_t[l][0][:, span].astype(np.float64) - lay_b[l][0][:, span]) @ U
        dzf = (lay_t[l][1][:, span].astype(np.float64) - lay_b[l][1][:, span]) @ U
        total += dza + dzf
        sa[l] = np.sqrt((dza ** 2).sum(-1)[keep].mean())
        mlp[l] = np.sqrt((dzf ** 2).sum(-1)[keep].mean())
    dr0 = (r0_t[:, span].astype(np.float64) - r0_b[:, span]) @ U
    logit_delta = z_t[:, span].astype(np.float64) - z_b[:, span]
    return AttributionReport(sa, mlp, step, (total + dr0)[keep], logit_delta[keep])
