"""Synthetic multimodal tasks over a fixed 64-token vocabulary.

Every example shows a *scene*: four visual tokens of width 8 that jointly
encode an object class, an object count, an attribute, and a clock reading.
Tasks differ only in the prompt and in which scene property the answer names,
so tuning on one task perturbs the shared machinery the others rely on.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from dlab.model import EOA
from dlab.objectives import TaskBatch

# vocabulary layout
TASK_TOKEN = {"classify": 1, "count": 2, "yesno": 3, "ocr": 4, "clock": 5, "caption": 6}
DIGITS = tuple(range(7, 17))  # "zero" .. "nine"
LETTERS = tuple(range(17, 25))
HOURS = tuple(range(25, 29))
MINUTES = tuple(range(29, 33))
CLASS_NAMES = tuple(range(33, 41))
ATTRIBUTES = tuple(range(41, 45))
YES, NO = 45, 46
ARTICLE = 47
GLYPHS = tuple(range(48, 56))
FILLERS = tuple(range(56, 64))
VOCAB_SIZE = 64

NUMERIC_TOKENS = frozenset(DIGITS)

N_CLASSES, N_ATTRS, N_HOURS, N_MINUTES = 8, 4, 4, 4
MAX_COUNT = 9
N_VISUAL, D_VISUAL = 4, 8
FEATURE_NOISE = 0.1
CAPTION_COUNT_RATE = 0.1

KINDS = ("classify", "count", "yesno", "ocr", "clock", "caption")
TARGET_KINDS = ("classify", "count", "yesno", "ocr", "clock")
HELD_OUT_KINDS = ("caption",)

PROMPT_LEN = {"classify": 1, "count": 1, "yesno": 2, "ocr": 5, "clock": 1, "caption": 1}
ANSWER_LEN = {"classify": 2, "count": 2, "yesno": 2, "ocr": 2, "clock": 3, "caption": 4}

# answer-label universe per kind; a spec may restrict to a subset
LABELS = {
    "classify": tuple(range(N_CLASSES)),
    "count": tuple(range(1, MAX_COUNT + 1)),
    "yesno": (0, 1),
    "ocr": tuple(range(len(GLYPHS))),
    "clock": tuple(range(N_HOURS * N_MINUTES)),
    "caption": tuple(range(N_CLASSES * N_ATTRS)),
}

SEQUENCES = {
    "default": ("classify", "count", "yesno", "ocr", "clock"),
    "second": ("yesno", "classify", "ocr", "clock", "count"),
    "third": ("clock", "ocr", "yesno", "count", "classify"),
}


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    seed: int = 0
    train_n: int = 512
    eval_n: int = 256
    labels: tuple[int, ...] | None = None  # restrict the answer label set (pre-training coverage)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.train_n < 0 or self.eval_n < 1:
            raise ValueError("train_n must be >= 0 and eval_n >= 1")


@dataclass
class Dataset:
    name: str
    train: TaskBatch
    eval: TaskBatch
    spec: SyntheticTaskSpec = field(repr=False, default=None)


def _stream(*keys) -> np.random.Generator:
    words = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(words)


def scene_features(cls, count, attr, hour, minute, rng: np.random.Generator) -> np.ndarray:
    """Visual features (n, 4, 8) for arrays of scene properties."""
    n = len(cls)
    v = np.zeros((n, N_VISUAL, D_VISUAL))
    rows = np.arange(n)
    v[rows, 0, cls] = 1.0
    v[:, 1, :] = (np.arange(D_VISUAL)[None, :] < (np.asarray(count)[:, None] - 1)).astype(float)
    v[rows, 2, attr] = 1.0
    v[rows, 2, N_ATTRS + np.asarray(hour)] = 1.0
    v[rows, 3, minute] = 1.0
    v[:, 3, N_MINUTES:] = rng.normal(0.0, 0.5, (n, D_VISUAL - N_MINUTES))
    v += rng.normal(0.0, FEATURE_NOISE, v.shape)
    return v.astype(np.float32)


def _make_split(kind: str, n: int, labels: tuple[int, ...], rng: np.random.Generator) -> TaskBatch:
    lab = rng.choice(np.asarray(labels), size=n)
    cls = rng.integers(0, N_CLASSES, n)
    count = rng.integers(1, MAX_COUNT + 1, n)
    attr = rng.integers(0, N_ATTRS, n)
    hour = rng.integers(0, N_HOURS, n)
    minute = rng.integers(0, N_MINUTES, n)
    task = TASK_TOKEN[kind]
    if kind == "classify":
        cls = lab
        prompts = np.full((n, 1), task)
        answers = np.array([[LETTERS[c], EOA] for c in cls])
    elif kind == "count":
        count = lab
        prompts = np.full((n, 1), task)
        answers = np.array([[DIGITS[k], EOA] for k in count])
    elif kind == "yesno":
        # query a class; the answer is yes iff the scene shows it
        query = rng.integers(0, N_CLASSES, n)
        other = (query + rng.integers(1, N_CLASSES, n)) % N_CLASSES
        cls = np.where(lab == 1, query, other)
        prompts = np.stack([np.full(n, task), np.asarray(CLASS_NAMES)[query]], axis=1)
        answers = np.array([[YES if y else NO, EOA] for y in lab])
    elif kind == "ocr":
        # one glyph hidden among fillers; the answer copies it
        slot = rng.integers(0, 4, n)
        fill = rng.choice(np.asarray(FILLERS), size=(n, 4))
        fill[np.arange(n), slot] = np.asarray(GLYPHS)[lab]
        prompts = np.concatenate([np.full((n, 1), task), fill], axis=1)
        answers = np.array([[GLYPHS[g], EOA] for g in lab])
    elif kind == "clock":
        hour, minute = lab // N_MINUTES, lab % N_MINUTES
        prompts = np.full((n, 1), task)
        answers = np.array([[HOURS[h], MINUTES[m], EOA] for h, m in zip(hour, minute)])
    else:  # caption
        # a minority of captions name the object count instead of the attribute
        cls, attr = lab // N_ATTRS, lab % N_ATTRS
        counted = rng.permutation(n) < int(CAPTION_COUNT_RATE * n)  # exact share, so the bound holds for any n
        prompts = np.full((n, 1), task)
        answers = np.array([[ARTICLE, DIGITS[k] if c_ else ATTRIBUTES[a], CLASS_NAMES[c], EOA]
                            for c, a, k, c_ in zip(cls, attr, count, counted)])
        numeric = np.isin(answers, list(NUMERIC_TOKENS)).mean() if n else 0.0
        assert numeric < 0.05, "caption answers must carry < 5% numeric tokens"
    visual = scene_features(cls, count, attr, hour, minute, rng)
    return TaskBatch(prompts.reshape(n, PROMPT_LEN[kind]), visual, answers.reshape(n, ANSWER_LEN[kind]))


def generate_task(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic in ``spec``; train and eval come from disjoint random streams."""
    labels = spec.labels if spec.labels is not None else LABELS[spec.kind]
    train = _make_split(spec.kind, spec.train_n, labels, _stream(spec.seed, spec.kind, "train"))
    # evaluation always covers the full label set
    evals = _make_split(spec.kind, spec.eval_n, LABELS[spec.kind], _stream(spec.seed, spec.kind, "eval"))
    return Dataset(spec.kind, train, evals, spec)


def count_from_features(visual: np.ndarray) -> np.ndarray:
    """Reference decoder for the count channel (thermometer code)."""
    return (visual[:, 1, :] > 0.5).sum(axis=1) + 1
