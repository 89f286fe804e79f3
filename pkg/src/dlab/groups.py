"""Named parameter groups, freeze masks, and the masked Adam optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dlab.model import TinyLmm


class ConfigError(ValueError):
    pass


GROUP_NAMES = (
    "full",
    "vision",
    "projector",
    "vision+projector",
    "llm",
    "sa_proj",
    "sa_proj_qkv",
    "mlp",
    "mlp_gate_up",
)

_BLOCK_KEYS = {
    "sa_proj": ("wq", "wk", "wv", "wo"),
    "sa_proj_qkv": ("wq", "wk", "wv"),
    "mlp": ("wgate", "wup", "wdown"),
    "mlp_gate_up": ("wgate", "wup"),
    "llm": ("wq", "wk", "wv", "wo", "wgate", "wup", "wdown"),
}


@dataclass(frozen=True)
class ParamGroup:
    """A group name, or a composite of several (``members``)."""

    name: str
    members: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "ParamGroup":
        """Accepts one group name or a comma-separated composite."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"empty group; valid names: {', '.join(GROUP_NAMES)}")
        for p in parts:
            if p not in GROUP_NAMES:
                raise ConfigError(f"unknown group {p!r}; valid names: {', '.join(GROUP_NAMES)}")
        if len(parts) == 1:
            return cls(parts[0])
        return cls("composite", tuple(parts))

    @classmethod
    def composite(cls, *names: str) -> "ParamGroup":
        return cls("composite", tuple(names))

    def __str__(self) -> str:
        return ",".join(self.members) if self.members else self.name


def resolve_group(group: ParamGroup | str, model: TinyLmm) -> set[str]:
    if isinstance(group, str):
        group = ParamGroup.parse(group)
    if group.name == "composite":
        out: set[str] = set()
        for m in group.members:
            if m not in GROUP_NAMES:
                raise ConfigError(f"unknown composite member {m!r}")
            out |= resolve_group(ParamGroup(m), model)
        return out
    name = group.name
    base = [n for n in model.params if ".lora_" not in n and ".moe." not in n]
    if name == "full":
        return set(base)
    if name == "vision":
        return {"perception.w"}
    if name == "projector":
        return {"projector.w"}
    if name == "vision+projector":
        return {"perception.w", "projector.w"}
    if name in _BLOCK_KEYS:
        keys = _BLOCK_KEYS[name]
        return {f"block{l}.{k}" for l in range(model.config.n_layers) for k in keys}
    raise ConfigError(f"unknown group {name!r}; valid names: {', '.join(GROUP_NAMES)}")


def count_scalars(model: TinyLmm, names) -> int:
    return sum(model.params[n].size for n in names)


@dataclass(frozen=True)
class FreezeMask:
    trainable: frozenset[str]

    @classmethod
    def of(cls, names) -> "FreezeMask":
        return cls(frozenset(names))

    def validate(self, model: TinyLmm) -> None:
        unknown = sorted(self.trainable - set(model.params))
        if unknown:
            raise ConfigError(f"unknown parameter names in mask: {unknown}")


def lr_at(step: int, total: int, peak: float, warmup_frac: float = 0.03) -> float:
    """Linear warm-up over ``warmup_frac`` of ``total`` then cosine decay to zero."""
    warm = max(1, math.ceil(warmup_frac * total))
    if step < warm:
        return peak * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(1.0, progress)))


class Adam:
    """Adam over an explicit list of trainable names.

    Parameters outside ``mask`` are never handed to the update rule, and
    :meth:`step` verifies afterwards that they are byte-identical to a
    snapshot taken at construction.
    """

    def __init__(self, model: TinyLmm, mask: FreezeMask, lr: float = 5e-3, total_steps: int = 1,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, warmup_frac: float = 0.03,
                 check_frozen: bool = True):
        mask.validate(model)
        self.model = model
        self.names = [n for n in model.params if n in mask.trainable]
        self.lr, self.total, self.warmup = lr, total_steps, warmup_frac
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(model.params[n]) for n in self.names}
        self.v = {n: np.zeros_like(model.params[n]) for n in self.names}
        self._frozen = (
            {n: v.copy() for n, v in model.params.items() if n not in mask.trainable} if check_frozen else None
        )

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = lr_at(self.t, self.total, self.lr, self.warmup)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            self.model.params[n] = (self.model.params[n] - upd).astype(self.model.params[n].dtype)
        if self._frozen is not None:
            for n, snap in self._frozen.items():
                if not np.array_equal(self.model.params[n], snap):
                    raise AssertionError(f"frozen parameter {n} changed")
