"""Forgetting mitigation: LoRA with per-stage merge, WiSE-FT interpolation, MoE expansion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dlab import autograd as ag
from dlab.autograd import Tensor
from dlab.groups import ConfigError
from dlab.model import MLP_WEIGHTS, LoraSpec, TinyLmm

BETA_SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)
DEFAULT_BETA = 0.3

MITIGATION_KINDS = ("none", "lora", "wise_ft", "moe", "lwf")


@dataclass
class LoraAdapter:
    """Low-rank update for a d x k weight: effective W = W0 + (alpha / r) B A."""

    a: np.ndarray  # (r, k)
    b: np.ndarray  # (d, r)
    alpha: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def n_trainable(self) -> int:
        return self.a.size + self.b.size

    def delta(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.b @ self.a)


def new_adapter(w0: np.ndarray, rank: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    d, k = w0.shape
    if not 1 <= rank <= min(d, k):
        raise ConfigError(f"LoRA rank {rank} must be in [1, {min(d, k)}]")
    bound = 1.0 / math.sqrt(k)
    a = rng.uniform(-bound, bound, (rank, k)).astype(w0.dtype)
    return LoraAdapter(a=a, b=np.zeros((d, rank), dtype=w0.dtype), alpha=alpha)


def lora_forward(x, w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """x (W0 + (alpha/r) B A) computed without materialising the sum."""
    x = np.asarray(x, dtype=w0.dtype)
    scale = np.asarray(adapter.alpha / adapter.rank, dtype=w0.dtype)
    return x @ w0 + ((x @ adapter.b) @ adapter.a) * scale


def lora_merge(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    if not adapter.b.any():
        return w0.copy()
    return (w0 + adapter.delta().astype(w0.dtype)).astype(w0.dtype)


def attach_lora(model: TinyLmm, targets, rank: int, alpha: float, rng: np.random.Generator) -> list[str]:
    """Wrap each target weight with a fresh adapter; returns the adapter parameter names."""
    added = []
    for name in sorted(targets):
        if name in model.lora:
            raise ConfigError(f"{name} already carries an adapter")
        w0 = model.params[name]
        if w0.ndim != 2:
            raise ConfigError(f"LoRA target {name} is not a matrix")
        ad = new_adapter(w0, rank, alpha, rng)
        model.params[name + ".lora_a"] = ad.a
        model.params[name + ".lora_b"] = ad.b
        model.lora[name] = LoraSpec(rank, alpha)
        added += [name + ".lora_a", name + ".lora_b"]
    return added


def adapter_of(model: TinyLmm, name: str) -> LoraAdapter:
    spec = model.lora[name]
    return LoraAdapter(model.params[name + ".lora_a"], model.params[name + ".lora_b"], spec.alpha)


def merge_lora(model: TinyLmm) -> TinyLmm:
    """Fold every adapter into its backbone weight and drop the adapters."""
    out = model.copy()
    for name in list(out.lora):
        out.params[name] = lora_merge(out.params[name], adapter_of(out, name))
        del out.params[name + ".lora_a"], out.params[name + ".lora_b"]
    out.lora = {}
    return out


def _check_same_arch(a: TinyLmm, b: TinyLmm) -> None:
    if a.config != b.config or list(a.params) != list(b.params):
        raise ConfigError("models differ in architecture or parameter names")
    for n in a.params:
        if a.params[n].shape != b.params[n].shape:
            raise ConfigError(f"shape mismatch for {n}")


def wise_ft_interpolate(base: TinyLmm, tuned: TinyLmm, beta: float) -> TinyLmm:
    """(1 - beta) * base + beta * tuned, parameter by parameter."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    _check_same_arch(base, tuned)
    out = base.copy()
    for n, wb in base.params.items():
        wt = tuned.params[n]
        if beta == 0.0:
            out.params[n] = wb.copy()
        elif beta == 1.0:
            out.params[n] = wt.copy()
        else:
            out.params[n] = ((1.0 - beta) * wb.astype(np.float64) + beta * wt.astype(np.float64)).astype(wb.dtype)
    return out


def wise_ft_sweep(base: TinyLmm, tuned: TinyLmm, betas=BETA_SWEEP) -> dict[float, TinyLmm]:
    return {b: wise_ft_interpolate(base, tuned, b) for b in betas}


# ---------------------------------------------------------------- MoE


@dataclass
class MoeLayer:
    """Two-expert soft mixture replacing one block's MLP."""

    pretrained: dict[str, np.ndarray]  # E_pt, frozen
    tuned: dict[str, np.ndarray]  # E_new
    router: np.ndarray  # (d, 2)


def moe_wrap(model: TinyLmm, layer: int) -> MoeLayer:
    """Add E_new (a copy of the block MLP) and a zero router to ``layer`` in place."""
    pre = f"block{layer}."
    if pre + "moe.router" in model.params:
        raise ConfigError(f"block {layer} is already wrapped")
    for k in MLP_WEIGHTS:
        model.params[pre + "moe." + k] = model.params[pre + k].copy()
    model.params[pre + "moe.router"] = np.zeros((model.config.d_model, 2), dtype=model.params[pre + "wup"].dtype)
    return moe_layer(model, layer)


def moe_layer(model: TinyLmm, layer: int) -> MoeLayer:
    pre = f"block{layer}."
    return MoeLayer(
        pretrained={k: model.params[pre + k] for k in MLP_WEIGHTS},
        tuned={k: model.params[pre + "moe." + k] for k in MLP_WEIGHTS},
        router=model.params[pre + "moe.router"],
    )


def moe_wrap_all(model: TinyLmm) -> list[str]:
    """Wrap every block; returns the trainable names (E_new and routers)."""
    names = []
    for l in range(model.config.n_layers):
        moe_wrap(model, l)
        names += [f"block{l}.moe.{k}" for k in (*MLP_WEIGHTS, "router")]
    return names


def moe_routing(x, layer: MoeLayer) -> np.ndarray:
    """Per-token softmax routing weights, shape (..., 2)."""
    x = np.asarray(x, dtype=layer.router.dtype)
    with ag.no_tape():
        return ag.softmax_rows(Tensor(x) @ Tensor(layer.router)).data


def _run_expert(x: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    hidden = ag.silu(x @ w["wgate"]).data * (x @ w["wup"])
    return hidden @ w["wdown"]


def moe_forward(x, layer: MoeLayer) -> np.ndarray:
    """sum_i g_i(x) E_i(x) for an already-normalised input ``x``."""
    x = np.asarray(x, dtype=layer.router.dtype)
    g = moe_routing(x, layer)
    with ag.no_tape():
        return g[..., 0:1] * _run_expert(x, layer.pretrained) + g[..., 1:2] * _run_expert(x, layer.tuned)
