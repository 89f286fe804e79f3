"""Tiny multimodal decoder: perception -> projector -> pre-norm decoder -> LM head.

Sequence layout is ``[prompt tokens; visual tokens; answer tokens]``.  There is
no positional embedding and no final norm, so the logits read the last
residual state directly and the residual stream telescopes exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from dlab import autograd as ag
from dlab.autograd import ContractError, Tensor

EOA = 0  # end-of-answer token id

BLOCK_WEIGHTS = ("wq", "wk", "wv", "wo", "wgate", "wup", "wdown", "ln1", "ln2")
MLP_WEIGHTS = ("wgate", "wup", "wdown")


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_head: int = 8
    d_hidden: int = 64
    vocab_size: int = 64
    n_visual: int = 4
    d_visual: int = 8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not isinstance(v, int) or v < (0 if k == "n_layers" else 1):
                raise ContractError(f"invalid {k}={v!r}")

    @property
    def d_attn(self) -> int:
        return self.n_heads * self.d_head


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names in checkpoint order."""
    d, da, dh = cfg.d_model, cfg.d_attn, cfg.d_hidden
    shapes = {
        "perception.w": (cfg.d_visual, cfg.d_visual),
        "projector.w": (cfg.d_visual, d),
        "embed.w": (cfg.vocab_size, d),
        "head.w": (d, cfg.vocab_size),
    }
    for l in range(cfg.n_layers):
        shapes.update({
            f"block{l}.wq": (d, da),
            f"block{l}.wk": (d, da),
            f"block{l}.wv": (d, da),
            f"block{l}.wo": (da, d),
            f"block{l}.wgate": (d, dh),
            f"block{l}.wup": (d, dh),
            f"block{l}.wdown": (dh, d),
            f"block{l}.ln1": (d,),
            f"block{l}.ln2": (d,),
        })
    return shapes


@dataclass
class LoraSpec:
    rank: int
    alpha: float


@dataclass
class TinyLmm:
    """Model state: configuration plus a flat table of named float32 arrays.

    ``lora`` maps a wrapped weight name to its adapter hyper-parameters; the
    adapter matrices live in ``params`` as ``<name>.lora_a`` / ``<name>.lora_b``.
    MoE-wrapped blocks carry ``block{l}.moe.*`` entries.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    lora: dict[str, LoraSpec] = field(default_factory=dict)

    def copy(self) -> "TinyLmm":
        return TinyLmm(self.config, {k: v.copy() for k, v in self.params.items()},
                       copy.deepcopy(self.lora))

    def names(self) -> list[str]:
        return list(self.params)

    def moe_blocks(self) -> list[int]:
        return sorted({int(n[5:n.index(".")]) for n in self.params if ".moe." in n})

    def block(self, l: int) -> dict[str, np.ndarray]:
        return {k: self.params[f"block{l}.{k}"] for k in BLOCK_WEIGHTS}

    def astype(self, dtype) -> "TinyLmm":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> TinyLmm:
    params = {}
    resid_scale = 1.0 / math.sqrt(2 * max(cfg.n_layers, 1))
    for name, shape in param_shapes(cfg).items():
        kind = name.split(".")[-1]
        if kind in ("ln1", "ln2"):
            w = np.ones(shape)
        elif name == "embed.w":
            w = rng.normal(0.0, 1.0, shape)
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            if kind in ("wo", "wdown"):
                w *= resid_scale
        params[name] = w.astype(np.float32)
    return TinyLmm(cfg, params)


# ---------------------------------------------------------------- sublayers


class _Weights:
    """Name -> Tensor view used by the forward pass (tape leaves or constants)."""

    def __init__(self, model: TinyLmm, leaves: dict[str, Tensor] | None = None):
        self.model = model
        self.leaves = leaves or {}
        self._const: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self.leaves.get(name)
        if t is not None:
            return t
        t = self._const.get(name)
        if t is None:
            t = self._const[name] = Tensor(self.model.params[name])
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.model.params

    def linear(self, x: Tensor, name: str) -> Tensor:
        out = x @ self[name]
        spec = self.model.lora.get(name)
        if spec is not None:
            out = out + ((x @ self[name + ".lora_b"]) @ self[name + ".lora_a"]) * (spec.alpha / spec.rank)
        return out


def causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))


def _attention(x: Tensor, W: _Weights, prefix: str, cfg: ModelConfig, causal: bool = True) -> Tensor:
    q = W.linear(x, prefix + "wq")
    k = W.linear(x, prefix + "wk")
    v = W.linear(x, prefix + "wv")
    s = x.shape[-2]
    mask = causal_mask(s) if causal else None
    dk = cfg.d_head
    heads = []
    for h in range(cfg.n_heads):
        sl = (Ellipsis, slice(h * dk, (h + 1) * dk))
        qh, kh, vh = q[sl], k[sl], v[sl]
        scores = qh @ ag.swapaxes(kh, -1, -2)
        attn = ag.softmax_rows(scores, 1.0 / math.sqrt(dk), mask)
        heads.append(attn @ vh)
    mixed = heads[0] if len(heads) == 1 else ag.concat(heads, axis=-1)
    return W.linear(mixed, prefix + "wo")


def _expert(x: Tensor, W: _Weights, prefix: str) -> Tensor:
    hidden = ag.silu(W.linear(x, prefix + "wgate")) * W.linear(x, prefix + "wup")
    return W.linear(hidden, prefix + "wdown")


def _mlp(x: Tensor, W: _Weights, l: int) -> Tensor:
    prefix = f"block{l}."
    if prefix + "moe.router" not in W:
        return _expert(x, W, prefix)
    g = ag.softmax_rows(x @ W[prefix + "moe.router"])
    return g[..., 0:1] * _expert(x, W, prefix) + g[..., 1:2] * _expert(x, W, prefix + "moe.")


def _check_shape(x: np.ndarray, d: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != d:
        raise ContractError(f"expected (..., S, {d}) input, got {x.shape}")


def attention_sublayer(x, model: TinyLmm, layer: int, causal: bool = True, normalize: bool = True) -> np.ndarray:
    """MHA(LN(x)) for one block; ``normalize=False`` skips the norm."""
    x = np.asarray(x)
    _check_shape(x, model.config.d_model)
    W = _Weights(model)
    with ag.no_tape():
        t = Tensor(x)
        if normalize:
            t = ag.rms_norm(t, W[f"block{layer}.ln1"])
        return _attention(t, W, f"block{layer}.", model.config, causal).data


def mlp_sublayer(x, model: TinyLmm, layer: int, normalize: bool = True) -> np.ndarray:
    """MLP(LN(x)) for one block; ``normalize=False`` skips the norm."""
    x = np.asarray(x)
    _check_shape(x, model.config.d_model)
    W = _Weights(model)
    with ag.no_tape():
        t = Tensor(x)
        if normalize:
            t = ag.rms_norm(t, W[f"block{layer}.ln2"])
        return _mlp(t, W, layer).data


# ---------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    r: np.ndarray  # (L+1, S, d)
    a: np.ndarray  # (L, S, d)
    f: np.ndarray  # (L, S, d)
    z: np.ndarray  # (S, V)


def _as_ids(tokens, batch: int, vocab: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = np.broadcast_to(ids, (batch, ids.shape[0]))
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range [0, {vocab})")
    return ids


def forward(
    model: TinyLmm,
    prompt,
    visual,
    answer=None,
    leaves: dict[str, Tensor] | None = None,
    record: list | None = None,
) -> Tensor:
    """Batched forward pass returning logits of shape (B, S, V).

    ``prompt`` is (B, Sp) or (Sp,) ids, ``visual`` (B, S_v, d_v) or (S_v, d_v),
    ``answer`` optional (B, Sa) ids appended after the visual tokens.  If
    ``record`` is a list, it receives ``(r0, [(a, f, r), ...], rL)`` tensors.
    """
    cfg = model.config
    visual = np.asarray(visual)
    if visual.ndim == 2:
        visual = visual[None]
    if visual.shape[1:] != (cfg.n_visual, cfg.d_visual):
        raise ContractError(f"visual features must be (S_v={cfg.n_visual}, d_v={cfg.d_visual}), got {visual.shape}")
    b = visual.shape[0]
    visual = visual.astype(model.params["projector.w"].dtype, copy=False)
    W = _Weights(model, leaves)
    parts = []
    p_ids = _as_ids(prompt, b, cfg.vocab_size)
    if p_ids.shape[1]:
        parts.append(ag.take_rows(W["embed.w"], p_ids))
    v = ag.silu(Tensor(visual) @ W["perception.w"])
    parts.append(v @ W["projector.w"])
    if answer is not None:
        a_ids = _as_ids(answer, b, cfg.vocab_size)
        if a_ids.shape[1]:
            parts.append(ag.take_rows(W["embed.w"], a_ids))
    r = parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)
    r0 = r
    layers = []
    for l in range(cfg.n_layers):
        pre = f"block{l}."
        a = _attention(ag.rms_norm(r, W[pre + "ln1"]), W, pre, cfg)
        f = _mlp(ag.rms_norm(r + a, W[pre + "ln2"]), W, l)
        r = r + a + f
        layers.append((a, f, r))
    z = r @ W["head.w"]
    if record is not None:
        record.extend([r0, layers, r])
    return z


def forward_trace(model: TinyLmm, text_tokens, visual_features, answer_tokens=None) -> ForwardTrace:
    """Single-example forward pass keeping every residual-stream component."""
    rec: list = []
    with ag.no_tape():
        z = forward(model, [list(text_tokens)], visual_features, None if answer_tokens is None else [list(answer_tokens)], record=rec)
    r0, layers, _ = rec
    d = model.config.d_model
    s = r0.shape[1]
    empty = np.zeros((0, s, d), r0.data.dtype)
    return ForwardTrace(
        r=np.stack([r0.data[0]] + [r.data[0] for _, _, r in layers]),
        a=np.stack([a.data[0] for a, _, _ in layers]) if layers else empty,
        f=np.stack([f.data[0] for _, f, _ in layers]) if layers else empty,
        z=z.data[0],
    )


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode_batch(model: TinyLmm, prompts, visual, max_len: int, stop_token: int | None = EOA):
    """Greedy decoding for a batch sharing one prompt length.

    Returns ``(tokens, probs, lengths)``: tokens (B, T) int, per-step next-token
    distributions (B, T, V), and each row's length up to and including the
    first stop token.  Ties go to the lowest token id.
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    visual = np.asarray(visual)
    if visual.ndim == 2:
        visual = visual[None]
    b = visual.shape[0]
    prompts = _as_ids(prompts, b, model.config.vocab_size)
    gen = np.zeros((b, 0), dtype=np.int64)
    probs = []
    lengths = np.full(b, -1)
    with ag.no_tape():
        for step in range(max_len):
            z = forward(model, prompts, visual, gen).data[:, -1, :]
            p = _softmax_np(z.astype(np.float64))
            nxt = np.argmax(z, axis=-1)
            probs.append(p)
            gen = np.concatenate([gen, nxt[:, None]], axis=1)
            if stop_token is not None:
                hit = (nxt == stop_token) & (lengths < 0)
                lengths[hit] = step + 1
                if (lengths >= 0).all():
                    break
    lengths[lengths < 0] = gen.shape[1]
    return gen, np.stack(probs, axis=1), lengths


def greedy_decode(model: TinyLmm, prompt, visual_features, max_len: int, stop_token: int | None = EOA) -> list[int]:
    """Greedy generation for one example; the stop token, if reached, is included."""
    tokens, _, lengths = greedy_decode_batch(model, [list(prompt)], visual_features, max_len, stop_token)
    return tokens[0, : lengths[0]].tolist()
