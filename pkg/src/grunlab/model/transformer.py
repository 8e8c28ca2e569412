"""Toy decoder-only transformer with per-layer hidden-state hooks.

Layers are numbered 1..n_layers. ``h^(l)`` is the residual stream leaving
block ``l``; a hook registered at layer ``l`` replaces that state at one
token position per sequence before block ``l + 1`` (or the final norm) reads
it, so every later layer and every later token sees the replaced value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError, LengthError
from ..nn import tensor as T
from ..nn.tensor import Tensor, no_grad

Hook = Callable[[Tensor], Tensor]

_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    max_seq_len: int = 128
    ff_mult: int = 4

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "ff_mult"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_model * config.ff_mult
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_in": (d, ff), p + "mlp.b_in": (ff,),
            p + "mlp.w_out": (ff, d), p + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, config.vocab_size)})
    return shapes


class Model:
    """Parameter container; the math lives in :func:`forward`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(expected) != set(params):
            raise ContractError("parameter names do not match the model config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            params[name] = Tensor(arr.astype(dtype), dtype=dtype, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def requires_grad_(self, flag: bool = True) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def copy(self, dtype=None) -> Model:
        params = {
            k: Tensor(v.data.astype(dtype or v.dtype, copy=True), dtype=dtype or v.dtype, name=k)
            for k, v in self.params.items()
        }
        return Model(self.config, params)

    def checksum(self) -> str:
        return T.parameters_checksum(self.params[k] for k in sorted(self.params))


# ------------------------------------------------------------------ caching
class KVCache:
    """Per-layer keys/values of already-processed positions (inference only)."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    @property
    def length(self) -> int:
        k = self.keys[0]
        return 0 if k is None else k.shape[2]


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: list[Tensor]
    # layer -> (rows, d) states at hook positions before replacement
    pre_hook: dict[int, Tensor] = field(default_factory=dict)
    # batch indices whose hook position fell inside this call
    hook_rows: np.ndarray | None = None

    def layer(self, l: int) -> Tensor:
        return self.hidden[l - 1]


def _attention(model: Model, i: int, x: Tensor, start: int, cache: KVCache | None) -> Tensor:
    cfg = model.config
    B, n, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim
    p = f"blocks.{i}.attn."
    qkv = x @ model[p + "w_qkv"] + model[p + "b_qkv"]
    qkv = T.transpose(qkv.reshape(B, n, 3, H, dh), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if cache is not None:
        if cache.keys[i] is not None:
            k = Tensor(np.concatenate([cache.keys[i], k.data], axis=2), dtype=k.dtype)
            v = Tensor(np.concatenate([cache.values[i], v.data], axis=2), dtype=v.dtype)
        cache.keys[i], cache.values[i] = k.data, v.data
    S = k.shape[2]
    scores = (q @ T.swapaxes(k, -1, -2)) * x.dtype.type(1.0 / math.sqrt(dh))
    q_pos = start + np.arange(n)[:, None]
    blocked = np.arange(S)[None, :] > q_pos
    if blocked.any():
        scores = scores + (blocked * _MASK_VALUE).astype(x.dtype)
    attn = T.softmax(scores, axis=-1)
    out = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, n, d)
    return out @ model[p + "w_out"] + model[p + "b_out"]


def _mlp(model: Model, i: int, x: Tensor) -> Tensor:
    p = f"blocks.{i}.mlp."
    h = T.gelu(x @ model[p + "w_in"] + model[p + "b_in"])
    return h @ model[p + "w_out"] + model[p + "b_out"]


def forward(
    model: Model,
    tokens,
    hooks: Mapping[int, Hook] | None = None,
    hook_positions=None,
    cache: KVCache | None = None,
) -> ForwardOutput:
    """Run the model on ``tokens`` of shape (T,) or (B, T).

    ``hook_positions`` gives, per sequence, the absolute position at which
    hooks fire (default: the final position of ``tokens``). Sequences whose
    hook position lies outside this call are left untouched.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, n = tokens.shape
    start = cache.length if cache is not None else 0
    if n == 0:
        raise ContractError("forward needs at least one token")
    if start + n > cfg.max_seq_len:
        raise LengthError(f"sequence length {start + n} exceeds max_seq_len={cfg.max_seq_len}")
    if cache is not None and T.is_grad_enabled() and any(p.requires_grad for p in model.parameters()):
        raise ContractError("KV caching is for inference; wrap the call in no_grad()")
    hooks = dict(hooks or {})
    for l in hooks:
        if not 1 <= l <= cfg.n_layers:
            raise ContractError(f"hook layer {l} outside 1..{cfg.n_layers}")

    if hook_positions is None:
        hook_positions = np.full(B, start + n - 1)
    hook_positions = np.asarray(hook_positions, dtype=np.int64).reshape(-1)
    if hook_positions.shape[0] != B:
        raise ContractError(f"hook_positions has {hook_positions.shape[0]} entries for batch {B}")
    in_chunk = (hook_positions >= start) & (hook_positions < start + n)
    rows = np.nonzero(in_chunk)[0]
    cols = hook_positions[rows] - start

    x = T.embedding(model["tok_emb"], tokens) + model["pos_emb"][start:start + n]
    hidden: list[Tensor] = []
    pre_hook: dict[int, Tensor] = {}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        x = x + _attention(model, i, T.layer_norm(x, model[p + "ln1.g"], model[p + "ln1.b"]), start, cache)
        x = x + _mlp(model, i, T.layer_norm(x, model[p + "ln2.g"], model[p + "ln2.b"]))
        layer = i + 1
        if layer in hooks and rows.size:
            h_rows = x[rows, cols]
            pre_hook[layer] = h_rows
            x = T.index_put(x, (rows, cols), hooks[layer](h_rows))
        hidden.append(x)
    x = T.layer_norm(x, model["ln_f.g"], model["ln_f.b"])
    logits = x @ model["head.w"]
    return ForwardOutput(logits=logits, hidden=hidden, pre_hook=pre_hook, hook_rows=rows)


# ------------------------------------------------------------------ batches
@dataclass
class Batch:
    """Right-padded prompt+answer sequences with an answer-only loss mask."""

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    prompt_lens: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def last_prompt_pos(self) -> np.ndarray:
        return self.prompt_lens - 1


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], pad_id: int = 0) -> Batch:
    if not pairs:
        raise ContractError("make_batch needs at least one (prompt, answer) pair")
    seqs, plens, alens = [], [], []
    for prompt, answer in pairs:
        if len(prompt) == 0:
            raise ContractError("empty prompt")
        if len(answer) == 0:
            raise ContractError("empty answer")
        seqs.append(list(prompt) + list(answer))
        plens.append(len(prompt))
        alens.append(len(answer))
    n = max(len(s) for s in seqs) - 1
    B = len(seqs)
    tokens = np.full((B, n), pad_id, dtype=np.int64)
    targets = np.full((B, n), pad_id, dtype=np.int64)
    mask = np.zeros((B, n), dtype=np.float64)
    for b, s in enumerate(seqs):
        tokens[b, : len(s) - 1] = s[:-1]
        targets[b, : len(s) - 1] = s[1:]
        mask[b, plens[b] - 1: plens[b] - 1 + alens[b]] = 1.0
    return Batch(tokens, targets, mask, np.asarray(plens, dtype=np.int64))


def answer_nll(
    model: Model, batch: Batch, hooks: Mapping[int, Hook] | None = None
) -> tuple[Tensor, ForwardOutput]:
    """Per-sequence mean negative log-likelihood over answer tokens, shape (B,)."""
    out = forward(model, batch.tokens, hooks, hook_positions=batch.last_prompt_pos)
    per_pos = T.cross_entropy(out.logits, batch.targets, batch.mask, reduction="none")
    counts = batch.mask.sum(axis=1).astype(out.logits.dtype)
    return per_pos.sum(axis=1) / counts, out


def answer_logprob(
    model: Model, batch: Batch, hooks: Mapping[int, Hook] | None = None
) -> tuple[Tensor, ForwardOutput]:
    """Per-sequence summed log-probability of the answer tokens, shape (B,)."""
    out = forward(model, batch.tokens, hooks, hook_positions=batch.last_prompt_pos)
    per_pos = T.cross_entropy(out.logits, batch.targets, batch.mask, reduction="none")
    return -per_pos.sum(axis=1), out


def sequence_nll(model: Model, prompt, answer, hooks: Mapping[int, Hook] | None = None) -> Tensor:
    """Mean token NLL of ``answer`` given ``prompt``; prompt positions excluded."""
    if len(answer) == 0:
        raise ContractError("sequence_nll needs a non-empty answer")
    if len(prompt) + len(answer) - 1 > model.config.max_seq_len:
        raise LengthError("prompt + answer exceeds max_seq_len")
    nll, _ = answer_nll(model, make_batch([(prompt, answer)]), hooks)
    return nll[0]


# --------------------------------------------------------------- generation
def generate_greedy(
    model: Model,
    prompt: Sequence[int],
    max_new: int,
    hooks: Mapping[int, Hook] | None = None,
    eot_id: int = 2,
) -> list[int]:
    """Argmax decoding with a KV cache; hooks fire once at the last prompt token."""
    return generate_batch(model, [prompt], max_new, hooks, eot_id)[0]


def generate_batch(
    model: Model,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    hooks: Mapping[int, Hook] | None = None,
    eot_id: int = 2,
) -> list[list[int]]:
    """Greedy continuation of every prompt; prompts of equal length share a batch."""
    results: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        if len(p) == 0:
            raise ContractError("generate needs a non-empty prompt")
        groups.setdefault(len(p), []).append(idx)
    for plen in sorted(groups):
        members = groups[plen]
        batch = np.asarray([prompts[i] for i in members], dtype=np.int64)
        for i, seq in zip(members, _generate_same_length(model, batch, max_new, hooks, eot_id)):
            results[i] = seq
    return results  # type: ignore[return-value]


def _generate_same_length(model, batch: np.ndarray, max_new: int, hooks, eot_id: int):
    B, plen = batch.shape
    out: list[list[int]] = [[] for _ in range(B)]
    if max_new <= 0:
        return out
    if plen > model.config.max_seq_len:
        raise LengthError(f"prompt length {plen} exceeds max_seq_len={model.config.max_seq_len}")
    budget = min(max_new, model.config.max_seq_len - plen + 1)
    cache = KVCache(model.config.n_layers)
    positions = np.full(B, plen - 1)
    done = np.zeros(B, dtype=bool)
    with no_grad():
        res = forward(model, batch, hooks, hook_positions=positions, cache=cache)
        for step in range(budget):
            nxt = res.logits.data[:, -1, :].argmax(axis=-1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == eot_id:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
            if done.all() or step == budget - 1 or cache.length >= model.config.max_seq_len:
                break
            res = forward(model, nxt[:, None], hooks, hook_positions=positions, cache=cache)
    return out


def generate_uncached(
    model: Model,
    prompt: Sequence[int],
    max_new: int,
    hooks: Mapping[int, Hook] | None = None,
    eot_id: int = 2,
) -> list[int]:
    """Reference decoder that re-runs the full sequence for every new token."""
    seq = list(prompt)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            if len(seq) > model.config.max_seq_len:
                break
            res = forward(model, np.asarray(seq), hooks, hook_positions=[len(prompt) - 1])
            nxt = int(res.logits.data[0, -1].argmax())
            if nxt == eot_id:
                break
            out.append(nxt)
            seq.append(nxt)
    return out
