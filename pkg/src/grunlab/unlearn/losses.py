"""Forgetting objectives and the gate supervision loss.

Every loss takes already-built :class:`Batch` objects and the hook map the
forward pass should use. Pass ``trace={}`` to collect the forward outputs and
per-split NLLs the trainer needs for logging and the gate loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from ..model.transformer import Batch, Model, answer_logprob, answer_nll, forward, make_batch
from ..nn import tensor as T
from ..nn.tensor import Tensor, no_grad

METHODS = ("ga", "gd", "npo", "idk", "rmu")
MODES = ("grun", "reft_only", "grun_no_gate_loss", "vanilla")
GATE_EPS = 1e-7


@dataclass
class UnlearnConfig:
    method: str = "gd"
    lam: float = 1.0
    beta: float = 0.1
    rmu_layer: int | None = None      # None: middle gated layer
    rmu_coeff: float = 10.0
    rmu_alpha: float = 100.0
    epochs: int = 40
    early_stop_tau: float | None = None  # None: 2 ln(vocab)
    mode: str = "grun"
    lr: float = 1e-2
    rank: int = 4
    gate: str = "linear"
    gate_hidden: int = 16
    batch_size: int = 16
    layers: str | list[int] = "default"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        for name in ("beta", "rmu_coeff", "rmu_alpha", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.early_stop_tau is not None and not self.early_stop_tau > 0:
            raise ConfigError(f"early_stop_tau must be positive, got {self.early_stop_tau}")
        if self.epochs < 1 or self.batch_size < 1 or self.rank < 1:
            raise ConfigError("epochs, batch_size and rank must be at least 1")
        if self.gate not in ("linear", "mlp"):
            raise ConfigError(f"unknown gate kind {self.gate!r}")

    def tau(self, vocab_size: int) -> float:
        return self.early_stop_tau if self.early_stop_tau is not None else 2.0 * math.log(vocab_size)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _stash(trace, key, value):
    if trace is not None:
        trace[key] = value


def _retain_term(model, hooks, retain: Batch | None, lam: float, trace) -> Tensor | None:
    if retain is None:
        if lam != 0:
            raise ContractError("retain batch is required when lambda > 0")
        return None
    nll, out = answer_nll(model, retain, hooks)
    _stash(trace, "retain_out", out)
    _stash(trace, "retain_nll", float(nll.data.mean()))
    return nll.mean() * lam


def _combine(forget: Tensor, retain: Tensor | None) -> Tensor:
    return forget if retain is None else forget + retain


def gd_loss(model: Model, hooks, target: Batch, retain: Batch | None, lam: float = 1.0,
            trace: dict | None = None) -> Tensor:
    """-mean NLL(target) + lam * mean NLL(retain). ``lam=0`` is gradient ascent."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    nll, out = answer_nll(model, target, hooks)
    _stash(trace, "target_out", out)
    _stash(trace, "target_nll", float(nll.data.mean()))
    return _combine(-nll.mean(), _retain_term(model, hooks, retain, lam, trace))


def npo_forget_term(logp: Tensor, ref_logp, beta: float) -> Tensor:
    """(2/beta) * mean softplus(beta * (log p_theta - log p_ref))."""
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    ref = np.asarray(ref_logp, dtype=logp.dtype)
    return T.softplus((logp - ref) * beta).mean() * (2.0 / beta)


def npo_loss(model: Model, hooks, ref_logp, target: Batch, retain: Batch | None,
             lam: float = 1.0, beta: float = 0.1, trace: dict | None = None) -> Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    logp, out = answer_logprob(model, target, hooks)
    _stash(trace, "target_out", out)
    counts = target.mask.sum(axis=1)
    _stash(trace, "target_nll", float((-logp.data / counts).mean()))
    forget = npo_forget_term(logp, ref_logp, beta)
    return _combine(forget, _retain_term(model, hooks, retain, lam, trace))


def reference_logprobs(model: Model, hooks, batch: Batch) -> np.ndarray:
    """Per-example answer log-probabilities under a frozen reference."""
    with no_grad():
        logp, _ = answer_logprob(model, batch, hooks)
    return logp.data.copy()


def assign_templates(indices: Sequence[int], n_templates: int) -> list[int]:
    if n_templates < 1:
        raise ConfigError("refusal template pool is empty")
    return [int(i) % n_templates for i in indices]


def idk_loss(model: Model, hooks, target_prompts: Sequence[Sequence[int]], indices: Sequence[int],
             retain: Batch | None, lam: float, templates: Sequence[Sequence[int]],
             trace: dict | None = None) -> Tensor:
    """Mean NLL of an assigned refusal answer on target prompts + lam * retain NLL.

    ``indices`` are the examples' positions in the full target set, so the
    refusal each example trains toward does not depend on batch order.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    choice = assign_templates(indices, len(templates))
    batch = make_batch([(p, templates[c]) for p, c in zip(target_prompts, choice)])
    nll, out = answer_nll(model, batch, hooks)
    _stash(trace, "target_out", out)
    _stash(trace, "target_nll", float(nll.data.mean()))
    return _combine(nll.mean(), _retain_term(model, hooks, retain, lam, trace))


def random_direction(d: int, seed: int) -> np.ndarray:
    u = np.random.default_rng(seed).normal(size=d)
    return u / np.linalg.norm(u)


def last_prompt_states(model: Model, hooks, batch: Batch, layer: int):
    out = forward(model, batch.tokens, hooks, hook_positions=batch.last_prompt_pos)
    states = out.hidden[layer - 1][np.arange(batch.size), batch.last_prompt_pos]
    return states, out


def rmu_loss(model: Model, hooks, frozen_states, target: Batch, retain: Batch | None,
             layer: int, coeff: float, alpha: float, u: np.ndarray,
             trace: dict | None = None) -> Tensor:
    """MSE of target states to ``coeff * u`` + alpha * MSE of retain states to frozen ones.

    ``frozen_states`` holds the retain batch's states from the frozen model.
    """
    if not coeff > 0:
        raise ConfigError(f"rmu coeff must be positive, got {coeff}")
    if not 1 <= layer <= model.config.n_layers:
        raise ContractError(f"rmu layer {layer} outside 1..{model.config.n_layers}")
    h_t, out_t = last_prompt_states(model, hooks, target, layer)
    _stash(trace, "target_out", out_t)
    aim = (coeff * np.asarray(u)).astype(h_t.dtype)
    forget = ((h_t - aim) ** 2).mean()
    if retain is None:
        return forget
    h_r, out_r = last_prompt_states(model, hooks, retain, layer)
    _stash(trace, "retain_out", out_r)
    ref = np.asarray(frozen_states, dtype=h_r.dtype)
    return forget + ((h_r - ref) ** 2).mean() * alpha


def gate_loss(gates: Sequence[Tensor] | Tensor, labels) -> Tensor:
    """Binary cross-entropy of gate outputs against 0/1 labels.

    ``gates`` is one tensor per gated layer (each shaped like ``labels``);
    the result averages over examples and layers.
    """
    if isinstance(gates, Tensor):
        gates = [gates]
    if not gates:
        raise ContractError("gate_loss needs at least one gate output")
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("gate labels must be 0 or 1")
    total = None
    for g in gates:
        if g.shape != y.shape:
            raise ContractError(f"gate output shape {g.shape} does not match labels {y.shape}")
        yy = y.astype(g.dtype)
        gc = T.clip(g, GATE_EPS, 1.0 - GATE_EPS)
        bce = -(T.log(gc) * yy + T.log(1.0 - gc) * (1.0 - yy))
        total = bce.mean() if total is None else total + bce.mean()
    return total * (1.0 / len(gates))
