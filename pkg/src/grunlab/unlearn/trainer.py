"""Unlearning training loop for every method/mode combination."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError, ContractError
from ..intervention import GrunModule, GrunStack, select_layers
from ..model.transformer import Model, answer_nll, make_batch
from ..nn import tensor as T
from ..nn.optim import Optimizer
from ..nn.tensor import no_grad
from .losses import (
    UnlearnConfig,
    gate_loss,
    gd_loss,
    idk_loss,
    last_prompt_states,
    npo_loss,
    random_direction,
    reference_logprobs,
    rmu_loss,
)

Pair = tuple[Sequence[int], Sequence[int]]


@dataclass
class UnlearnData:
    """Token-level (prompt, answer) pairs for one unlearning request.

    ``retain`` is everything labelled 0 for the gate; ``refusals`` are the
    tokenized answers the IDK method trains toward.
    """

    target: list[Pair]
    retain: list[Pair]
    refusals: list[list[int]] = field(default_factory=list)

    def check(self) -> None:
        if not self.target:
            raise DataError("no target examples")
        if not self.retain:
            raise DataError("no retain examples")
        key = lambda p: (tuple(p[0]), tuple(p[1]))
        shared = {key(p) for p in self.target} & {key(p) for p in self.retain}
        if shared:
            raise DataError(f"{len(shared)} example(s) appear in both target and retain")


@dataclass
class UnlearnResult:
    model: Model
    stack: GrunStack | None
    log: list[dict]
    steps: int
    stopped_early: bool


def write_log(path: str | Path, log: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def _new_request(model: Model, layers: list[int], cfg: UnlearnConfig) -> dict[int, GrunModule]:
    rng = np.random.default_rng(cfg.seed + 7919)
    req = {}
    for l in layers:
        m = GrunModule.init(model.config.d_model, l, cfg.rank, cfg.gate, cfg.gate_hidden, rng)
        if cfg.mode == "reft_only":
            m.gate_override = 1.0
        req[l] = m
    for m in req.values():
        for p in m.parameters():
            p.requires_grad = True
    return req


def _gate_outputs(req: dict[int, GrunModule], out, n: int) -> list:
    gates = []
    for l, m in sorted(req.items()):
        if l not in out.pre_hook or out.pre_hook[l].shape[0] != n:
            raise ContractError(f"forward pass did not record layer {l} for every example")
        gates.append(m.gate_value(out.pre_hook[l]))
    return gates


def train_unlearn(model: Model, data: UnlearnData, cfg: UnlearnConfig,
                  stack: GrunStack | None = None) -> UnlearnResult:
    """Unlearn ``data.target`` while preserving ``data.retain``.

    In the GRUN-family modes the base model is frozen and a new request is
    appended to a copy of ``stack`` (earlier requests stay frozen and active).
    In vanilla mode a copy of the model is trained directly and ``stack`` is
    only used as fixed context.
    """
    data.check()
    rng = np.random.default_rng(cfg.seed)
    vocab = model.config.vocab_size
    tau = cfg.tau(vocab)
    grun_family = cfg.mode != "vanilla"

    prior = stack.copy() if stack is not None and len(stack) else None
    prior_hooks = prior.hooks() if prior is not None else {}
    if grun_family:
        model.requires_grad_(False)
        layers = prior.layers if prior is not None else select_layers(model.config.n_layers, cfg.layers)
        req = _new_request(model, layers, cfg)
        work = prior.copy() if prior is not None else GrunStack([], 1.0)
        if prior is not None:
            work.coeff = 1.0
        work.add_request(req)
        params = [p for m in req.values() for p in m.parameters()]
        hooks = work.hooks()
        trained = model
    else:
        req, work = None, prior
        trained = model.copy()
        trained.requires_grad_(True)
        params = trained.parameters()
        hooks = prior_hooks
        layers = prior.layers if prior is not None else select_layers(model.config.n_layers, cfg.layers)
    use_gate_loss = cfg.mode == "grun"
    opt = Optimizer(params, "adam", cfg.lr)

    n_t = len(data.target)
    bs = min(cfg.batch_size, n_t)
    steps_per_epoch = math.ceil(n_t / bs)
    total_steps = cfg.epochs * steps_per_epoch

    # frozen references computed once, before any update
    ref_logp = None
    if cfg.method == "npo":
        ref_logp = reference_logprobs(model, prior_hooks, make_batch(data.target))
    rmu_layer = cfg.rmu_layer if cfg.rmu_layer is not None else layers[len(layers) // 2]
    u = random_direction(model.config.d_model, cfg.seed) if cfg.method == "rmu" else None

    log: list[dict] = []
    stopped = False
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_t)
        for s in range(steps_per_epoch):
            t_idx = order[s * bs:(s + 1) * bs]
            r_idx = rng.choice(len(data.retain), size=len(t_idx), replace=len(t_idx) > len(data.retain))
            t_pairs = [data.target[i] for i in t_idx]
            r_pairs = [data.retain[i] for i in r_idx]
            t_batch, r_batch = make_batch(t_pairs), make_batch(r_pairs)
            retain_batch = r_batch if cfg.method != "ga" else None
            lam = cfg.lam if cfg.method != "ga" else 0.0
            trace: dict = {}

            if cfg.method in ("gd", "ga"):
                loss_u = gd_loss(trained, hooks, t_batch, retain_batch, lam, trace)
            elif cfg.method == "npo":
                loss_u = npo_loss(trained, hooks, ref_logp[t_idx], t_batch, retain_batch, lam, cfg.beta, trace)
            elif cfg.method == "idk":
                if not data.refusals:
                    raise ContractError("idk needs a non-empty refusal pool")
                loss_u = idk_loss(trained, hooks, [p for p, _ in t_pairs], t_idx, retain_batch, lam,
                                  data.refusals, trace)
            else:
                with no_grad():
                    frozen, _ = last_prompt_states(model, prior_hooks, r_batch, rmu_layer)
                loss_u = rmu_loss(trained, hooks, frozen.data, t_batch, r_batch, rmu_layer,
                                  cfg.rmu_coeff, cfg.rmu_alpha, u, trace)

            if "target_nll" not in trace or "retain_nll" not in trace:
                with no_grad():
                    if "target_nll" not in trace:
                        trace["target_nll"] = float(answer_nll(trained, t_batch, hooks)[0].data.mean())
                    if "retain_nll" not in trace:
                        nll, out = answer_nll(trained, r_batch, hooks)
                        trace["retain_nll"] = float(nll.data.mean())
                        trace.setdefault("retain_out", out)

            loss_g = None
            g_t = g_r = float("nan")
            if req is not None:
                gates_t = _gate_outputs(req, trace["target_out"], len(t_idx))
                gates_r = _gate_outputs(req, trace["retain_out"], len(r_idx))
                g_t = float(np.mean([g.data.mean() for g in gates_t]))
                g_r = float(np.mean([g.data.mean() for g in gates_r]))
                if use_gate_loss:
                    labels = np.concatenate([np.ones(len(t_idx)), np.zeros(len(r_idx))])
                    joined = [T.concat([a, b]) for a, b in zip(gates_t, gates_r)]
                    loss_g = gate_loss(joined, labels)
            loss = loss_u if loss_g is None else loss_u + loss_g

            early = cfg.method == "gd" and trace["target_nll"] > tau
            rec = {
                "step": step,
                "L_u": float(loss_u.item()),
                "L_G": None if loss_g is None else float(loss_g.item()),
                "target_nll": trace["target_nll"],
                "retain_nll": trace["retain_nll"],
                "gate_mean_target": None if req is None else g_t,
                "gate_mean_retain": None if req is None else g_r,
                "stopped_early": bool(early),
            }
            if not np.isfinite(rec["L_u"]):
                raise FloatingPointError(f"non-finite unlearning loss at step {step}")
            log.append(rec)
            if early:
                stopped = True
                break
            grads = T.backward(loss, params)
            opt.step(grads)
            step += 1
        if stopped:
            break

    if grun_family:
        for m in req.values():
            for p in m.parameters(include_gate=True):
                p.requires_grad = False
        out_stack = work
    else:
        trained.requires_grad_(False)
        out_stack = prior
    return UnlearnResult(trained, out_stack, log, step, stopped)
