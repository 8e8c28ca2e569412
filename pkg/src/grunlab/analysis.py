"""Evaluation metrics and embedding diagnostics."""

from __future__ import annotations

import csv
import math
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DegenerateDataError
from .model.transformer import Model, answer_nll, forward, make_batch
from .nn.tensor import no_grad

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_words(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_recall(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    """LCS(reference, hypothesis) / len(reference) over word tokens."""
    if isinstance(reference, str):
        reference = normalize_words(reference)
    if isinstance(hypothesis, str):
        hypothesis = normalize_words(hypothesis)
    if len(reference) == 0:
        raise ContractError("rouge_l_recall needs a non-empty reference")
    return lcs_length(reference, hypothesis) / len(reference)


def normalized_probability(model: Model, hooks, prompt, answer) -> float:
    """Geometric-mean per-token probability of ``answer``: exp(-mean NLL)."""
    if len(answer) == 0:
        raise ContractError("normalized_probability needs a non-empty answer")
    with no_grad():
        nll, _ = answer_nll(model, make_batch([(prompt, answer)]), hooks)
    return float(np.exp(-nll.data[0]))


def batch_normalized_probability(model: Model, hooks, pairs) -> np.ndarray:
    with no_grad():
        nll, _ = answer_nll(model, make_batch(pairs), hooks)
    return np.exp(-nll.data.astype(np.float64))


# ------------------------------------------------------------------ geometry
@dataclass
class EmbeddingSet:
    label: str
    vectors: np.ndarray
    source: str = "before"

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _mean_pairwise(x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    n = len(x)
    return float(dist.sum() / (n * (n - 1)))


def csd(a: EmbeddingSet | np.ndarray, b: EmbeddingSet | np.ndarray) -> float:
    """Mean intra-class pairwise distance over centroid distance.

    Lower values mean the two classes are more separated. Returns ``inf``
    when the centroids coincide.
    """
    xa = a.vectors if isinstance(a, EmbeddingSet) else np.atleast_2d(np.asarray(a, dtype=np.float64))
    xb = b.vectors if isinstance(b, EmbeddingSet) else np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(xa) < 2 or len(xb) < 2:
        raise ContractError("csd needs at least two vectors per set")
    intra = 0.5 * (_mean_pairwise(xa) + _mean_pairwise(xb))
    inter = float(np.linalg.norm(xa.mean(0) - xb.mean(0)))
    if inter == 0.0:
        return math.inf
    return intra / inter


@dataclass
class PcaResult:
    components: np.ndarray          # (2, d)
    projections: np.ndarray         # (n, 2)
    explained_variance: np.ndarray  # (2,) fractions of total variance
    mean: np.ndarray


def _power_iteration(cov: np.ndarray, basis: list[np.ndarray], rng, tol: float,
                     max_iter: int) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of ``cov`` restricted to the complement of ``basis``."""

    def project(u):
        for b in basis:
            u = u - (u @ b) * b
        return u

    v = project(rng.normal(size=cov.shape[0]))
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = project(cov @ v)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            break
        w /= norm
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ cov @ v)


def pca_2d(vectors, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> PcaResult:
    """Top-2 principal directions via power iteration with deflation."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[0] < 3:
        raise ContractError("pca_2d needs at least 3 vectors")
    if x.shape[1] < 2:
        raise ContractError("pca_2d needs dimension >= 2")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateDataError("all vectors are identical")
    rng = np.random.default_rng(seed)
    comps: list[np.ndarray] = []
    lams = []
    work = cov.copy()
    for _ in range(2):
        v, lam = _power_iteration(work, comps, rng, tol, max_iter)
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        comps.append(v)
        lams.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    components = np.stack(comps)
    return PcaResult(components, xc @ components.T, np.asarray(lams) / total, mu)


def write_pca_csv(path: str | Path, rows: Sequence[tuple[float, float, str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "class", "stage"])
        for x, y, cls, stage in rows:
            w.writerow([f"{x:.6f}", f"{y:.6f}", cls, stage])


# ------------------------------------------------------------- extraction
def extract_embeddings(model: Model, hooks, prompts: Sequence[Sequence[int]], layer: int,
                       stage: str = "post_intervention", label: str = "",
                       source: str = "before") -> EmbeddingSet:
    """Last-prompt-token state at ``layer``, before or after the hook replacement."""
    if stage not in ("pre_intervention", "post_intervention"):
        raise ContractError(f"unknown stage {stage!r}")
    hooks = dict(hooks or {})
    if stage == "post_intervention" and layer not in hooks:
        raise ContractError(f"no hook at layer {layer} to read a post-intervention state from")
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    out = np.zeros((len(prompts), model.config.d_model))
    with no_grad():
        for plen, idx in sorted(groups.items()):
            toks = np.asarray([prompts[i] for i in idx])
            res = forward(model, toks, hooks, hook_positions=np.full(len(idx), plen - 1))
            if stage == "pre_intervention" and layer in res.pre_hook:
                rows = res.pre_hook[layer].data
            else:
                rows = res.hidden[layer - 1].data[:, plen - 1, :]
            out[idx] = rows
    return EmbeddingSet(label, out, source)


# --------------------------------------------------------------- gate report
@dataclass
class GateRow:
    request: int
    layer: int
    target_mean: float
    retain_mean: float


LEGEND = "target: expected -> 1 (gate open); retain: expected -> 0 (gate closed)"


def gate_means(model: Model, stack, prompts: Sequence[Sequence[int]]) -> dict[tuple[int, int], float]:
    """Mean gate output per (request, layer) over ``prompts``, with the full stack active."""
    sums: dict[tuple[int, int], float] = {}
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    hooks = stack.hooks()
    with no_grad():
        for plen, idx in sorted(groups.items()):
            toks = np.asarray([prompts[i] for i in idx])
            res = forward(model, toks, hooks, hook_positions=np.full(len(idx), plen - 1))
            for j, req in enumerate(stack.requests):
                for layer, m in req.items():
                    g = m.gate_value(res.pre_hook[layer]).data.astype(np.float64)
                    sums[(j, layer)] = sums.get((j, layer), 0.0) + float(g.sum())
    return {k: v / len(prompts) for k, v in sums.items()}


def gate_report(stack, model: Model, target_prompts, retain_prompts) -> list[GateRow]:
    t = gate_means(model, stack, target_prompts)
    r = gate_means(model, stack, retain_prompts)
    return [GateRow(j, l, t[(j, l)], r[(j, l)]) for (j, l) in sorted(t)]


def write_gate_csv(path: str | Path, rows: Sequence[GateRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["request", "layer", "target_mean", "retain_mean"])
        for row in rows:
            w.writerow([row.request, row.layer, f"{row.target_mean:.6f}", f"{row.retain_mean:.6f}"])
