"""Experiment orchestration: data, base training, unlearning, evaluation, analyses, attacks."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..analysis import (
    LEGEND,
    batch_normalized_probability,
    csd,
    extract_embeddings,
    gate_report,
    pca_2d,
    rouge_l_recall,
    write_gate_csv,
    write_pca_csv,
)
from ..corpus import (
    REFUSALS,
    Corpus,
    QaRecord,
    generate_corpus,
    mix_prompts,
    paraphrase_question,
    request_sets,
    split_corpus,
    vocabulary_texts,
    write_jsonl,
)
from ..errors import DataError, GrunlabError, StageError
from ..intervention import GrunStack, ReftParams
from ..model.checkpoint import save_checkpoint
from ..model.tokenizer import Tokenizer
from ..model.transformer import Model, ModelConfig, answer_nll, generate_batch, make_batch
from ..nn import tensor as T
from ..nn.optim import Optimizer
from ..nn.tensor import Tensor
from ..unlearn import UnlearnData, UnlearnResult, train_unlearn, write_log
from .config import ExperimentConfig

EVAL_SPLITS = ("target", "retain", "world", "never_seen")


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("GRUNLAB_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------- data
@dataclass
class BaseArtifacts:
    corpus: Corpus
    tokenizer: Tokenizer
    model: Model
    log: list[dict] = field(default_factory=list)


def build_corpus(cfg: ExperimentConfig, target_fraction: float | None = None) -> Corpus:
    c = cfg.corpus
    raw = generate_corpus(cfg.seed, c.n_entities, c.qa_per_entity, c.n_world)
    frac = c.target_fraction if target_fraction is None else target_fraction
    return split_corpus(raw, frac, c.never_seen_fraction, seed=cfg.seed)


def encode_pairs(tok: Tokenizer, records: Sequence[QaRecord]) -> list[tuple[list[int], list[int]]]:
    return [(tok.prompt_ids(r.question), tok.answer_ids(r.answer)) for r in records]


def train_base(cfg: ExperimentConfig, corpus: Corpus, tok: Tokenizer) -> tuple[Model, list[dict]]:
    """Fine-tune a fresh toy model on every split except never_seen."""
    m = cfg.model
    mcfg = ModelConfig(len(tok), m.d_model, m.n_layers, m.n_heads, m.max_seq_len, m.ff_mult)
    model = Model.build(mcfg, cfg.seed)
    model.requires_grad_(True)
    pairs = encode_pairs(tok, [r for r in corpus.records if r.split != "never_seen"])
    opt = Optimizer(model.parameters(), "adam", cfg.base.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    bs = cfg.base.batch_size
    log = []
    for epoch in range(cfg.base.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for i in range(0, len(pairs), bs):
            nll, _ = answer_nll(model, make_batch([pairs[j] for j in order[i:i + bs]]))
            loss = nll.mean()
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite base-training loss in epoch {epoch}")
            opt.step(T.backward(loss, model.parameters()))
            losses.append(loss.item())
        log.append({"epoch": epoch, "loss": float(np.mean(losses))})
    model.requires_grad_(False)
    return model, log


def prepare_base(cfg: ExperimentConfig, target_fraction: float | None = None) -> BaseArtifacts:
    corpus = build_corpus(cfg, target_fraction)
    tok = Tokenizer.build(vocabulary_texts(corpus))
    model, log = train_base(cfg, corpus, tok)
    return BaseArtifacts(corpus, tok, model, log)


# --------------------------------------------------------------- evaluation
def generate_answers(model: Model, hooks, tok: Tokenizer, questions: Sequence[str], max_new: int) -> list[str]:
    outs = generate_batch(model, [tok.prompt_ids(q) for q in questions], max_new, hooks)
    return [tok.decode(o) for o in outs]


def score_records(model: Model, hooks, tok: Tokenizer, records: Sequence[QaRecord], max_new: int,
                  questions: Sequence[str] | None = None) -> dict:
    """Mean ROUGE-L recall and normalized probability over ``records``."""
    if not records:
        return {"rouge_l": None, "prob": None, "n": 0}
    questions = [r.question for r in records] if questions is None else list(questions)
    answers = generate_answers(model, hooks, tok, questions, max_new)
    rouge = [rouge_l_recall(r.answer, a) for r, a in zip(records, answers)]
    pairs = [(tok.prompt_ids(q), tok.answer_ids(r.answer)) for q, r in zip(questions, records)]
    prob = batch_normalized_probability(model, hooks, pairs)
    return {"rouge_l": float(np.mean(rouge)), "prob": float(np.mean(prob)), "n": len(records)}


def evaluate(model: Model, hooks, tok: Tokenizer, groups: Mapping[str, Sequence[QaRecord]],
             max_new: int, stage: str, cfg: ExperimentConfig) -> dict:
    """MetricReport for one stage; groups are evaluated concurrently when allowed."""
    names = [n for n, recs in groups.items() if recs]
    with ThreadPoolExecutor(max_workers=eval_threads()) as pool:
        scores = dict(zip(names, pool.map(
            lambda n: score_records(model, hooks, tok, groups[n], max_new), names)))
    return {
        "rouge_l": {n: scores[n]["rouge_l"] for n in names},
        "prob": {n: scores[n]["prob"] for n in names},
        "provenance": {"stage": stage, "seed": cfg.seed, "config_hash": cfg.digest()},
    }


def split_groups(corpus: Corpus) -> dict[str, list[QaRecord]]:
    return {s: corpus.split(s) for s in EVAL_SPLITS}


# ------------------------------------------------------------------ attacks
def quantize_array(w: np.ndarray) -> np.ndarray:
    """Per-tensor symmetric int8 round trip: q = clip(round(w / s), -127, 127), w' = q s."""
    w = np.asarray(w)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.round(w.astype(np.float64) / scale), -127, 127)
    return (q * scale).astype(w.dtype)


def quantize_roundtrip(model: Model, stack: GrunStack | None = None) -> tuple[Model, GrunStack | None]:
    """Quantized-dequantized copies of ``model`` and ``stack``; inputs are untouched."""
    q_model = Model(model.config, {n: Tensor(quantize_array(p.data), dtype=p.dtype, name=n)
                                   for n, p in model.named_parameters()})
    if stack is None:
        return q_model, None
    state = {k: (v.copy() if k == "grun/coeff" or k.endswith("gate_override") else quantize_array(v))
             for k, v in stack.state_dict().items()}
    return q_model, GrunStack.from_state_dict(state)


# ----------------------------------------------------------------- analyses
def embedding_sets(model: Model, hooks, tok: Tokenizer, corpus: Corpus, layer: int, tag: str) -> dict:
    stage = "post_intervention" if layer in (hooks or {}) else "pre_intervention"
    out = {}
    for split in ("target", "retain", "never_seen"):
        recs = corpus.split(split)
        if recs:
            out[split] = extract_embeddings(model, hooks, [tok.prompt_ids(r.question) for r in recs],
                                            layer, stage, split, tag)
    return out


def pca_rows(before: Mapping, after: Mapping) -> tuple[list[tuple], list[float]]:
    order = [(s, k, e) for s, sets in (("before", before), ("after", after)) for k, e in sets.items()]
    stacked = np.concatenate([e.vectors for _, _, e in order])
    res = pca_2d(stacked)
    rows, i = [], 0
    for stage, cls, e in order:
        for xy in res.projections[i:i + len(e)]:
            rows.append((float(xy[0]), float(xy[1]), cls, stage))
        i += len(e)
    return rows, [float(v) for v in res.explained_variance]


def mix_probe(model: Model, hooks, tok: Tokenizer, corpus: Corpus, max_new: int) -> dict:
    """ROUGE-L of normal answers asked alone vs with a target question appended."""
    normal = corpus.split("retain") + corpus.split("world")
    targets = corpus.split("target")
    if not normal or not targets:
        return {}
    mixed = [mix_prompts(n, targets[i % len(targets)]) for i, n in enumerate(normal)]
    # control: append another normal question instead of a target one
    control = [mix_prompts(n, normal[(i + 1) % len(normal)]) for i, n in enumerate(normal)]
    alone = score_records(model, hooks, tok, normal, max_new)["rouge_l"]
    with_target = score_records(model, hooks, tok, normal, max_new, [m.text for m in mixed])["rouge_l"]
    with_normal = score_records(model, hooks, tok, normal, max_new, [m.text for m in control])["rouge_l"]
    return {"alone": alone, "with_target": with_target, "with_normal": with_normal,
            "drop": alone - with_target}


# ------------------------------------------------------------------- runner
@dataclass
class ExperimentResult:
    config: dict
    stages: dict = field(default_factory=dict)
    analyses: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "ok"

    def to_dict(self, with_timings: bool = False) -> dict:
        d = {"config": self.config, "stages": self.stages, "analyses": self.analyses,
             "checksums": self.checksums, "logs": self.logs, "status": self.status}
        if with_timings:
            d["timings"] = self.timings
        return d


class _Stages:
    """Runs named stages, recording timings and turning failures into StageError."""

    def __init__(self, result: ExperimentResult, out: Path | None):
        self.result = result
        self.out = out

    def run(self, name: str, fn: Callable):
        t0 = time.perf_counter()
        try:
            value = fn()
        except Exception as exc:  # noqa: BLE001 - every failure is attributed to its stage
            self.result.status = "failed"
            if self.out is not None:
                self.out.mkdir(parents=True, exist_ok=True)
                (self.out / "status.json").write_text(json.dumps(
                    {"status": "failed", "stage": name, "error": f"{type(exc).__name__}: {exc}"}, indent=2))
            raise StageError(name, exc) from exc
        self.result.timings[name] = round(time.perf_counter() - t0, 3)
        return value


def unlearn_data(tok: Tokenizer, target: Sequence[QaRecord], retain: Sequence[QaRecord]) -> UnlearnData:
    return UnlearnData(encode_pairs(tok, target), encode_pairs(tok, retain),
                       [tok.answer_ids(s) for s in REFUSALS])


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   base: BaseArtifacts | None = None) -> ExperimentResult:
    """Full single-request pipeline. ``base`` reuses an already trained clean model."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(config=cfg.to_dict(with_out_dir=False))
    st = _Stages(result, out)
    ev = cfg.evaluation
    max_new = ev.max_new

    if base is None:
        base = st.run("base", lambda: prepare_base(cfg))
    corpus, tok, model = base.corpus, base.tokenizer, base.model
    write_jsonl(corpus, out / "corpus.jsonl")
    tok.save(out / "vocab.json")
    save_checkpoint(model, None, out / "base.ckpt")
    if base.log:
        write_log(out / "base_log.jsonl", base.log)
        result.logs["base"] = "base_log.jsonl"
    groups = split_groups(corpus)
    result.checksums["base_clean"] = model.checksum()

    result.stages["clean"] = st.run("clean", lambda: evaluate(model, {}, tok, groups, max_new, "clean", cfg))

    retain_pool = corpus.split("retain") + corpus.split("world")
    data = unlearn_data(tok, corpus.split("target"), retain_pool)
    res: UnlearnResult = st.run("unlearn", lambda: train_unlearn(model, data, cfg.unlearn))
    write_log(out / "unlearn_log.jsonl", res.log)
    result.logs["unlearn"] = "unlearn_log.jsonl"
    save_checkpoint(res.model, res.stack, out / "unlearned.ckpt")
    hooks = res.stack.hooks() if res.stack is not None else {}
    result.checksums["base_post_unlearn"] = model.checksum()
    result.analyses["unlearn"] = {"steps": res.steps, "stopped_early": res.stopped_early}

    result.stages["post_unlearn"] = st.run(
        "post_unlearn", lambda: evaluate(res.model, hooks, tok, groups, max_new, "post_unlearn", cfg))

    van = None
    if ev.baseline:
        bcfg = replace(cfg.baseline_unlearn, method=cfg.unlearn.method, seed=cfg.unlearn.seed)
        van = st.run("baseline", lambda: train_unlearn(model, data, bcfg))
        write_log(out / "baseline_log.jsonl", van.log)
        result.logs["baseline"] = "baseline_log.jsonl"
        result.analyses["baseline"] = {"steps": van.steps, "stopped_early": van.stopped_early}
        result.stages["baseline"] = st.run(
            "baseline_eval", lambda: evaluate(van.model, {}, tok, groups, max_new, "baseline", cfg))

    layer = ev.embedding_layer or model.config.n_layers
    # the representation study inspects a fine-tuned (vanilla) model when one exists
    study_model, study_hooks, study_tag = (van.model, {}, "vanilla") if van is not None else (res.model, hooks, "grun")

    def analyses():
        a = {}
        if ev.csd or ev.pca:
            before = embedding_sets(model, {}, tok, corpus, layer, "before")
            after = embedding_sets(study_model, study_hooks, tok, corpus, layer, "after")
            if ev.csd:
                a["csd"] = {"layer": layer, "model": study_tag,
                            "before": csd(before["target"], before["retain"]),
                            "after": csd(after["target"], after["retain"])}
                if van is not None and res.stack is not None:
                    g_after = embedding_sets(res.model, hooks, tok, corpus, layer, "after")
                    a["csd"]["after_grun"] = csd(g_after["target"], g_after["retain"])
            if ev.pca:
                rows, var = pca_rows(before, after)
                write_pca_csv(out / "pca.csv", rows)
                a["pca"] = {"file": "pca.csv", "explained_variance": var, "model": study_tag, "layer": layer}
        if ev.mix:
            a["mix"] = {"model": study_tag,
                        "clean": mix_probe(model, {}, tok, corpus, max_new),
                        "post_unlearn": mix_probe(study_model, study_hooks, tok, corpus, max_new)}
            if van is not None and res.stack is not None:
                a["mix"]["grun"] = mix_probe(res.model, hooks, tok, corpus, max_new)
        if ev.gates and res.stack is not None:
            rows = gate_report(res.stack, model, [tok.prompt_ids(r.question) for r in corpus.split("target")],
                               [tok.prompt_ids(r.question) for r in retain_pool])
            write_gate_csv(out / "gates.csv", rows)
            a["gates"] = {"file": "gates.csv", "legend": LEGEND,
                          "rows": [r.__dict__ for r in rows]}
        return a

    result.analyses.update(st.run("analyses", analyses))

    if ev.attacks:
        def attacks():
            q_model, q_stack = quantize_roundtrip(res.model, res.stack)
            q_hooks = q_stack.hooks() if q_stack is not None else {}
            stages = {"post_quantization": evaluate(q_model, q_hooks, tok, groups, max_new,
                                                    "post_quantization", cfg)}
            targets = corpus.split("target")
            para = score_records(res.model, hooks, tok, targets, max_new,
                                 [paraphrase_question(r.question, cfg.seed) for r in targets])
            stages["paraphrase"] = {"rouge_l": {"target": para["rouge_l"]}, "prob": {"target": para["prob"]},
                                    "provenance": {"stage": "paraphrase", "seed": cfg.seed,
                                                   "config_hash": cfg.digest()}}
            return stages

        result.stages.update(st.run("attacks", attacks))

    emit_report(result, out)
    return result


# --------------------------------------------------------------- sequential
def _c_grid(m: int) -> list[float]:
    return sorted({1.0, 1.0 / float(np.sqrt(m)), 1.0 / m}, reverse=True)


def run_sequential(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   base: BaseArtifacts | None = None, target_threshold: float = 0.15) -> ExperimentResult:
    """M requests, each trained with the earlier ones frozen; vanilla baseline fine-tunes incrementally."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(config=cfg.to_dict(with_out_dir=False))
    st = _Stages(result, out)
    sq, ev = cfg.sequential, cfg.evaluation
    frac = sq.n_requests * sq.request_fraction
    if base is None:
        base = st.run("base", lambda: prepare_base(cfg, target_fraction=frac))
    corpus, tok, model = base.corpus, base.tokenizer, base.model
    write_jsonl(corpus, out / "corpus.jsonl")
    tok.save(out / "vocab.json")
    result.checksums["base_clean"] = model.checksum()

    requests = st.run("schedule", lambda: request_sets(corpus, sq.n_requests))
    ids = [set(r.id for r in req) for req in requests]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if ids[i] & ids[j]:
                raise DataError(f"requests {i} and {j} overlap")
    retain_pool = corpus.split("retain") + corpus.split("world")
    util_groups = {"retain": corpus.split("retain"), "world": corpus.split("world")}

    def targets_report(m, hooks) -> list[float]:
        return [score_records(m, hooks, tok, req, ev.max_new)["rouge_l"] for req in requests]

    result.stages["clean"] = st.run("clean", lambda: evaluate(model, {}, tok, util_groups, ev.max_new, "clean", cfg))

    stack: GrunStack | None = None
    van_model = model
    series = []
    for j, req in enumerate(requests):
        data = unlearn_data(tok, req, retain_pool)
        ucfg = replace(cfg.unlearn, seed=cfg.unlearn.seed + j)
        res = st.run(f"request_{j}", lambda: train_unlearn(model, data, ucfg, stack))
        stack = res.stack
        write_log(out / f"request_{j}_log.jsonl", res.log)
        result.logs[f"request_{j}"] = f"request_{j}_log.jsonl"
        bcfg = replace(cfg.baseline_unlearn, method=cfg.unlearn.method, seed=cfg.unlearn.seed + j)
        vres = st.run(f"baseline_{j}", lambda: train_unlearn(van_model, data, bcfg))
        van_model = vres.model
        write_log(out / f"baseline_{j}_log.jsonl", vres.log)
        result.logs[f"baseline_{j}"] = f"baseline_{j}_log.jsonl"

        def step_eval():
            hooks = stack.hooks()
            return {
                "request": j,
                "grun": {"targets": targets_report(model, hooks)[: j + 1],
                         **evaluate(model, hooks, tok, util_groups, ev.max_new, f"request_{j}", cfg)},
                "vanilla": {"targets": targets_report(van_model, {})[: j + 1],
                            **evaluate(van_model, {}, tok, util_groups, ev.max_new, f"baseline_{j}", cfg)},
            }

        series.append(st.run(f"eval_{j}", step_eval))
    result.analyses["series"] = series

    def choose_c():
        grid = []
        for c in _c_grid(len(requests)):
            trial = GrunStack(stack.requests, c)
            hooks = trial.hooks()
            tgt = targets_report(model, hooks)
            util = evaluate(model, hooks, tok, util_groups, ev.max_new, f"c={c:.4f}", cfg)
            grid.append({"c": c, "targets": tgt, "retain_rouge_l": util["rouge_l"]["retain"],
                         "world_rouge_l": util["rouge_l"]["world"],
                         "feasible": all(t <= target_threshold for t in tgt)})
        feasible = [g for g in grid if g["feasible"]]
        if feasible:
            pick = max(feasible, key=lambda g: g["retain_rouge_l"])
        else:
            pick = min(grid, key=lambda g: max(g["targets"]))
        return {"grid": grid, "chosen": pick["c"], "threshold": target_threshold}

    result.analyses["c_search"] = st.run("c_search", choose_c)
    stack.coeff = result.analyses["c_search"]["chosen"]
    save_checkpoint(model, stack, out / "sequential.ckpt")
    result.checksums["base_post_unlearn"] = model.checksum()
    chosen = next(g for g in result.analyses["c_search"]["grid"] if g["c"] == stack.coeff)
    final_v = series[-1]["vanilla"]
    result.analyses["final"] = {
        "grun": {"targets": chosen["targets"], "retain_rouge_l": chosen["retain_rouge_l"],
                 "world_rouge_l": chosen["world_rouge_l"], "c": stack.coeff},
        "vanilla": {"targets": final_v["targets"], "retain_rouge_l": final_v["rouge_l"]["retain"],
                    "world_rouge_l": final_v["rouge_l"]["world"]},
    }
    emit_report(result, out)
    return result


# ------------------------------------------------------------------- report
def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def emit_report(result: ExperimentResult, out: str | Path, fmt: str = "json") -> dict:
    """Write metrics (and timings separately) plus a manifest hashing every file in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(_jsonable(result.to_dict()), indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(result.timings, indent=2, sort_keys=True) + "\n")
    if fmt == "csv":
        rows = [(stage, kind, split, v) for stage, rep in sorted(result.stages.items())
                for kind in ("rouge_l", "prob") for split, v in sorted(rep.get(kind, {}).items())]
        with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write("stage,metric,split,value\n")
            for stage, kind, split, v in rows:
                fh.write(f"{stage},{kind},{split},{'' if v is None else f'{v:.6f}'}\n")
    elif fmt != "json":
        raise ValueError(f"unknown report format {fmt!r}")
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {"files": {p.name: sha256_file(p) for p in files}, "excluded_from_determinism": ["timings.json"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
