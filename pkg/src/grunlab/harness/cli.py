"""Command-line entry point: ``grunlab <subcommand> --config cfg.json --out dir [--seed N]``.

Subcommands share one output directory as their workspace: ``train-base``
leaves ``base.ckpt``/``vocab.json``/``corpus.jsonl`` there, ``unlearn`` adds
``unlearned.ckpt``, and the evaluation, analysis and attack commands read
those files back.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..analysis import LEGEND, csd, gate_report, write_gate_csv, write_pca_csv
from ..corpus import paraphrase_question, read_jsonl, vocabulary_texts, write_jsonl
from ..errors import ConfigError, GrunlabError, StageError
from ..model.checkpoint import load_checkpoint, save_checkpoint
from ..model.tokenizer import Tokenizer
from ..unlearn import train_unlearn, write_log
from . import pipeline as P
from .config import ExperimentConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _base(cfg: ExperimentConfig, out: Path) -> P.BaseArtifacts:
    """Reuse the base model in ``out`` if present, otherwise train and save it."""
    if (out / "base.ckpt").exists() and (out / "vocab.json").exists() and (out / "corpus.jsonl").exists():
        model, _ = load_checkpoint(out / "base.ckpt")
        return P.BaseArtifacts(read_jsonl(out / "corpus.jsonl", cfg.seed), Tokenizer.load(out / "vocab.json"), model)
    base = P.prepare_base(cfg)
    write_jsonl(base.corpus, out / "corpus.jsonl")
    base.tokenizer.save(out / "vocab.json")
    save_checkpoint(base.model, None, out / "base.ckpt")
    write_log(out / "base_log.jsonl", base.log)
    return base


def _unlearned(out: Path):
    path = out / "unlearned.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'grunlab unlearn' first")
    return load_checkpoint(path)


def _dump(out: Path, name: str, obj) -> None:
    (out / name).write_text(json.dumps(P._jsonable(obj), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / name}")


def cmd_gen_data(cfg, out, args):
    corpus = P.build_corpus(cfg)
    write_jsonl(corpus, out / "corpus.jsonl")
    Tokenizer.build(vocabulary_texts(corpus)).save(out / "vocab.json")
    print(f"wrote {len(corpus.records)} records to {out / 'corpus.jsonl'}")


def cmd_train_base(cfg, out, args):
    base = _base(cfg, out)
    print(f"base model checksum {base.model.checksum()}")


def cmd_unlearn(cfg, out, args):
    base = _base(cfg, out)
    retain = base.corpus.split("retain") + base.corpus.split("world")
    data = P.unlearn_data(base.tokenizer, base.corpus.split("target"), retain)
    res = train_unlearn(base.model, data, cfg.unlearn)
    save_checkpoint(res.model, res.stack, out / "unlearned.ckpt")
    write_log(out / "unlearn_log.jsonl", res.log)
    print(f"unlearning ran {res.steps} steps (early stop: {res.stopped_early})")


def cmd_eval(cfg, out, args):
    base = _base(cfg, out)
    model, stack = _unlearned(out)
    groups = P.split_groups(base.corpus)
    hooks = stack.hooks() if stack is not None else {}
    report = {
        "clean": P.evaluate(base.model, {}, base.tokenizer, groups, cfg.evaluation.max_new, "clean", cfg),
        "post_unlearn": P.evaluate(model, hooks, base.tokenizer, groups, cfg.evaluation.max_new,
                                   "post_unlearn", cfg),
    }
    _dump(out, "eval.json", report)


def cmd_analyze(cfg, out, args):
    base = _base(cfg, out)
    model, stack = _unlearned(out)
    hooks = stack.hooks() if stack is not None else {}
    tok, corpus = base.tokenizer, base.corpus
    layer = cfg.evaluation.embedding_layer or base.model.config.n_layers
    if args.kind in ("pca", "csd"):
        before = P.embedding_sets(base.model, {}, tok, corpus, layer, "before")
        after = P.embedding_sets(model, hooks, tok, corpus, layer, "after")
        if args.kind == "pca":
            rows, var = P.pca_rows(before, after)
            write_pca_csv(out / "pca.csv", rows)
            _dump(out, "pca.json", {"explained_variance": var, "layer": layer})
        else:
            _dump(out, "csd.json", {"layer": layer, "before": csd(before["target"], before["retain"]),
                                    "after": csd(after["target"], after["retain"])})
    elif args.kind == "mix":
        _dump(out, "mix.json", {"clean": P.mix_probe(base.model, {}, tok, corpus, cfg.evaluation.max_new),
                                "post_unlearn": P.mix_probe(model, hooks, tok, corpus, cfg.evaluation.max_new)})
    else:
        if stack is None:
            raise ConfigError("gate report needs an intervention checkpoint (unlearn.mode != vanilla)")
        retain = corpus.split("retain") + corpus.split("world")
        rows = gate_report(stack, base.model, [tok.prompt_ids(r.question) for r in corpus.split("target")],
                           [tok.prompt_ids(r.question) for r in retain])
        write_gate_csv(out / "gates.csv", rows)
        print(LEGEND)
        for r in rows:
            print(f"request {r.request} layer {r.layer}: target {r.target_mean:.4f} retain {r.retain_mean:.4f}")


def cmd_attack(cfg, out, args):
    base = _base(cfg, out)
    model, stack = _unlearned(out)
    tok, corpus = base.tokenizer, base.corpus
    max_new = cfg.evaluation.max_new
    if args.kind == "quantize":
        q_model, q_stack = P.quantize_roundtrip(model, stack)
        q_hooks = q_stack.hooks() if q_stack is not None else {}
        hooks = stack.hooks() if stack is not None else {}
        groups = P.split_groups(corpus)
        _dump(out, "attack_quantize.json", {
            "post_unlearn": P.evaluate(model, hooks, tok, groups, max_new, "post_unlearn", cfg),
            "post_quantization": P.evaluate(q_model, q_hooks, tok, groups, max_new, "post_quantization", cfg),
        })
    else:
        hooks = stack.hooks() if stack is not None else {}
        targets = corpus.split("target")
        para = P.score_records(model, hooks, tok, targets, max_new,
                               [paraphrase_question(r.question, cfg.seed) for r in targets])
        orig = P.score_records(model, hooks, tok, targets, max_new)
        _dump(out, "attack_paraphrase.json", {"original": orig, "paraphrased": para})


def cmd_sequential(cfg, out, args):
    res = P.run_sequential(cfg, out)
    print(json.dumps(P._jsonable(res.analyses["final"]), indent=2))


def cmd_run(cfg, out, args):
    res = P.run_experiment(cfg, out)
    print(json.dumps(P._jsonable(res.stages), indent=2))


def cmd_report(cfg, out, args):
    metrics = out / "metrics.json"
    if not metrics.exists():
        raise FileNotFoundError(f"{metrics} not found; run 'grunlab run' or 'grunlab sequential' first")
    d = json.loads(metrics.read_text())
    timings = json.loads((out / "timings.json").read_text()) if (out / "timings.json").exists() else {}
    res = P.ExperimentResult(config=d["config"], stages=d["stages"], analyses=d["analyses"],
                             checksums=d["checksums"], logs=d["logs"], timings=timings, status=d["status"])
    manifest = P.emit_report(res, out, args.format)
    print(f"manifest lists {len(manifest['files'])} files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grunlab", description="Gated representation unlearning lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("gen-data", cmd_gen_data, "generate and split the synthetic corpus"),
        ("train-base", cmd_train_base, "fine-tune the clean toy model"),
        ("unlearn", cmd_unlearn, "run unlearning with the configured method and mode"),
        ("eval", cmd_eval, "score clean and unlearned models"),
        ("sequential", cmd_sequential, "sequential requests with the coefficient search"),
        ("run", cmd_run, "full single-request pipeline"),
    ):
        p = sub.add_parser(name, parents=[common], help=doc)
        p.set_defaults(func=fn)
    p = sub.add_parser("analyze", parents=[common], help="representation and gate analyses")
    p.add_argument("kind", choices=["pca", "csd", "mix", "gates"])
    p.set_defaults(func=cmd_analyze)
    p = sub.add_parser("attack", parents=[common], help="robustness attacks")
    p.add_argument("kind", choices=["quantize", "paraphrase"])
    p.set_defaults(func=cmd_attack)
    p = sub.add_parser("report", parents=[common], help="rewrite metrics and the manifest")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out or cfg.out_dir)
        cfg = replace(cfg, out_dir=str(out))
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (GrunlabError, OSError, FloatingPointError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
