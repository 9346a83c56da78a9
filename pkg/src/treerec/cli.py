"""Command-line entry point wiring the full pipeline with on-disk artifacts.

    treerec synth               -c run.yaml -o runs/demo
    treerec tokenizer-pretrain  -c run.yaml -o runs/demo
    treerec tokenizer-finetune  -c run.yaml -o runs/demo
    treerec assign-ids          -c run.yaml -o runs/demo --scope downstream
    treerec rec-pretrain        -c run.yaml -o runs/demo
    treerec rec-finetune        -c run.yaml -o runs/demo
    treerec evaluate            -c run.yaml -o runs/demo
    treerec ablate              -c run.yaml -o runs/demo --seeds 0 1 2
    treerec report              -o runs/demo

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
``TREEREC_OUTDIR`` overrides the default output directory and
``TREEREC_THREADS`` pins the torch thread count.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch
import yaml

from . import evaluation, persist, pipeline
from .config import (ConfigError, RunConfig, apply_overrides, config_hash,
                     config_to_dict)
from .corpus import (Corpus, load_items, load_sequences, save_items,
                     save_sequences)
from .evaluation import (format_ablation_table, longtail_report, metric_report,
                         training_popularity)
from .recommender import (CodeVocabulary, IdentifierTrie, finetune_recommender,
                          load_recommender, pretrain_recommender, rank_items,
                          tokenize_dataset)
from .tokenizer import (assign_identifiers, finetune_tokenizer,
                        load_identifier_map, load_tokenizer,
                        pretrain_tokenizer, save_identifier_map)


class MissingArtifact(FileNotFoundError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(
            f"missing input artifact {path}; produce it with "
            f"`treerec {producer}` first")
    return path


def _load_config(args) -> RunConfig:
    with open(args.config, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    data = apply_overrides(data, args.set or [])
    from .config import config_from_dict
    return config_from_dict(data)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("TREEREC_OUTDIR") or "runs/default"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _meta(cfg: RunConfig, command: str) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed,
            "command": command}


def _load_corpus(out: Path) -> Corpus:
    items = load_items(_require(out / "items.jsonl", "synth"))
    sequences = load_sequences(_require(out / "sequences.jsonl", "synth"))
    return Corpus(items=items, sequences=sequences)


def _emit(path):
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = pipeline.corpus_for_run(cfg)
    meta = _meta(cfg, "synth")
    save_items(out / "items.jsonl", corpus.items, meta)
    save_sequences(out / "sequences.jsonl", corpus.sequences, meta)
    _emit(out / "items.jsonl")
    _emit(out / "sequences.jsonl")
    return 0


def cmd_tokenizer_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    ckpt = pretrain_tokenizer(corpus, cfg)
    persist.save_checkpoint(out / "tokenizer_pretrain.pt", ckpt)
    _emit(out / "tokenizer_pretrain.pt")
    return 0


def cmd_tokenizer_finetune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    base = persist.load_checkpoint(
        _require(out / "tokenizer_pretrain.pt", "tokenizer-pretrain"),
        kind="tokenizer")
    ckpt = finetune_tokenizer(base, corpus, cfg)
    persist.save_checkpoint(out / "tokenizer_finetune.pt", ckpt)
    _emit(out / "tokenizer_finetune.pt")
    return 0


def _scope_domains(cfg: RunConfig, scope: str):
    if scope == "pretrain":
        return cfg.corpus.pretrain_domains
    if scope == "downstream":
        return [cfg.corpus.downstream_domain]
    return cfg.corpus.pretrain_domains + [cfg.corpus.downstream_domain]


def cmd_assign_ids(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    ckpt_name = ("tokenizer_pretrain.pt" if args.scope == "pretrain"
                 else "tokenizer_finetune.pt")
    producer = ("tokenizer-pretrain" if args.scope == "pretrain"
                else "tokenizer-finetune")
    if args.checkpoint:
        ckpt_path = Path(args.checkpoint)
        _require(ckpt_path, producer)
    else:
        ckpt_path = _require(out / ckpt_name, producer)
    model = load_tokenizer(persist.load_checkpoint(ckpt_path, kind="tokenizer"))
    items = corpus.restrict_to_domains(_scope_domains(cfg, args.scope)).items
    id_map = assign_identifiers(items, model)
    path = out / f"identifiers_{args.scope}.jsonl"
    save_identifier_map(path, id_map, _meta(cfg, "assign-ids"))
    _emit(path)
    return 0


def cmd_rec_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    id_map = load_identifier_map(
        _require(out / "identifiers_pretrain.jsonl", "assign-ids --scope pretrain"))
    vocab = CodeVocabulary(cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                           cfg.quantizer.L, cfg.recommender.shared_leaf_tokens)
    sub = corpus.restrict_to_domains(cfg.corpus.pretrain_domains)
    splits = tokenize_dataset(sub.sequences, id_map, vocab,
                              cfg.recommender.max_history_items)
    ckpt = pretrain_recommender(splits, vocab, cfg)
    persist.save_checkpoint(out / "recommender_pretrain.pt", ckpt)
    _emit(out / "recommender_pretrain.pt")
    return 0


def cmd_rec_finetune(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    id_map = load_identifier_map(
        _require(out / "identifiers_downstream.jsonl",
                 "assign-ids --scope downstream"))
    vocab = CodeVocabulary(cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                           cfg.quantizer.L, cfg.recommender.shared_leaf_tokens)
    sub = corpus.restrict_to_domains([cfg.corpus.downstream_domain])
    splits = tokenize_dataset(sub.sequences, id_map, vocab,
                              cfg.recommender.max_history_items)
    trie = IdentifierTrie.from_identifier_map(id_map, vocab)
    base = None
    if not args.from_scratch:
        base = persist.load_checkpoint(
            _require(out / "recommender_pretrain.pt", "rec-pretrain"),
            kind="recommender")
    ckpt = finetune_recommender(base, splits, vocab, trie, cfg)
    persist.save_checkpoint(out / "recommender_finetune.pt", ckpt)
    _emit(out / "recommender_finetune.pt")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = _load_corpus(out)
    sub = corpus.restrict_to_domains([cfg.corpus.downstream_domain])
    popularity = training_popularity(sub.sequences)

    if args.predictions:
        records = list(persist.read_jsonl(_require(Path(args.predictions),
                                                   "evaluate")))
    else:
        id_map = load_identifier_map(
            _require(out / "identifiers_downstream.jsonl",
                     "assign-ids --scope downstream"))
        vocab = CodeVocabulary(cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                               cfg.quantizer.L,
                               cfg.recommender.shared_leaf_tokens)
        splits = tokenize_dataset(sub.sequences, id_map, vocab,
                                  cfg.recommender.max_history_items)
        trie = IdentifierTrie.from_identifier_map(id_map, vocab)
        model, _ = load_recommender(persist.load_checkpoint(
            _require(out / "recommender_finetune.pt", "rec-finetune"),
            kind="recommender"))
        beam = min(cfg.recommender.beam, trie.n_items)
        records = rank_items(model, splits.test, trie, beam)
        persist.write_jsonl(out / "predictions.jsonl", records,
                            _meta(cfg, "evaluate"))
        _emit(out / "predictions.jsonl")

    lists = [r["items"] for r in records]
    targets = [r["target"] for r in records]
    domain_of = {i: it.domain_id for i, it in corpus.items.items()}
    report = {
        "meta": _meta(cfg, "evaluate"),
        "config": config_to_dict(cfg),
        "metrics": metric_report(lists, targets, cfg.eval.ks,
                                 group_of=lambda t: domain_of.get(t, -1)),
        "longtail": longtail_report(lists, targets, popularity,
                                    cfg.eval.bucket_edges, cfg.eval.ks),
    }
    persist.write_json(out / "metrics.json", report)
    _emit(out / "metrics.json")
    with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(_format_metrics(report))
    _emit(out / "metrics.txt")
    return 0


def _format_metrics(report: dict) -> str:
    lines = [f"config={report['meta']['config_hash']} seed={report['meta']['seed']}"]
    lines.append(f"users: {report['metrics']['n_users']}")
    for name, value in sorted(report["metrics"]["overall"].items()):
        lines.append(f"{name:<12} {value:.4f}")
    lines.append("")
    lines.append("popularity buckets:")
    for label, entry in report["longtail"].items():
        cells = " ".join(f"{k}={v:.4f}" for k, v in sorted(entry.items())
                         if k != "n_users")
        lines.append(f"  {label:<10} n={entry['n_users']:<5} {cells}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    variants = args.variants or list(evaluation.ABLATION_VARIANTS)
    report = evaluation.ablation_suite(cfg, seeds=seeds, variants=variants)
    report["meta"] = _meta(cfg, "ablate")
    persist.write_json(out / "ablation.json", report)
    _emit(out / "ablation.json")
    with open(out / "ablation.txt", "w", encoding="utf-8") as fh:
        fh.write(format_ablation_table(report) + "\n")
    _emit(out / "ablation.txt")
    return 0


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    metrics_path = _require(out / "metrics.json", "evaluate")
    report = persist.read_json(metrics_path)
    baseline = None
    if args.baseline:
        baseline = persist.read_json(_require(Path(args.baseline), "evaluate"))
        if (baseline["meta"]["config_hash"] != report["meta"]["config_hash"]
                and not args.force):
            raise ConfigError(
                "refusing to compare runs with different configs "
                f"({baseline['meta']['config_hash']} vs "
                f"{report['meta']['config_hash']}); pass --force to override")

    for name in ("tokenizer_pretrain.pt", "tokenizer_finetune.pt",
                 "recommender_pretrain.pt", "recommender_finetune.pt"):
        path = out / name
        if not path.exists():
            continue
        history = persist.load_checkpoint(path).get("history") or []
        if not history:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        keys = [k for k in history[0] if k != "epoch"
                and isinstance(history[0][k], float)]
        for key in keys:
            ax.plot([h["epoch"] for h in history],
                    [h.get(key, float("nan")) for h in history], label=key)
        ax.set_xlabel("epoch")
        ax.set_title(name.replace(".pt", ""))
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(report_dir / (name.replace(".pt", "") + "_curves.png"))
        plt.close(fig)
        _emit(report_dir / (name.replace(".pt", "") + "_curves.png"))

    longtail = report.get("longtail", {})
    if longtail:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        labels = list(longtail)
        for offset, metric in enumerate(k for k in ("recall@10", "ndcg@10")
                                        if k in next(iter(longtail.values()))):
            vals = [longtail[b][metric] for b in labels]
            xs = [i + 0.35 * offset for i in range(len(labels))]
            ax.bar(xs, vals, width=0.35, label=metric)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_title("target popularity buckets")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(report_dir / "longtail.png")
        plt.close(fig)
        _emit(report_dir / "longtail.png")

    summary = [_format_metrics(report)]
    if baseline:
        summary.append("deltas vs baseline:")
        for name, value in sorted(report["metrics"]["overall"].items()):
            delta = value - baseline["metrics"]["overall"][name]
            summary.append(f"  {name:<12} {delta:+.4f}")
        base_lt = baseline.get("longtail", {})
        for label, entry in report.get("longtail", {}).items():
            if label not in base_lt:
                continue
            cells = " ".join(
                f"{k}={entry[k] - base_lt[label][k]:+.4f}"
                for k in entry if k != "n_users" and k in base_lt[label])
            summary.append(f"  {label:<10} {cells}")
    abl_path = out / "ablation.json"
    if abl_path.exists():
        summary.append("")
        summary.append(format_ablation_table(persist.read_json(abl_path)))
    with open(report_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    _emit(report_dir / "report.txt")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treerec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config=True):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("-c", "--config", required=True,
                           help="run config file (YAML or JSON)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        p.add_argument("-o", "--out", default=None,
                       help="output directory (default $TREEREC_OUTDIR or runs/default)")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth)
    add("tokenizer-pretrain", cmd_tokenizer_pretrain)
    add("tokenizer-finetune", cmd_tokenizer_finetune)
    p = add("assign-ids", cmd_assign_ids)
    p.add_argument("--scope", choices=["pretrain", "downstream", "all"],
                   default="downstream")
    p.add_argument("--checkpoint", default=None,
                   help="explicit tokenizer checkpoint path")
    add("rec-pretrain", cmd_rec_pretrain)
    p = add("rec-finetune", cmd_rec_finetune)
    p.add_argument("--from-scratch", action="store_true",
                   help="skip the pre-trained recommender checkpoint")
    p = add("evaluate", cmd_evaluate)
    p.add_argument("--predictions", default=None,
                   help="score an existing prediction dump instead of generating")
    p = add("ablate", cmd_ablate)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.add_argument("--variants", nargs="*", default=None,
                   choices=list(evaluation.ABLATION_VARIANTS))
    p = add("report", cmd_report, needs_config=False)
    p.add_argument("--baseline", default=None,
                   help="metrics.json of a baseline run for delta reporting")
    p.add_argument("--force", action="store_true",
                   help="allow comparing runs with different configs")
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("TREEREC_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, MissingArtifact, FileNotFoundError, ValueError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
