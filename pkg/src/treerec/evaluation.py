"""Full-ranking metrics, popularity breakdowns, and the ablation harness."""

from __future__ import annotations

import math
from collections import Counter


def target_ranks(ranked_lists, targets) -> list:
    """1-based rank of each user's target in their list, None if absent."""
    out = []
    for ranked, target in zip(ranked_lists, targets):
        try:
            out.append(ranked.index(target) + 1)
        except ValueError:
            out.append(None)
    return out


def recall_at_k(ranked_lists, targets, k: int) -> float:
    """Fraction of users whose target appears in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = target_ranks(ranked_lists, targets)
    if not ranks:
        return 0.0
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def ndcg_at_k(ranked_lists, targets, k: int) -> float:
    """Mean of 1/log2(rank+1) over users (single relevant item, IDCG = 1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = target_ranks(ranked_lists, targets)
    if not ranks:
        return 0.0
    gains = [1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0
             for r in ranks]
    return sum(gains) / len(gains)


def metric_report(ranked_lists, targets, ks, group_of=None) -> dict:
    """Overall metrics, optionally broken down by a target-keyed grouping."""
    report = {"n_users": len(targets), "overall": _metrics(ranked_lists, targets, ks)}
    if group_of is not None:
        groups = {}
        for ranked, target in zip(ranked_lists, targets):
            groups.setdefault(group_of(target), []).append((ranked, target))
        report["groups"] = {
            str(name): {"n_users": len(pairs),
                        **_metrics([p[0] for p in pairs], [p[1] for p in pairs], ks)}
            for name, pairs in sorted(groups.items())}
    return report


def _metrics(ranked_lists, targets, ks) -> dict:
    out = {}
    for k in ks:
        out[f"recall@{k}"] = recall_at_k(ranked_lists, targets, k)
        out[f"ndcg@{k}"] = ndcg_at_k(ranked_lists, targets, k)
    return out


def training_popularity(sequences) -> Counter:
    """Interaction count of each item within the training regions."""
    counts = Counter()
    for seq in sequences:
        counts.update(seq.train_items)
    return counts


def bucket_label(popularity: int, edges) -> str:
    for lo, hi in zip(edges, edges[1:]):
        if lo <= popularity < hi:
            return f"[{lo},{hi})"
    return f">={edges[-1]}"


def longtail_report(ranked_lists, targets, popularity, edges, ks,
                    baseline: dict | None = None) -> dict:
    """Metrics per target-popularity bucket; empty buckets are absent.

    ``baseline`` is a prior longtail report; matching buckets gain
    ``delta_*`` entries against it.
    """
    buckets = {}
    for ranked, target in zip(ranked_lists, targets):
        label = bucket_label(popularity.get(target, 0), edges)
        buckets.setdefault(label, []).append((ranked, target))
    report = {}
    order = [f"[{lo},{hi})" for lo, hi in zip(edges, edges[1:])] + [f">={edges[-1]}"]
    for label in order:
        if label not in buckets:
            continue
        pairs = buckets[label]
        entry = {"n_users": len(pairs),
                 **_metrics([p[0] for p in pairs], [p[1] for p in pairs], ks)}
        if baseline and label in baseline:
            for k in ks:
                for metric in (f"recall@{k}", f"ndcg@{k}"):
                    entry[f"delta_{metric}"] = (entry[metric]
                                                - baseline[label][metric])
        report[label] = entry
    return report


# ---------------------------------------------------------------------------
# ablation harness

ABLATION_VARIANTS = ("full", "wo_treecode", "wo_align", "wo_cooccur_recon",
                     "wo_ft_tokenizer", "full_ft", "wo_pt_rec", "wo_pt")


def ablation_suite(cfg, seeds=None, variants=ABLATION_VARIANTS,
                   corpus=None) -> dict:
    """Run the named pipeline variants under shared seeds.

    Returns ``{"rows": [{variant, seed, recall@10, ndcg@10}, ...],
    "table": ...}`` shaped like a per-variant comparison table.
    """
    from .pipeline import make_variant, run_pipeline

    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        for name in variants:
            result = run_pipeline(cfg, variant=make_variant(name), seed=seed,
                                  corpus=corpus)
            overall = result["metrics"]["overall"]
            rows.append({"variant": name, "seed": seed,
                         "recall@10": overall.get("recall@10"),
                         "ndcg@10": overall.get("ndcg@10")})
    table = {}
    for name in variants:
        picked = [r for r in rows if r["variant"] == name]
        table[name] = {
            "recall@10": sum(r["recall@10"] for r in picked) / len(picked),
            "ndcg@10": sum(r["ndcg@10"] for r in picked) / len(picked),
            "n_seeds": len(picked)}
    return {"rows": rows, "table": table}


def format_ablation_table(report: dict) -> str:
    lines = [f"{'variant':<20} {'Recall@10':>10} {'NDCG@10':>10} {'seeds':>6}"]
    for name, entry in report["table"].items():
        lines.append(f"{name:<20} {entry['recall@10']:>10.4f} "
                     f"{entry['ndcg@10']:>10.4f} {entry['n_seeds']:>6}")
    return "\n".join(lines)
