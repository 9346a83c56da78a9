import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treerec.corpus import InteractionSequence
from treerec.evaluation import (bucket_label, longtail_report, metric_report,
                                ndcg_at_k, recall_at_k, target_ranks,
                                training_popularity)
from treerec.pipeline import apply_variant, make_variant
from treerec.config import RunConfig

RANK_FIXTURE = [1, 3, 7, 11, 2, 50, 4, 9, 10, 6]


def lists_from_ranks(ranks, depth=60):
    """Build ranked lists where user u's target sits at the given 1-based rank."""
    lists, targets = [], []
    for u, rank in enumerate(ranks):
        target = 1000 + u
        ranked = [f"filler_{u}_{k}" for k in range(depth)]
        ranked[rank - 1] = target
        lists.append(ranked)
        targets.append(target)
    return lists, targets


def test_recall_all_hits():
    lists, targets = lists_from_ranks([1] * 7)
    assert recall_at_k(lists, targets, 5) == 1.0


def test_recall_target_absent():
    lists = [["a", "b"], ["c"]]
    assert recall_at_k(lists, [1, 2], 10) == 0.0


def test_recall_fixture_hand_count():
    lists, targets = lists_from_ranks(RANK_FIXTURE)
    hand_count = sum(1 for r in RANK_FIXTURE if r <= 10)  # = 8 of 10 users
    assert hand_count == 8
    assert recall_at_k(lists, targets, 10) == hand_count / len(RANK_FIXTURE)


def test_recall_rejects_bad_k():
    with pytest.raises(ValueError):
        recall_at_k([], [], 0)
    with pytest.raises(ValueError):
        ndcg_at_k([], [], -1)


def test_ndcg_rank_one_is_perfect():
    lists, targets = lists_from_ranks([1])
    assert ndcg_at_k(lists, targets, 10) == 1.0


def test_ndcg_rank_three_closed_form():
    lists, targets = lists_from_ranks([3])
    assert ndcg_at_k(lists, targets, 10) == pytest.approx(1 / math.log2(4))
    assert ndcg_at_k(lists, targets, 10) == pytest.approx(0.5)


def test_ndcg_fixture_matches_independent_recompute():
    lists, targets = lists_from_ranks(RANK_FIXTURE)
    per_user = [1.0 / math.log2(r + 1) if r <= 10 else 0.0 for r in RANK_FIXTURE]
    assert ndcg_at_k(lists, targets, 10) == pytest.approx(
        sum(per_user) / len(per_user), rel=1e-12)


def test_target_ranks_none_for_missing():
    assert target_ranks([["a", "b"], ["b"]], ["b", "a"]) == [2, None]


@given(st.lists(st.integers(1, 40), min_size=1, max_size=30),
       st.integers(1, 20))
@settings(max_examples=60, deadline=None)
def test_ndcg_recall_bounds(ranks, k):
    lists, targets = lists_from_ranks(ranks)
    recall = recall_at_k(lists, targets, k)
    ndcg = ndcg_at_k(lists, targets, k)
    assert ndcg <= recall + 1e-12
    assert ndcg >= recall / math.log2(k + 1) - 1e-12


def test_metrics_invariant_to_user_permutation(rng):
    ranks = list(rng.integers(1, 30, size=12))
    lists, targets = lists_from_ranks(ranks)
    perm = rng.permutation(12)
    lists_p = [lists[i] for i in perm]
    targets_p = [targets[i] for i in perm]
    assert recall_at_k(lists, targets, 10) == recall_at_k(lists_p, targets_p, 10)
    assert ndcg_at_k(lists, targets, 10) == ndcg_at_k(lists_p, targets_p, 10)


def test_metric_report_groups_average_to_overall():
    ranks = [1, 5, 12, 2, 30, 4]
    lists, targets = lists_from_ranks(ranks)
    group_of = {t: t % 2 for t in targets}
    report = metric_report(lists, targets, ks=[10],
                           group_of=lambda t: group_of[t])
    weighted = sum(g["n_users"] * g["recall@10"]
                   for g in report["groups"].values())
    assert weighted / report["n_users"] == pytest.approx(
        report["overall"]["recall@10"])


# ---------------------------------------------------------------------------
# popularity buckets


def test_training_popularity_counts_training_region_only():
    seqs = [InteractionSequence(0, [1, 1, 2, 3, 4]),
            InteractionSequence(1, [1, 2, 5, 6, 7])]
    pop = training_popularity(seqs)
    assert pop[1] == 3
    assert pop[2] == 2
    assert 4 not in pop  # eval targets excluded
    assert 3 not in pop


def test_bucket_label_edges():
    edges = [0, 20, 40, 60]
    assert bucket_label(0, edges) == "[0,20)"
    assert bucket_label(19, edges) == "[0,20)"
    assert bucket_label(20, edges) == "[20,40)"
    assert bucket_label(61, edges) == ">=60"


def test_longtail_single_bucket_equals_overall():
    ranks = [1, 4, 12, 2]
    lists, targets = lists_from_ranks(ranks)
    pop = {t: 5 for t in targets}
    report = longtail_report(lists, targets, pop, [0, 20], ks=[10])
    assert list(report) == ["[0,20)"]
    assert report["[0,20)"]["recall@10"] == recall_at_k(lists, targets, 10)


def test_longtail_two_equal_buckets_average_to_overall():
    ranks = [1, 12, 2, 30]
    lists, targets = lists_from_ranks(ranks)
    pop = {targets[0]: 1, targets[1]: 1, targets[2]: 25, targets[3]: 25}
    report = longtail_report(lists, targets, pop, [0, 20, 40], ks=[10])
    mean = (report["[0,20)"]["recall@10"] + report["[20,40)"]["recall@10"]) / 2
    assert mean == pytest.approx(recall_at_k(lists, targets, 10))


def test_longtail_membership_matches_histogram(rng):
    ranks = list(rng.integers(1, 30, size=40))
    lists, targets = lists_from_ranks(ranks)
    pop = {t: int(rng.integers(0, 90)) for t in targets}
    edges = [0, 20, 40, 60]
    report = longtail_report(lists, targets, pop, edges, ks=[10])
    histogram = {}
    for t in targets:
        histogram[bucket_label(pop[t], edges)] = \
            histogram.get(bucket_label(pop[t], edges), 0) + 1
    assert {k: v["n_users"] for k, v in report.items()} == histogram


def test_longtail_empty_bucket_absent_and_deltas():
    lists, targets = lists_from_ranks([1, 2])
    pop = {targets[0]: 5, targets[1]: 25}
    base = longtail_report(lists, targets, pop, [0, 20, 40, 60], ks=[10])
    assert ">=60" not in base
    lists2, targets2 = lists_from_ranks([15, 2])
    pop2 = {targets2[0]: 5, targets2[1]: 25}
    withdelta = longtail_report(lists2, targets2, pop2, [0, 20, 40, 60],
                                ks=[10], baseline=base)
    assert withdelta["[0,20)"]["delta_recall@10"] == pytest.approx(-1.0)


# ---------------------------------------------------------------------------
# ablation variant mapping


def test_variant_flag_mapping():
    assert make_variant("wo_align").mu == 0.0
    assert make_variant("wo_cooccur_recon").eta == 0.0
    assert make_variant("wo_treecode").quantizer_variant == "multilevel"
    assert make_variant("wo_ft_tokenizer").tokenizer_finetune is False
    assert make_variant("full_ft").full_ft is True
    assert make_variant("wo_pt_rec").rec_pretrain is False
    wo_pt = make_variant("wo_pt")
    assert wo_pt.tokenizer_pretrain is False and wo_pt.rec_pretrain is False
    with pytest.raises(ValueError):
        make_variant("nope")


def test_apply_variant_rewrites_config():
    cfg = RunConfig()
    out = apply_variant(cfg, make_variant("wo_align"), seed=7)
    assert out.losses.mu == 0.0
    assert out.seed == 7
    assert cfg.losses.mu == 0.01  # original untouched
    out2 = apply_variant(cfg, make_variant("wo_treecode"))
    assert out2.quantizer.variant == "multilevel"
    out3 = apply_variant(cfg, make_variant("full_ft"))
    assert out3.tokenizer_train.full_ft is True
