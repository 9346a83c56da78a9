"""End-to-end orchestration: corpus -> tokenizer -> identifiers -> recommender.

Both the CLI and the ablation harness drive these functions. A
:class:`PipelineVariant` captures the switches that the comparison table
flips: quantizer flavor, loss weights, which phases run, and codebook
freezing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

from .config import RunConfig, derive_seed
from .corpus import Corpus, build_corpus
from .evaluation import longtail_report, metric_report, training_popularity
from .recommender import (CodeVocabulary, IdentifierTrie, finetune_recommender,
                          load_recommender, pretrain_recommender, rank_items,
                          tokenize_dataset)
from .tokenizer import (assign_identifiers, finetune_tokenizer, load_tokenizer,
                        pretrain_tokenizer)


@dataclass
class PipelineVariant:
    name: str = "full"
    quantizer_variant: str | None = None   # None keeps the config's choice
    mu: float | None = None
    eta: float | None = None
    tokenizer_pretrain: bool = True
    tokenizer_finetune: bool = True
    full_ft: bool = False
    rec_pretrain: bool = True


_VARIANTS = {
    "full": PipelineVariant("full"),
    "wo_treecode": PipelineVariant("wo_treecode", quantizer_variant="multilevel"),
    "wo_align": PipelineVariant("wo_align", mu=0.0),
    "wo_cooccur_recon": PipelineVariant("wo_cooccur_recon", eta=0.0),
    "wo_ft_tokenizer": PipelineVariant("wo_ft_tokenizer",
                                       tokenizer_finetune=False),
    "full_ft": PipelineVariant("full_ft", full_ft=True),
    "wo_pt_rec": PipelineVariant("wo_pt_rec", rec_pretrain=False),
    "wo_pt": PipelineVariant("wo_pt", tokenizer_pretrain=False,
                             rec_pretrain=False),
}


def make_variant(name: str) -> PipelineVariant:
    if name not in _VARIANTS:
        raise ValueError(f"unknown ablation variant {name!r}; "
                         f"choose from {sorted(_VARIANTS)}")
    return _VARIANTS[name]


def apply_variant(cfg: RunConfig, variant: PipelineVariant,
                  seed: int | None = None) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg.seed = seed
    if variant.quantizer_variant is not None:
        cfg.quantizer = replace(cfg.quantizer, variant=variant.quantizer_variant)
    if variant.mu is not None:
        cfg.losses = replace(cfg.losses, mu=variant.mu)
    if variant.eta is not None:
        cfg.losses = replace(cfg.losses, eta=variant.eta)
    if variant.full_ft:
        cfg.tokenizer_train = replace(cfg.tokenizer_train, full_ft=True)
    return cfg


def corpus_for_run(cfg: RunConfig) -> Corpus:
    """Synthesize (or later: load) the corpus; seeded from the run seed."""
    synth = replace(cfg.corpus.synth,
                    seed=derive_seed(cfg.seed, "corpus", cfg.corpus.synth.seed))
    return build_corpus(synth, cfg.corpus.min_interactions,
                        cfg.corpus.max_seq_len)


def train_tokenizers(cfg: RunConfig, corpus: Corpus,
                     variant: PipelineVariant):
    """Returns (pretrain checkpoint or None, downstream checkpoint)."""
    downstream = cfg.corpus.downstream_domain
    if not variant.tokenizer_pretrain:
        ds_ckpt = pretrain_tokenizer(corpus, cfg, domains=[downstream])
        return None, ds_ckpt
    pre_ckpt = pretrain_tokenizer(corpus, cfg)
    if variant.tokenizer_finetune:
        ds_ckpt = finetune_tokenizer(pre_ckpt, corpus, cfg)
    else:
        ds_ckpt = pre_ckpt
    return pre_ckpt, ds_ckpt


def run_pipeline(cfg: RunConfig, variant: PipelineVariant | None = None,
                 seed: int | None = None, corpus: Corpus | None = None) -> dict:
    """One full train-and-evaluate pass on the downstream domain."""
    variant = variant or PipelineVariant()
    cfg = apply_variant(cfg, variant, seed)
    if corpus is None:
        corpus = corpus_for_run(cfg)
    downstream = cfg.corpus.downstream_domain
    vocab = CodeVocabulary(cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                           cfg.quantizer.L,
                           cfg.recommender.shared_leaf_tokens)

    pre_ckpt, ds_ckpt = train_tokenizers(cfg, corpus, variant)

    ds_items = corpus.restrict_to_domains([downstream]).items
    id_map_ds = assign_identifiers(ds_items, load_tokenizer(ds_ckpt))

    rec_pre = None
    if variant.rec_pretrain and pre_ckpt is not None:
        pre_corpus = corpus.restrict_to_domains(cfg.corpus.pretrain_domains)
        id_map_pre = assign_identifiers(pre_corpus.items,
                                        load_tokenizer(pre_ckpt))
        splits_pre = tokenize_dataset(pre_corpus.sequences, id_map_pre, vocab,
                                      cfg.recommender.max_history_items)
        rec_pre = pretrain_recommender(splits_pre, vocab, cfg)

    ds_corpus = corpus.restrict_to_domains([downstream])
    splits_ds = tokenize_dataset(ds_corpus.sequences, id_map_ds, vocab,
                                 cfg.recommender.max_history_items)
    trie = IdentifierTrie.from_identifier_map(id_map_ds, vocab)
    rec_ckpt = finetune_recommender(rec_pre, splits_ds, vocab, trie, cfg)

    model, _ = load_recommender(rec_ckpt)
    beam = min(cfg.recommender.beam, trie.n_items)
    ranked = rank_items(model, splits_ds.test, trie, beam)
    lists = [r["items"] for r in ranked]
    targets = [r["target"] for r in ranked]
    metrics = metric_report(lists, targets, cfg.eval.ks)
    popularity = training_popularity(ds_corpus.sequences)
    longtail = longtail_report(lists, targets, popularity,
                               cfg.eval.bucket_edges, cfg.eval.ks)
    return {
        "variant": variant.name,
        "seed": cfg.seed,
        "metrics": metrics,
        "longtail": longtail,
        "predictions": ranked,
        "tokenizer_checkpoint": ds_ckpt,
        "tokenizer_pretrain_checkpoint": pre_ckpt,
        "recommender_checkpoint": rec_ckpt,
        "identifier_map": id_map_ds,
    }
