"""Full item tokenizer: encoder -> codebooks -> dual decoders, plus training.

The training objective combines raw content reconstruction, the codebook
loss, co-occurrence alignment (InfoNCE over in-batch negatives) and
co-occurrence reconstruction. Pre-training runs on mixed multi-domain
batches; downstream fine-tuning freezes the codebook matrices E and adapts
everything else. Identifier assignment resolves code collisions by walking
the last level to the nearest unused leaf code.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import (ConfigError, EncoderConfig, QuantizerConfig, RunConfig,
                     config_hash, config_to_dict, derive_seed)
from .corpus import Corpus, PositiveSampler, build_cooccurrence, training_regions
from .persist import read_jsonl, write_jsonl
from .decoders import ImageDecoder, TextDecoder, raw_content_loss
from .encoder import ContentEncoder, ItemBatch, SlotProjector, collate_items
from .quantizer import (QuantizationResult, build_quantizer, codebook_loss,
                        inverse_prefix_residual, utilization_report)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CapacityError(RuntimeError):
    """All leaf codes for one identifier prefix are exhausted."""


@dataclass
class ItemIdentifier:
    item_id: int
    domain_id: int
    codes: tuple


class ItemTokenizer(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, quant_cfg: QuantizerConfig):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.quant_cfg = quant_cfg
        self.encoder = ContentEncoder(enc_cfg, quant_cfg.L)
        self.projector = SlotProjector(enc_cfg.d, enc_cfg.d_c, hidden=enc_cfg.d)
        self.quantizer = build_quantizer(quant_cfg, enc_cfg.d_c)
        self.restore = nn.Linear(enc_cfg.d_c, enc_cfg.d)
        self.text_decoder = TextDecoder(enc_cfg.d, enc_cfg.text_vocab,
                                        enc_cfg.t_max, quant_cfg.L, enc_cfg.heads)
        self.image_decoder = ImageDecoder(enc_cfg.d, enc_cfg.d_v,
                                          enc_cfg.n_patches, quant_cfg.L,
                                          enc_cfg.heads)

    def content(self, batch: ItemBatch) -> torch.Tensor:
        """Per-item content representations H, one row per code slot."""
        return self.encoder(batch)

    def discretize(self, h: torch.Tensor):
        """Project, quantize, and restore decoder inputs from H."""
        result = self.quantizer(self.projector(h))
        h_hat = self.restore(inverse_prefix_residual(result.quantized_st))
        return result, h_hat

    @torch.no_grad()
    def codes_for(self, batch: ItemBatch) -> QuantizationResult:
        was_training = self.training
        self.eval()
        try:
            return self.quantizer(self.projector(self.encoder(batch)))
        finally:
            self.train(was_training)


def alignment_loss(h: torch.Tensor, h_pos: torch.Tensor,
                   tau: float) -> torch.Tensor:
    """Per-level InfoNCE over cosine similarity with in-batch negatives.

    Summed over levels and averaged over the batch; a batch of one has no
    negatives and is rejected.
    """
    if h.shape[0] < 2:
        raise ValueError("alignment loss needs a batch of at least 2")
    bsz, n_levels = h.shape[0], h.shape[1]
    targets = torch.arange(bsz)
    total = h.new_zeros(())
    for level in range(n_levels):
        anchors = F.normalize(h[:, level, :], dim=-1)
        positives = F.normalize(h_pos[:, level, :], dim=-1)
        logits = anchors @ positives.T / tau
        total = total + F.cross_entropy(logits, targets)
    return total


def tokenizer_total_loss(model: ItemTokenizer, anchor: ItemBatch,
                         positive: ItemBatch, losses_cfg,
                         generator: torch.Generator | None = None):
    """Weighted sum of the four tokenizer objectives plus a component dict."""
    h = model.content(anchor)
    h_pos = model.content(positive)
    result, h_hat = model.discretize(h)

    l_raw, raw_parts = raw_content_loss(model.text_decoder, model.image_decoder,
                                        h_hat, anchor, losses_cfg.alpha,
                                        generator=generator)
    l_code = codebook_loss(result)
    l_ali = alignment_loss(h, h_pos, losses_cfg.tau)
    l_re, _ = raw_content_loss(model.text_decoder, model.image_decoder,
                               h_hat, positive, losses_cfg.alpha,
                               generator=generator)
    total = (l_raw + losses_cfg.lam * l_code + losses_cfg.mu * l_ali
             + losses_cfg.eta * l_re)
    components = {"raw": l_raw, "code": l_code, "align": l_ali, "cooccur": l_re,
                  "text": raw_parts["text"].total, "image": raw_parts["image"],
                  "total": total}
    return total, components


# ---------------------------------------------------------------------------
# training


def _no_decay(name: str, param: torch.Tensor) -> bool:
    if param.ndim <= 1:
        return True
    return any(tag in name for tag in ("emb", "e_root", "e_leaf", "books"))


def make_optimizer(model: nn.Module, lr: float, weight_decay: float):
    decay, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (plain if _no_decay(name, p) else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay},
         {"params": plain, "weight_decay": 0.0}], lr=lr)


def _train_tokenizer(model: ItemTokenizer, corpus: Corpus, cfg: RunConfig,
                     lr: float, epochs: int, seed: int) -> list:
    items = sorted(corpus.items.values(), key=lambda it: it.item_id)
    positives = build_cooccurrence(training_regions(corpus.sequences))
    sampler = PositiveSampler(positives, seed=derive_seed(seed, "positives"))
    noise = torch.Generator().manual_seed(derive_seed(seed, "noise"))
    optimizer = make_optimizer(model, lr, cfg.tokenizer_train.weight_decay)
    batch_size = cfg.tokenizer_train.batch_size
    steps_per_epoch = max(1, len(items) // batch_size + (len(items) % batch_size >= 2))
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, epochs * steps_per_epoch))

    history = []
    model.train()
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(seed, "order", epoch))
        perm = order.permutation(len(items))
        sampler.reseed(derive_seed(seed, "pos", epoch))
        sums, n_steps = {}, 0
        for start in range(0, len(items), batch_size):
            chunk = [items[i] for i in perm[start: start + batch_size]]
            if len(chunk) < 2:
                continue  # in-batch negatives need at least two anchors
            anchor = collate_items(chunk, model.enc_cfg)
            pos_items = [corpus.items[sampler.sample(it.item_id)] for it in chunk]
            positive = collate_items(pos_items, model.enc_cfg)
            total, comps = tokenizer_total_loss(model, anchor, positive,
                                                cfg.losses, generator=noise)
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite tokenizer loss at epoch {epoch}: "
                    + ", ".join(f"{k}={v.detach().item():.4g}"
                                for k, v in comps.items()))
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            scheduler.step()
            n_steps += 1
            for key, value in comps.items():
                sums[key] = sums.get(key, 0.0) + value.detach().item()
        history.append({"epoch": epoch,
                        **{k: v / max(1, n_steps) for k, v in sums.items()}})
    return history


@torch.no_grad()
def _data_init_codebooks(model: ItemTokenizer, corpus: Corpus, seed: int,
                         sample_cap: int = 512):
    """Seed E rows from the untrained encoder's projections over the corpus."""
    items = sorted(corpus.items.values(), key=lambda it: it.item_id)
    rng = np.random.default_rng(derive_seed(seed, "data-init"))
    if len(items) > sample_cap:
        items = [items[i] for i in rng.choice(len(items), sample_cap,
                                              replace=False)]
    model.eval()
    h_proj = model.projector(model.encoder(collate_items(items, model.enc_cfg)))
    gen = torch.Generator().manual_seed(derive_seed(seed, "data-init-jitter"))
    model.quantizer.init_from_data(h_proj, generator=gen)
    model.train()


def _corpus_codes(model: ItemTokenizer, corpus: Corpus,
                  batch_size: int = 256) -> np.ndarray:
    items = sorted(corpus.items.values(), key=lambda it: it.item_id)
    rows = []
    for start in range(0, len(items), batch_size):
        batch = collate_items(items[start: start + batch_size], model.enc_cfg)
        rows.append(model.codes_for(batch).codes.numpy())
    return np.concatenate(rows, axis=0)


def _checkpoint(model: ItemTokenizer, cfg: RunConfig, seed: int,
                history, extra=None) -> dict:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "tokenizer",
        "encoder_cfg": dataclasses.asdict(model.enc_cfg),
        "quantizer_cfg": dataclasses.asdict(model.quant_cfg),
        "state": {k: v.clone() for k, v in model.state_dict().items()},
        "seed": seed,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "history": history,
    }
    payload.update(extra or {})
    return payload


def load_tokenizer(payload: dict) -> ItemTokenizer:
    if payload.get("kind") != "tokenizer":
        raise ValueError(f"not a tokenizer checkpoint: kind={payload.get('kind')!r}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{payload.get('format_version')!r}")
    enc_cfg = EncoderConfig(**payload["encoder_cfg"])
    quant_cfg = QuantizerConfig(**payload["quantizer_cfg"])
    model = ItemTokenizer(enc_cfg, quant_cfg)
    model.load_state_dict(payload["state"], strict=True)
    model.eval()
    return model


def pretrain_tokenizer(corpus: Corpus, cfg: RunConfig, domains=None,
                       model: ItemTokenizer | None = None) -> dict:
    """Train the full tokenizer on mixed-domain batches; returns a checkpoint."""
    domains = cfg.corpus.pretrain_domains if domains is None else domains
    sub = corpus.restrict_to_domains(domains)
    if not sub.items:
        raise ConfigError(f"no items in pre-training domains {domains}")
    seed = derive_seed(cfg.seed, "tokenizer-pretrain")
    if model is None:
        torch.manual_seed(seed)
        model = ItemTokenizer(cfg.encoder, cfg.quantizer)
        if cfg.quantizer.data_init:
            _data_init_codebooks(model, sub, seed)
    if model.quantizer.frozen_e:
        raise ConfigError("codebook matrices are frozen; pre-training must "
                          "update E (clear frozen_E or use fine-tuning)")
    history = _train_tokenizer(model, sub, cfg, cfg.tokenizer_train.lr_pretrain,
                               cfg.tokenizer_train.epochs_pretrain, seed)
    codes = _corpus_codes(model, sub)
    util = utilization_report(codes, cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                              shared_leaf=model.quantizer.variant == "tree")
    return _checkpoint(model, cfg, seed, history,
                       {"phase": "pretrain", "utilization": util})


def finetune_tokenizer(checkpoint: dict, corpus: Corpus, cfg: RunConfig,
                       domain=None) -> dict:
    """Adapt a pre-trained tokenizer to one domain with frozen E matrices.

    ``full_ft`` unfreezes E; the encoder/decoder update flags default to on.
    The identifier length L must match the checkpoint.
    """
    if checkpoint["quantizer_cfg"]["L"] != cfg.quantizer.L:
        raise ConfigError(
            f"identifier length mismatch: checkpoint L="
            f"{checkpoint['quantizer_cfg']['L']}, config L={cfg.quantizer.L}")
    model = load_tokenizer(checkpoint)
    domain = cfg.corpus.downstream_domain if domain is None else domain
    sub = corpus.restrict_to_domains([domain])
    if not sub.items:
        raise ConfigError(f"no items in fine-tuning domain {domain}")

    tcfg = cfg.tokenizer_train
    freeze_e = tcfg.freeze_codebook_finetune and not tcfg.full_ft
    model.quantizer.set_frozen_e(freeze_e)
    if not tcfg.tune_encoder_finetune:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    if not tcfg.tune_decoders_finetune:
        for p in list(model.text_decoder.parameters()) + \
                 list(model.image_decoder.parameters()):
            p.requires_grad_(False)

    seed = derive_seed(cfg.seed, "tokenizer-finetune", domain)
    model.train()
    history = _train_tokenizer(model, sub, cfg, tcfg.lr_finetune,
                               tcfg.epochs_finetune, seed)
    model.quantizer.set_frozen_e(False)
    for p in model.parameters():
        p.requires_grad_(True)
    codes = _corpus_codes(model, sub)
    util = utilization_report(codes, cfg.quantizer.k_root, cfg.quantizer.k_leaf,
                              shared_leaf=model.quantizer.variant == "tree")
    return _checkpoint(model, cfg, seed, history,
                       {"phase": "finetune", "domain": domain,
                        "frozen_e_during_training": freeze_e,
                        "utilization": util})


# ---------------------------------------------------------------------------
# identifier assignment


@torch.no_grad()
def assign_identifiers(items, model: ItemTokenizer,
                       batch_size: int = 256) -> dict:
    """Map every item to a unique code tuple, ascending item_id order.

    On a collision the later item keeps its prefix and its last-level code
    moves to the nearest unused leaf code by quantization distance. Walking
    nearest-first guarantees injectivity for arbitrarily deep collisions;
    a prefix with all leaf codes taken raises :class:`CapacityError`.
    """
    model.eval()
    ordered = sorted(items.values(), key=lambda it: it.item_id)
    leaf = model.quantizer.leaf_codebook().detach().numpy().astype(np.float64)
    taken = set()
    out = {}
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start: start + batch_size]
        result = model.codes_for(collate_items(chunk, model.enc_cfg))
        codes = result.codes.numpy()
        last_res = result.residuals[:, -1, :].numpy().astype(np.float64)
        for row, item in enumerate(chunk):
            natural = tuple(int(c) for c in codes[row])
            if natural not in taken:
                chosen = natural
            else:
                prefix = natural[:-1]
                dists = ((leaf - last_res[row]) ** 2).sum(axis=1)
                chosen = None
                for j in np.argsort(dists, kind="stable"):
                    cand = prefix + (int(j),)
                    if cand not in taken:
                        chosen = cand
                        break
                if chosen is None:
                    raise CapacityError(
                        f"all {leaf.shape[0]} leaf codes exhausted for "
                        f"prefix {prefix} (item {item.item_id})")
            taken.add(chosen)
            out[item.item_id] = ItemIdentifier(item_id=item.item_id,
                                               domain_id=item.domain_id,
                                               codes=chosen)
    assert len({ident.codes for ident in out.values()}) == len(out), \
        "identifier map must be injective"
    return out


def save_identifier_map(path, id_map: dict, meta: dict | None = None):
    write_jsonl(path, (
        {"item_id": ident.item_id, "domain_id": ident.domain_id,
         "codes": list(ident.codes)}
        for ident in sorted(id_map.values(), key=lambda i: i.item_id)), meta)


def load_identifier_map(path) -> dict:
    out = {}
    for rec in read_jsonl(path):
        out[rec["item_id"]] = ItemIdentifier(
            item_id=rec["item_id"], domain_id=rec["domain_id"],
            codes=tuple(rec["codes"]))
    return out
