"""Sequence-to-sequence recommender over code tokens.

Histories become flat code-token sequences, the target is the next item's
L-token identifier, and ranking happens by beam search constrained to the
trie of catalog identifiers, so every emitted tuple names a real item.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import (RecommenderConfig, RunConfig, config_hash,
                     config_to_dict, derive_seed)

CHECKPOINT_VERSION = 1

PAD, BOS, EOS = 0, 1, 2


class VocabularyError(ValueError):
    pass


class CodeVocabulary:
    """Bijection between (level, code) pairs and recommender token ids.

    Leaf tokens are level-disambiguated by default even though the tokenizer
    shares one leaf codebook, so decoder positions keep unambiguous
    semantics; ``shared_leaf_tokens`` collapses levels 2..L onto one block.
    """

    def __init__(self, k_root: int, k_leaf: int, L: int,
                 shared_leaf_tokens: bool = False):
        self.k_root = k_root
        self.k_leaf = k_leaf
        self.L = L
        self.shared_leaf_tokens = shared_leaf_tokens
        leaf_blocks = 1 if shared_leaf_tokens else L - 1
        self.size = 3 + k_root + leaf_blocks * k_leaf

    def token(self, level: int, code: int) -> int:
        if level == 1:
            if not 0 <= code < self.k_root:
                raise VocabularyError(f"root code {code} out of range")
            return 3 + code
        if not 2 <= level <= self.L:
            raise VocabularyError(f"level {level} out of range 1..{self.L}")
        if not 0 <= code < self.k_leaf:
            raise VocabularyError(f"leaf code {code} out of range")
        block = 0 if self.shared_leaf_tokens else level - 2
        return 3 + self.k_root + block * self.k_leaf + code

    def parse(self, token: int):
        """Inverse of :meth:`token`; shared leaf tokens report level 2."""
        if token < 3 or token >= self.size:
            raise VocabularyError(f"token {token} is not a code token")
        if token < 3 + self.k_root:
            return 1, token - 3
        rel = token - 3 - self.k_root
        return 2 + rel // self.k_leaf, rel % self.k_leaf

    def encode_codes(self, codes) -> list:
        return [self.token(level + 1, c) for level, c in enumerate(codes)]

    def level_tokens(self, level: int) -> range:
        """All tokens legal at decoding step ``level`` (1-based)."""
        if level == 1:
            return range(3, 3 + self.k_root)
        block = 0 if self.shared_leaf_tokens else level - 2
        lo = 3 + self.k_root + block * self.k_leaf
        return range(lo, lo + self.k_leaf)

    def manifest(self) -> dict:
        return {"k_root": self.k_root, "k_leaf": self.k_leaf, "L": self.L,
                "shared_leaf_tokens": self.shared_leaf_tokens, "size": self.size}

    @classmethod
    def from_manifest(cls, m: dict) -> "CodeVocabulary":
        vocab = cls(m["k_root"], m["k_leaf"], m["L"], m["shared_leaf_tokens"])
        if vocab.size != m["size"]:
            raise VocabularyError("inconsistent vocabulary manifest")
        return vocab


@dataclass
class TokenizedExample:
    user_id: int
    x: list            # flattened history code tokens
    y: list            # L target code tokens
    target_item: int


@dataclass
class DatasetSplits:
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)


def tokenize_dataset(sequences, id_map: dict, vocab: CodeVocabulary,
                     max_history_items: int = 20) -> DatasetSplits:
    """Leave-one-out examples with level-mapped tokens.

    Training examples are all next-item prefixes within the training region;
    validation conditions on the training region, test additionally sees the
    validation target. Histories keep the most recent ``max_history_items``.
    """
    def toks(item_id):
        if item_id not in id_map:
            raise KeyError(f"item {item_id} has no identifier; run assignment "
                           f"over the full catalog first")
        return vocab.encode_codes(id_map[item_id].codes)

    def flat(history):
        out = []
        for item_id in history[-max_history_items:]:
            out.extend(toks(item_id))
        return out

    splits = DatasetSplits()
    for seq in sequences:
        region = seq.train_items
        for k in range(1, len(region)):
            splits.train.append(TokenizedExample(
                seq.user_id, flat(region[:k]), toks(region[k]), region[k]))
        if len(seq.items) >= 3:
            splits.valid.append(TokenizedExample(
                seq.user_id, flat(region), toks(seq.valid_target),
                seq.valid_target))
        if len(seq.items) >= 2 and region:
            splits.test.append(TokenizedExample(
                seq.user_id, flat(region + [seq.valid_target]),
                toks(seq.test_target), seq.test_target))
    return splits


class IdentifierTrie:
    """Prefix tree over tokenized identifiers; leaves carry the item id."""

    def __init__(self):
        self.root = {}
        self.leaf_items = {}
        self.n_items = 0

    def insert(self, tokens, item_id: int):
        node = self.root
        for tok in tokens:
            node = node.setdefault(tok, {})
        self.leaf_items[tuple(tokens)] = item_id
        self.n_items += 1

    @classmethod
    def from_identifier_map(cls, id_map: dict,
                            vocab: CodeVocabulary) -> "IdentifierTrie":
        trie = cls()
        for ident in sorted(id_map.values(), key=lambda i: i.item_id):
            trie.insert(vocab.encode_codes(ident.codes), ident.item_id)
        return trie


class RecommenderModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: RecommenderConfig, L: int):
        super().__init__()
        self.cfg = cfg
        self.L = L
        self.vocab_size = vocab_size
        max_x = cfg.max_history_items * L
        w = cfg.width
        self.emb = nn.Embedding(vocab_size, w, padding_idx=PAD)
        self.enc_pos = nn.Embedding(max_x, w)
        self.dec_pos = nn.Embedding(L + 1, w)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=w, nhead=cfg.heads, dim_feedforward=cfg.ff_mult * w,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.enc_layers,
                                             norm=nn.LayerNorm(w),
                                             enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(
            d_model=w, nhead=cfg.heads, dim_feedforward=cfg.ff_mult * w,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers,
                                             norm=nn.LayerNorm(w))
        self.head = nn.Linear(w, vocab_size)

    def encode(self, x: torch.Tensor, x_pad: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(x.shape[1])
        return self.encoder(self.emb(x) + self.enc_pos(pos),
                            src_key_padding_mask=x_pad)

    def decode(self, memory: torch.Tensor, mem_pad: torch.Tensor,
               y_in: torch.Tensor) -> torch.Tensor:
        n = y_in.shape[1]
        pos = torch.arange(n)
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        hidden = self.decoder(self.emb(y_in) + self.dec_pos(pos), memory,
                              tgt_mask=causal,
                              memory_key_padding_mask=mem_pad)
        return self.head(hidden)

    def forward(self, x, x_pad, y_in):
        return self.decode(self.encode(x, x_pad), x_pad, y_in)


def collate_examples(examples, L: int):
    max_x = max(len(ex.x) for ex in examples)
    max_x = max(max_x, 1)  # histories are nonempty by construction
    x = torch.full((len(examples), max_x), PAD, dtype=torch.long)
    for row, ex in enumerate(examples):
        x[row, : len(ex.x)] = torch.tensor(ex.x, dtype=torch.long)
    x_pad = x == PAD
    y = torch.tensor([ex.y for ex in examples], dtype=torch.long)
    y_in = torch.cat([torch.full((len(examples), 1), BOS, dtype=torch.long),
                      y[:, :-1]], dim=1)
    return x, x_pad, y, y_in


def rec_loss(model: RecommenderModel, examples) -> torch.Tensor:
    """Teacher-forced NLL of the target identifier, summed over its L tokens."""
    x, x_pad, y, y_in = collate_examples(examples, model.L)
    logits = model(x, x_pad, y_in)
    nll = F.cross_entropy(logits.transpose(1, 2), y, reduction="none")
    return nll.sum(dim=1).mean()


# ---------------------------------------------------------------------------
# constrained generation


@torch.no_grad()
def generate(model: RecommenderModel, x_tokens, trie: IdentifierTrie,
             beam: int, vocab: CodeVocabulary | None = None,
             unconstrained: bool = False):
    """Rank catalog items for one history by length-L beam search.

    Returns up to ``beam`` (item_id, score) pairs sorted by total
    log-probability. In unconstrained mode expansions cover the whole
    level-appropriate token block and tuples that name no catalog item are
    dropped afterwards.
    """
    if trie.n_items == 0:
        raise ValueError("identifier trie is empty")
    if unconstrained and vocab is None:
        raise ValueError("unconstrained generation needs the vocabulary")
    model.eval()
    x = torch.tensor([x_tokens], dtype=torch.long)
    memory = model.encode(x, x == PAD)
    beams = [(0.0, [], trie.root)]
    for step in range(model.L):
        y_in = torch.tensor([[BOS] + toks for _, toks, _ in beams],
                            dtype=torch.long)
        mem = memory.expand(len(beams), -1, -1)
        mem_pad = (x == PAD).expand(len(beams), -1)
        logits = model.decode(mem, mem_pad, y_in)[:, -1, :]
        logp = F.log_softmax(logits, dim=-1).double().numpy()
        candidates = []
        for b, (score, toks, node) in enumerate(beams):
            if unconstrained:
                allowed = [(tok, None) for tok in vocab.level_tokens(step + 1)]
            else:
                allowed = list(node.items())
            for tok, child in allowed:
                candidates.append((score + float(logp[b, tok]),
                                   toks + [tok], child))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = candidates[:beam]
    ranked = []
    for score, toks, _ in beams:
        item_id = trie.leaf_items.get(tuple(toks))
        if item_id is not None:
            ranked.append((item_id, score))
    return ranked


@torch.no_grad()
def rank_items(model: RecommenderModel, examples, trie: IdentifierTrie,
               beam: int, vocab: CodeVocabulary | None = None,
               unconstrained: bool = False) -> list:
    """Generate ranked lists for many examples; one (user, items, scores) each."""
    out = []
    for ex in examples:
        ranked = generate(model, ex.x, trie, beam, vocab=vocab,
                          unconstrained=unconstrained)
        out.append({"user_id": ex.user_id,
                    "items": [i for i, _ in ranked],
                    "scores": [s for _, s in ranked],
                    "target": ex.target_item})
    return out


# ---------------------------------------------------------------------------
# training


def _rec_checkpoint(model, cfg: RunConfig, vocab: CodeVocabulary, seed: int,
                    history, extra=None) -> dict:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "recommender",
        "recommender_cfg": dataclasses.asdict(cfg.recommender),
        "vocab": vocab.manifest(),
        "state": {k: v.clone() for k, v in model.state_dict().items()},
        "seed": seed,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "history": history,
    }
    payload.update(extra or {})
    return payload


def load_recommender(payload: dict):
    if payload.get("kind") != "recommender":
        raise ValueError(f"not a recommender checkpoint: "
                         f"kind={payload.get('kind')!r}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{payload.get('format_version')!r}")
    vocab = CodeVocabulary.from_manifest(payload["vocab"])
    cfg = RecommenderConfig(**payload["recommender_cfg"])
    model = RecommenderModel(vocab.size, cfg, vocab.L)
    model.load_state_dict(payload["state"], strict=True)
    model.eval()
    return model, vocab


def _train_epochs(model, examples, batch_size, optimizer, scheduler, rng):
    perm = rng.permutation(len(examples))
    total, steps = 0.0, 0
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in perm[start: start + batch_size]]
        loss = rec_loss(model, chunk)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite recommender loss ({loss.detach().item()})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        total += loss.detach().item()
        steps += 1
    return total / max(1, steps)


def pretrain_recommender(splits: DatasetSplits, vocab: CodeVocabulary,
                         cfg: RunConfig, epochs: int | None = None) -> dict:
    """Fixed-budget training on mixed-domain examples (no early stopping)."""
    rcfg = cfg.recommender
    epochs = rcfg.epochs_pretrain if epochs is None else epochs
    seed = derive_seed(cfg.seed, "rec-pretrain")
    torch.manual_seed(seed)
    model = RecommenderModel(vocab.size, rcfg, vocab.L)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=rcfg.lr_pretrain)
    steps = max(1, epochs * max(1, len(splits.train) // max(1, rcfg.batch_size)))
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "order", epoch))
        mean_loss = _train_epochs(model, splits.train, rcfg.batch_size,
                                  optimizer, scheduler, rng)
        history.append({"epoch": epoch, "loss": mean_loss})
    return _rec_checkpoint(model, cfg, vocab, seed, history,
                           {"phase": "pretrain"})


def finetune_recommender(checkpoint: dict | None, splits: DatasetSplits,
                         vocab: CodeVocabulary, trie: IdentifierTrie,
                         cfg: RunConfig, epochs: int | None = None,
                         valid_cap: int = 0) -> dict:
    """Adapt to one domain with early stopping on validation Recall@10.

    ``checkpoint=None`` trains from scratch (the no-pretraining ablations).
    Raises :class:`VocabularyError` if the checkpoint's vocabulary manifest
    does not match the identifier map in use.
    """
    from .evaluation import recall_at_k

    rcfg = cfg.recommender
    epochs = rcfg.epochs_finetune if epochs is None else epochs
    seed = derive_seed(cfg.seed, "rec-finetune")
    if checkpoint is None:
        torch.manual_seed(seed)
        model = RecommenderModel(vocab.size, rcfg, vocab.L)
    else:
        if checkpoint["vocab"] != vocab.manifest():
            raise VocabularyError(
                f"checkpoint vocabulary {checkpoint['vocab']} does not match "
                f"identifier map vocabulary {vocab.manifest()}")
        model, _ = load_recommender(checkpoint)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=rcfg.lr_finetune)
    steps = max(1, epochs * max(1, len(splits.train) // max(1, rcfg.batch_size)))
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)

    valid = splits.valid[:valid_cap] if valid_cap else splits.valid
    beam = min(rcfg.beam, max(trie.n_items, 1))
    best_state = copy.deepcopy(model.state_dict())
    best_recall = -1.0
    bad_rounds = 0
    history = []
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "order", epoch))
        mean_loss = _train_epochs(model, splits.train, rcfg.batch_size,
                                  optimizer, scheduler, rng)
        entry = {"epoch": epoch, "loss": mean_loss}
        if valid:
            ranked = rank_items(model, valid, trie, beam)
            recall = recall_at_k([r["items"] for r in ranked],
                                 [r["target"] for r in ranked], 10)
            entry["valid_recall@10"] = recall
            if recall > best_recall:
                best_recall = recall
                best_state = copy.deepcopy(model.state_dict())
                bad_rounds = 0
            else:
                bad_rounds += 1
            history.append(entry)
            if bad_rounds > rcfg.patience:
                break
        else:
            best_state = copy.deepcopy(model.state_dict())
            history.append(entry)
    model.load_state_dict(best_state)
    return _rec_checkpoint(model, cfg, vocab, seed, history,
                           {"phase": "finetune", "best_valid_recall": best_recall})
