"""Catalogs, interaction data and co-occurrence structure.

Items carry a token-id text sequence and a matrix of continuous image patch
features. Interaction sequences are chronological item-id lists split
leave-one-out (last item = test target, second-to-last = validation target).
A synthetic multi-domain generator provides cluster-structured corpora with
ground-truth labels so downstream semantics can be verified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SynthConfig
from .persist import read_jsonl, write_jsonl


class CorpusError(ValueError):
    """Degenerate or inconsistent corpus data."""


@dataclass
class Item:
    item_id: int
    domain_id: int
    text: list           # token ids, nonempty, length <= t_max
    image: np.ndarray    # [P, d_v] float64
    cluster: int | None = None  # ground-truth label, synthetic corpora only

    def validate(self):
        if len(self.text) == 0:
            raise CorpusError(f"item {self.item_id}: empty text")
        if self.image.ndim != 2:
            raise CorpusError(f"item {self.item_id}: image must be a matrix")


@dataclass
class InteractionSequence:
    user_id: int
    items: list          # chronological item ids

    @property
    def test_target(self) -> int:
        return self.items[-1]

    @property
    def valid_target(self) -> int:
        return self.items[-2]

    @property
    def train_items(self) -> list:
        """Items before the validation/test targets."""
        return self.items[:-2]


@dataclass
class Corpus:
    items: dict = field(default_factory=dict)      # item_id -> Item
    sequences: list = field(default_factory=list)  # InteractionSequence

    def domain_items(self, domain_id) -> list:
        return [it for it in self.items.values() if it.domain_id == domain_id]

    def domain_sequences(self, domain_id) -> list:
        """Sequences whose items all live in ``domain_id``."""
        return [s for s in self.sequences
                if all(self.items[i].domain_id == domain_id for i in s.items)]

    def restrict_to_domains(self, domain_ids) -> "Corpus":
        wanted = set(domain_ids)
        items = {i: it for i, it in self.items.items() if it.domain_id in wanted}
        seqs = [s for s in self.sequences if all(i in items for i in s.items)]
        return Corpus(items=items, sequences=seqs)


# ---------------------------------------------------------------------------
# filtering / splitting


def five_core_filter(items: dict, sequences: list, min_interactions: int = 5):
    """Iteratively drop users and items with < ``min_interactions`` interactions.

    Runs recount passes until a fixed point, so removing a user can cascade
    into removing items whose counts dropped, and vice versa. Raises
    :class:`CorpusError` if nothing survives.
    """
    seqs = [InteractionSequence(s.user_id, list(s.items)) for s in sequences]
    while True:
        counts = {}
        for s in seqs:
            for i in s.items:
                counts[i] = counts.get(i, 0) + 1
        bad_items = {i for i in items if counts.get(i, 0) < min_interactions}
        changed = bool(bad_items)
        if bad_items:
            items = {i: it for i, it in items.items() if i not in bad_items}
            seqs = [InteractionSequence(s.user_id,
                                        [i for i in s.items if i not in bad_items])
                    for s in seqs]
        kept = [s for s in seqs if len(s.items) >= min_interactions]
        changed = changed or len(kept) != len(seqs)
        seqs = kept
        if not changed:
            break
    if not items or not seqs:
        raise CorpusError("five-core filtering removed the entire corpus")
    return items, seqs


def truncate_sequences(sequences: list, max_len: int = 20) -> list:
    """Keep the most recent ``max_len`` interactions of every sequence."""
    return [InteractionSequence(s.user_id, list(s.items[-max_len:]))
            for s in sequences]


def training_regions(sequences: list) -> list:
    """Strip the validation and test targets off every sequence."""
    return [s.train_items for s in sequences]


# ---------------------------------------------------------------------------
# co-occurrence


def build_cooccurrence(item_lists) -> dict:
    """One-hop chronological neighbors, unioned over all given item lists.

    The caller decides what to pass; the training pipeline passes
    :func:`training_regions` output so validation/test targets never leak in.
    Self-pairs (immediate repeats) are skipped.
    """
    positives: dict = {}
    for seq in item_lists:
        for a, b in zip(seq, seq[1:]):
            if a == b:
                continue
            positives.setdefault(a, set()).add(b)
            positives.setdefault(b, set()).add(a)
    return positives


class PositiveSampler:
    """Per-step uniform sampling from an item's positive set.

    Items with no recorded neighbors fall back to themselves, which turns
    the co-occurrence losses into plain self-reconstruction for them.
    """

    def __init__(self, positives: dict, seed: int = 0):
        self.positives = {i: sorted(p) for i, p in positives.items()}
        self.orphaned = set()
        self._rng = np.random.default_rng(seed)

    def reseed(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def sample(self, item_id: int) -> int:
        pool = self.positives.get(item_id)
        if not pool:
            self.orphaned.add(item_id)
            return item_id
        if len(pool) == 1:
            return pool[0]
        return pool[int(self._rng.integers(len(pool)))]


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_generate(cfg: SynthConfig):
    """Generate a multi-domain clustered corpus; deterministic in ``cfg.seed``.

    Every item belongs to a latent per-domain cluster. Text tokens come
    mostly from the cluster's private vocabulary block, image patches are the
    cluster centroid plus N(0, sigma^2) noise, and user sequences follow a
    Markov chain over clusters whose self-affinity sharpens as
    ``markov_temperature`` approaches zero.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_clusters = cfg.n_domains * cfg.clusters_per_domain
    block = cfg.text_vocab_size // n_clusters

    items: dict = {}
    by_cluster: dict = {}
    next_item = 0
    for dom in range(cfg.n_domains):
        for c in range(cfg.clusters_per_domain):
            gcluster = dom * cfg.clusters_per_domain + c
            lo = gcluster * block
            hi = lo + block if gcluster < n_clusters - 1 else cfg.text_vocab_size
            centroid = rng.normal(size=(cfg.n_patches, cfg.patch_dim))
            for _ in range(cfg.items_per_cluster):
                n_tok = int(rng.integers(cfg.text_len_min, cfg.text_len_max + 1))
                from_pool = rng.random(n_tok) < cfg.vocab_overlap
                toks = rng.integers(lo, hi, size=n_tok)
                pool_toks = rng.integers(0, cfg.text_vocab_size, size=n_tok)
                text = np.where(from_pool, pool_toks, toks).tolist()
                image = centroid + cfg.sigma * rng.normal(
                    size=(cfg.n_patches, cfg.patch_dim))
                items[next_item] = Item(item_id=next_item, domain_id=dom,
                                        text=[int(t) for t in text],
                                        image=image, cluster=gcluster)
                by_cluster.setdefault((dom, c), []).append(next_item)
                next_item += 1

    sequences = []
    next_user = 0
    seq_counts = cfg.domain_sequence_counts()
    trans = _cluster_transition_matrix(cfg.clusters_per_domain,
                                       cfg.markov_temperature)
    for dom in range(cfg.n_domains):
        for _ in range(seq_counts[dom]):
            n = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
            c = int(rng.integers(cfg.clusters_per_domain))
            seq = []
            for _ in range(n):
                pool = by_cluster[(dom, c)]
                pick = pool[int(rng.integers(len(pool)))]
                if seq and pick == seq[-1] and len(pool) > 1:
                    while pick == seq[-1]:
                        pick = pool[int(rng.integers(len(pool)))]
                seq.append(pick)
                c = int(rng.choice(cfg.clusters_per_domain, p=trans[c]))
            sequences.append(InteractionSequence(user_id=next_user, items=seq))
            next_user += 1
    return items, sequences


def _cluster_transition_matrix(n_clusters: int, temperature: float) -> np.ndarray:
    if n_clusters == 1:
        return np.ones((1, 1))
    if temperature == 0.0:
        return np.eye(n_clusters)
    logits = np.eye(n_clusters) / temperature
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def build_corpus(cfg: SynthConfig, min_interactions: int = 5,
                 max_seq_len: int = 20) -> Corpus:
    """synth_generate -> five-core filter -> truncation, as one step."""
    items, sequences = synth_generate(cfg)
    items, sequences = five_core_filter(items, sequences, min_interactions)
    sequences = truncate_sequences(sequences, max_seq_len)
    return Corpus(items=items, sequences=sequences)


# ---------------------------------------------------------------------------
# files (line-delimited JSON, floats round-trip exactly)


def save_items(path, items: dict, meta: dict | None = None):
    write_jsonl(path, (
        {"item_id": it.item_id, "domain_id": it.domain_id, "text": it.text,
         "image": [[float(v) for v in row] for row in it.image],
         **({"cluster": it.cluster} if it.cluster is not None else {})}
        for it in sorted(items.values(), key=lambda it: it.item_id)), meta)


def load_items(path) -> dict:
    items = {}
    for rec in read_jsonl(path):
        item = Item(item_id=rec["item_id"], domain_id=rec["domain_id"],
                    text=rec["text"], image=np.array(rec["image"], dtype=np.float64),
                    cluster=rec.get("cluster"))
        item.validate()
        items[item.item_id] = item
    return items


def save_sequences(path, sequences: list, meta: dict | None = None):
    write_jsonl(path, ({"user_id": s.user_id, "items": s.items}
                       for s in sequences), meta)


def load_sequences(path) -> list:
    return [InteractionSequence(user_id=rec["user_id"], items=rec["items"])
            for rec in read_jsonl(path)]
