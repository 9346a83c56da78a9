"""Run configuration: typed sections, strict loading, seed derivation, hashing.

A run is described by one config file (YAML or JSON). Every section is a
dataclass with defaults; unknown keys are rejected so typos cannot silently
fall back to defaults. All randomness in the pipeline flows from the single
root ``seed`` via :func:`derive_seed`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class SynthConfig:
    """Knobs for the synthetic multi-domain corpus generator."""

    n_domains: int = 4
    clusters_per_domain: int = 4
    items_per_cluster: int = 12
    text_vocab_size: int = 512
    vocab_overlap: float = 0.0      # prob. a token is drawn from the full vocab
    sigma: float = 0.05             # patch noise scale around the cluster centroid
    markov_temperature: float = 0.4  # cluster-transition softness; ->0 stays put
    sequences_per_domain: int | list = 300  # one count, or one per domain
    seq_len_min: int = 6
    seq_len_max: int = 12
    text_len_min: int = 8
    text_len_max: int = 24
    n_patches: int = 16
    patch_dim: int = 16
    seed: int = 0

    def validate(self):
        for name in ("n_domains", "clusters_per_domain", "items_per_cluster",
                     "text_vocab_size", "seq_len_min", "seq_len_max",
                     "text_len_min", "text_len_max", "n_patches", "patch_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth.{name} must be positive")
        counts = self.domain_sequence_counts()
        if len(counts) != self.n_domains or any(c <= 0 for c in counts):
            raise ConfigError("synth.sequences_per_domain must be positive, "
                              "one value or one per domain")
        if self.sigma < 0:
            raise ConfigError("synth.sigma must be >= 0")
        if not 0.0 <= self.vocab_overlap <= 1.0:
            raise ConfigError("synth.vocab_overlap must be in [0, 1]")
        if self.markov_temperature < 0:
            raise ConfigError("synth.markov_temperature must be >= 0")
        if self.seq_len_min > self.seq_len_max:
            raise ConfigError("synth.seq_len_min > seq_len_max")
        if self.text_len_min > self.text_len_max:
            raise ConfigError("synth.text_len_min > text_len_max")
        n_clusters = self.n_domains * self.clusters_per_domain
        if self.text_vocab_size < n_clusters:
            raise ConfigError("synth.text_vocab_size smaller than total cluster count")

    def domain_sequence_counts(self) -> list:
        if isinstance(self.sequences_per_domain, int):
            return [self.sequences_per_domain] * self.n_domains
        return list(self.sequences_per_domain)


@dataclass
class CorpusConfig:
    """Where the corpus comes from and how domains are partitioned."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    items_path: str = ""            # set to load a corpus from files instead
    sequences_path: str = ""
    pretrain_domains: list = field(default_factory=lambda: [0, 1, 2])
    downstream_domain: int = 3
    min_interactions: int = 5       # five-core threshold
    max_seq_len: int = 20           # keep the most recent N interactions

    def validate(self):
        if self.min_interactions < 1:
            raise ConfigError("corpus.min_interactions must be >= 1")
        if self.max_seq_len < 2:
            raise ConfigError("corpus.max_seq_len must be >= 2")
        if self.downstream_domain in self.pretrain_domains:
            raise ConfigError("corpus.downstream_domain overlaps pretrain_domains")


@dataclass
class EncoderConfig:
    """Content encoder: a small bidirectional transformer with code slots."""

    d: int = 64                     # model width
    layers: int = 2
    heads: int = 4
    d_c: int = 32                   # codebook width
    text_vocab: int = 512
    d_v: int = 16                   # patch feature width
    n_patches: int = 16
    t_max: int = 64                 # text length cap
    causal_encoder: bool = False

    def validate(self, L: int):
        if self.d <= 0 or self.d_c <= 0:
            raise ConfigError("encoder widths must be positive")
        if L < 2:
            raise ConfigError("identifier length L must be >= 2")
        if self.d % self.heads != 0:
            raise ConfigError("encoder.d must be divisible by encoder.heads")
        if self.layers < 1:
            raise ConfigError("encoder.layers must be >= 1")


@dataclass
class QuantizerConfig:
    """Tree-structured codebooks (or the multi-level ablation variant)."""

    k_root: int = 256
    k_leaf: int = 512
    L: int = 3
    beta: float = 0.25
    variant: str = "tree"           # "tree" | "multilevel"
    # Codebook entry init std; None means 1/sqrt(d_c). Small stand-in encoders
    # produce tightly packed slot projections, so desk-scale configs set this
    # well below the default to keep several codes active from step one.
    init_std: float | None = None
    # Re-seed E rows from actual residual vectors before pre-training starts.
    # Random E rows sit far off the tightly packed projections of a small
    # encoder, which collapses quantization onto one code; sampling rows from
    # the data cloud keeps many codes active from the first step.
    data_init: bool = False

    def validate(self):
        if self.k_root < 1 or self.k_leaf < 1:
            raise ConfigError("codebook sizes must be >= 1")
        if self.L < 2:
            raise ConfigError("quantizer.L must be >= 2")
        if self.beta <= 0:
            raise ConfigError("quantizer.beta must be > 0")
        if self.variant not in ("tree", "multilevel"):
            raise ConfigError(f"unknown quantizer.variant {self.variant!r}")
        if self.init_std is not None and self.init_std <= 0:
            raise ConfigError("quantizer.init_std must be positive")


@dataclass
class LossConfig:
    """Weights of the tokenizer objective."""

    alpha: float = 3.0              # image reconstruction weight
    lam: float = 200.0              # codebook loss weight
    mu: float = 0.01                # co-occurrence alignment weight
    eta: float = 0.03               # co-occurrence reconstruction weight
    tau: float = 0.07               # InfoNCE temperature

    def validate(self):
        for name in ("alpha", "lam", "mu", "eta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"losses.{name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("losses.tau must be > 0")


@dataclass
class TokenizerTrainConfig:
    lr_pretrain: float = 3e-4
    lr_finetune: float = 1e-4
    epochs_pretrain: int = 3
    epochs_finetune: int = 20
    batch_size: int = 16
    weight_decay: float = 0.01
    freeze_codebook_finetune: bool = True
    full_ft: bool = False           # unfreeze E during fine-tuning
    tune_encoder_finetune: bool = True
    tune_decoders_finetune: bool = True

    def validate(self):
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ConfigError("tokenizer learning rates must be > 0")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ConfigError("tokenizer epoch counts must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("tokenizer_train.batch_size must be >= 2 "
                              "(in-batch negatives need company)")


@dataclass
class RecommenderConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    width: int = 128
    heads: int = 4
    ff_mult: int = 4
    beam: int = 50
    lr_pretrain: float = 5e-3
    lr_finetune: float = 3e-3
    epochs_pretrain: int = 50
    epochs_finetune: int = 200
    patience: int = 5
    batch_size: int = 64
    shared_leaf_tokens: bool = False
    unconstrained: bool = False
    max_history_items: int = 20

    def validate(self):
        if not 1 <= self.enc_layers <= 6 or not 1 <= self.dec_layers <= 6:
            raise ConfigError("recommender layer counts must be in 1..6")
        if self.width % self.heads != 0:
            raise ConfigError("recommender.width must be divisible by heads")
        if self.beam < 1:
            raise ConfigError("recommender.beam must be >= 1")
        if self.patience < 0:
            raise ConfigError("recommender.patience must be >= 0")


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [5, 10])
    bucket_edges: list = field(default_factory=lambda: [0, 20, 40, 60])

    def validate(self):
        if any(k < 1 for k in self.ks):
            raise ConfigError("eval.ks entries must be >= 1")
        if sorted(self.bucket_edges) != list(self.bucket_edges):
            raise ConfigError("eval.bucket_edges must be ascending")


@dataclass
class RunConfig:
    """Top-level configuration for one pipeline run."""

    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    tokenizer_train: TokenizerTrainConfig = field(default_factory=TokenizerTrainConfig)
    recommender: RecommenderConfig = field(default_factory=RecommenderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.corpus.validate()
        self.corpus.synth.validate()
        self.quantizer.validate()
        self.encoder.validate(self.quantizer.L)
        self.losses.validate()
        self.tokenizer_train.validate()
        self.recommender.validate()
        self.eval.validate()
        if self.encoder.text_vocab < self.corpus.synth.text_vocab_size:
            raise ConfigError("encoder.text_vocab smaller than synth text vocabulary")
        if self.encoder.d_v != self.corpus.synth.patch_dim:
            raise ConfigError("encoder.d_v must equal synth.patch_dim")
        if self.encoder.n_patches != self.corpus.synth.n_patches:
            raise ConfigError("encoder.n_patches must equal synth.n_patches")
        return self


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path or 'config'}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.type if isinstance(f.type, type) else None
        if sub is None and isinstance(f.type, str):
            sub = globals().get(f.type)
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(fh) or {}
        else:
            data = json.load(fh)
    return config_from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` command-line overrides to a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-mapping key {key!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the full configuration (used to stamp artifacts)."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def derive_seed(root_seed: int, *names) -> int:
    """Derive a stable 31-bit component seed from the root seed and a label path."""
    label = ":".join(str(n) for n in names)
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF
