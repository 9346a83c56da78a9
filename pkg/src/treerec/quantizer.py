"""Prefix-residual quantization with tree-structured codebooks.

The tree scheme keeps one root codebook for the level-1 (basic) representation
and one leaf codebook shared by every later level. Each codebook is
parameterized as E @ W so that a sparse row update of E combines with a dense
update of W, moving the whole effective codebook every step. A plain
multi-level variant (independent codebooks, recursive residuals) is kept as
an ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import QuantizerConfig


class QuantizationError(RuntimeError):
    pass


def prefix_residual(h: torch.Tensor) -> torch.Tensor:
    """[..., L, d] -> level-1 row unchanged, later rows minus their predecessor."""
    return torch.cat([h[..., :1, :], h[..., 1:, :] - h[..., :-1, :]], dim=-2)


def inverse_prefix_residual(q: torch.Tensor) -> torch.Tensor:
    """Cumulative sum over levels; exact inverse of :func:`prefix_residual`."""
    return torch.cumsum(q, dim=-2)


def nearest_code(vectors: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Exhaustive squared-L2 nearest row; ties break to the smallest index."""
    if not torch.isfinite(vectors).all():
        raise QuantizationError("non-finite values passed to quantization")
    diff = vectors.unsqueeze(-2) - codebook.unsqueeze(0)
    return (diff * diff).sum(-1).argmin(dim=-1)


@dataclass
class QuantizationResult:
    codes: torch.Tensor         # [B, L] long
    residuals: torch.Tensor     # [B, L, d_c] quantization targets per level
    quantized: torch.Tensor     # [B, L, d_c] selected effective codebook rows
    quantized_st: torch.Tensor  # straight-through copy for the decoder path
    loss_r: torch.Tensor        # scalar, carries the VQ/commitment graph
    loss_f: torch.Tensor


def codebook_loss(result: QuantizationResult) -> torch.Tensor:
    """Total codebook objective: mean of the root and leaf losses."""
    return 0.5 * (result.loss_r + result.loss_f)


def _vq_terms(target: torch.Tensor, chosen: torch.Tensor, beta: float):
    """Stop-gradient split: first term trains codebooks, second the encoder."""
    code_term = ((target.detach() - chosen) ** 2).sum(-1)
    commit_term = ((target - chosen.detach()) ** 2).sum(-1)
    return code_term + beta * commit_term


class TreeCodebooks(nn.Module):
    """Root + shared-leaf codebook storage with E @ W parameterization."""

    def __init__(self, cfg: QuantizerConfig, d_c: int):
        super().__init__()
        self.cfg = cfg
        self.d_c = d_c
        scale = cfg.init_std if cfg.init_std is not None else 1.0 / math.sqrt(d_c)
        self.e_root = nn.Parameter(torch.randn(cfg.k_root, d_c) * scale)
        self.e_leaf = nn.Parameter(torch.randn(cfg.k_leaf, d_c) * scale)
        self.w_root = nn.Parameter(torch.eye(d_c) + 0.01 * torch.randn(d_c, d_c))
        self.w_leaf = nn.Parameter(torch.eye(d_c) + 0.01 * torch.randn(d_c, d_c))
        self.frozen_e = False

    def effective_root(self) -> torch.Tensor:
        return self.e_root @ self.w_root

    def effective_leaf(self) -> torch.Tensor:
        return self.e_leaf @ self.w_leaf

    def set_frozen_e(self, frozen: bool):
        self.frozen_e = frozen
        self.e_root.requires_grad_(not frozen)
        self.e_leaf.requires_grad_(not frozen)


class TreeQuantizer(nn.Module):
    """Prefix residuals, then root codebook at level 1 and leaf codebook after."""

    variant = "tree"

    def __init__(self, cfg: QuantizerConfig, d_c: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.L = cfg.L
        self.beta = cfg.beta
        self.books = TreeCodebooks(cfg, d_c)

    @property
    def frozen_e(self):
        return self.books.frozen_e

    def set_frozen_e(self, frozen: bool):
        self.books.set_frozen_e(frozen)

    def leaf_codebook(self) -> torch.Tensor:
        """Effective codebook used at the last level (conflict reassignment)."""
        return self.books.effective_leaf()

    @torch.no_grad()
    def init_from_data(self, h_proj: torch.Tensor, generator=None):
        """Seed E rows from observed residuals so codes start on the data cloud."""
        res = prefix_residual(h_proj)
        _seed_rows(self.books.e_root, res[:, 0, :], generator)
        _seed_rows(self.books.e_leaf, res[:, 1:, :].reshape(-1, res.shape[-1]),
                   generator)

    def forward(self, h_proj: torch.Tensor,
                codes: torch.Tensor | None = None) -> QuantizationResult:
        res = prefix_residual(h_proj)
        eff_root = self.books.effective_root()
        eff_leaf = self.books.effective_leaf()

        if codes is None:
            c_root = nearest_code(res[:, 0, :], eff_root)
            c_leaf = nearest_code(res[:, 1:, :].reshape(-1, res.shape[-1]), eff_leaf)
            c_leaf = c_leaf.reshape(res.shape[0], self.L - 1)
            codes = torch.cat([c_root.unsqueeze(1), c_leaf], dim=1)
        q_root = eff_root[codes[:, 0]]
        q_leaf = eff_leaf[codes[:, 1:]]
        quantized = torch.cat([q_root.unsqueeze(1), q_leaf], dim=1)

        loss_r = _vq_terms(res[:, 0, :], q_root, self.beta).mean()
        loss_f = _vq_terms(res[:, 1:, :], q_leaf, self.beta).mean(dim=1).mean()
        quantized_st = res + (quantized - res).detach()
        return QuantizationResult(codes=codes, residuals=res, quantized=quantized,
                                  quantized_st=quantized_st,
                                  loss_r=loss_r, loss_f=loss_f)


class MultiLevelQuantizer(nn.Module):
    """Ablation: L independent plain codebooks with recursive residuals.

    Level l quantizes ``h'_l`` minus the quantized reconstruction so far, the
    classic residual-quantization recursion; the cumulative sum of selected
    rows restores the representations, so the decoder path is shared with the
    tree variant.
    """

    variant = "multilevel"

    def __init__(self, cfg: QuantizerConfig, d_c: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.L = cfg.L
        self.beta = cfg.beta
        sizes = [cfg.k_root] + [cfg.k_leaf] * (cfg.L - 1)
        scale = cfg.init_std if cfg.init_std is not None else 1.0 / math.sqrt(d_c)
        self.books = nn.ParameterList(
            nn.Parameter(torch.randn(k, d_c) * scale) for k in sizes)
        self.frozen_e = False

    def set_frozen_e(self, frozen: bool):
        self.frozen_e = frozen
        for book in self.books:
            book.requires_grad_(not frozen)

    def leaf_codebook(self) -> torch.Tensor:
        return self.books[self.L - 1]

    @torch.no_grad()
    def init_from_data(self, h_proj: torch.Tensor, generator=None):
        """Seed each level's book from its recursive residuals, in level order."""
        recon = torch.zeros_like(h_proj[:, 0, :])
        for level in range(self.L):
            target = h_proj[:, level, :] - recon
            _seed_rows(self.books[level], target, generator)
            recon = recon + self.books[level][nearest_code(target, self.books[level])]

    def forward(self, h_proj: torch.Tensor,
                codes: torch.Tensor | None = None) -> QuantizationResult:
        recon = torch.zeros_like(h_proj[:, 0, :])
        per_level_codes, residuals, quantized, losses = [], [], [], []
        for level in range(self.L):
            target = h_proj[:, level, :] - recon
            if codes is None:
                c = nearest_code(target, self.books[level])
            else:
                c = codes[:, level]
            q = self.books[level][c]
            per_level_codes.append(c)
            residuals.append(target)
            quantized.append(q)
            losses.append(_vq_terms(target, q, self.beta).mean())
            recon = recon + q.detach()
        out_codes = torch.stack(per_level_codes, dim=1)
        res = torch.stack(residuals, dim=1)
        quant = torch.stack(quantized, dim=1)
        loss_r = losses[0]
        loss_f = torch.stack(losses[1:]).mean()
        quantized_st = res + (quant - res).detach()
        return QuantizationResult(codes=out_codes, residuals=res, quantized=quant,
                                  quantized_st=quantized_st,
                                  loss_r=loss_r, loss_f=loss_f)


@torch.no_grad()
def _seed_rows(book: torch.Tensor, samples: torch.Tensor, generator=None):
    k = book.shape[0]
    idx = torch.randint(samples.shape[0], (k,), generator=generator)
    jitter_scale = 1e-3 * samples.std().clamp(min=1e-6)
    jitter = torch.randn(book.shape, generator=generator) * jitter_scale
    book.copy_(samples[idx] + jitter)


def build_quantizer(cfg: QuantizerConfig, d_c: int):
    if cfg.variant == "tree":
        return TreeQuantizer(cfg, d_c)
    return MultiLevelQuantizer(cfg, d_c)


def utilization_report(codes, k_root: int, k_leaf: int,
                       shared_leaf: bool = True) -> dict:
    """Active-code counts, usage entropy (nats) and perplexity per codebook."""
    codes = np.asarray(codes)
    report = {"root": _usage_stats(codes[:, 0], k_root)}
    if shared_leaf:
        report["leaf"] = _usage_stats(codes[:, 1:].reshape(-1), k_leaf)
    else:
        for level in range(1, codes.shape[1]):
            report[f"level_{level + 1}"] = _usage_stats(codes[:, level], k_leaf)
    return report


def _usage_stats(codes: np.ndarray, k: int) -> dict:
    counts = np.bincount(codes, minlength=k).astype(np.float64)
    probs = counts / counts.sum()
    nz = probs[probs > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return {"size": k, "active": int((counts > 0).sum()),
            "entropy": entropy, "perplexity": float(np.exp(entropy))}
