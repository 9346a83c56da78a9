"""Content encoder: compresses an item's patches + text into L slot vectors.

A small bidirectional transformer stands in for a large multimodal backbone:
the input is [projected image patches] + [text token embeddings] + [L
trainable code-slot embeddings], and the hidden states at the slot positions
are the item's content representations. A row-wise MLP then projects them to
codebook width.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import EncoderConfig


@dataclass
class ItemBatch:
    """Collated tensors for a list of items (targets double as encoder input)."""

    item_ids: list
    text: torch.Tensor        # [B, T_pad] long, padded with pad_id
    text_mask: torch.Tensor   # [B, T_pad] bool, True at real tokens
    patches: torch.Tensor     # [B, P, d_v]

    def __len__(self):
        return len(self.item_ids)


def collate_items(items, cfg: EncoderConfig, dtype=torch.float32) -> ItemBatch:
    """Pad/truncate texts to the batch max (capped at t_max) and stack patches."""
    texts = [list(it.text[: cfg.t_max]) for it in items]
    t_pad = max(len(t) for t in texts)
    pad_id = cfg.text_vocab
    text = torch.full((len(items), t_pad), pad_id, dtype=torch.long)
    mask = torch.zeros(len(items), t_pad, dtype=torch.bool)
    for row, toks in enumerate(texts):
        text[row, : len(toks)] = torch.tensor(toks, dtype=torch.long)
        mask[row, : len(toks)] = True
    patches = torch.stack([
        torch.as_tensor(it.image, dtype=dtype) for it in items])
    if patches.shape[1:] != (cfg.n_patches, cfg.d_v):
        raise ValueError(
            f"patch features must be [{cfg.n_patches} x {cfg.d_v}], "
            f"got {tuple(patches.shape[1:])}")
    return ItemBatch(item_ids=[it.item_id for it in items],
                     text=text, text_mask=mask, patches=patches)


class ContentEncoder(nn.Module):
    """Bidirectional attention over [patches | text | code slots].

    Output is the hidden state at each of the L slot positions. With
    ``causal_encoder`` the attention is lower-triangular instead; the slots
    sit at the end of the sequence, so they still see all content.
    """

    def __init__(self, cfg: EncoderConfig, L: int):
        super().__init__()
        cfg.validate(L)
        self.cfg = cfg
        self.L = L
        self.pad_id = cfg.text_vocab
        self.text_emb = nn.Embedding(cfg.text_vocab + 1, cfg.d, padding_idx=self.pad_id)
        self.patch_proj = nn.Linear(cfg.d_v, cfg.d)
        self.slot_emb = nn.Parameter(torch.randn(L, cfg.d) * 0.02)
        self.pos_emb = nn.Embedding(cfg.n_patches + cfg.t_max + L, cfg.d)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d, nhead=cfg.heads, dim_feedforward=4 * cfg.d,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
        self.net = nn.TransformerEncoder(layer, num_layers=cfg.layers,
                                         norm=nn.LayerNorm(cfg.d),
                                         enable_nested_tensor=False)

    def forward(self, batch: ItemBatch) -> torch.Tensor:
        cfg = self.cfg
        bsz, t_pad = batch.text.shape
        dtype = self.patch_proj.weight.dtype

        patch_tok = self.patch_proj(batch.patches.to(dtype))
        text_tok = self.text_emb(batch.text)
        slot_tok = self.slot_emb.unsqueeze(0).expand(bsz, -1, -1)

        pos = torch.cat([
            torch.arange(cfg.n_patches),
            cfg.n_patches + torch.arange(t_pad),
            cfg.n_patches + cfg.t_max + torch.arange(self.L)])
        x = torch.cat([patch_tok, text_tok, slot_tok], dim=1) + self.pos_emb(pos)

        pad_mask = torch.zeros(bsz, x.shape[1], dtype=torch.bool)
        pad_mask[:, cfg.n_patches: cfg.n_patches + t_pad] = ~batch.text_mask

        attn_mask = None
        if cfg.causal_encoder:
            n = x.shape[1]
            attn_mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)

        hidden = self.net(x, mask=attn_mask, src_key_padding_mask=pad_mask)
        return hidden[:, -self.L:, :]


class SlotProjector(nn.Module):
    """Row-wise MLP from encoder width to codebook width (no cross-slot mixing)."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        if hidden is None:
            self.net = nn.Linear(d_in, d_out)
        else:
            self.net = nn.Sequential(
                nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)
