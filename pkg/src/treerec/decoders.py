"""Dual lightweight decoders over restored discrete representations.

Both decoders are deliberately weak (exactly one attention layer, asserted)
so the content has to flow through the discrete bottleneck. Text is
reconstructed MLM-style with every position masked; image patch features are
reconstructed through a denoising objective on a small MLP conditioned on
per-patch latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import ItemBatch


@dataclass
class ReconLoss:
    """Summed loss drives optimization; the per-token mean is for logging."""

    total: torch.Tensor
    per_token: torch.Tensor


def _one_layer_transformer(d: int, heads: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=d, nhead=heads, dim_feedforward=4 * d, dropout=0.0,
        activation="gelu", batch_first=True, norm_first=True)
    net = nn.TransformerEncoder(layer, num_layers=1, norm=nn.LayerNorm(d),
                                enable_nested_tensor=False)
    assert len(net.layers) == 1, "reconstruction decoders must stay one-layer"
    return net


class TextDecoder(nn.Module):
    """Predict every text token from [restored slots | mask tokens]."""

    def __init__(self, d: int, vocab: int, t_max: int, L: int, heads: int = 4):
        super().__init__()
        self.vocab = vocab
        self.t_max = t_max
        self.mask_emb = nn.Parameter(torch.randn(d) * 0.02)
        self.level_emb = nn.Embedding(L, d)
        self.pos_emb = nn.Embedding(t_max, d)
        self.net = _one_layer_transformer(d, heads)
        self.head = nn.Linear(d, vocab)

    def logits(self, h_hat: torch.Tensor, t_len: int,
               text_mask: torch.Tensor | None = None) -> torch.Tensor:
        bsz, L, _ = h_hat.shape
        slots = h_hat + self.level_emb(torch.arange(L))
        masks = self.mask_emb + self.pos_emb(torch.arange(t_len))
        masks = masks.unsqueeze(0).expand(bsz, -1, -1)
        pad = None
        if text_mask is not None:
            pad = torch.cat([torch.zeros(bsz, L, dtype=torch.bool),
                             ~text_mask], dim=1)
        hidden = self.net(torch.cat([slots, masks], dim=1),
                          src_key_padding_mask=pad)
        return self.head(hidden[:, L:, :])

    def loss(self, h_hat: torch.Tensor, target: ItemBatch) -> ReconLoss:
        if not target.text_mask.any(dim=1).all():
            raise ValueError("cannot reconstruct an empty text")
        logits = self.logits(h_hat, target.text.shape[1], target.text_mask)
        nll = F.cross_entropy(logits.transpose(1, 2),
                              target.text.clamp(max=self.vocab - 1),
                              reduction="none")
        nll = nll * target.text_mask
        total = nll.sum(dim=1).mean()
        per_token = nll.sum() / target.text_mask.sum()
        return ReconLoss(total=total, per_token=per_token)


class DiffusionSchedule(nn.Module):
    """Linear-beta schedule; alpha_bar[0] = 1 and strictly decreases in t."""

    def __init__(self, timesteps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        super().__init__()
        self.timesteps = timesteps
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64),
                               torch.cumprod(1.0 - betas, dim=0)])
        assert (alpha_bar[1:] < alpha_bar[:-1]).all() and alpha_bar[-1] > 0
        self.register_buffer("alpha_bar", alpha_bar)


class DenoiserMLP(nn.Module):
    """Three-layer perceptron; the timestep embedding is added to the input."""

    def __init__(self, d_v: int, d_z: int, timesteps: int, hidden: int = 128):
        super().__init__()
        self.time_emb = nn.Embedding(timesteps + 1, d_v + d_z)
        self.net = nn.Sequential(
            nn.Linear(d_v + d_z, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, d_v))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                z: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([x_t, z], dim=-1) + self.time_emb(t))


def diffusion_loss(denoiser, schedule: DiffusionSchedule, x0: torch.Tensor,
                   z: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor) -> torch.Tensor:
    """Noise-prediction objective for the given draws of (t, eps).

    squared L2 over the feature axis, averaged over patches and batch; so a
    zero denoiser scores E||eps||^2 = d_v in expectation.
    """
    alpha_bar = schedule.alpha_bar.to(x0.dtype)[t].unsqueeze(-1)
    x_t = torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps
    pred = denoiser(x_t, t, z)
    return ((eps - pred) ** 2).sum(-1).mean()


class ImageDecoder(nn.Module):
    """Per-patch conditioning latents from [slots | mask tokens] + diffusion head."""

    def __init__(self, d: int, d_v: int, n_patches: int, L: int, heads: int = 4,
                 timesteps: int = 100, denoiser_hidden: int = 128):
        super().__init__()
        self.d_v = d_v
        self.n_patches = n_patches
        self.mask_emb = nn.Parameter(torch.randn(d) * 0.02)
        self.level_emb = nn.Embedding(L, d)
        self.pos_emb = nn.Embedding(n_patches, d)
        self.net = _one_layer_transformer(d, heads)
        self.latent_head = nn.Linear(d, d)
        self.schedule = DiffusionSchedule(timesteps)
        self.denoiser = DenoiserMLP(d_v, d, timesteps, hidden=denoiser_hidden)

    def latents(self, h_hat: torch.Tensor) -> torch.Tensor:
        bsz, L, _ = h_hat.shape
        slots = h_hat + self.level_emb(torch.arange(L))
        masks = self.mask_emb + self.pos_emb(torch.arange(self.n_patches))
        masks = masks.unsqueeze(0).expand(bsz, -1, -1)
        hidden = self.net(torch.cat([slots, masks], dim=1))
        return self.latent_head(hidden[:, L:, :])

    def loss(self, h_hat: torch.Tensor, target: ItemBatch,
             generator: torch.Generator | None = None) -> torch.Tensor:
        x0 = target.patches.to(h_hat.dtype)
        if x0.shape[1:] != (self.n_patches, self.d_v):
            raise ValueError(f"patch targets must be [{self.n_patches} x {self.d_v}]")
        z = self.latents(h_hat)
        t = torch.randint(1, self.schedule.timesteps + 1, x0.shape[:2],
                          generator=generator)
        eps = torch.randn(x0.shape, dtype=x0.dtype, generator=generator)
        return diffusion_loss(self.denoiser, self.schedule, x0, z, t, eps)


def raw_content_loss(text_dec: TextDecoder, image_dec: ImageDecoder,
                     h_hat: torch.Tensor, target: ItemBatch, alpha: float,
                     generator: torch.Generator | None = None):
    """text NLL + alpha * image diffusion loss against the given targets."""
    text = text_dec.loss(h_hat, target)
    image = image_dec.loss(h_hat, target, generator=generator)
    return text.total + alpha * image, {"text": text, "image": image}


def cooccur_recon_loss(text_dec: TextDecoder, image_dec: ImageDecoder,
                       h_hat_anchor: torch.Tensor, positive: ItemBatch,
                       alpha: float, generator: torch.Generator | None = None):
    """Same computation as raw reconstruction, targeting the positive item."""
    return raw_content_loss(text_dec, image_dec, h_hat_anchor, positive,
                            alpha, generator=generator)
