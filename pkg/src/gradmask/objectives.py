"""Training objectives: similarity distribution matching, masked token
prediction through a cross-modal decoder, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Block
from .errors import ConfigError, DegenerateInputError, LabelError, ShapeError, VocabularyError


@dataclass
class SdmConfig:
    tau: float = 0.02
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (self.tau > 0 and self.epsilon > 0):
            raise ConfigError("tau and epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecoderConfig:
    cross_attn_heads: int = 4
    depth: int = 4

    def __post_init__(self):
        if self.depth != 4:
            raise ConfigError("the cross-modal decoder has exactly four transformer layers")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    l_i2t: float
    l_t2i: float
    l_sdm: float
    l_mtp: float
    beta: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(x) for x in asdict(self).values())


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateInputError(f"zero-norm {what} embedding")
    return x / norms


def similarity_logits(v_cls, t_eos, tau: float) -> torch.Tensor:
    """(B, B) matrix of cos(v_i, t_j) / tau."""
    return _unit_rows(v_cls, "image") @ _unit_rows(t_eos, "text").T / tau


def predicted_distribution(v_cls, t_eos, tau: float) -> torch.Tensor:
    """Row i: softmax over texts j of cos(v_i, t_j) / tau."""
    return similarity_logits(v_cls, t_eos, tau).softmax(dim=1)


def ground_truth_distribution(row_labels, col_labels=None) -> torch.Tensor:
    """Row-normalized indicator of shared pair ids."""
    rows = torch.as_tensor(row_labels)
    cols = rows if col_labels is None else torch.as_tensor(col_labels)
    match = (rows[:, None] == cols[None, :]).to(torch.float64)
    counts = match.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise LabelError("a row has no matching partner in the batch")
    return match / counts


def kl_matching(p, q, epsilon: float = 1e-8, log_p=None) -> torch.Tensor:
    """(1/B) sum_ij p_ij log(p_ij / (q_ij + eps))."""
    if p.shape != q.shape:
        raise ShapeError(f"p{tuple(p.shape)} vs q{tuple(q.shape)}")
    q = q.to(p.dtype)
    if log_p is None:
        plogp = torch.xlogy(p, p)
    else:
        plogp = p * log_p
    return (plogp - p * torch.log(q + epsilon)).sum() / p.shape[0]


def sdm_loss(v_cls, t_eos, labels, tau: float = 0.02, epsilon: float = 1e-8):
    """Symmetric distribution matching; returns ``(l_i2t, l_t2i, l_sdm)``.

    The text-to-image term anchors the softmax on texts and uses the
    text-anchored targets, i.e. the transposed roles of the image term.
    """
    if v_cls.shape != t_eos.shape:
        raise ShapeError(f"image {tuple(v_cls.shape)} vs text {tuple(t_eos.shape)}")
    logits = similarity_logits(v_cls, t_eos, tau)
    q = ground_truth_distribution(labels).to(logits.dtype)
    logp_i2t = logits.log_softmax(dim=1)
    logp_t2i = logits.T.log_softmax(dim=1)
    l_i2t = kl_matching(logp_i2t.exp(), q, epsilon, log_p=logp_i2t)
    l_t2i = kl_matching(logp_t2i.exp(), q.T.contiguous(), epsilon, log_p=logp_t2i)
    return l_i2t, l_t2i, l_i2t + l_t2i


class CrossAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, context):
        B, N, d = x.shape
        P = context.shape[1]
        h = self.heads
        q = self.q(x).view(B, N, h, d // h).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.reshape(B, P, h, d // h).transpose(1, 2)
        v = v.reshape(B, P, h, d // h).transpose(1, 2)
        attn = (q @ k.transpose(-1, -2) / math.sqrt(d // h)).softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, N, d))


class CrossModalDecoder(nn.Module):
    """Text queries attend over image tokens, then four self-attention layers
    and an MLP head producing vocabulary logits."""

    def __init__(self, width: int, vocab_size: int, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.width = width
        self.ln_text = nn.LayerNorm(width)
        self.ln_image = nn.LayerNorm(width)
        self.cross = CrossAttention(width, cfg.cross_attn_heads)
        self.blocks = nn.ModuleList(Block(width, cfg.cross_attn_heads) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(width)
        self.head = nn.Sequential(
            nn.Linear(width, width), nn.GELU(), nn.LayerNorm(width), nn.Linear(width, vocab_size)
        )

    def forward(self, text_hidden, image_tokens, text_valid=None):
        if text_hidden.shape[-1] != self.width or image_tokens.shape[-1] != self.width:
            raise ShapeError(
                f"decoder width {self.width}: text {tuple(text_hidden.shape)}, image {tuple(image_tokens.shape)}"
            )
        if text_hidden.shape[0] != image_tokens.shape[0]:
            raise ShapeError("text and image batch sizes differ")
        B, N, _ = text_hidden.shape
        if text_valid is None:
            text_valid = torch.ones(B, N, dtype=torch.bool, device=text_hidden.device)
        x = self.cross(self.ln_text(text_hidden), self.ln_image(image_tokens))
        for block in self.blocks:
            x, _ = block(x, text_valid)
        return self.ln_post(x)

    def logits(self, hidden):
        return self.head(hidden)


def mtp_loss(logits, targets, conventional_ce: bool = False) -> torch.Tensor:
    """Cross-entropy over masked positions, divided by |M|*|V| (or |M| only
    with ``conventional_ce``). Zero when nothing is masked."""
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    m = targets.shape[0]
    if m == 0:
        return logits.new_zeros(())
    vocab = logits.shape[-1]
    if logits.shape != (m, vocab):
        raise ShapeError(f"logits {tuple(logits.shape)} for {m} targets")
    if (targets < 0).any() or (targets >= vocab).any():
        raise VocabularyError(f"target id outside vocabulary of size {vocab}")
    nll = -logits.log_softmax(dim=-1).gather(1, targets[:, None]).sum()
    return nll / (m if conventional_ce else m * vocab)


def total_loss(l_sdm, l_mtp, beta: float = 0.4):
    return l_sdm + beta * l_mtp
