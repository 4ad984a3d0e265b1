"""Gradient-attention token scores for captions.

For each of the final L text layers a token gets a gradient-based score
(spatial importance times the eos gradient projected onto the token's value
vector) and an attention-based score (the head-averaged eos attention row,
renormalized). The per-layer products are averaged, clamped at zero and
min-max normalized per caption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DegenerateInputError, ShapeError


@dataclass
class GassConfig:
    layers: Optional[int] = None  # None -> ceil(2/3 * depth)
    scales: tuple = (1, 2)

    def __post_init__(self):
        self.scales = tuple(int(c) for c in self.scales)
        if not self.scales or min(self.scales) < 1:
            raise ConfigError(f"pooling scales must be >= 1, got {self.scales}")
        if self.layers is not None and self.layers < 1:
            raise ConfigError("must aggregate at least one layer")

    def resolve_layers(self, depth: int) -> list:
        L = self.layers if self.layers is not None else math.ceil(2 * depth / 3)
        if L > depth:
            raise ConfigError(f"cannot aggregate {L} layers of a depth-{depth} encoder")
        return list(range(depth - L, depth))

    def to_dict(self) -> dict:
        return {"layers": self.layers, "scales": list(self.scales)}


@dataclass
class LayerScores:
    w: torch.Tensor
    s_g: torch.Tensor
    s_a: torch.Tensor


@dataclass
class GassScores:
    S: torch.Tensor
    s: torch.Tensor
    layers: list = field(default_factory=list)


def _as_float(x) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        return torch.as_tensor(np.asarray(x, dtype=np.float64))
    return x if x.is_floating_point() else x.to(torch.float64)


def _valid_mask(n: int, valid, device=None) -> torch.Tensor:
    if valid is None:
        return torch.ones(n, dtype=torch.bool, device=device)
    valid = torch.as_tensor(valid, dtype=torch.bool, device=device)
    if valid.shape != (n,):
        raise ShapeError(f"valid mask of shape {tuple(valid.shape)} for {n} tokens")
    return valid


def msp(features, scales: Sequence[int] = (1, 2)) -> torch.Tensor:
    """Multi-scale pooling over the token axis (axis -2; axis 0 for vectors).

    Per scale c: mean over non-overlapping windows of c tokens (the last
    window is padded by repeating the final token), then endpoint-aligned
    linear interpolation back to the input length. Scales are averaged.
    """
    x = _as_float(features)
    vector = x.dim() == 1
    if vector:
        x = x[:, None]
    n, d = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    if n == 0:
        raise DegenerateInputError("multi-scale pooling of an empty sequence")
    outs = []
    for c in scales:
        if c < 1:
            raise ConfigError(f"pooling scale must be >= 1, got {c}")
        m = -(-n // c)
        pad = m * c - n
        xp = torch.cat([x, x[..., -1:, :].expand(*lead, pad, d)], dim=-2) if pad else x
        pooled = xp.reshape(*lead, m, c, d).mean(dim=-2)
        if m == 1:
            outs.append(pooled.expand(*lead, n, d))
            continue
        pos = torch.arange(n, dtype=x.dtype, device=x.device) * (m - 1) / (n - 1)
        lo = pos.floor().long().clamp(max=m - 2)
        frac = (pos - lo.to(x.dtype))[:, None]
        outs.append(pooled[..., lo, :] * (1 - frac) + pooled[..., lo + 1, :] * frac)
    out = torch.stack(outs).mean(dim=0) if len(outs) > 1 else outs[0]
    return out[:, 0] if vector else out


def masked_softmax(logits, valid=None) -> torch.Tensor:
    logits = _as_float(logits)
    valid = _valid_mask(logits.shape[0], valid, logits.device)
    if not valid.any():
        raise DegenerateInputError("no valid positions to normalize over")
    return logits.masked_fill(~valid, float("-inf")).softmax(dim=0)


def spatial_importance(q_eos, k, scales: Sequence[int] = (1, 2), valid=None) -> torch.Tensor:
    """Softmax over tokens of MSP(q_eos) . MSP(k_i); pooling sees valid keys only."""
    q_eos, k = _as_float(q_eos), _as_float(k)
    n = k.shape[0]
    valid = _valid_mask(n, valid, k.device)
    if not valid.any():
        raise DegenerateInputError("all positions invalid")
    q = msp(q_eos[None], scales)[0]
    logits = torch.zeros(n, dtype=k.dtype, device=k.device)
    logits[valid] = msp(k[valid], scales) @ q
    return masked_softmax(logits, valid)


def gradient_score(g, w, v) -> torch.Tensor:
    """s_g[i] = w[i] * <g, v[i]>."""
    g, w, v = _as_float(g), _as_float(w), _as_float(v)
    if v.dim() != 2 or v.shape != (w.shape[0], g.shape[0]):
        raise ShapeError(f"inconsistent shapes g{tuple(g.shape)} w{tuple(w.shape)} v{tuple(v.shape)}")
    return w * (v @ g)


def attention_score(attn, eos_position: int, valid=None) -> torch.Tensor:
    """Head-averaged eos attention row, renormalized over valid tokens."""
    attn = _as_float(attn)
    if attn.dim() == 2:
        attn = attn[None]
    n = attn.shape[-1]
    if not 0 <= eos_position < attn.shape[-2]:
        raise IndexError(f"eos position {eos_position} out of range")
    valid = _valid_mask(n, valid, attn.device)
    row = attn[:, eos_position, :].mean(dim=0) * valid
    total = row.sum()
    if total <= 0:
        raise DegenerateInputError("eos attention row sums to zero")
    return row / total


def fuse_scores(s_g: Sequence, s_a: Sequence, L: int) -> torch.Tensor:
    """ReLU of the layer-mean of s_g * s_a."""
    if len(s_g) != L or len(s_a) != L:
        raise ConfigError(f"expected {L} layer entries, got {len(s_g)} and {len(s_a)}")
    prod = torch.stack([_as_float(g) * _as_float(a) for g, a in zip(s_g, s_a)])
    return torch.relu(prod.mean(dim=0))


def normalize_scores(S, valid=None) -> torch.Tensor:
    """Min-max over valid tokens; a constant caption maps to 0.5, padding to 0."""
    S = _as_float(S)
    valid = _valid_mask(S.shape[0], valid, S.device)
    out = torch.zeros_like(S)
    if not valid.any():
        return out
    vals = S[valid]
    lo, hi = vals.min(), vals.max()
    out[valid] = 0.5 if hi == lo else (vals - lo) / (hi - lo)
    return out


def sequence_scores(traces, g_layers, b: int, length: int, cfg: GassConfig):
    """Scores for sample ``b`` of a traced batch.

    ``traces`` holds one LayerTrace per aggregated layer and ``g_layers`` the
    matching (B, d) gradients, in the same order. Returns
    ``(GassScores, [LayerScores, ...])``.
    """
    n = traces[0].k.shape[1]
    valid = torch.arange(n) < length
    eos = length - 1
    per_layer = []
    for tr, g in zip(traces, g_layers):
        w = spatial_importance(tr.q_eos[b], tr.k[b], cfg.scales, valid)
        s_g = gradient_score(g[b], w, tr.v[b])
        s_a = attention_score(tr.attn[b], eos, valid)
        per_layer.append(LayerScores(w, s_g, s_a))
    S = fuse_scores([p.s_g for p in per_layer], [p.s_a for p in per_layer], len(per_layer))
    S = S * valid
    return GassScores(S, normalize_scores(S, valid), [t.layer_index for t in traces]), per_layer


def _group_scores(traces, g_layers, idx, length: int, cfg: GassConfig):
    """Vectorized ``sequence_scores`` for samples ``idx`` sharing one length."""
    n = traces[0].k.shape[1]
    valid = torch.arange(n) < length
    eos = length - 1
    prods = []
    for tr, g in zip(traces, g_layers):
        q = msp(_as_float(tr.q_eos[idx])[:, None, :], cfg.scales)[:, 0]
        k = msp(_as_float(tr.k[idx, :length]), cfg.scales)
        w = torch.zeros(len(idx), n, dtype=k.dtype)
        w[:, :length] = (k @ q[:, :, None])[..., 0].softmax(dim=-1)
        s_g = w * (_as_float(tr.v[idx]) @ _as_float(g[idx])[:, :, None])[..., 0]
        row = _as_float(tr.attn[idx][:, :, eos, :]).mean(dim=1) * valid
        total = row.sum(dim=-1, keepdim=True)
        if (total <= 0).any():
            raise DegenerateInputError("eos attention row sums to zero")
        prods.append(s_g * (row / total))
    S = torch.relu(torch.stack(prods).mean(dim=0)) * valid
    vals = S[:, :length]
    lo = vals.min(dim=-1, keepdim=True).values
    span = vals.max(dim=-1, keepdim=True).values - lo
    s = torch.zeros_like(S)
    s[:, :length] = torch.where(span > 0, (vals - lo) / torch.where(span > 0, span, 1), 0.5)
    return S, s


def batch_scores(text_out, probe, lengths, cfg: GassConfig) -> GassScores:
    """Scores for every caption in a batch traced by ``probe_intermediate_gradients``.

    Captions are processed in groups of equal length; the result matches
    ``sequence_scores`` applied to each caption.
    """
    traces = [text_out.traces[l] for l in probe.layers]
    g_layers = [probe.layer(l) for l in probe.layers]
    B, n = traces[0].k.shape[:2]
    dtype = _as_float(traces[0].k).dtype
    S = torch.zeros(B, n, dtype=dtype)
    s = torch.zeros(B, n, dtype=dtype)
    lengths = torch.as_tensor(lengths)
    for length in torch.unique(lengths).tolist():
        idx = torch.nonzero(lengths == length)[:, 0]
        S[idx], s[idx] = _group_scores(traces, g_layers, idx, int(length), cfg)
    return GassScores(S, s, list(probe.layers))
