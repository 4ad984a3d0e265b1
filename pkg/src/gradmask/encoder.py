"""Miniature dual encoder (text + image transformers) with trace capture.

The text branch can record per-layer query/key/value embeddings and attention
maps, and accepts an additive perturbation on the eos hidden state after each
layer. Differentiating the matched-pair cosine similarity with respect to that
perturbation gives the intermediate eos gradients consumed by token scoring.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    ConfigError,
    DegenerateInputError,
    LengthError,
    ShapeError,
    VocabularyError,
)

PAD, SOS, EOS, MASK = "<pad>", "<sos>", "<eos>", "<mask>"


@dataclass
class EncoderConfig:
    depth: int = 4
    image_depth: int = 4
    width: int = 128
    heads: int = 4
    vocab_size: int = 512
    max_text_len: int = 32
    image_grid: tuple = (8, 4)
    patch_dim: int = 12
    mlp_ratio: int = 4
    pad_id: int = 0
    sos_id: int = 1
    eos_id: int = 2
    mask_id: int = 3

    def __post_init__(self):
        self.image_grid = tuple(int(x) for x in self.image_grid)
        if self.depth < 1 or self.image_depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        ids = [self.pad_id, self.sos_id, self.eos_id, self.mask_id]
        if len(set(ids)) != 4:
            raise ConfigError(f"special ids must be distinct, got {ids}")
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ConfigError("special ids must lie inside the vocabulary")
        if self.max_text_len < 3:
            raise ConfigError("max_text_len must be >= 3")
        if len(self.image_grid) != 2 or min(self.image_grid) < 1:
            raise ConfigError(f"bad image grid {self.image_grid}")

    @property
    def special_ids(self) -> dict:
        return {"sos": self.sos_id, "eos": self.eos_id, "mask": self.mask_id, "pad": self.pad_id}

    @property
    def num_patches(self) -> int:
        return self.image_grid[0] * self.image_grid[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_grid"] = list(self.image_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    """A single caption as token ids: sos, content..., eos, then padding."""

    ids: list
    length: int

    @property
    def valid_mask(self) -> list:
        return [i < self.length for i in range(len(self.ids))]

    @property
    def eos_position(self) -> int:
        return self.length - 1

    def validate(self, cfg: EncoderConfig) -> "TokenSequence":
        if len(self.ids) > cfg.max_text_len:
            raise LengthError(f"sequence of {len(self.ids)} tokens exceeds N={cfg.max_text_len}")
        if not 2 <= self.length <= len(self.ids):
            raise LengthError(f"invalid length {self.length}")
        for t in self.ids:
            if not 0 <= t < cfg.vocab_size:
                raise VocabularyError(f"token id {t} outside vocabulary of size {cfg.vocab_size}")
        if self.ids[0] != cfg.sos_id or self.ids[self.length - 1] != cfg.eos_id:
            raise ValueError("sequence must start with sos and end with eos")
        if any(t != cfg.pad_id for t in self.ids[self.length:]):
            raise ValueError("only padding may follow eos")
        if cfg.pad_id in self.ids[: self.length]:
            raise ValueError("padding inside the valid span")
        return self

    def padded(self, n: int, pad_id: int) -> list:
        return list(self.ids) + [pad_id] * (n - len(self.ids))


class Vocabulary:
    """Whitespace tokenizer over a fixed word -> id table."""

    def __init__(self, word_to_id: dict):
        self.word_to_id = dict(word_to_id)
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}
        if len(self.id_to_word) != len(self.word_to_id):
            raise VocabularyError("vocabulary ids are not unique")

    @classmethod
    def build(cls, words: Sequence[str], cfg: EncoderConfig) -> "Vocabulary":
        table = {PAD: cfg.pad_id, SOS: cfg.sos_id, EOS: cfg.eos_id, MASK: cfg.mask_id}
        free = (i for i in range(cfg.vocab_size) if i not in table.values())
        for w in words:
            if w not in table:
                try:
                    table[w] = next(free)
                except StopIteration:
                    raise VocabularyError(f"more than {cfg.vocab_size} words") from None
        return cls(table)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.word_to_id, indent=1, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.word_to_id)

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.word_to_id, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def encode(self, text: str, cfg: EncoderConfig) -> TokenSequence:
        words = text.split()
        if len(words) + 2 > cfg.max_text_len:
            raise LengthError(f"caption of {len(words)} words does not fit N={cfg.max_text_len}")
        try:
            ids = [self.word_to_id[w] for w in words]
        except KeyError as e:
            raise VocabularyError(f"unknown word {e.args[0]!r}") from None
        seq = TokenSequence([cfg.sos_id, *ids, cfg.eos_id], len(ids) + 2)
        return seq.validate(cfg)

    def decode(self, ids) -> list:
        return [self.id_to_word.get(int(i), "<unk>") for i in ids]


@dataclass
class LayerTrace:
    """Quantities captured inside one text layer, batched over B sequences.

    q, k, v: (B, N, d) with heads concatenated; attn: (B, heads, N, N) after
    softmax; q_eos: (B, d) query row at each sequence's eos position.
    """

    layer_index: int
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    attn: torch.Tensor
    q_eos: torch.Tensor


@dataclass
class TextOutput:
    tokens: torch.Tensor  # (B, N, d) per-token embeddings T
    eos: torch.Tensor  # (B, d) global embedding T_eos
    valid: torch.Tensor  # (B, N) bool
    traces: list = field(default_factory=list)


@dataclass
class ImageOutput:
    tokens: torch.Tensor  # (B, 1 + P, d), class token first
    cls: torch.Tensor  # (B, d)


@dataclass
class GradientProbe:
    """Per-sample eos gradients g^l, shape (B, len(layers), d)."""

    layers: list
    g: torch.Tensor

    def layer(self, index: int) -> torch.Tensor:
        return self.g[:, self.layers.index(index)]


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, key_valid):
        B, N, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.view(B, N, h, d // h).transpose(1, 2)

        logits = split(q) @ split(k).transpose(-1, -2) / math.sqrt(d // h)
        logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        y = (attn @ split(v)).transpose(1, 2).reshape(B, N, d)
        return self.out(y), (q, k, v, attn)


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width), nn.GELU(), nn.Linear(mlp_ratio * width, width)
        )

    def forward(self, x, key_valid):
        y, parts = self.attn(self.ln1(x), key_valid)
        x = x + y
        x = x + self.mlp(self.ln2(x))
        return x, parts


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_text_len, cfg.width) * 0.01)
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.ln_final = nn.LayerNorm(cfg.width)
        nn.init.normal_(self.token_emb.weight, std=0.02)

    def check_inputs(self, ids, lengths):
        cfg = self.cfg
        if ids.dim() != 2:
            raise ShapeError(f"expected (B, N) token ids, got {tuple(ids.shape)}")
        if ids.shape[1] > cfg.max_text_len:
            raise LengthError(f"sequence of {ids.shape[1]} tokens exceeds N={cfg.max_text_len}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
        if lengths.shape != (ids.shape[0],) or (lengths < 2).any() or (lengths > ids.shape[1]).any():
            raise LengthError("lengths must lie in [2, N] per sequence")

    def forward(self, ids, lengths, capture: bool = False, eos_delta: Optional[torch.Tensor] = None):
        """Encode token ids (B, N) with valid lengths (B,).

        ``eos_delta`` of shape (B, depth, d) is added to the eos hidden state
        after each layer; it exists so the eos gradients can be taken.
        """
        self.check_inputs(ids, lengths)
        B, N = ids.shape
        valid = torch.arange(N, device=ids.device)[None, :] < lengths[:, None]
        eos_pos = lengths - 1
        x = self.token_emb(ids) + self.pos_emb[:N]
        onehot = None
        if eos_delta is not None:
            if eos_delta.shape != (B, self.cfg.depth, self.cfg.width):
                raise ShapeError(f"eos_delta must be (B, depth, d), got {tuple(eos_delta.shape)}")
            onehot = F.one_hot(eos_pos, N).to(x.dtype)[:, :, None]
        traces = []
        rows = torch.arange(B, device=ids.device)
        for layer, block in enumerate(self.blocks):
            x, (q, k, v, attn) = block(x, valid)
            if capture:
                traces.append(
                    LayerTrace(layer, q.detach(), k.detach(), v.detach(), attn.detach(),
                               q[rows, eos_pos].detach())
                )
            if onehot is not None:
                x = x + onehot * eos_delta[:, layer][:, None, :]
        tokens = self.ln_final(x)
        return TextOutput(tokens, tokens[rows, eos_pos], valid, traces)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.width)
        self.cls_token = nn.Parameter(torch.randn(cfg.width) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(cfg.num_patches + 1, cfg.width) * 0.01)
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.image_depth)
        )
        self.ln_final = nn.LayerNorm(cfg.width)

    def forward(self, patches):
        """Encode patch grids of shape (B, rows, cols, patch_dim)."""
        rows, cols = self.cfg.image_grid
        if patches.dim() != 4 or tuple(patches.shape[1:]) != (rows, cols, self.cfg.patch_dim):
            raise ShapeError(
                f"expected (B, {rows}, {cols}, {self.cfg.patch_dim}) patches, got {tuple(patches.shape)}"
            )
        B = patches.shape[0]
        x = self.patch_embed(patches.reshape(B, rows * cols, -1))
        x = torch.cat([self.cls_token.expand(B, 1, -1), x], dim=1) + self.pos_emb
        valid = torch.ones(B, x.shape[1], dtype=torch.bool, device=x.device)
        for block in self.blocks:
            x, _ = block(x, valid)
        tokens = self.ln_final(x)
        return ImageOutput(tokens, tokens[:, 0])


class DualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.image = ImageEncoder(cfg)

    def encode_text(self, seq: TokenSequence, capture: bool = False) -> TextOutput:
        """Encode one caption; returns a batch of size one."""
        seq.validate(self.cfg)
        dtype_device = next(self.parameters())
        ids = torch.tensor([seq.ids], device=dtype_device.device)
        lengths = torch.tensor([seq.length], device=ids.device)
        return self.text(ids, lengths, capture=capture)

    def encode_image(self, patches) -> ImageOutput:
        """Encode a single grid (rows, cols, patch_dim) or a batch of them."""
        if patches.dim() == 3:
            patches = patches[None]
        return self.image(patches)


def cosine_rows(a, b):
    """Row-wise cosine similarity of two (B, d) tensors."""
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def global_similarity(t_eos, v_cls) -> torch.Tensor:
    """Cosine similarity between one text and one image global embedding."""
    t_eos = torch.as_tensor(t_eos, dtype=torch.float64)
    v_cls = torch.as_tensor(v_cls, dtype=torch.float64)
    nt, nv = t_eos.norm(), v_cls.norm()
    if nt == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return ((t_eos @ v_cls) / (nt * nv)).clamp(-1.0, 1.0)


def probe_intermediate_gradients(
    model: DualEncoder, ids, lengths, patches, layers=None, capture: bool = False, scale: float = 1.0
):
    """Gradients of each matched pair's cosine similarity w.r.t. its eos state per layer.

    Differentiates ``scale * sum_b cos(T_eos_b, V_cls_b)``; cross-sample terms
    vanish so row b holds sample b's own gradient. Returns
    ``(GradientProbe, TextOutput)``; the text output carries traces when
    ``capture`` is set. Nothing accumulates into parameter ``.grad``.
    """
    depth = model.cfg.depth
    layers = list(range(depth)) if layers is None else [int(l) for l in layers]
    for l in layers:
        if not 0 <= l < depth:
            raise IndexError(f"layer {l} outside [0, {depth})")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        v_cls = model.image(patches).cls
    delta = torch.zeros(ids.shape[0], depth, model.cfg.width, dtype=dtype, requires_grad=True)
    with torch.enable_grad():
        out = model.text(ids, lengths, capture=capture, eos_delta=delta)
        sim = scale * cosine_rows(out.eos, v_cls).sum()
        (g,) = torch.autograd.grad(sim, delta)
    out = TextOutput(out.tokens.detach(), out.eos.detach(), out.valid, out.traces)
    return GradientProbe(layers, g[:, layers].detach()), out
