"""Rank-k and mAP for text-to-image retrieval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, LabelError, ShapeError


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (Q, G) query x gallery similarities
    relevance: np.ndarray  # (Q, G) bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.relevance = np.asarray(self.relevance, dtype=bool)
        if self.scores.ndim != 2 or self.scores.shape != self.relevance.shape:
            raise ShapeError(f"scores {self.scores.shape} vs relevance {self.relevance.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("non-finite similarity scores")
        if not self.relevance.any(axis=1).all():
            raise LabelError("every query needs at least one relevant gallery item")

    @property
    def shape(self):
        return self.scores.shape

    def ranking(self) -> np.ndarray:
        """Gallery indices per query, best first; ties go to the lower index."""
        return np.argsort(-self.scores, axis=1, kind="stable")


def rank_k(m: ScoreMatrix, k: int) -> float:
    if not 1 <= k <= m.shape[1]:
        raise ConfigError(f"k={k} outside [1, {m.shape[1]}]")
    top = m.ranking()[:, :k]
    hits = np.take_along_axis(m.relevance, top, axis=1).any(axis=1)
    return float(hits.mean())


def mean_average_precision(m: ScoreMatrix) -> float:
    rel = np.take_along_axis(m.relevance, m.ranking(), axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    precision = np.cumsum(rel, axis=1) / ranks
    ap = (precision * rel).sum(axis=1) / rel.sum(axis=1)
    return float(ap.mean())


def metrics_report(m: ScoreMatrix) -> dict:
    G = m.shape[1]
    return {
        "rank1": rank_k(m, min(1, G)),
        "rank5": rank_k(m, min(5, G)),
        "rank10": rank_k(m, min(10, G)),
        "map": mean_average_precision(m),
        "query_count": int(m.shape[0]),
        "gallery_count": int(G),
    }


@torch.no_grad()
def encode_split(encoder, split, batch_size: int = 256):
    """Global text and image embeddings for a corpus split."""
    dtype = next(encoder.parameters()).dtype
    texts, images = [], []
    for start in range(0, len(split), batch_size):
        sl = slice(start, start + batch_size)
        texts.append(encoder.text(split.ids[sl], split.lengths[sl]).eos)
        images.append(encoder.image(split.images[sl].to(dtype)).cls)
    return torch.cat(texts), torch.cat(images)


def score_matrix(text_emb, image_emb, query_ids, gallery_ids) -> ScoreMatrix:
    t = text_emb / text_emb.norm(dim=-1, keepdim=True)
    v = image_emb / image_emb.norm(dim=-1, keepdim=True)
    scores = (t @ v.T).double().numpy()
    relevance = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return ScoreMatrix(scores, relevance)


def evaluate(encoder, split, batch_size: int = 256) -> dict:
    """Caption-to-image retrieval over one split; each caption's relevant image
    shares its pair id."""
    was_training = encoder.training
    encoder.eval()
    t, v = encode_split(encoder, split, batch_size)
    encoder.train(was_training)
    return metrics_report(score_matrix(t, v, split.pair_ids, split.pair_ids))
