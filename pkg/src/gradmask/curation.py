"""Person-crop filtering rules and caption-template clustering.

Detections, keypoints and template embeddings come in as precomputed
records; this module only makes the keep/drop and selection decisions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, MalformedRecordError

log = logging.getLogger(__name__)

KEYPOINT_CATEGORIES = ("head", "hip", "other")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


@dataclass
class FilterCriteria:
    min_short_side: float = 90
    aspect_lo: float = 2.0  # height / width
    aspect_hi: float = 4.0
    min_confidence: float = 0.85
    min_visible_kp: int = 8
    min_hip: int = 1
    min_head: int = 2

    def __post_init__(self):
        if not self.aspect_lo < self.aspect_hi:
            raise ConfigError("aspect_lo must be below aspect_hi")
        if min(asdict(self).values()) <= 0:
            raise ConfigError("filter thresholds must be positive")


@dataclass
class DetectionRecord:
    image_id: str
    bbox_width: float
    bbox_height: float
    confidence: float

    def __post_init__(self):
        if not (self.bbox_width > 0 and self.bbox_height > 0):
            raise MalformedRecordError(f"{self.image_id}: non-positive box {self.bbox_width}x{self.bbox_height}")
        if not 0 <= self.confidence <= 1:
            raise MalformedRecordError(f"{self.image_id}: confidence {self.confidence} outside [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionRecord":
        try:
            return cls(str(d["image_id"]), d["bbox_width"], d["bbox_height"], d["confidence"])
        except KeyError as e:
            raise MalformedRecordError(f"detection record missing field {e.args[0]!r}") from None


@dataclass
class Keypoint:
    name: str
    visible: bool
    category: str = "other"


@dataclass
class PoseRecord:
    image_id: str
    keypoints: list = field(default_factory=list)

    def __post_init__(self):
        names = [k.name for k in self.keypoints]
        if len(set(names)) != len(names):
            raise MalformedRecordError(f"{self.image_id}: duplicate keypoint names")
        for k in self.keypoints:
            if k.category not in KEYPOINT_CATEGORIES:
                raise MalformedRecordError(f"{self.image_id}: unknown keypoint category {k.category!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PoseRecord":
        kps = [Keypoint(k["name"], bool(k["visible"]), k.get("category", "other")) for k in d["keypoints"]]
        return cls(str(d["image_id"]), kps)


@dataclass
class Verdict:
    accepted: bool
    reasons: tuple = ()


def filter_person_crop(rec: DetectionRecord, crit: FilterCriteria = FilterCriteria()) -> Verdict:
    """Short side must exceed the minimum, height/width lie in the closed
    aspect interval, and confidence exceed the threshold."""
    reasons = []
    if not min(rec.bbox_width, rec.bbox_height) > crit.min_short_side:
        reasons.append("short-side")
    if not crit.aspect_lo <= rec.bbox_height / rec.bbox_width <= crit.aspect_hi:
        reasons.append("aspect")
    if not rec.confidence > crit.min_confidence:
        reasons.append("confidence")
    return Verdict(not reasons, tuple(reasons))


def verify_pose(rec: PoseRecord, crit: FilterCriteria = FilterCriteria()) -> Verdict:
    visible = [k for k in rec.keypoints if k.visible]
    reasons = []
    if len(visible) < crit.min_visible_kp:
        reasons.append("keypoint-count")
    if sum(k.category == "hip" for k in visible) < crit.min_hip:
        reasons.append("hip")
    if sum(k.category == "head" for k in visible) < crit.min_head:
        reasons.append("head")
    return Verdict(not reasons, tuple(reasons))


def run_filter(detections: list, poses: Optional[dict] = None, crit: FilterCriteria = FilterCriteria()):
    """Judge raw detection dicts; returns ``(accepted_rows, audit_rows)``.

    Pose comes from a ``keypoints`` field on the detection row or from
    ``poses`` keyed by image id. With neither available the pose rules are
    skipped, unless a pose table was given, in which case the crop is
    rejected as ``pose-missing``.
    """
    accepted, audit = [], []
    for row in detections:
        det = DetectionRecord.from_dict(row)
        reasons = list(filter_person_crop(det, crit).reasons)
        pose_row = row if "keypoints" in row else (poses or {}).get(det.image_id)
        if pose_row is not None:
            reasons += verify_pose(PoseRecord.from_dict({**pose_row, "image_id": det.image_id}), crit).reasons
        elif poses is not None:
            reasons.append("pose-missing")
        audit.append({"image_id": det.image_id, "accepted": not reasons, "reasons": reasons})
        if not reasons:
            accepted.append(row)
    return accepted, audit


# -- template clustering ------------------------------------------------------


@dataclass
class TemplateRecord:
    template_id: str
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        norm = np.linalg.norm(self.embedding)
        if abs(norm - 1.0) > 1e-5:
            raise MalformedRecordError(f"template {self.template_id}: embedding norm {norm:.6f} != 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TemplateRecord":
        return cls(str(d["template_id"]), d.get("text", ""), d["embedding"])


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    init_centroids: np.ndarray
    objective: list
    n_iter: int


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability ~ squared
    distance to the nearest chosen center."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _assign(X, C):
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def lloyd(X: np.ndarray, init: np.ndarray, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    C = init.copy()
    objective = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, d2 = _assign(X, C)
        own = d2[np.arange(len(X)), labels]
        objective.append(float(own.sum()))
        new = C.copy()
        taken = set()
        for j in range(len(C)):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                # empty cluster: restart it at the worst-fit point
                order = np.argsort(-own, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new[j] = X[far]
        shift = float(np.linalg.norm(new - C, axis=1).max())
        C = new
        if shift < tol:
            break
    labels, _ = _assign(X, C)
    return KMeansResult(labels, C, init.copy(), objective, it)


def cluster_templates(records: list, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    n = len(records)
    if not 1 <= k <= n:
        raise ConfigError(f"cannot form {k} clusters from {n} templates")
    X = np.stack([r.embedding for r in records])
    return lloyd(X, kmeans_pp_init(X, k, np.random.default_rng(seed)), max_iter, tol)


def select_templates(records: list, result: KMeansResult, per_cluster_random: int = 5, seed: int = 0) -> dict:
    """Per cluster: the member closest in cosine to its centroid (lowest id on
    ties) plus up to ``per_cluster_random`` other members drawn at random."""
    clusters = []
    for j, centroid in enumerate(result.centroids):
        members = [records[i] for i in np.flatnonzero(result.labels == j)]
        if not members:
            log.warning("cluster %d is empty; skipped", j)
            continue
        cnorm = np.linalg.norm(centroid)
        cos = {
            m.template_id: float(m.embedding @ centroid / (np.linalg.norm(m.embedding) * cnorm))
            for m in members
        }
        rep = min(members, key=lambda m: (-cos[m.template_id], m.template_id))
        others = sorted(m.template_id for m in members if m is not rep)
        rng = np.random.default_rng([seed, j])
        take = min(per_cluster_random, len(others))
        picks = [others[i] for i in sorted(rng.choice(len(others), size=take, replace=False))] if take else []
        clusters.append({
            "cluster": j,
            "size": len(members),
            "representative": rep.template_id,
            "representative_cosine": cos[rep.template_id],
            "random": picks,
        })
    selected = [t for c in clusters for t in [c["representative"], *c["random"]]]
    return {"k": len(result.centroids), "seed": seed, "clusters": clusters, "selected": selected}


def curate_templates(records: list, k: int, seed: int = 0, per_cluster_random: int = 5) -> dict:
    result = cluster_templates(records, k, seed)
    bank = select_templates(records, result, per_cluster_random, seed)
    bank["objective"] = result.objective
    bank["iterations"] = result.n_iter
    return bank


def write_bank(path, bank: dict) -> None:
    Path(path).write_text(json.dumps(bank, indent=2, sort_keys=True) + "\n")
