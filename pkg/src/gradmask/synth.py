"""Procedural person images with templated captions and known noise tokens.

Each image is a grid of colored patches: hair across the top rows, the top
garment and the bottom garment down the left columns, and the accessory in
the rightmost column. Captions fill a template's slots with the rendered
attribute words; with probability ``noise_rate`` per slot the word is swapped
for a different value of the same slot and its token position recorded.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, Vocabulary
from .errors import IntegrityError, TemplateError

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.10, 0.20, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.55, 0.10, 0.70),
    "orange": (1.00, 0.55, 0.00),
    "pink": (1.00, 0.60, 0.80),
    "brown": (0.45, 0.25, 0.05),
    "gray": (0.50, 0.50, 0.50),
    "cyan": (0.10, 0.90, 0.90),
    "navy": (0.05, 0.05, 0.45),
    "olive": (0.50, 0.50, 0.05),
    "maroon": (0.50, 0.00, 0.20),
    "teal": (0.00, 0.45, 0.45),
}

HAIR = {
    "ponytail": (0.45, 0.25, 0.10),
    "curly": (0.85, 0.70, 0.35),
    "short": (0.20, 0.20, 0.20),
    "long": (0.70, 0.30, 0.45),
    "braided": (0.30, 0.55, 0.60),
    "wavy": (0.95, 0.95, 0.60),
    "straight": (0.10, 0.10, 0.60),
    "spiky": (0.90, 0.35, 0.05),
    "bun": (0.55, 0.80, 0.25),
    "shaved": (0.75, 0.75, 0.95),
}

ACCESSORY = {
    "backpack": (0.30, 0.60, 0.10),
    "umbrella": (0.80, 0.20, 0.60),
    "handbag": (0.60, 0.40, 0.20),
    "scarf": (0.20, 0.80, 0.80),
    "hat": (0.50, 0.50, 0.90),
    "suitcase": (0.95, 0.85, 0.20),
    "phone": (0.10, 0.10, 0.10),
    "bottle": (0.90, 0.90, 0.90),
    "camera": (0.90, 0.10, 0.20),
    "briefcase": (0.35, 0.15, 0.45),
}

TEMPLATES = (
    "a person wearing a {top} shirt and {bottom} pants with {hair} hair carrying a {accessory}",
    "the pedestrian has {hair} hair and wears a {top} jacket with {bottom} trousers and a {accessory}",
    "this person in a {top} top and {bottom} shorts has {hair} hair and holds a {accessory}",
    "{hair} hair , a {top} coat , {bottom} jeans and a {accessory}",
    "someone with a {accessory} and {hair} hair is dressed in a {top} sweater and a {bottom} skirt",
)

PATCH = 2  # pixels per patch side; patch_dim = PATCH * PATCH * 3


@dataclass
class AttributeSpec:
    slots: dict = field(
        default_factory=lambda: {"top": COLORS, "bottom": COLORS, "hair": HAIR, "accessory": ACCESSORY}
    )
    grid: tuple = (8, 4)

    def values(self, slot: str) -> list:
        return list(self.slots[slot])

    def regions(self) -> dict:
        """Slot -> list of (row, col) patches it paints."""
        rows, cols = self.grid
        body = cols - 1
        head = max(1, rows // 4)
        torso = head + (rows - head) // 2
        return {
            "hair": [(r, c) for r in range(head) for c in range(cols)],
            "top": [(r, c) for r in range(head, torso) for c in range(body)],
            "bottom": [(r, c) for r in range(torso, rows) for c in range(body)],
            "accessory": [(r, cols - 1) for r in range(head, rows)],
        }

    def render(self, attributes: dict, rng: np.random.Generator, jitter: float = 0.05) -> np.ndarray:
        """Patch grid of shape (rows, cols, PATCH*PATCH*3), float32."""
        rows, cols = self.grid
        img = np.zeros((rows, cols, PATCH * PATCH, 3))
        for slot, cells in self.regions().items():
            color = np.asarray(self.slots[slot][attributes[slot]])
            for r, c in cells:
                img[r, c] = color
        img += rng.normal(0.0, jitter, size=img.shape)
        return img.reshape(rows, cols, -1).astype(np.float32)


@dataclass
class SyntheticPair:
    pair_id: int
    attributes: dict
    words: list
    slot_positions: dict  # slot -> token position (sos counted)
    noise_truth: tuple
    image: np.ndarray

    @property
    def caption(self) -> str:
        return " ".join(self.words)


def template_slots(template: str) -> list:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name is not None]


def generate_pair(rng: np.random.Generator, spec: AttributeSpec, template: str, noise_rate: float,
                  pair_id: int = 0) -> SyntheticPair:
    if not 0 <= noise_rate <= 1:
        raise ValueError(f"noise_rate must lie in [0, 1], got {noise_rate}")
    slots = template_slots(template)
    unknown = [s for s in slots if s not in spec.slots]
    if unknown:
        raise TemplateError(f"template uses unknown slots {unknown}")
    attributes = {slot: spec.values(slot)[rng.integers(len(spec.slots[slot]))] for slot in spec.slots}
    image = spec.render(attributes, rng)
    words, slot_positions, noise = [], {}, []
    for piece in template.split():
        if piece.startswith("{") and piece.endswith("}"):
            slot = piece[1:-1]
            word = attributes[slot]
            if rng.random() < noise_rate:
                others = [v for v in spec.values(slot) if v != word]
                word = others[rng.integers(len(others))]
                noise.append(len(words) + 1)
            slot_positions[slot] = len(words) + 1
            words.append(word)
        else:
            words.append(piece)
    return SyntheticPair(pair_id, attributes, words, slot_positions, tuple(noise), image)


def corpus_vocabulary(spec: AttributeSpec, cfg: EncoderConfig) -> Vocabulary:
    words = set()
    for t in TEMPLATES:
        words.update(w for w in t.split() if not w.startswith("{"))
    for slot in spec.slots:
        words.update(spec.values(slot))
    return Vocabulary.build(sorted(words), cfg)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_corpus(out_dir, n: int = 2000, noise_rate: float = 0.2, seed: int = 0, n_test: int = 200,
                 test_noise_rate: float = 0.0, cfg: EncoderConfig | None = None) -> dict:
    """Write ``n`` train and ``n_test`` test pairs under ``out_dir``; returns the manifest.

    Pair ``i`` draws from its own stream ``default_rng([seed, i])``.
    """
    if n < 1:
        raise ValueError("corpus needs at least one pair")
    cfg = cfg or EncoderConfig()
    spec = AttributeSpec(grid=cfg.image_grid)
    if cfg.patch_dim != PATCH * PATCH * 3:
        raise ValueError(f"synthetic images need patch_dim={PATCH * PATCH * 3}")
    vocab = corpus_vocabulary(spec, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    records, images = [], []
    noisy = slots_total = 0
    for i in range(n + n_test):
        split = "train" if i < n else "test"
        rng = np.random.default_rng([seed, i])
        template_idx = int(rng.integers(len(TEMPLATES)))
        pair = generate_pair(rng, spec, TEMPLATES[template_idx], noise_rate if split == "train" else test_noise_rate, i)
        seq = vocab.encode(pair.caption, cfg)
        if split == "train":
            noisy += len(pair.noise_truth)
            slots_total += len(pair.slot_positions)
        records.append({
            "pair_id": pair.pair_id,
            "split": split,
            "template": template_idx,
            "caption": pair.caption,
            "ids": seq.ids,
            "attributes": pair.attributes,
            "slot_positions": pair.slot_positions,
            "noise_truth": list(pair.noise_truth),
        })
        images.append(pair.image)

    vocab.save(out / "vocab.json")
    with open(out / "pairs.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    np.save(out / "images.npy", np.stack(images))
    manifest = {
        "format": 1,
        "seed": seed,
        "noise_rate": noise_rate,
        "test_noise_rate": test_noise_rate,
        "counts": {"train": n, "test": n_test},
        "noisy_slots": noisy,
        "total_slots": slots_total,
        "realized_noise_rate": noisy / slots_total if slots_total else 0.0,
        "image_grid": list(cfg.image_grid),
        "patch_dim": cfg.patch_dim,
        "max_text_len": cfg.max_text_len,
        "vocab_sha256": vocab.digest(),
        "images_sha256": _sha256(out / "images.npy"),
        "pairs_sha256": _sha256(out / "pairs.jsonl"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class CorpusSplit:
    pair_ids: list
    ids: torch.Tensor  # (n, N) padded
    lengths: torch.Tensor
    images: torch.Tensor  # (n, rows, cols, patch_dim)
    noise_truth: list
    slot_positions: list

    def __len__(self):
        return len(self.pair_ids)

    def subset(self, index) -> "CorpusSplit":
        index = list(index)
        return CorpusSplit(
            [self.pair_ids[i] for i in index],
            self.ids[index],
            self.lengths[index],
            self.images[index],
            [self.noise_truth[i] for i in index],
            [self.slot_positions[i] for i in index],
        )


class Corpus:
    def __init__(self, root, manifest: dict, vocab: Vocabulary, records: list, images: np.ndarray):
        self.root = Path(root)
        self.manifest = manifest
        self.vocab = vocab
        self.records = records
        self.images = images

    @classmethod
    def load(cls, root, verify: bool = True) -> "Corpus":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if verify:
            for name, key in (("images.npy", "images_sha256"), ("pairs.jsonl", "pairs_sha256")):
                if _sha256(root / name) != manifest[key]:
                    raise IntegrityError(f"{name} does not match the corpus manifest")
        vocab = Vocabulary.load(root / "vocab.json")
        records = [json.loads(line) for line in (root / "pairs.jsonl").read_text().splitlines()]
        return cls(root, manifest, vocab, records, np.load(root / "images.npy"))

    def split(self, name: str, max_len: int | None = None, pad_id: int = 0) -> CorpusSplit:
        idx = [i for i, r in enumerate(self.records) if r["split"] == name]
        n_tok = max_len or self.manifest["max_text_len"]
        ids = torch.full((len(idx), n_tok), pad_id, dtype=torch.long)
        lengths = torch.zeros(len(idx), dtype=torch.long)
        for row, i in enumerate(idx):
            seq = self.records[i]["ids"]
            ids[row, : len(seq)] = torch.tensor(seq)
            lengths[row] = len(seq)
        return CorpusSplit(
            [self.records[i]["pair_id"] for i in idx],
            ids,
            lengths,
            torch.from_numpy(self.images[idx]),
            [tuple(self.records[i]["noise_truth"]) for i in idx],
            [self.records[i]["slot_positions"] for i in idx],
        )
