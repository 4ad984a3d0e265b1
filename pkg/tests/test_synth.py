import json
import math

import numpy as np
import pytest

from gradmask.encoder import EncoderConfig
from gradmask.errors import IntegrityError, TemplateError
from gradmask.synth import (
    TEMPLATES,
    AttributeSpec,
    Corpus,
    build_corpus,
    generate_pair,
    template_slots,
)

SPEC = AttributeSpec()


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root, n=40, n_test=10, seed=3)
    return root


class TestAttributeSpec:
    def test_regions_disjoint_and_cover(self):
        rows, cols = SPEC.grid
        cells = [c for cs in SPEC.regions().values() for c in cs]
        assert len(cells) == len(set(cells)) == rows * cols

    def test_colors_distinct(self):
        for slot in SPEC.slots:
            colors = [tuple(np.round(SPEC.slots[slot][v], 3)) for v in SPEC.values(slot)]
            assert len(set(colors)) == len(colors)

    def test_colors_separated_beyond_jitter(self):
        # nearest pair of values in a slot stays several jitter widths apart
        for slot in SPEC.slots:
            rgb = np.array([SPEC.slots[slot][v] for v in SPEC.values(slot)])
            gaps = np.linalg.norm(rgb[:, None] - rgb[None], axis=-1) + np.eye(len(rgb)) * 9
            assert gaps.min() > 0.25

    def test_render_shape(self):
        attrs = {s: SPEC.values(s)[0] for s in SPEC.slots}
        img = SPEC.render(attrs, np.random.default_rng(0))
        assert img.shape == (8, 4, 12) and img.dtype == np.float32


class TestGeneratePair:
    @pytest.mark.parametrize("template", TEMPLATES)
    def test_clean(self, template):
        pair = generate_pair(np.random.default_rng(1), SPEC, template, 0.0)
        assert pair.noise_truth == ()
        for slot, pos in pair.slot_positions.items():
            assert pair.words[pos - 1] == pair.attributes[slot]

    @pytest.mark.parametrize("template", TEMPLATES)
    def test_all_noisy(self, template):
        pair = generate_pair(np.random.default_rng(1), SPEC, template, 1.0)
        assert sorted(pair.noise_truth) == sorted(pair.slot_positions.values())
        for slot, pos in pair.slot_positions.items():
            assert pair.words[pos - 1] != pair.attributes[slot]
            assert pair.words[pos - 1] in SPEC.values(slot)

    def test_deterministic(self):
        a = generate_pair(np.random.default_rng(9), SPEC, TEMPLATES[0], 0.5)
        b = generate_pair(np.random.default_rng(9), SPEC, TEMPLATES[0], 0.5)
        assert a.words == b.words and a.noise_truth == b.noise_truth
        assert np.array_equal(a.image, b.image)

    def test_unknown_slot(self):
        with pytest.raises(TemplateError):
            generate_pair(np.random.default_rng(0), SPEC, "a {shoes} person", 0.1)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            generate_pair(np.random.default_rng(0), SPEC, TEMPLATES[0], 1.5)

    def test_template_slots(self):
        for t in TEMPLATES:
            assert set(template_slots(t)) <= set(SPEC.slots)


class TestCorpus:
    def test_byte_identical(self, tmp_path):
        build_corpus(tmp_path / "a", n=10, n_test=2, seed=5)
        build_corpus(tmp_path / "b", n=10, n_test=2, seed=5)
        for name in ("pairs.jsonl", "images.npy", "vocab.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_manifest_and_split(self, corpus_dir):
        c = Corpus.load(corpus_dir)
        assert c.manifest["counts"] == {"train": 40, "test": 10}
        train, test = c.split("train"), c.split("test")
        assert len(train) == 40 and len(test) == 10
        ids = train.pair_ids + test.pair_ids
        assert len(set(ids)) == len(ids)
        assert all(t == () for t in test.noise_truth)
        cfg = EncoderConfig()
        for b in range(len(train)):
            n = int(train.lengths[b])
            assert train.ids[b, 0] == cfg.sos_id and train.ids[b, n - 1] == cfg.eos_id
            for pos in train.noise_truth[b]:
                assert 0 < pos < n - 1 and pos in train.slot_positions[b].values()

    def test_tamper_detected(self, tmp_path):
        build_corpus(tmp_path, n=5, n_test=1)
        with open(tmp_path / "pairs.jsonl", "a") as f:
            f.write("\n")
        with pytest.raises(IntegrityError):
            Corpus.load(tmp_path)

    def test_realized_rate(self, tmp_path):
        m = build_corpus(tmp_path, n=2000, n_test=0, noise_rate=0.2, seed=0)
        p, n = 0.2, m["total_slots"]
        assert abs(m["realized_noise_rate"] - p) < 3 * math.sqrt(p * (1 - p) / n)
        assert m["realized_noise_rate"] == m["noisy_slots"] / n

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            build_corpus(blocker / "sub", n=2, n_test=0)
