import json
import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradmask.curation import (
    DetectionRecord,
    FilterCriteria,
    Keypoint,
    KMeansResult,
    PoseRecord,
    TemplateRecord,
    cluster_templates,
    curate_templates,
    filter_person_crop,
    kmeans_pp_init,
    lloyd,
    read_jsonl,
    run_filter,
    select_templates,
    verify_pose,
    write_bank,
    write_jsonl,
)
from gradmask.errors import ConfigError, MalformedRecordError

FIXTURES = Path(__file__).parent / "fixtures"


def det(w, h, conf):
    return DetectionRecord("x", w, h, conf)


def pose(head, hip, other):
    kps = [Keypoint(f"h{i}", True, "head") for i in range(head)]
    kps += [Keypoint(f"p{i}", True, "hip") for i in range(hip)]
    kps += [Keypoint(f"o{i}", True, "other") for i in range(other)]
    kps += [Keypoint("hidden", False, "head")]
    return PoseRecord("x", kps)


def unit_records(X):
    return [TemplateRecord(f"t{i:03d}", "", x / np.linalg.norm(x)) for i, x in enumerate(X)]


def oracle_lloyd(X, C, max_iter=300, tol=1e-6):
    """Loop-level Lloyd iterations from a given initialization."""
    X = [list(map(float, x)) for x in X]
    C = [list(map(float, c)) for c in C]
    n, k, d = len(X), len(C), len(X[0])

    def nearest(x):
        dists = [sum((x[t] - c[t]) ** 2 for t in range(d)) for c in C]
        j = min(range(k), key=lambda j: (dists[j], j))
        return j, dists[j]

    for _ in range(max_iter):
        assign = [nearest(x) for x in X]
        new = []
        taken = set()
        worst = sorted(range(n), key=lambda i: (-assign[i][1], i))
        for j in range(k):
            members = [X[i] for i in range(n) if assign[i][0] == j]
            if members:
                new.append([sum(m[t] for m in members) / len(members) for t in range(d)])
            else:
                far = next(i for i in worst if i not in taken)
                taken.add(far)
                new.append(list(X[far]))
        shift = max(sum((a - b) ** 2 for a, b in zip(c, c2)) ** 0.5 for c, c2 in zip(C, new))
        C = new
        if shift < tol:
            break
    return [nearest(x)[0] for x in X], np.array(C)


class TestFilterCrop:
    def test_accept(self):
        assert filter_person_crop(det(91, 200, 0.90)).accepted

    def test_short_side_strict(self):
        assert filter_person_crop(det(90, 200, 0.90)).reasons == ("short-side",)

    def test_aspect(self):
        assert filter_person_crop(det(100, 450, 0.90)).reasons == ("aspect",)

    @pytest.mark.parametrize("h", [200, 400])
    def test_aspect_boundaries_inclusive(self, h):
        assert filter_person_crop(det(100, h, 0.90)).accepted

    def test_confidence_strict(self):
        assert filter_person_crop(det(100, 250, 0.85)).reasons == ("confidence",)

    def test_every_reason_listed(self):
        assert filter_person_crop(det(50, 300, 0.1)).reasons == ("short-side", "aspect", "confidence")

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1, 500), st.floats(1, 2000), st.floats(0, 1))
    def test_pure_and_exhaustive(self, w, h, c):
        v = filter_person_crop(det(w, h, c))
        assert v == filter_person_crop(det(w, h, c))
        expected = {"short-side": min(w, h) <= 90, "aspect": not 2 <= h / w <= 4, "confidence": c <= 0.85}
        assert set(v.reasons) == {k for k, bad in expected.items() if bad}
        assert v.accepted == (not v.reasons)

    @pytest.mark.parametrize("args", [(0, 100, 0.9), (100, -1, 0.9), (100, 200, 1.2)])
    def test_malformed(self, args):
        with pytest.raises(MalformedRecordError):
            det(*args)

    def test_missing_field(self):
        with pytest.raises(MalformedRecordError):
            DetectionRecord.from_dict({"image_id": "a", "bbox_width": 3})

    def test_criteria_validation(self):
        with pytest.raises(ConfigError):
            FilterCriteria(aspect_lo=4, aspect_hi=2)
        with pytest.raises(ConfigError):
            FilterCriteria(min_confidence=0)


class TestPose:
    def test_accept_minimal(self):
        assert verify_pose(pose(2, 1, 5)).accepted

    def test_seven_visible(self):
        assert verify_pose(pose(2, 1, 4)).reasons == ("keypoint-count",)

    def test_no_hip(self):
        assert verify_pose(pose(2, 0, 8)).reasons == ("hip",)

    def test_one_head(self):
        assert verify_pose(pose(1, 1, 6)).reasons == ("head",)

    def test_hidden_not_counted(self):
        rec = PoseRecord("x", [Keypoint(f"k{i}", False, "head") for i in range(10)])
        assert verify_pose(rec).reasons == ("keypoint-count", "hip", "head")

    def test_duplicate_names(self):
        with pytest.raises(MalformedRecordError):
            PoseRecord("x", [Keypoint("a", True), Keypoint("a", False)])


class TestRunFilter:
    def test_pose_table(self):
        dets = [{"image_id": "a", "bbox_width": 100, "bbox_height": 250, "confidence": 0.9},
                {"image_id": "b", "bbox_width": 100, "bbox_height": 250, "confidence": 0.9}]
        poses = {"a": {"keypoints": [{"name": f"k{i}", "visible": True, "category": c}
                                     for i, c in enumerate(["head", "head", "hip"] + ["other"] * 5)]}}
        accepted, audit = run_filter(dets, poses)
        assert [r["image_id"] for r in accepted] == ["a"]
        assert audit[1]["reasons"] == ["pose-missing"]

    def test_without_pose(self):
        accepted, _ = run_filter([{"image_id": "a", "bbox_width": 100, "bbox_height": 250, "confidence": 0.9}])
        assert len(accepted) == 1

    def test_golden_audit(self, tmp_path):
        rows = read_jsonl(FIXTURES / "detections.jsonl")
        assert len(rows) == 50
        accepted, audit = run_filter(rows)
        assert [a["reasons"] for a in audit] == [r["expect"] for r in rows]
        write_jsonl(tmp_path / "audit.jsonl", audit)
        write_jsonl(tmp_path / "accepted.jsonl", accepted)
        assert (tmp_path / "audit.jsonl").read_bytes() == (FIXTURES / "audit.golden.jsonl").read_bytes()
        assert (tmp_path / "accepted.jsonl").read_bytes() == (FIXTURES / "accepted.golden.jsonl").read_bytes()


class TestKMeans:
    def test_single_cluster(self):
        recs = unit_records(np.random.default_rng(0).normal(size=(10, 4)))
        res = cluster_templates(recs, 1)
        assert set(res.labels.tolist()) == {0}

    def test_separated_groups(self):
        a, b = np.eye(4)[0], np.eye(4)[1]
        recs = unit_records(np.array([a] * 5 + [b] * 7))
        res = cluster_templates(recs, 2, seed=3)
        assert len(set(res.labels[:5])) == 1 and len(set(res.labels[5:])) == 1
        assert res.labels[0] != res.labels[5]
        assert res.objective[-1] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        X = np.random.default_rng(seed).normal(size=(20, 6))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        init = kmeans_pp_init(X, 4, np.random.default_rng(seed))
        res = lloyd(X, init)
        labels, C = oracle_lloyd(X, init)
        assert res.labels.tolist() == labels
        assert np.allclose(res.centroids, C, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_objective_non_increasing(self, seed):
        X = np.random.default_rng(seed).normal(size=(60, 5))
        res = cluster_templates(unit_records(X), 6, seed)
        assert all(b <= a + 1e-12 for a, b in zip(res.objective, res.objective[1:]))

    def test_empty_cluster_reseeded(self):
        X = np.array([[0.0, 1.0], [0.0, 0.9], [1.0, 0.0], [0.9, 0.1]])
        init = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        res = lloyd(X, init)
        assert len(set(res.labels.tolist())) == 3
        labels, _ = oracle_lloyd(X, init)
        assert res.labels.tolist() == labels

    def test_deterministic(self):
        recs = unit_records(np.random.default_rng(1).normal(size=(30, 4)))
        a, b = cluster_templates(recs, 3, seed=5), cluster_templates(recs, 3, seed=5)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)

    def test_too_many_clusters(self):
        with pytest.raises(ConfigError):
            cluster_templates(unit_records(np.eye(3)), 4)

    def test_non_unit_embedding(self):
        with pytest.raises(MalformedRecordError):
            TemplateRecord("t", "", [1.0, 1.0])


class TestSelect:
    def result(self, labels, centroids):
        return KMeansResult(np.array(labels), np.array(centroids, dtype=float), None, [], 1)

    def test_singleton(self):
        recs = unit_records(np.eye(2))
        bank = select_templates(recs, self.result([0, 1], np.eye(2)))
        assert [c["random"] for c in bank["clusters"]] == [[], []]
        assert bank["selected"] == ["t000", "t001"]

    def test_six_exhausts(self):
        X = np.random.default_rng(0).normal(size=(6, 3)) + 5
        recs = unit_records(X)
        bank = select_templates(recs, self.result([0] * 6, [X.mean(axis=0)]))
        assert sorted(bank["selected"]) == [r.template_id for r in recs]

    def test_representative_tie_lowest_id(self):
        recs = unit_records(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        bank = select_templates(recs, self.result([0, 0, 0], [[1.0, 0.0]]))
        assert bank["clusters"][0]["representative"] == "t000"

    def test_empty_cluster_skipped(self, caplog):
        recs = unit_records(np.eye(2))
        with caplog.at_level(logging.WARNING):
            bank = select_templates(recs, self.result([0, 0], [[1.0, 1.0], [5.0, 5.0]]))
        assert len(bank["clusters"]) == 1 and "empty" in caplog.text

    @pytest.mark.parametrize("seed", range(5))
    def test_fixture_properties(self, seed):
        recs = [TemplateRecord.from_dict(r) for r in read_jsonl(FIXTURES / "templates.jsonl")]
        res = cluster_templates(recs, 8, seed)
        bank = select_templates(recs, res, 5, seed)
        assert bank == select_templates(recs, cluster_templates(recs, 8, seed), 5, seed)
        assert len(bank["selected"]) == len(set(bank["selected"]))
        by_id = {r.template_id: r for r in recs}
        for c in bank["clusters"]:
            members = [recs[i] for i in np.flatnonzero(res.labels == c["cluster"])]
            assert 1 + len(c["random"]) == min(6, len(members))
            centroid = res.centroids[c["cluster"]]
            cos = [m.embedding @ centroid / np.linalg.norm(centroid) for m in members]
            rep = by_id[c["representative"]].embedding @ centroid / np.linalg.norm(centroid)
            assert rep >= max(cos) - 1e-12

    def test_golden_bank(self, tmp_path):
        recs = [TemplateRecord.from_dict(r) for r in read_jsonl(FIXTURES / "templates.jsonl")]
        write_bank(tmp_path / "bank.json", curate_templates(recs, k=8, seed=0))
        golden = json.loads((FIXTURES / "bank.golden.json").read_text())
        got = json.loads((tmp_path / "bank.json").read_text())
        assert got["selected"] == golden["selected"] and got["clusters"] == pytest.approx(golden["clusters"])
        assert got["objective"] == pytest.approx(golden["objective"], rel=1e-12)
