"""Retrieval protocol: manifests, cosine similarity, junk filtering, AP,
CMC, and the full report against an enumerated oracle."""
import json

import numpy as np
import pytest

from lkareid.evaluation import (
    ManifestError,
    Sample,
    apply_protocol_filter,
    average_precision,
    cmc_curve,
    evaluate,
    evaluate_features,
    load_manifest,
    pairwise_cosine,
    parse_veri_name,
)
from oracles import ap_oracle, cosine_oracle, retrieval_oracle


# ---------------------------------------------------------------------------
# manifests


def _write_manifest(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_load_manifest_json_records(tmp_path):
    path = tmp_path / "m.jsonl"
    _write_manifest(path, [
        {"path": "a.npy", "vehicle_id": 3, "camera_id": 1, "view_id": 0},
        {"path": "b.npy", "vehicle_id": 4, "camera_id": 2},
    ])
    man = load_manifest(path, split="query")
    assert len(man.samples) == 2
    assert man.samples[0].vehicle_id == 3 and man.samples[0].camera_id == 1


def test_load_manifest_veri_filename_parser(tmp_path):
    path = tmp_path / "m.jsonl"
    _write_manifest(path, [{"path": "0001_c001_00016450_0.jpg"}])
    man = load_manifest(path, split="gallery")
    assert man.samples[0].vehicle_id == 1
    assert man.samples[0].camera_id == 1


def test_parse_veri_name():
    assert parse_veri_name("0123_c017_00001_3.jpg") == (123, 17)
    with pytest.raises(ValueError):
        parse_veri_name("not-a-veri-name.jpg")


def test_load_manifest_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ManifestError):
        load_manifest(empty, split="query")

    dup = tmp_path / "dup.jsonl"
    _write_manifest(dup, [
        {"path": "a.npy", "vehicle_id": 1, "camera_id": 0},
        {"path": "a.npy", "vehicle_id": 2, "camera_id": 1},
    ])
    with pytest.raises(ManifestError):
        load_manifest(dup, split="query")

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"path": "a.npy", "vehicle_id": 1, "camera_id": 0}\nnot json\n')
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(bad, split="query")

    mixed = tmp_path / "mixed.jsonl"
    _write_manifest(mixed, [
        {"feature": [1.0, 0.0], "vehicle_id": 1, "camera_id": 0, "path": "a"},
        {"feature": [1.0, 0.0, 0.0], "vehicle_id": 2, "camera_id": 1, "path": "b"},
    ])
    with pytest.raises(ManifestError):
        load_manifest(mixed, split="query")


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_identical_and_orthogonal():
    a = np.array([[1.0, 2.0, 3.0]])
    assert pairwise_cosine(a, a)[0, 0] == pytest.approx(1.0)
    q = np.array([[1.0, 0.0]])
    g = np.array([[0.0, 5.0]])
    assert pairwise_cosine(q, g)[0, 0] == pytest.approx(0.0)


def test_cosine_matches_loop_oracle():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 4))
    g = rng.normal(size=(5, 4))
    np.testing.assert_allclose(pairwise_cosine(q, g), cosine_oracle(q, g), atol=1e-12)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ValueError):
        pairwise_cosine(np.zeros((1, 3)), np.ones((1, 3)))


# ---------------------------------------------------------------------------
# protocol filter


def test_protocol_filter_junk_rule():
    query = Sample(vehicle_id=5, camera_id=2)
    gallery = [Sample(5, 2), Sample(5, 3), Sample(7, 2)]
    np.testing.assert_array_equal(
        apply_protocol_filter(query, gallery), [False, True, True]
    )


def test_protocol_filter_all_distinct_cameras():
    query = Sample(1, 0)
    gallery = [Sample(1, 1), Sample(2, 2), Sample(3, 3)]
    assert apply_protocol_filter(query, gallery).all()


# ---------------------------------------------------------------------------
# AP / CMC


def test_average_precision_hand_cases():
    assert average_precision([1, 0, 1]) == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert average_precision([1, 1, 1]) == pytest.approx(1.0)
    assert average_precision([0, 1]) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(10))
def test_average_precision_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    rel = rng.integers(0, 2, size=12)
    if rel.sum() == 0:
        rel[3] = 1
    assert average_precision(rel.tolist()) == pytest.approx(ap_oracle(rel.tolist()), abs=1e-12)


def test_cmc_hand_case():
    cmc = cmc_curve([[1, 0, 0], [0, 0, 1]], 3)
    np.testing.assert_allclose(cmc, [0.5, 0.5, 1.0])


def test_cmc_always_first_hit():
    cmc = cmc_curve([[1, 0], [1, 1]], 2)
    np.testing.assert_allclose(cmc, [1.0, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_cmc_monotone_property(seed):
    rng = np.random.default_rng(seed)
    lists = []
    for _ in range(6):
        rel = rng.integers(0, 2, size=8)
        if rel.sum() == 0:
            rel[-1] = 1
        lists.append(rel.tolist())
    cmc = cmc_curve(lists, 8)
    assert all(b >= a for a, b in zip(cmc, cmc[1:]))
    assert cmc[-1] <= 1.0


# ---------------------------------------------------------------------------
# evaluate


def _fixture():
    """3 queries, 6 gallery entries with handcrafted features."""
    q_feats = np.eye(3)
    q_meta = [(0, 0), (1, 0), (2, 0)]
    g_feats = np.array([
        [1.0, 0.1, 0.0],   # id 0 cam 1 (strong match for q0)
        [0.9, 0.2, 0.1],   # id 1 cam 1 (distractor ranked high for q0)
        [0.0, 1.0, 0.0],   # id 1 cam 2
        [0.1, 0.0, 1.0],   # id 2 cam 1
        [0.2, 0.1, 0.9],   # id 0 cam 2 (second positive for q0)
        [0.5, 0.5, 0.5],   # id 2 cam 0 -> junk for q2 (same id+cam)
    ])
    g_meta = [(0, 1), (1, 1), (1, 2), (2, 1), (0, 2), (2, 0)]
    return q_feats, q_meta, g_feats, g_meta


def _samples(meta):
    return [Sample(vehicle_id=v, camera_id=c) for v, c in meta]


def test_evaluate_matches_enumeration_oracle():
    q_feats, q_meta, g_feats, g_meta = _fixture()
    report = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=6)
    want_map, want_cmc, want_skipped = retrieval_oracle(q_feats, q_meta, g_feats, g_meta, max_rank=6)
    assert report.map_score == pytest.approx(want_map, abs=1e-12)
    np.testing.assert_allclose(report.cmc, want_cmc, atol=1e-12)
    assert report.skipped_queries == want_skipped


def test_evaluate_perfect_retrieval():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(4, 8))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    q = _samples([(i, 0) for i in range(4)])
    g = _samples([(i, 1) for i in range(4)])
    report = evaluate_features(feats, q, feats, g, max_rank=4)
    assert report.map_score == pytest.approx(1.0)
    assert report.rank1 == pytest.approx(1.0)


def test_evaluate_gallery_permutation_invariance():
    q_feats, q_meta, g_feats, g_meta = _fixture()
    base = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=5)
    rng = np.random.default_rng(2)
    perm = rng.permutation(len(g_meta))
    shuffled = evaluate_features(
        q_feats, _samples(q_meta), g_feats[perm], _samples([g_meta[i] for i in perm]), max_rank=5
    )
    assert shuffled.map_score == pytest.approx(base.map_score, abs=1e-12)
    np.testing.assert_allclose(shuffled.cmc, base.cmc, atol=1e-12)


def test_evaluate_monotone_similarity_invariance():
    q_feats, q_meta, g_feats, g_meta = _fixture()
    base = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=5)
    scaled = evaluate_features(
        3.0 * q_feats, _samples(q_meta), 0.5 * g_feats, _samples(g_meta), max_rank=5
    )
    assert scaled.map_score == pytest.approx(base.map_score, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_junk_append_invariance(seed):
    # entries sharing the single query's id and camera are junk for it
    rng = np.random.default_rng(seed)
    n_g, dim = 8, 5
    q_feats = rng.normal(size=(1, dim))
    g_feats = rng.normal(size=(n_g, dim))
    q_meta = [(0, 0)]
    g_meta = [(int(rng.integers(0, 3)), int(rng.integers(1, 3))) for _ in range(n_g)]
    g_meta[0] = (0, 1)  # guarantee a cross-camera positive
    base = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=5)
    junk_feats = rng.normal(size=(3, dim))
    aug_feats = np.concatenate([g_feats, junk_feats])
    aug_meta = g_meta + [(0, 0)] * 3  # same id+cam as the query -> all junk
    aug = evaluate_features(q_feats, _samples(q_meta), aug_feats, _samples(aug_meta), max_rank=5)
    assert aug.map_score == pytest.approx(base.map_score, abs=1e-12)
    np.testing.assert_allclose(aug.cmc, base.cmc, atol=1e-12)


def test_evaluate_skips_zero_positive_queries():
    q_feats = np.eye(2)
    q_meta = [(0, 0), (9, 0)]  # id 9 has no gallery positives
    g_feats = np.eye(2)
    g_meta = [(0, 1), (1, 1)]
    report = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=2)
    assert report.skipped_queries == 1
    assert len(report.per_query_ap) == 1


def test_evaluate_all_skipped_errors():
    q_feats = np.eye(2)
    g_feats = np.eye(2)
    q = _samples([(5, 0), (6, 0)])
    g = _samples([(7, 1), (8, 1)])
    with pytest.raises(ValueError):
        evaluate_features(q_feats, q, g_feats, g)


def test_report_json_shape():
    q_feats, q_meta, g_feats, g_meta = _fixture()
    report = evaluate_features(q_feats, _samples(q_meta), g_feats, _samples(g_meta), max_rank=5)
    doc = json.loads(report.to_json())
    assert doc["format_version"] == 1
    assert 0.0 <= doc["mAP"] <= 1.0
    assert len(doc["cmc"]) == 5
    assert "skipped_queries" in doc and "protocol" in doc


def test_evaluate_from_feature_manifests(tmp_path):
    q_path, g_path = tmp_path / "q.jsonl", tmp_path / "g.jsonl"
    _write_manifest(q_path, [
        {"path": f"q{i}", "feature": row, "vehicle_id": i, "camera_id": 0}
        for i, row in enumerate(np.eye(3).tolist())
    ])
    _write_manifest(g_path, [
        {"path": f"g{i}", "feature": row, "vehicle_id": i, "camera_id": 1}
        for i, row in enumerate(np.eye(3).tolist())
    ])
    report = evaluate(load_manifest(q_path, "query"), load_manifest(g_path, "gallery"), max_rank=3)
    assert report.map_score == pytest.approx(1.0)
