"""Index construction, ranking against a brute-force oracle, and metrics."""

import math

import numpy as np
import pytest

from tema import retrieval as rt
from tema.errors import (
    DuplicateId,
    EmptyAfterExclusion,
    EmptyEvaluation,
    MissingCategory,
    SubsetMissingTarget,
    ZeroVector,
)


def brute_force_rank(query, ids, vectors, exclude=frozenset()):
    """Independent oracle: scalar-loop scores plus a plain sort."""
    q = np.asarray(query, dtype=float).reshape(-1)
    q = q / math.sqrt(sum(x * x for x in q))
    scored = []
    for cid, vec in zip(ids, vectors):
        v = np.asarray(vec, dtype=float).reshape(-1)
        v = v / math.sqrt(sum(x * x for x in v))
        score = sum(a * b for a, b in zip(q, v))
        scored.append((cid, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [cid for cid, _ in scored if cid not in exclude]


def random_embeddings(rng, n, dim=8):
    return {f"c{i:04d}": rng.standard_normal(dim) for i in range(n)}


# -------------------------------------------------------------------- index


def test_build_index_orders_and_normalizes():
    emb = {"b": np.array([0.0, 2.0]), "a": np.array([3.0, 0.0])}
    index = rt.build_index(emb)
    assert index.ids == ["a", "b"]
    np.testing.assert_allclose(index.vectors, [[1.0, 0.0], [0.0, 1.0]], atol=1e-15)


def test_build_index_rejects_duplicates_and_zero_rows():
    with pytest.raises(DuplicateId):
        rt.build_index([("a", np.ones(3)), ("a", np.ones(3))])
    with pytest.raises(ZeroVector):
        rt.build_index({"a": np.zeros(3)})


def test_normalization_is_idempotent():
    rng = np.random.default_rng(0)
    emb = random_embeddings(rng, 5)
    once = rt.build_index(emb)
    twice = rt.build_index({cid: v for cid, v in zip(once.ids, once.vectors)})
    np.testing.assert_allclose(once.vectors, twice.vectors, atol=1e-15)


# ------------------------------------------------------------------ ranking


def test_exact_candidate_ranks_first():
    rng = np.random.default_rng(1)
    emb = random_embeddings(rng, 10)
    index = rt.build_index(emb)
    assert rt.rank_candidates(emb["c0003"], index)[0] == "c0003"


def test_identical_vectors_tie_break_by_id():
    v = np.array([1.0, 1.0])
    index = rt.build_index({"zz": v, "aa": v, "mm": v})
    assert rt.rank_candidates(v, index) == ["aa", "mm", "zz"]


def test_ranking_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    for trial in range(10):
        emb = random_embeddings(rng, 20)
        index = rt.build_index(emb)
        query = rng.standard_normal(8)
        assert rt.rank_candidates(query, index) == brute_force_rank(
            query, list(emb), list(emb.values())
        )


def test_ranking_invariant_to_insertion_order():
    rng = np.random.default_rng(3)
    emb = random_embeddings(rng, 12)
    query = rng.standard_normal(8)
    forward = rt.rank_candidates(query, rt.build_index(emb))
    shuffled = dict(reversed(list(emb.items())))
    backward = rt.rank_candidates(query, rt.build_index(shuffled))
    assert forward == backward


def test_ranking_invariant_to_common_candidate_scale():
    rng = np.random.default_rng(4)
    emb = random_embeddings(rng, 15)
    query = rng.standard_normal(8)
    base = rt.rank_candidates(query, rt.build_index(emb))
    scaled = rt.rank_candidates(
        query, rt.build_index({cid: 7.3 * v for cid, v in emb.items()})
    )
    assert base == scaled


def test_exclusion_removes_ids():
    rng = np.random.default_rng(5)
    emb = random_embeddings(rng, 6)
    index = rt.build_index(emb)
    ranking = rt.rank_candidates(emb["c0000"], index, exclude={"c0000"})
    assert "c0000" not in ranking and len(ranking) == 5
    with pytest.raises(EmptyAfterExclusion):
        rt.rank_candidates(emb["c0000"], index, exclude=set(emb))


# ------------------------------------------------------------------ recalls


def test_recall_all_targets_first():
    rankings = [["a", "b"], ["c", "d"], ["e", "f"]]
    assert rt.recall_at_k(rankings, ["a", "c", "e"], 1) == 1.0


def test_recall_counts_absent_target_as_miss():
    assert rt.recall_at_k([["a", "b"]], ["zz"], 2) == 0.0


def test_recall_hand_counted_fixture():
    # 10 queries, target placed inside the top 5 for exactly 4 of them
    rankings = []
    targets = []
    for i in range(10):
        ids = [f"x{j}" for j in range(10)]
        target = f"t{i}"
        position = 2 if i < 4 else 7
        ids.insert(position, target)
        rankings.append(ids)
        targets.append(target)
    assert rt.recall_at_k(rankings, targets, 5) == pytest.approx(0.4)


def test_recall_monotone_and_saturating():
    rng = np.random.default_rng(6)
    emb = random_embeddings(rng, 9)
    index = rt.build_index(emb)
    ids = list(emb)
    rankings = [rt.rank_candidates(rng.standard_normal(8), index) for _ in ids]
    values = [rt.recall_at_k(rankings, ids, k) for k in range(1, 10)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


# ------------------------------------------------------------------ subsets


def test_subset_rank_counts_only_members():
    ranking = [f"c{i}" for i in range(50)]
    subset = ["c40", "c45", "c2", "c30", "c10", "c49"]
    # global rank of c2 is 3 but only one member (none) precedes it
    assert rt.subset_rank(ranking, subset, "c2") == 1
    assert rt.subset_rank(ranking, subset, "c30") == 3


def test_subset_global_rank_50_subset_rank_2():
    ranking = [f"c{i:02d}" for i in range(60)]
    target = "c49"  # global rank 50
    subset = ["c10", target, "c55", "c58", "c59", "c51"]
    assert rt.subset_rank(ranking, subset, target) == 2
    assert rt.subset_recall_at_k([ranking], [target], [subset], 2) == 1.0
    assert rt.subset_recall_at_k([ranking], [target], [subset], 1) == 0.0


def test_subset_missing_target_rejected():
    with pytest.raises(SubsetMissingTarget):
        rt.subset_rank(["a", "b"], ["a", "b"], "z")


def test_subset_recall_never_below_global_recall():
    rng = np.random.default_rng(7)
    emb = random_embeddings(rng, 40)
    index = rt.build_index(emb)
    ids = list(emb)
    rankings, targets, subsets = [], [], []
    for i in range(12):
        target = ids[rng.integers(len(ids))]
        others = [c for c in ids if c != target]
        subset = [target] + list(rng.choice(others, size=5, replace=False))
        rankings.append(rt.rank_candidates(rng.standard_normal(8), index))
        targets.append(target)
        subsets.append(subset)
    for k in (1, 2, 5):
        assert rt.subset_recall_at_k(rankings, targets, subsets, k) >= rt.recall_at_k(
            rankings, targets, k
        )


# -------------------------------------------------------------- aggregation


def test_cirr_average_arithmetic():
    per_group = {("val", ""): {"R@1": 0.5, "R@5": 0.8, "Rsubset@1": 0.7}}
    report = rt.aggregate(per_group, kind="cirr")
    assert report.cirr_avg == pytest.approx(0.75, abs=1e-12)


def test_fashion_average_single_category():
    per_group = {("val", "dress"): {"R@10": 0.4, "R@50": 0.6}}
    report = rt.aggregate(per_group, kind="fashion")
    assert report.fashion_avg == pytest.approx(0.5, abs=1e-12)


def test_fashion_average_over_categories():
    per_group = {
        ("val", "dress"): {"R@10": 0.2, "R@50": 0.4},
        ("val", "shirt"): {"R@10": 0.6, "R@50": 0.8},
    }
    report = rt.aggregate(per_group, kind="fashion")
    assert report.fashion_avg == pytest.approx((0.3 + 0.7) / 2, abs=1e-12)


def test_fashion_requires_categories():
    with pytest.raises(MissingCategory):
        rt.aggregate({("val", ""): {"R@10": 1.0, "R@50": 1.0}}, kind="fashion")


def test_aggregate_empty_rejected():
    with pytest.raises(EmptyEvaluation):
        rt.aggregate({}, kind="cirr")


def test_report_records_are_flat_and_sorted():
    per_group = {("val", ""): {"R@1": 0.5, "R@5": 0.8, "Rsubset@1": 0.7}}
    rows = rt.aggregate(per_group, kind="cirr").to_records()
    assert {"split", "category", "metric", "value"} == set(rows[0])
    assert rows[-1]["metric"] == "cirr_avg"
