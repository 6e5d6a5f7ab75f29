"""Candidate indexing, ranking, and recall metrics.

Ranking is cosine scoring over unit-norm candidate rows, descending, with
ties broken by ascending id so results are canonical regardless of
insertion order. Recall@K counts queries whose target appears in the top
K; subset recall ranks only within a query's curated candidate subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, Node, as_matrix
from .errors import (
    DuplicateId,
    EmptyAfterExclusion,
    EmptyEvaluation,
    EmptyInput,
    MissingCategory,
    SubsetMissingTarget,
    ZeroVector,
)


@dataclass
class RetrievalIndex:
    ids: list[str]
    vectors: Array  # M x D, unit-norm rows, row i belongs to ids[i]

    @property
    def size(self) -> int:
        return len(self.ids)


def build_index(embeddings) -> RetrievalIndex:
    """Normalize and order candidates by ascending id.

    Accepts a mapping id -> vector or an iterable of (id, vector) pairs;
    duplicate ids and zero vectors are rejected.
    """
    pairs = list(embeddings.items()) if hasattr(embeddings, "items") else list(embeddings)
    if not pairs:
        raise EmptyInput("no candidates to index")
    seen: set[str] = set()
    for cid, _ in pairs:
        if cid in seen:
            raise DuplicateId(f"candidate id {cid!r} appears twice")
        seen.add(cid)
    pairs.sort(key=lambda p: p[0])
    rows = []
    for cid, vec in pairs:
        row = as_matrix(vec).reshape(-1)
        norm = np.linalg.norm(row)
        if norm == 0.0:
            raise ZeroVector(f"candidate {cid!r} has a zero vector")
        rows.append(row / norm)
    return RetrievalIndex(ids=[cid for cid, _ in pairs], vectors=np.vstack(rows))


def _query_row(query) -> Array:
    vec = query.value if isinstance(query, Node) else query
    row = as_matrix(vec).reshape(-1)
    norm = np.linalg.norm(row)
    if norm == 0.0:
        raise ZeroVector("query vector is zero")
    return row / norm


def rank_candidates(query, index: RetrievalIndex, exclude=frozenset()) -> list[str]:
    """All candidate ids, best first; ties by ascending id; `exclude` removed."""
    q = _query_row(query)
    scores = index.vectors @ q
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.ids[i]))
    ranked = [index.ids[i] for i in order if index.ids[i] not in exclude]
    if not ranked:
        raise EmptyAfterExclusion("every candidate was excluded")
    return ranked


def recall_at_k(rankings: list[list[str]], targets: list[str], k: int) -> float:
    """Fraction of queries whose target appears in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(targets):
        raise EmptyEvaluation(f"{len(rankings)} rankings vs {len(targets)} targets")
    if not rankings:
        raise EmptyEvaluation("no queries")
    hits = sum(1 for ranking, t in zip(rankings, targets) if t in ranking[:k])
    return hits / len(rankings)


def subset_rank(ranking: list[str], subset_members, target: str) -> int:
    """1-based rank of the target within the ranking restricted to its subset."""
    members = set(subset_members)
    if target not in members:
        raise SubsetMissingTarget(f"target {target!r} not in its subset")
    restricted = [cid for cid in ranking if cid in members]
    try:
        return restricted.index(target) + 1
    except ValueError:
        return len(restricted) + 1  # target missing from the index: a miss


def subset_recall_at_k(rankings, targets, subsets, k: int) -> float:
    if not rankings:
        raise EmptyEvaluation("no queries")
    hits = 0
    for ranking, target, subset in zip(rankings, targets, subsets):
        if subset_rank(ranking, subset, target) <= k:
            hits += 1
    return hits / len(rankings)


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

FASHION_KS = (10, 50)
CIRR_KS = (1, 5, 10)
CIRR_SUBSET_KS = (1, 2)


@dataclass
class MetricsReport:
    """Per (split, category) recalls plus protocol-defined averages.

    `recalls` maps (split, category) to {metric name: value}; category is
    "" when the dataset has no categories. For the fashion protocol,
    `fashion_avg` is the mean over categories of each category's mean of
    R@10 and R@50; for the open-domain protocol, `cirr_avg` is
    (R@5 + Rsubset@1) / 2.
    """

    kind: str
    recalls: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    fashion_avg: float | None = None
    cirr_avg: float | None = None

    def to_records(self) -> list[dict]:
        rows = []
        for (split, category), metrics in sorted(self.recalls.items()):
            for metric, value in sorted(metrics.items()):
                rows.append(
                    {"split": split, "category": category, "metric": metric,
                     "value": value}
                )
        if self.fashion_avg is not None:
            rows.append({"split": "", "category": "", "metric": "fashion_avg",
                         "value": self.fashion_avg})
        if self.cirr_avg is not None:
            rows.append({"split": "", "category": "", "metric": "cirr_avg",
                         "value": self.cirr_avg})
        return rows


def aggregate(per_group: dict[tuple[str, str], dict[str, float]], kind: str) -> MetricsReport:
    """Fold per-(split, category) recall maps into a report with averages."""
    if not per_group:
        raise EmptyEvaluation("nothing to aggregate")
    if kind not in ("fashion", "cirr"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    report = MetricsReport(kind=kind, recalls=dict(per_group))
    if kind == "fashion":
        category_means = []
        for (split, category), metrics in per_group.items():
            if not category:
                raise MissingCategory(f"split {split!r} has uncategorized queries")
            if "R@10" in metrics and "R@50" in metrics:
                category_means.append((metrics["R@10"] + metrics["R@50"]) / 2.0)
        if category_means:
            report.fashion_avg = float(np.mean(category_means))
    else:
        groups = list(per_group.values())
        if all("R@5" in m and "Rsubset@1" in m for m in groups):
            r5 = float(np.mean([m["R@5"] for m in groups]))
            rs1 = float(np.mean([m["Rsubset@1"] for m in groups]))
            report.cirr_avg = (r5 + rs1) / 2.0
    return report


# --------------------------------------------------------------------------
# model evaluation harness
# --------------------------------------------------------------------------


def detect_kind(records) -> str:
    return "fashion" if any(r.category for r in records) else "cirr"


def _candidate_pool(records, kind: str):
    """Ids whose images form the candidate index.

    Open-domain protocol indexes targets and references together (each
    query's own reference can be excluded at ranking time); the fashion
    protocol restricts candidates to the query's category, and references
    carry no category, so only targets are indexed.
    """
    if kind == "fashion":
        pools: dict[str, set[str]] = {}
        for r in records:
            pools.setdefault(r.category or "", set()).add(r.target)
        return pools
    pool = {r.target for r in records} | {r.reference for r in records}
    return {"": pool}


def evaluate_model(
    records,
    model,
    encoder,
    kind: str | None = None,
    exclude_reference: bool = True,
    ks=None,
    subset_ks=CIRR_SUBSET_KS,
) -> MetricsReport:
    """Rank every query against its candidate pool and aggregate recalls.

    Queries run through the inference path: no summaries are constructed,
    the text's own global feature stands in as the textual context token.
    """
    if not records:
        raise EmptyEvaluation("no records to evaluate")
    kind = kind or detect_kind(records)
    if ks is None:
        ks = FASHION_KS if kind == "fashion" else CIRR_KS
    pools = _candidate_pool(records, kind)
    indexes = {
        key: build_index(
            {cid: target_vector(encoder.encode_image(cid)) for cid in pool}
        )
        for key, pool in pools.items()
    }
    per_group: dict[tuple[str, str], dict[str, float]] = {}
    groups: dict[tuple[str, str], list] = {}
    for r in records:
        category = (r.category or "") if kind == "fashion" else ""
        groups.setdefault((r.split, category), []).append(r)
    for (split, category), members in sorted(groups.items()):
        if kind == "fashion" and not category:
            raise MissingCategory(f"record {members[0].id!r} has no category")
        index = indexes[category if kind == "fashion" else ""]
        rankings, targets, subsets = [], [], []
        for r in members:
            fwd = model.forward_query(
                encoder.encode_image(r.reference), encoder.encode_text(r.mmt)
            )
            exclude = {r.reference} if exclude_reference else frozenset()
            rankings.append(rank_candidates(fwd.composed, index, exclude))
            targets.append(r.target)
            subsets.append(r.subset_members)
        metrics = {f"R@{k}": recall_at_k(rankings, targets, k) for k in ks}
        if kind == "cirr" and all(s is not None for s in subsets):
            for k in subset_ks:
                metrics[f"Rsubset@{k}"] = subset_recall_at_k(
                    rankings, targets, subsets, k
                )
        per_group[(split, category)] = metrics
    return aggregate(per_group, kind)


def target_vector(bundle) -> Array:
    """Unit-norm pooled target representation used for indexing."""
    norm = np.linalg.norm(bundle.global_vec)
    if norm == 0.0:
        raise ZeroVector("target global vector is zero")
    return (bundle.global_vec / norm).reshape(-1)
