"""Triplet dataset loading, validation, statistics, and synthetic generation.

A dataset is UTF-8 JSON lines, one object per line, with the fields of
`TripletRecord`. Images exist only as ids; a planted synthetic encoder
gives the ids meaning at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import parsing
from .errors import EmptyDataset, ParseError, SchemaError

SPLITS = ("train", "val")


@dataclass
class TripletRecord:
    id: str
    reference: str
    target: str
    mmt: str
    summary: str | None = None
    category: str | None = None
    subset_members: list[str] | None = None
    split: str = "train"

    def to_json(self) -> str:
        data = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(data, ensure_ascii=False, sort_keys=True)


_REQUIRED = ("id", "reference", "target", "mmt")


def _record_from_object(obj, line_number: int) -> TripletRecord:
    if not isinstance(obj, dict):
        raise SchemaError(line_number, "<root>", "expected a JSON object")
    for name in _REQUIRED:
        if name not in obj:
            raise SchemaError(line_number, name, "missing required field")
        if not isinstance(obj[name], str) or not obj[name]:
            raise SchemaError(line_number, name, "must be a non-empty string")
    subset = obj.get("subset_members")
    if subset is not None:
        if not isinstance(subset, list) or not all(isinstance(s, str) for s in subset):
            raise SchemaError(line_number, "subset_members", "must be a list of ids")
        if obj["target"] not in subset:
            raise SchemaError(line_number, "subset_members", "must contain the target")
    split = obj.get("split", "train")
    if split not in SPLITS:
        raise SchemaError(line_number, "split", f"must be one of {SPLITS}")
    summary = obj.get("summary")
    if summary is not None and not isinstance(summary, str):
        raise SchemaError(line_number, "summary", "must be a string")
    category = obj.get("category")
    if category is not None and not isinstance(category, str):
        raise SchemaError(line_number, "category", "must be a string")
    return TripletRecord(
        id=obj["id"],
        reference=obj["reference"],
        target=obj["target"],
        mmt=obj["mmt"],
        summary=summary,
        category=category,
        subset_members=list(subset) if subset is not None else None,
        split=split,
    )


def load_jsonl(path) -> list[TripletRecord]:
    """Parse one record per line; unknown fields are ignored."""
    records: list[TripletRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_number, str(exc)) from exc
            record = _record_from_object(obj, line_number)
            if record.id in seen:
                raise SchemaError(line_number, "id", f"duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def save_jsonl(path, records: Iterable[TripletRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json())
            fh.write("\n")


def validate(records) -> list[str]:
    """Invariant and cross-reference checks; returns violation messages."""
    violations: list[str] = []
    seen: set[str] = set()
    target_ids = {r.target for r in records}
    for r in records:
        where = f"record {r.id!r}"
        if r.id in seen:
            violations.append(f"{where}: duplicate id")
        seen.add(r.id)
        if not r.mmt.strip():
            violations.append(f"{where}: empty mmt")
        if r.split not in SPLITS:
            violations.append(f"{where}: bad split {r.split!r}")
        if r.subset_members is not None:
            if r.target not in r.subset_members:
                violations.append(f"{where}: subset does not contain the target")
            for member in r.subset_members:
                if member not in target_ids:
                    violations.append(
                        f"{where}: subset member {member!r} is not a known target"
                    )
    return violations


@dataclass(frozen=True)
class SplitStats:
    minimal: int
    maximal: int
    average: float


@dataclass(frozen=True)
class LengthStats:
    """Whitespace-token length statistics of the modification texts."""

    per_split: dict[str, SplitStats]


def dataset_stats(records) -> LengthStats:
    if not records:
        raise EmptyDataset("no records to summarize")
    per_split: dict[str, SplitStats] = {}
    for split in SPLITS:
        counts = [len(r.mmt.split()) for r in records if r.split == split]
        if not counts:
            continue
        per_split[split] = SplitStats(
            minimal=min(counts),
            maximal=max(counts),
            average=sum(counts) / len(counts),
        )
    return LengthStats(per_split=per_split)


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------

ENTITY_VOCAB = (
    "collar", "hem", "belt", "pocket", "button", "skirt", "strap", "cuff",
    "zipper", "lapel", "hood", "waistband", "ribbon", "trim", "panel",
    "seam", "logo", "print", "fabric", "neckline", "sleeve", "bodice",
    "fringe", "buckle",
)

ADJECTIVES = ("longer", "shorter", "wider", "narrower", "darker", "lighter")

_CLAUSE_TEMPLATES = (
    "change the {e}",
    "remove the {e}",
    "replace the {e}",
    "alter the {e}",
    "make the {e} {adj}",
    "turn the {e} into something {adj}",
)

FASHION_CATEGORIES = ("dress", "shirt", "toptee")


@dataclass(frozen=True)
class SyntheticConfig:
    kind: str = "cirr"  # "cirr": subsets, no categories; "fashion": categories
    min_clauses: int = 3
    max_clauses: int = 5
    subset_size: int = 6
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("cirr", "fashion"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.min_clauses < 3:
            raise ValueError("need at least 3 clauses per text")
        if self.max_clauses < self.min_clauses:
            raise ValueError("max_clauses < min_clauses")


def generate_synthetic(n: int, seed: int, config: SyntheticConfig | None = None):
    """Deterministic planted triplets with multi-clause texts and summaries.

    Each text draws its entities without replacement, so the consistency
    detector passes the generated summary against it by construction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    summarizer = parsing.ReferenceSummarizer()
    records: list[TripletRecord] = []
    n_val = int(round(n * cfg.val_fraction))
    for i in range(n):
        n_clauses = int(rng.integers(cfg.min_clauses, cfg.max_clauses + 1))
        entities = list(
            rng.choice(ENTITY_VOCAB, size=n_clauses, replace=False)
        )
        clauses = []
        for j, entity in enumerate(entities):
            template = _CLAUSE_TEMPLATES[int(rng.integers(len(_CLAUSE_TEMPLATES)))]
            clauses.append(
                template.format(e=entity, adj=ADJECTIVES[int(rng.integers(len(ADJECTIVES)))])
            )
            # occasionally constrain the same entity twice, so one entity
            # owns several clauses
            if j == 0 and rng.random() < 0.5:
                clauses.append(f"make the {entity} {ADJECTIVES[int(rng.integers(len(ADJECTIVES)))]}")
        mmt = "; ".join(clauses) + "."
        record = TripletRecord(
            id=f"q{i:04d}",
            reference=f"ref{i:04d}",
            target=f"tgt{i:04d}",
            mmt=mmt,
            summary=summarizer.summarize(mmt),
            split="val" if i >= n - n_val else "train",
        )
        records.append(record)
    if cfg.kind == "fashion":
        for i, record in enumerate(records):
            record.category = FASHION_CATEGORIES[i % len(FASHION_CATEGORIES)]
    else:
        all_targets = [r.target for r in records]
        for i, record in enumerate(records):
            others = [t for t in all_targets if t != record.target]
            k = min(cfg.subset_size - 1, len(others))
            picks = list(rng.choice(others, size=k, replace=False)) if k else []
            record.subset_members = sorted([record.target] + picks)
    return records


def planted_pairs(records) -> dict[str, tuple[str, str]]:
    """Map each target id to its (reference id, text) for the planted encoder."""
    return {r.target: (r.reference, r.mmt) for r in records}
