"""Training-time summary generation and verification.

A modification text names the entities it changes; the summarizer condenses
it into one sentence covering exactly those entities, and the consistency
detector verifies coverage (nothing missing, nothing extraneous). The loop
`refine_until_consistent` retries a provider until its summary passes.

Entity extraction is a deterministic lexical rule: lowercase, split on
non-alphanumerics, drop stopwords and modification verbs, then apply a
crude suffix stemmer. The stemmer iterates to a fixpoint so extraction is
idempotent over its own output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Protocol

from .errors import ProviderFailure, RefinementExhausted

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def load_word_list(path) -> frozenset[str]:
    """Read a one-token-per-line UTF-8 list; '#' starts a comment."""
    words = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            token = line.split("#", 1)[0].strip().lower()
            if token:
                words.add(token)
    return frozenset(words)


def _load_packaged(name: str) -> frozenset[str]:
    ref = resources.files(__package__).joinpath(f"data/{name}")
    words = set()
    for line in ref.read_text(encoding="utf-8").splitlines():
        token = line.split("#", 1)[0].strip().lower()
        if token:
            words.add(token)
    return frozenset(words)


STOPWORDS = _load_packaged("stopwords.txt")
CHANGE_VERBS = _load_packaged("change_verbs.txt")

_MIN_STEM = 3
_MIN_AFTER_E = 4


def stem(token: str) -> str:
    """Strip plural/verbal suffixes (ing, ed, s) and a trailing 'e'.

    One pass strips at most one consonant suffix and then a trailing 'e';
    passes repeat until nothing changes, which makes the map idempotent.
    A final 'e' is only stripped when at least 4 characters remain, and a
    final 's' is kept after 'ss'.
    """
    while True:
        t = token
        if t.endswith("ing") and len(t) - 3 >= _MIN_STEM:
            t = t[:-3]
        elif t.endswith("ed") and len(t) - 2 >= _MIN_STEM:
            t = t[:-2]
        elif t.endswith("s") and not t.endswith("ss") and len(t) - 1 >= _MIN_STEM:
            t = t[:-1]
        if t.endswith("e") and len(t) - 1 >= _MIN_AFTER_E:
            t = t[:-1]
        if t == token:
            return t
        token = t


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def content_tokens(text: str) -> list[str]:
    """Stemmed non-stopword tokens, in order, duplicates kept."""
    return [stem(t) for t in tokenize(text) if t not in STOPWORDS]


_CHANGE_VERB_STEMS = frozenset(stem(v) for v in CHANGE_VERBS)


def _is_entity(token: str) -> bool:
    return (
        token not in STOPWORDS
        and token not in CHANGE_VERBS
        and stem(token) not in _CHANGE_VERB_STEMS
    )


def entities_in_order(text: str) -> list[str]:
    """Entity stems in first-occurrence order, deduplicated."""
    seen: list[str] = []
    for token in tokenize(text):
        if not _is_entity(token):
            continue
        s = stem(token)
        if len(s) < _MIN_STEM or s in STOPWORDS or s in _CHANGE_VERB_STEMS:
            continue
        if s not in seen:
            seen.append(s)
    return seen


@dataclass(frozen=True)
class EntitySet:
    """Lowercased entity stems extracted from a text."""

    stems: frozenset[str]

    def __len__(self):
        return len(self.stems)

    def __contains__(self, item):
        return item in self.stems

    def __sub__(self, other: "EntitySet") -> frozenset[str]:
        return self.stems - other.stems


def extract_entities(text: str) -> EntitySet:
    return EntitySet(stems=frozenset(entities_in_order(text)))


class ConsistencyStatus(Enum):
    PASS = "pass"
    MISSING = "missing"
    EXTRANEOUS = "extraneous"
    BOTH = "both"


@dataclass(frozen=True)
class ConsistencyVerdict:
    status: ConsistencyStatus
    missing: frozenset[str]
    extraneous: frozenset[str]

    @property
    def ok(self) -> bool:
        return self.status is ConsistencyStatus.PASS


def check_consistency(mmt: str, summary: str) -> ConsistencyVerdict:
    """Compare entity coverage of a summary against its source text."""
    wanted = extract_entities(mmt)
    got = extract_entities(summary)
    missing = wanted - got
    extraneous = got - wanted
    if missing and extraneous:
        status = ConsistencyStatus.BOTH
    elif missing:
        status = ConsistencyStatus.MISSING
    elif extraneous:
        status = ConsistencyStatus.EXTRANEOUS
    else:
        status = ConsistencyStatus.PASS
    return ConsistencyVerdict(status=status, missing=missing, extraneous=extraneous)


class SummaryProvider(Protocol):
    def summarize(self, mmt: str) -> str: ...

    def refine(self, mmt: str, previous: str, verdict: ConsistencyVerdict) -> str: ...


class ReferenceSummarizer:
    """Deterministic summarizer: lists the extracted entities verbatim.

    Its output passes the consistency check against any input by
    construction, since both sides run the same extraction rule.
    """

    def summarize(self, mmt: str) -> str:
        entities = entities_in_order(mmt)
        if not entities:
            raise ProviderFailure(f"no entities found in text: {mmt!r}")
        return "Modify the " + ", ".join(entities) + "."

    def refine(self, mmt: str, previous: str, verdict: ConsistencyVerdict) -> str:
        return self.summarize(mmt)


class FixtureSummarizer:
    """Replays scripted summaries; for tests and dataset-supplied summaries.

    `script` maps an mmt to either a single summary (returned every
    attempt) or a list of summaries consumed one per attempt, the last one
    repeating once exhausted.
    """

    def __init__(self, script):
        self._script = dict(script)
        self._cursor: dict[str, int] = {}
        self.calls = 0

    def _next(self, mmt: str) -> str:
        entry = self._script[mmt]
        self.calls += 1
        if isinstance(entry, str):
            return entry
        i = self._cursor.get(mmt, 0)
        self._cursor[mmt] = i + 1
        return entry[min(i, len(entry) - 1)]

    def summarize(self, mmt: str) -> str:
        return self._next(mmt)

    def refine(self, mmt: str, previous: str, verdict: ConsistencyVerdict) -> str:
        return self._next(mmt)


def summarize(mmt: str, provider: SummaryProvider) -> str:
    if not mmt.strip():
        raise ProviderFailure("cannot summarize an empty text")
    return provider.summarize(mmt)


def refine_until_consistent(mmt: str, provider: SummaryProvider, max_iters: int = 3) -> str:
    """Return the first provider summary that passes the consistency check.

    The rejecting verdict is handed back to `provider.refine` on every
    retry. After `max_iters` total provider calls, raises
    RefinementExhausted carrying the last summary and verdict.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    summary = summarize(mmt, provider)
    verdict = check_consistency(mmt, summary)
    attempts = 1
    while not verdict.ok and attempts < max_iters:
        summary = provider.refine(mmt, summary, verdict)
        verdict = check_consistency(mmt, summary)
        attempts += 1
    if not verdict.ok:
        raise RefinementExhausted(
            f"summary still inconsistent after {max_iters} attempts",
            summary=summary,
            verdict=verdict,
        )
    return summary
