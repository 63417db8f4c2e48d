"""Surrogate confounder vocabularies: roles, actions and objects with priors.

Phrases come from (subject, verb, object) tuples, either produced by the
rule-based :func:`extract_svo` or imported from an external JSON Lines file.
Each set's prior is ``p(z) = #z / sum_i #i``.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .datamodel import tokenize

SETS = ("role", "action", "object")

ARTICLES = frozenset({"a", "an", "the"})
AUXILIARIES = frozenset({"is", "are", "was", "were", "be", "been", "being", "to"})
# Catenative/light verbs and adverbs that precede the content verb
# ("are shown throwing", "starts holding", "then opens").
VERB_SKIP = frozenset({
    "shown", "seen", "seems", "seem", "appears", "appear", "starts", "start",
    "begins", "begin", "continues", "continue", "keeps", "keep", "then",
    "also", "again", "just", "still", "now", "quickly", "slowly", "can",
    "will", "does", "do", "did", "has", "have", "had",
})
PREPOSITIONS = frozenset({
    "into", "onto", "with", "in", "on", "at", "to", "from", "of", "for", "by",
    "off", "up", "down", "out", "over", "under", "through", "around", "near",
    "inside", "behind", "across", "toward", "towards",
})
CONJUNCTIONS = frozenset({"and", "or", "but", "while", "as", "then", "so"})
_NOT_NOUN = ARTICLES | AUXILIARIES | PREPOSITIONS | CONJUNCTIONS | frozenset(
    {"his", "her", "their", "its", "my", "your", "our", "some", "this", "that"}
)


@dataclass(frozen=True)
class SVOTuple:
    subject: str = ""
    verb: str = ""
    object: str = ""

    def __post_init__(self):
        for name in ("subject", "verb", "object"):
            object.__setattr__(self, name, getattr(self, name).strip().lower())

    def phrase(self, set_id: str) -> str:
        return {"role": self.subject, "action": self.verb, "object": self.object}[set_id]


def _noun_phrase_head(tokens: list[str], start: int) -> tuple[str, int]:
    """Head (last token) of the noun run beginning at ``start``, skipping determiners."""
    i = start
    while i < len(tokens) and tokens[i] in ARTICLES | {"his", "her", "their", "its",
                                                        "some", "this", "that"}:
        i += 1
    j = i
    while j < len(tokens) and tokens[j] not in _NOT_NOUN:
        j += 1
    if j == i:
        return "", i
    return tokens[j - 1], j


def extract_svo(caption: str) -> SVOTuple:
    """Heuristic verb-centred (subject, verb, object) extraction.

    >>> extract_svo("a person fixes a vacuum")
    SVOTuple(subject='person', verb='fixes', object='vacuum')
    """
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    tokens = tokenize(caption)
    pos = 0
    while pos < len(tokens) and tokens[pos] in ARTICLES:
        pos += 1
    content = [t for t in tokens[pos:] if t not in _NOT_NOUN]
    if not content:
        return SVOTuple()

    subject = ""
    first = tokens[pos]
    gerund_first = first.endswith("ing") and first not in _NOT_NOUN
    if len(content) > 1 and not gerund_first:
        subject = first
        pos += 1

    verb = ""
    while pos < len(tokens):
        tok = tokens[pos]
        pos += 1
        if tok in AUXILIARIES or tok in VERB_SKIP or tok in ARTICLES:
            continue
        verb = tok
        break

    obj = ""
    if verb and pos < len(tokens):
        obj, _ = _noun_phrase_head(tokens, pos)
        if not obj and tokens[pos] in PREPOSITIONS:
            # no direct object: fall back to the prepositional object
            obj, _ = _noun_phrase_head(tokens, pos + 1)
    return SVOTuple(subject, verb, obj)


def _priors(counts: Mapping[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    return {z: c / total for z, c in counts.items()}


@dataclass(frozen=True)
class ConfounderVocab:
    """Three phrase -> count maps; phrases are kept in sorted order."""

    role: Mapping[str, int]
    action: Mapping[str, int]
    object: Mapping[str, int]

    def __post_init__(self):
        for name in SETS:
            counts = dict(sorted(getattr(self, name).items()))
            if any(c < 1 for c in counts.values()) or "" in counts:
                raise ValueError(f"{name} set has empty phrases or non-positive counts")
            object.__setattr__(self, name, counts)
        object.__setattr__(self, "_priors", {s: _priors(getattr(self, s)) for s in SETS})

    def counts(self, set_id: str) -> dict[str, int]:
        if set_id not in SETS:
            raise KeyError(f"unknown set {set_id!r}; expected one of {SETS}")
        return dict(getattr(self, set_id))

    def phrases(self, set_id: str) -> list[str]:
        return list(self.counts(set_id))

    def priors(self, set_id: str) -> dict[str, float]:
        self.counts(set_id)
        return dict(self._priors[set_id])

    def to_json(self) -> str:
        payload = {
            s: [{"phrase": z, "count": c, "prior": self._priors[s][z]}
                for z, c in getattr(self, s).items()]
            for s in SETS
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConfounderVocab":
        payload = json.loads(text)
        return cls(**{s: {e["phrase"]: int(e["count"]) for e in payload.get(s, [])}
                      for s in SETS})

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ConfounderVocab":
        return cls.from_json(Path(path).read_text())


def vocab_from_tuples(tuples: Iterable[SVOTuple]) -> ConfounderVocab:
    counters = {s: Counter() for s in SETS}
    for svo in tuples:
        for s in SETS:
            phrase = svo.phrase(s)
            if phrase:
                counters[s][phrase] += 1
    return ConfounderVocab(**counters)


def build_vocab(captions: list[str]) -> ConfounderVocab:
    if not captions:
        raise ValueError("need at least one caption")
    return vocab_from_tuples(extract_svo(c) for c in captions)


def load_svo_jsonl(path: str | os.PathLike) -> list[SVOTuple]:
    """Read externally extracted tuples: one ``{subject, verb, object}`` per line."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(SVOTuple(rec.get("subject", ""), rec.get("verb", ""),
                                rec.get("object", "")))
    return out


def prior(vocab: ConfounderVocab, set_id: str, phrase: str) -> float:
    table = vocab.priors(set_id)
    if phrase not in table:
        raise KeyError(f"{phrase!r} not in {set_id} vocabulary")
    return table[phrase]
