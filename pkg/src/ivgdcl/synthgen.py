"""Synthetic grounding data with a planted action/object co-occurrence bias.

Every video holds one gold moment and, when the spec has another pair sharing
the gold object, one non-overlapping distractor moment showing that
confusable pair.  A model that keys on the object word and the training
co-occurrence prior picks the distractor on the anti-correlated test split.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from collections import Counter

import numpy as np

from .datamodel import (
    DatasetManifest,
    GroundingExample,
    QueryTokens,
    TimeInterval,
    VideoFeatureSequence,
    tokenize,
)

Pair = tuple[str, str]
BACKGROUND = "<background>"


class ConfigurationError(ValueError):
    pass


def _pair_key(s: str) -> Pair:
    action, sep, obj = s.partition("|")
    if not sep:
        raise ConfigurationError(f"count key {s!r} must look like 'action|object'")
    return action, obj


@dataclass(frozen=True)
class BiasSpec:
    actions: tuple[str, ...]
    objects: tuple[str, ...]
    roles: tuple[str, ...]
    cooccurrence_counts: dict[Pair, int]
    test_counts: dict[Pair, int]
    t: int = 32
    d_v: int = 32
    noise_sigma: float = 0.3
    seed: int = 0
    duration_range: tuple[float, float] = (20.0, 60.0)
    min_frac: float = 0.1
    max_frac: float = 0.4

    def __post_init__(self):
        for name in ("actions", "objects", "roles"):
            words = tuple(getattr(self, name))
            if not words or len(set(words)) != len(words):
                raise ConfigurationError(f"{name} must be a non-empty list of distinct words")
            if any(len(tokenize(w)) != 1 for w in words):
                raise ConfigurationError(f"{name} entries must be single tokens")
            object.__setattr__(self, name, words)
        for name in ("cooccurrence_counts", "test_counts"):
            counts = {tuple(k): int(v) for k, v in getattr(self, name).items()}
            for (a, o), c in counts.items():
                if a not in self.actions or o not in self.objects:
                    raise ConfigurationError(f"{name}: unknown pair ({a}, {o})")
                if c < 0:
                    raise ConfigurationError(f"{name}: negative count for ({a}, {o})")
            if not any(c > 0 for c in counts.values()):
                raise ConfigurationError(f"{name} needs at least one positive count")
            object.__setattr__(self, name, counts)
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.t < 2 or self.d_v < 1:
            raise ConfigurationError("need t >= 2 and d_v >= 1")
        lo, hi = self.moment_length_range
        if hi < lo:
            raise ConfigurationError(
                f"t={self.t} cannot host a moment of {self.min_frac:.0%}-{self.max_frac:.0%} "
                f"of its length")

    @property
    def moment_length_range(self) -> tuple[int, int]:
        return max(1, math.ceil(self.min_frac * self.t)), math.floor(self.max_frac * self.t)

    @property
    def pairs(self) -> list[Pair]:
        return sorted(set(self.cooccurrence_counts) | set(self.test_counts))

    @classmethod
    def from_dict(cls, d: dict) -> "BiasSpec":
        d = dict(d)
        for key in ("cooccurrence_counts", "test_counts"):
            d[key] = {_pair_key(k): v for k, v in d.get(key, {}).items()}
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BiasSpec":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}")
        return cls.from_dict(payload)


def concept_signatures(spec: BiasSpec) -> dict[str, np.ndarray]:
    """Unit-norm random vector per word (plus a background vector), fixed by seed."""
    rng = np.random.default_rng([spec.seed, 0x5167])
    words = [*spec.roles, *spec.actions, *spec.objects, BACKGROUND]
    raw = rng.standard_normal((len(words), spec.d_v))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return {w: raw[i] for i, w in enumerate(words)}


def query_text(role: str, action: str, obj: str) -> str:
    return f"{role} {action} a {obj}"


def _distractor(pair: Pair, pairs: list[Pair], rng: np.random.Generator) -> Pair | None:
    same_object = [p for p in pairs if p[1] == pair[1] and p != pair]
    if same_object:
        return same_object[rng.integers(len(same_object))]
    others = [p for p in pairs if p != pair]
    return others[rng.integers(len(others))] if others else None


def _make_example(spec, sigs, pairs, pair, split, index, seed_key):
    rng = np.random.default_rng([spec.seed, seed_key, index])
    t = spec.t
    lo, hi = spec.moment_length_range
    role = spec.roles[rng.integers(len(spec.roles))]
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, t - length + 1))
    end = start + length - 1

    feats = np.tile(sigs[BACKGROUND], (t, 1))
    feats[start:end + 1] = sigs[role] + sigs[pair[0]] + sigs[pair[1]]

    other = _distractor(pair, pairs, rng)
    if other is not None:
        # place a same-length-range distractor in the longest free gap, if it fits
        gaps = [(0, start), (end + 1, t)]
        g0, g1 = max(gaps, key=lambda g: g[1] - g[0])
        room = g1 - g0
        if room >= lo:
            d_len = int(rng.integers(lo, min(hi, room) + 1))
            d_start = g0 + int(rng.integers(0, room - d_len + 1))
            d_role = spec.roles[rng.integers(len(spec.roles))]
            feats[d_start:d_start + d_len] = sigs[d_role] + sigs[other[0]] + sigs[other[1]]

    if spec.noise_sigma > 0:
        feats = feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)

    duration = float(rng.uniform(*spec.duration_range))
    gold = TimeInterval(duration * start / t, duration * end / t, duration)
    return GroundingExample(
        id=f"{split}-{index:06d}",
        video=VideoFeatureSequence(feats.astype(np.float32)),
        query=QueryTokens(query_text(role, *pair)),
        gold_time=gold,
    )


def _generate_split(spec, sigs, counts, split, seed_key):
    pairs = spec.pairs
    plan = [pair for pair in sorted(counts) for _ in range(counts[pair])]
    examples = [
        _make_example(spec, sigs, pairs, pair, split, i, seed_key)
        for i, pair in enumerate(plan)
    ]
    # shuffle so pair blocks do not line up with ids
    order = np.random.default_rng([spec.seed, seed_key, 0xA11]).permutation(len(examples))
    return DatasetManifest(split, spec.t, spec.d_v, tuple(examples[i] for i in order))


def generate_dataset(spec: BiasSpec) -> tuple[DatasetManifest, DatasetManifest]:
    sigs = concept_signatures(spec)
    train = _generate_split(spec, sigs, spec.cooccurrence_counts, "train", 1)
    test = _generate_split(spec, sigs, spec.test_counts, "test", 2)
    return train, test


def parse_query(text: str) -> Pair | None:
    """Inverse of :func:`query_text`; ``None`` for non-template queries."""
    toks = tokenize(text)
    if len(toks) == 4 and toks[2] == "a":
        return toks[1], toks[3]
    return None


def bias_report(manifest: DatasetManifest) -> dict[Pair | str, int]:
    counts: Counter = Counter()
    for ex in manifest:
        counts[parse_query(ex.query.raw_text) or "other"] += 1
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0]))))


def format_bias_report(report: dict) -> str:
    rows = [("action", "object", "count")]
    for key, n in report.items():
        a, o = key if isinstance(key, tuple) else (key, "")
        rows.append((a, o, str(n)))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
