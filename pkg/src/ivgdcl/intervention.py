"""Backdoor-adjusted span head.

Confounder phrases are embedded and projected, ``z = g(embed(z))``.  Under the
normalized weighted geometric mean approximation the adjusted prediction is
the softmax head applied to ``sum_z p(z) (X + z)``; averaging the three
vocabulary sets gives ``X + z_bar`` with ``z_bar`` the mean of the per-set
prior-weighted vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import BoundaryIndices
from .encoder import uniform_init_
from .vocab import SETS, ConfounderVocab

EPS = 1e-12


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ConfounderEmbeddingTable(nn.Module):
    def __init__(self, vocab: ConfounderVocab, d: int, d_e: int | None = None):
        super().__init__()
        d_e = d if d_e is None else d_e
        self.sets = SETS
        self.embed = nn.ModuleDict()
        for s in SETS:
            phrases = vocab.phrases(s)
            if not phrases:
                raise ConfigurationError(f"confounder set {s!r} is empty")
            self.embed[s] = nn.Embedding(len(phrases), d_e)
            nn.init.normal_(self.embed[s].weight, 0.0, 1.0 / math.sqrt(d_e))
            priors = vocab.priors(s)
            self.register_buffer(f"prior_{s}",
                                 torch.tensor([priors[z] for z in phrases], dtype=torch.float32))
        self.g = nn.Linear(d_e, d, bias=False)
        with torch.no_grad():
            eye = torch.eye(d, d_e)
            self.g.weight.copy_(eye + 0.01 * torch.randn_like(eye))

    def prior(self, set_id: str) -> torch.Tensor:
        return getattr(self, f"prior_{set_id}")

    def vectors(self, set_id: str) -> torch.Tensor:
        """Projected confounder vectors g(embed(z)) for every phrase in a set, (|C|, d)."""
        return self.g(self.embed[set_id].weight)

    def set_means(self) -> dict[str, torch.Tensor]:
        return {s: self.prior(s).to(self.g.weight.dtype) @ self.vectors(s) for s in self.sets}

    def z_bar(self) -> torch.Tensor:
        means = self.set_means()
        return sum(means.values()) / len(means)


def deconfound(x: torch.Tensor, table: ConfounderEmbeddingTable | None) -> torch.Tensor:
    """Broadcast-add the prior-weighted confounder vector to every row of ``x``."""
    if table is None:
        return x
    z_bar = table.z_bar()
    if z_bar.shape[-1] != x.shape[-1]:
        raise ConfigurationError(f"confounder dim {z_bar.shape[-1]} != feature dim {x.shape[-1]}")
    return x + z_bar


class SpanHead(nn.Module):
    """Two position-wise layers over [x_i; mean_t x_t] -> one logit, for start and end."""

    def __init__(self, d: int):
        super().__init__()
        self.start = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))
        self.end = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))
        uniform_init_(self)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.cat([x, x.mean(dim=1, keepdim=True).expand_as(x)], dim=-1)
        return self.start(h).squeeze(-1), self.end(h).squeeze(-1)


@dataclass
class SpanDistribution:
    p_start: torch.Tensor  # (B, T)
    p_end: torch.Tensor


def _check_finite(logits: torch.Tensor, name: str) -> None:
    bad = ~torch.isfinite(logits)
    if bool(bad.any()):
        *row, pos = bad.nonzero()[0].tolist()
        where = f" (batch row {row[0]})" if row else ""
        raise NumericError(f"non-finite {name} logit at position {pos}{where}")


def span_distributions(x_adj: torch.Tensor, head: SpanHead) -> SpanDistribution:
    start, end = head(x_adj)
    _check_finite(start, "start")
    _check_finite(end, "end")
    return SpanDistribution(torch.softmax(start, -1), torch.softmax(end, -1))


def span_cross_entropy(dist: SpanDistribution, starts, ends) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-example -log p_start[i_start], -log p_end[i_end] with an epsilon clamp."""
    starts = torch.as_tensor(starts).reshape(-1, 1)
    ends = torch.as_tensor(ends).reshape(-1, 1)
    if int(starts.max()) >= dist.p_start.shape[-1] or int(ends.max()) >= dist.p_end.shape[-1]:
        raise IndexError("gold index beyond the distribution length")
    p_s = dist.p_start.gather(-1, starts).squeeze(-1)
    p_e = dist.p_end.gather(-1, ends).squeeze(-1)
    return -torch.log(p_s.clamp_min(EPS)), -torch.log(p_e.clamp_min(EPS))


def span_cross_entropy_from_logits(start_logits, end_logits, starts, ends):
    """Same losses computed through log-softmax, as used in training."""
    log_eps = math.log(EPS)
    ls = F.log_softmax(start_logits, -1).gather(-1, starts[:, None]).squeeze(-1)
    le = F.log_softmax(end_logits, -1).gather(-1, ends[:, None]).squeeze(-1)
    return -ls.clamp_min(log_eps), -le.clamp_min(log_eps)


def predict_span_batch(p_start: torch.Tensor, p_end: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """argmax over i <= j of p_start[i] * p_end[j]; ties go to the smaller i, then j."""
    t = p_start.shape[-1]
    joint = p_start[:, :, None] * p_end[:, None, :]
    joint = joint.masked_fill(~torch.ones(t, t, dtype=torch.bool).triu()[None], -1.0)
    flat = joint.reshape(joint.shape[0], -1).argmax(-1)  # first maximum in row-major order
    return flat // t, flat % t


def predict_span(dist: SpanDistribution | tuple) -> BoundaryIndices:
    p_s, p_e = (dist.p_start, dist.p_end) if isinstance(dist, SpanDistribution) else dist
    p_s = np.asarray(torch.as_tensor(p_s, dtype=torch.float64).reshape(-1))
    p_e = np.asarray(torch.as_tensor(p_e, dtype=torch.float64).reshape(-1))
    t = len(p_s)
    joint = np.where(np.triu(np.ones((t, t), dtype=bool)), np.outer(p_s, p_e), -1.0)
    i, j = divmod(int(np.argmax(joint)), t)
    return BoundaryIndices(i, j, t)
