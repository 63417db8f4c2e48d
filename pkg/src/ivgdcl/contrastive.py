"""Dual contrastive losses built on the Jensen-Shannon MI lower bound.

    I(a, V') = mean_{i in pos} -sp(-C(a, v'_i)) - mean_{i in neg} sp(C(a, v'_i))

with ``sp`` the softplus and ``C(a, b) = a^T W b`` a bilinear discriminator.
QV-CL anchors on the pooled query, VV-CL on the start and end rows of V'.
All functions take a leading batch axis and return per-example values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import BoundaryIndices


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastMask:
    """Boolean (B, T) masks.

    Every position is positive, negative, or explicitly ignored (the VV-CL
    anchor), and never more than one of these.
    """

    positive: torch.Tensor
    negative: torch.Tensor
    ignored: torch.Tensor | None = None

    def __post_init__(self):
        if self.positive.shape != self.negative.shape:
            raise MaskError("positive/negative masks differ in shape")
        ignored = self.ignored
        if ignored is None:
            ignored = torch.zeros_like(self.positive)
        if bool((self.positive & self.negative).any()) or bool(
                (ignored & (self.positive | self.negative)).any()):
            raise MaskError("a position belongs to more than one set")
        if not bool((self.positive | self.negative | ignored).all()):
            raise MaskError("masks do not cover every position")
        if not bool(self.positive.any(-1).all()):
            raise MaskError("empty positive set")
        if not bool(self.negative.any(-1).all()):
            raise MaskError("empty negative set")

    @classmethod
    def from_bool(cls, positive: torch.Tensor) -> "ContrastMask":
        positive = positive.bool()
        if positive.dim() == 1:
            positive = positive[None]
        return cls(positive, ~positive)


def moment_mask(starts: torch.Tensor, ends: torch.Tensor, t: int) -> torch.Tensor:
    """(B, T) bool, True inside the inclusive gold moment."""
    pos = torch.arange(t)[None]
    return (pos >= starts[:, None]) & (pos <= ends[:, None])


def qv_mask(gold: BoundaryIndices) -> ContrastMask:
    return ContrastMask.from_bool(
        moment_mask(torch.tensor([gold.i_start]), torch.tensor([gold.i_end]), gold.t))


class Discriminator(nn.Module):
    """Bilinear critic C(a, b) = a^T W b."""

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d, d))
        bound = 1.0 / math.sqrt(d)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, anchor: torch.Tensor, seq: torch.Tensor) -> torch.Tensor:
        # anchor (B, d), seq (B, T, d) -> scores (B, T)
        return torch.einsum("bi,ij,btj->bt", anchor, self.weight, seq)


def js_mi_from_scores(scores: torch.Tensor, mask: ContrastMask) -> torch.Tensor:
    pos = mask.positive.to(scores.dtype)
    neg = mask.negative.to(scores.dtype)
    e_pos = (-F.softplus(-scores) * pos).sum(-1) / pos.sum(-1)
    e_neg = (F.softplus(scores) * neg).sum(-1) / neg.sum(-1)
    return e_pos - e_neg


def js_mi_estimate(anchor: torch.Tensor, v_prime: torch.Tensor, mask: ContrastMask,
                   disc: Discriminator) -> torch.Tensor:
    """Per-example JS MI lower bound between ``anchor`` (B, d) and rows of ``v_prime``."""
    if anchor.dim() == 1:
        anchor, v_prime = anchor[None], v_prime[None]
    if v_prime.shape[:2] != mask.positive.shape:
        raise MaskError(f"mask shape {tuple(mask.positive.shape)} does not match "
                        f"features {tuple(v_prime.shape[:2])}")
    return js_mi_from_scores(disc(anchor, v_prime), mask)


def qv_loss(q_pooled: torch.Tensor, v_prime: torch.Tensor, mask: ContrastMask,
            disc: Discriminator) -> torch.Tensor:
    return -js_mi_estimate(q_pooled, v_prime, mask, disc)


def vv_masks(starts: torch.Tensor, ends: torch.Tensor, t: int) -> tuple[ContrastMask, ContrastMask]:
    """Masks for the start and end anchors.

    Positives are the in-moment positions other than the anchor itself, or
    just the anchor when the moment is a single index.
    """
    inside = moment_mask(starts, ends, t)
    pos = torch.arange(t)[None]
    out = []
    for anchor in (starts, ends):
        is_anchor = pos == anchor[:, None]
        positive = inside & ~is_anchor
        lonely = ~positive.any(-1, keepdim=True)
        positive = torch.where(lonely, is_anchor, positive)
        out.append(ContrastMask(positive, ~inside, inside & ~positive))
    return out[0], out[1]


def vv_loss(v_prime: torch.Tensor, starts: torch.Tensor, ends: torch.Tensor,
            disc_s: Discriminator, disc_e: Discriminator) -> torch.Tensor:
    if v_prime.dim() == 2:
        v_prime = v_prime[None]
    starts = torch.as_tensor(starts).reshape(-1)
    ends = torch.as_tensor(ends).reshape(-1)
    mask_s, mask_e = vv_masks(starts, ends, v_prime.shape[1])
    rows = torch.arange(v_prime.shape[0])
    i_s = js_mi_estimate(v_prime[rows, starts], v_prime, mask_s, disc_s)
    i_e = js_mi_estimate(v_prime[rows, ends], v_prime, mask_e, disc_e)
    return -i_s - i_e


def dcl_objective(l_vq, l_vv, alpha: float, beta: float):
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * l_vq + beta * l_vv
