"""Context-query attention fusion, X = FFN([V'; A; V'*A; V'*B])."""
from __future__ import annotations

import torch
import torch.nn as nn

from .encoder import uniform_init_

_NEG = -1e30


class CQAFusion(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        # trilinear similarity S_ij = w_v.v_i + w_q.q_j + w_vq.(v_i * q_j)
        self.w_v = nn.Linear(d, 1, bias=False)
        self.w_q = nn.Linear(d, 1, bias=False)
        self.w_vq = nn.Parameter(torch.empty(d))
        self.ffn = nn.Linear(4 * d, d)
        uniform_init_(self)
        nn.init.uniform_(self.w_vq, -d ** -0.5, d ** -0.5)

    def similarity(self, v: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return self.w_v(v) + self.w_q(q).transpose(1, 2) + (v * self.w_vq) @ q.transpose(1, 2)

    def attend(self, v, q, q_mask, sim=None):
        """Return (A, B, row softmax, column softmax) for similarity ``sim`` (B, T, N)."""
        if q_mask is None:
            q_mask = torch.ones(q.shape[:2], dtype=torch.bool)
        if not bool(q_mask.any(-1).all()):
            raise ValueError("every query position is masked")
        if sim is None:
            sim = self.similarity(v, q)
        s_row = torch.softmax(sim.masked_fill(~q_mask[:, None, :], _NEG), dim=2)
        s_col = torch.softmax(sim, dim=1)
        a = s_row @ q
        b = s_row @ s_col.transpose(1, 2) @ v
        return a, b, s_row, s_col

    def forward(self, v_prime, q_prime, q_mask=None):
        a, b, _, _ = self.attend(v_prime, q_prime, q_mask)
        return self.ffn(torch.cat([v_prime, a, v_prime * a, v_prime * b], dim=-1))


def cqa_fuse(feats, fusion: CQAFusion) -> torch.Tensor:
    return fusion(feats.v_prime, feats.q_prime, feats.q_mask)
