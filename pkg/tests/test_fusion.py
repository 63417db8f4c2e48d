import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from finite_diff import relative_error
from ivgdcl.encoder import ContextualizedFeatures
from ivgdcl.fusion import CQAFusion, cqa_fuse


def fusion(d=6, seed=0):
    torch.manual_seed(seed)
    return CQAFusion(d).double()


def rand(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_single_query_token_attends_to_itself():
    f = fusion()
    v, q = rand(1, 5, 6), rand(1, 1, 6, seed=1)
    a, b, s_row, _ = f.attend(v, q, None)
    torch.testing.assert_close(a, q.expand(1, 5, 6))
    assert torch.equal(s_row, torch.ones_like(s_row))


def test_single_frame_single_token_closed_form():
    f = fusion()
    v, q = rand(1, 1, 6), rand(1, 1, 6, seed=1)
    expected = f.ffn(torch.cat([v, q, v * q, v * v], -1))
    torch.testing.assert_close(f(v, q), expected, rtol=0, atol=1e-12)


def test_zero_similarity_gives_uniform_attention():
    f = fusion()
    v, q = rand(1, 4, 6), rand(1, 3, 6, seed=1)
    a, b, _, _ = f.attend(v, q, None, sim=torch.zeros(1, 4, 3, dtype=torch.float64))
    torch.testing.assert_close(a, q.mean(1, keepdim=True).expand(1, 4, 6))
    torch.testing.assert_close(b, v.mean(1, keepdim=True).expand(1, 4, 6))


def test_similarity_matches_loop():
    f = fusion()
    v, q = rand(1, 4, 6), rand(1, 3, 6, seed=1)
    s = f.similarity(v, q)
    w = torch.cat([f.w_v.weight[0], f.w_q.weight[0], f.w_vq])
    for i in range(4):
        for j in range(3):
            trip = torch.cat([v[0, i], q[0, j], v[0, i] * q[0, j]])
            assert s[0, i, j].item() == pytest.approx((w @ trip).item(), abs=1e-12)


def test_softmax_rows_and_masking():
    f = fusion()
    v, q = rand(2, 4, 6), rand(2, 3, 6, seed=1)
    mask = torch.tensor([[True, True, False], [True, False, False]])
    _, _, s_row, s_col = f.attend(v, q, mask)
    torch.testing.assert_close(s_row.sum(-1), torch.ones(2, 4, dtype=torch.float64))
    torch.testing.assert_close(s_col.sum(1), torch.ones(2, 3, dtype=torch.float64))
    assert s_row[0, :, 2].abs().max() == 0 and s_row[1, :, 1:].abs().max() == 0


def test_padding_equivalent_to_truncation():
    f = fusion()
    v, q = rand(1, 4, 6), rand(1, 3, 6, seed=1)
    padded = torch.cat([q, rand(1, 2, 6, seed=9)], 1)
    mask = torch.tensor([[True, True, True, False, False]])
    torch.testing.assert_close(f(v, q), f(v, padded, mask), rtol=0, atol=1e-12)


def test_all_masked_raises():
    f = fusion()
    with pytest.raises(ValueError):
        f(rand(1, 4, 6), rand(1, 3, 6), torch.zeros(1, 3, dtype=torch.bool))


def test_gradient_matches_finite_differences():
    f = fusion()
    v = rand(1, 4, 6).requires_grad_()
    q = rand(1, 3, 6, seed=1).requires_grad_()
    probe = rand(1, 4, 6, seed=2)
    feats = ContextualizedFeatures(v, q, q.amax(1), torch.ones(1, 3, dtype=torch.bool))
    fn = lambda: (cqa_fuse(feats, f) * probe).sum()
    assert relative_error(fn, [v, q] + list(f.parameters())) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_query_permutation_invariance(seed):
    f = fusion()
    v, q = rand(1, 5, 6, seed=seed), rand(1, 4, 6, seed=seed + 1)
    perm = torch.randperm(4, generator=torch.Generator().manual_seed(seed))
    torch.testing.assert_close(f(v, q), f(v, q[:, perm]), rtol=0, atol=1e-6)
