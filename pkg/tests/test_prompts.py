import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geoprompt.errors import ConfigError, ShapeError
from geoprompt.prompts import (
    GeometricPrompts, ReferenceEmbeddings, contrastive_prompt_loss, prompt_attention, reference_embeddings,
)

from conftest import central_diff, rel_error
from oracles import contrastive_oracle


def test_prompt_init():
    p = GeometricPrompts(64, seed=3)
    assert p.P.shape == (3, 64)
    assert torch.all(p.P.norm(dim=1) > 0)
    assert p.P.std().item() == pytest.approx(0.02, rel=0.3)
    assert set(p.named_rows()) == {"prompt.silhouette", "prompt.ligament", "prompt.ridge"}


def test_zero_prompt_gives_half_attention():
    f = torch.randn(2, 8, 4, 4)
    out = prompt_attention(f, torch.zeros(3, 8))
    assert torch.all(out.attention == 0.5)
    torch.testing.assert_close(out.features, 1.5 * f.unsqueeze(1).expand(-1, 3, -1, -1, -1))


def test_saturated_negative_prompt_is_identity():
    f = torch.rand(1, 8, 4, 4) + 0.1  # strictly positive so the alignment is strongly negative
    P = -1e4 * torch.ones(3, 8)
    out = prompt_attention(f, P)
    torch.testing.assert_close(out.features[:, 0], f, atol=1e-6, rtol=0)


def test_attention_ratio_between_one_and_two():
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        f = torch.randn(1, 16, 5, 5, generator=g, dtype=torch.float64)
        P = torch.randn(3, 16, generator=g, dtype=torch.float64)
        out = prompt_attention(f, P)
        ratio = out.features / f.unsqueeze(1)
        assert torch.all(ratio > 1) and torch.all(ratio < 2)
        assert torch.all((out.attention > 0) & (out.attention < 1))


def test_attention_residual_exact():
    f = torch.randn(2, 8, 3, 3, dtype=torch.float64)
    P = torch.randn(3, 8, dtype=torch.float64)
    out = prompt_attention(f, P)
    diff = out.features - f.unsqueeze(1)
    # exact up to the rounding of one addition
    torch.testing.assert_close(diff, out.attention.unsqueeze(2) * f.unsqueeze(1), rtol=0, atol=1e-15)


def test_attention_logit_scaling():
    f = torch.randn(1, 16, 2, 2, dtype=torch.float64)
    P = torch.randn(3, 16, dtype=torch.float64)
    expect = torch.sigmoid(torch.einsum("kc,chw->khw", P, f[0]) / 4.0)
    torch.testing.assert_close(prompt_attention(f, P).attention[0], expect)


def test_softmax_mode_uniform_when_prompt_zero():
    f = torch.randn(1, 8, 4, 4)
    out = prompt_attention(f, torch.zeros(3, 8), mode="softmax")
    torch.testing.assert_close(out.attention, torch.ones(1, 3, 4, 4))


def test_attention_shape_error():
    with pytest.raises(ShapeError):
        prompt_attention(torch.randn(1, 8, 4, 4), torch.randn(3, 9))


# -- reference embeddings -------------------------------------------------------


def test_full_mask_is_spatial_mean():
    f = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    ref = reference_embeddings(f, torch.ones(1, 3, 4, 4), (True, True, True))
    for c in range(3):
        torch.testing.assert_close(ref.R[c], f[0].mean(dim=(1, 2)), atol=1e-6, rtol=1e-6)
    assert ref.valid.all()


def test_empty_mask_invalid():
    f = torch.randn(1, 6, 4, 4)
    m = torch.ones(1, 3, 4, 4)
    m[0, 1] = 0
    ref = reference_embeddings(f, m, (True, True, True))
    assert ref.valid.tolist() == [True, False, True]
    assert torch.all(ref.R[1] == 0)


def test_absent_class_invalid_even_with_mask():
    f = torch.randn(1, 6, 4, 4)
    ref = reference_embeddings(f, torch.ones(1, 3, 4, 4), (True, True, False))
    assert ref.valid.tolist() == [True, True, False]


def test_single_point_pooling():
    f = torch.randn(1, 6, 4, 4, dtype=torch.float64)
    m = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    m[0, 0, 2, 1] = 1
    ref = reference_embeddings(f, m, (True, False, False))
    torch.testing.assert_close(ref.R[0], f[0, :, 2, 1], atol=1e-5, rtol=1e-5)


def test_downsampled_threshold_mode():
    f = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    m = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    m[0, 0, :4, :4] = 1          # full cell (0,0)
    m[0, 0, 4:, 4:6] = 1         # half of cell (1,1)
    m[0, 0, :1, 4:] = 1          # quarter of cell (0,1)
    bin_ref = reference_embeddings(f, m, (True, False, False), threshold=0.5)
    torch.testing.assert_close(bin_ref.R[0], (f[0, :, 0, 0] + f[0, :, 1, 1]) / 2, atol=1e-5, rtol=1e-5)
    soft = reference_embeddings(f, m, (True, False, False))
    expect = (f[0, :, 0, 0] + 0.5 * f[0, :, 1, 1] + 0.25 * f[0, :, 0, 1]) / 1.75
    torch.testing.assert_close(soft.R[0], expect, atol=1e-5, rtol=1e-5)


# -- contrastive loss -----------------------------------------------------------


def _ref(R, valid=(True, True, True)):
    return ReferenceEmbeddings(torch.as_tensor(R), torch.tensor(valid))


def test_uniform_similarity_is_ln3():
    P = torch.ones(3, 4, dtype=torch.float64)
    R = torch.randn(3, 4, dtype=torch.float64)
    out = contrastive_prompt_loss(P, _ref(R), tau=0.07)
    # identical prompt rows: every row of the softmax is the same, diagonal terms average to ln 3
    assert not out.skipped
    assert out.loss.item() == pytest.approx(contrastive_oracle(P.numpy(), R.numpy(), [1] * 3, 0.07))
    R_same = torch.ones(3, 4, dtype=torch.float64)
    assert contrastive_prompt_loss(P, _ref(R_same), 0.07).loss.item() == pytest.approx(math.log(3), abs=1e-6)


def test_diagonal_ten_offdiag_zero():
    tau = 0.07
    e = torch.eye(6, dtype=torch.float64)
    R = e[:3]
    P = 10 * tau * e[:3] + math.sqrt(1 - (10 * tau) ** 2) * e[3:]
    loss = contrastive_prompt_loss(P, _ref(R), tau).loss.item()
    assert loss == pytest.approx(math.log(1 + 2 * math.exp(-10)), rel=1e-9)
    assert loss == pytest.approx(9.08e-5, rel=1e-3)


def test_single_valid_class_is_zero():
    P, R = torch.randn(3, 4), torch.randn(3, 4)
    assert contrastive_prompt_loss(P, _ref(R, (False, True, False))).loss.item() == 0.0


def test_no_valid_class_skipped():
    P = torch.randn(3, 4, requires_grad=True)
    out = contrastive_prompt_loss(P, _ref(torch.zeros(3, 4), (False, False, False)))
    assert out.skipped and out.loss.item() == 0.0
    out.loss.backward()  # still differentiable


def test_tau_must_be_positive():
    with pytest.raises(ConfigError):
        contrastive_prompt_loss(torch.randn(3, 4), _ref(torch.randn(3, 4)), tau=0.0)


def test_dot_mode_matches_oracle():
    P = torch.randn(3, 5, dtype=torch.float64) * 0.1
    R = torch.randn(3, 5, dtype=torch.float64) * 0.1
    got = contrastive_prompt_loss(P, _ref(R), 0.5, similarity="dot").loss.item()
    assert got == pytest.approx(contrastive_oracle(P.numpy(), R.numpy(), [1] * 3, 0.5, cosine=False), rel=1e-12)


vectors = st.lists(st.floats(-3, 3, allow_nan=False, width=64), min_size=15, max_size=15)
valid_flags = st.tuples(st.booleans(), st.booleans(), st.booleans())


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, valid_flags, st.sampled_from([0.07, 0.1, 0.5, 1.0]))
def test_loss_bounds_and_oracle(p, r, valid, tau):
    P = torch.tensor(p, dtype=torch.float64).view(3, 5)
    R = torch.tensor(r, dtype=torch.float64).view(3, 5)
    if torch.any(P.norm(dim=1) < 1e-3) or torch.any(R.norm(dim=1) < 1e-3):
        return
    loss = contrastive_prompt_loss(P, _ref(R, valid), tau).loss.item()
    n = sum(valid)
    assert loss == pytest.approx(contrastive_oracle(P.numpy(), R.numpy(), valid, tau), rel=1e-9, abs=1e-12)
    assert -1e-12 <= loss <= (math.log(n) if n else 0.0) + 2 / tau + 1e-9


@settings(max_examples=50, deadline=None)
@given(vectors, vectors, valid_flags, st.permutations([0, 1, 2]))
def test_permutation_and_scale_invariance(p, r, valid, perm):
    P = torch.tensor(p, dtype=torch.float64).view(3, 5)
    R = torch.tensor(r, dtype=torch.float64).view(3, 5)
    if torch.any(P.norm(dim=1) < 1e-3) or torch.any(R.norm(dim=1) < 1e-3):
        return
    base = contrastive_prompt_loss(P, _ref(R, valid), 0.1).loss.item()
    perm = list(perm)
    permuted = contrastive_prompt_loss(P[perm], _ref(R[perm], tuple(valid[i] for i in perm)), 0.1).loss.item()
    assert permuted == pytest.approx(base, rel=1e-12, abs=1e-14)
    R2 = R.clone()
    R2[1] *= 2
    assert contrastive_prompt_loss(P, _ref(R2, valid), 0.1).loss.item() == pytest.approx(base, rel=1e-12, abs=1e-14)


def test_contrastive_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(50):
        P = torch.randn(3, 8, generator=g, dtype=torch.float64, requires_grad=True)
        R = torch.randn(3, 8, generator=g, dtype=torch.float64)
        ref = _ref(R)
        contrastive_prompt_loss(P, ref, 0.5).loss.backward()
        fd = central_diff(lambda x: contrastive_prompt_loss(x, ref, 0.5).loss, P.detach(), h=1e-5)
        worst = max(worst, rel_error(P.grad, fd))
    assert worst < 1e-4
