"""
Tests for the self-distillation objectives and projection heads.
"""

import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.core.errors import DivergenceError, ValidationError
from src.losses.ssl import (LossWeights, check_finite, dino_loss, ema_update, gram_loss, ibot_loss,
                            koleo_loss, loss_history_row, sinkhorn_normalize)
from src.models.heads import HeadConfig, ProjectionHead


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


# -- sinkhorn -------------------------------------------------------------------

def test_uniform_logits_give_uniform_assignments():
    q = sinkhorn_normalize(torch.zeros(4, 8, dtype=torch.float64), 0.04)
    assert torch.allclose(q, torch.full((4, 8), 1 / 8, dtype=torch.float64))


def test_marginals_after_many_iterations():
    logits = torch.randn(2, 2, generator=_gen(), dtype=torch.float64)
    q = sinkhorn_normalize(logits, 1.0, iterations=50)
    assert torch.allclose(q.sum(dim=1), torch.ones(2, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(q.sum(dim=0), torch.ones(2, dtype=torch.float64), atol=1e-6)

    logits = torch.randn(6, 3, generator=_gen(1), dtype=torch.float64)
    q = sinkhorn_normalize(logits, 1.0, iterations=50)
    assert torch.allclose(q.sum(dim=0), torch.full((3,), 2.0, dtype=torch.float64), atol=1e-6)


def test_doubly_stochastic_input_is_fixed_point():
    q0 = torch.tensor([[0.7, 0.3], [0.3, 0.7]], dtype=torch.float64)
    q = sinkhorn_normalize(q0.log(), 1.0, iterations=10)
    assert torch.allclose(q, q0, atol=1e-12)


def test_widely_separated_rows_stay_finite():
    q = sinkhorn_normalize(torch.tensor([[0.0, 0.0], [-5.0, -5.0]]), 0.04)
    assert torch.isfinite(q).all()
    assert torch.allclose(q, torch.full((2, 2), 0.5))

    logits = torch.randn(4, 8, generator=_gen(2), dtype=torch.float64)
    offsets = torch.tensor([[0.0], [-40.0], [-200.0], [25.0]], dtype=torch.float64)
    shifted = sinkhorn_normalize(logits + offsets, 0.04)
    assert torch.isfinite(shifted).all()
    assert torch.allclose(shifted, sinkhorn_normalize(logits, 0.04), atol=1e-10)


def test_sinkhorn_rejects_bad_logits():
    with pytest.raises(ValidationError):
        sinkhorn_normalize(torch.tensor([[0.0, float("nan")]]), 0.04)
    with pytest.raises(ValidationError):
        sinkhorn_normalize(torch.tensor([[float("-inf"), float("-inf")], [0.0, 1.0]]), 0.04)
    with pytest.raises(ValidationError):
        sinkhorn_normalize(torch.zeros(0, 4), 0.04)


# -- dino -------------------------------------------------------------------------

def test_dino_closed_form():
    teacher = [torch.tensor([[1.0, 0.0]], dtype=torch.float64)]
    students = [torch.zeros(1, 2, dtype=torch.float64), torch.tensor([[2.0, 0.0]], dtype=torch.float64)]
    loss = dino_loss(students, teacher, student_temp=1.0)
    assert math.isclose(float(loss), math.log(1 + math.exp(-2)), abs_tol=1e-12)
    assert math.isclose(float(loss), 0.1269, abs_tol=1e-4)


def test_dino_matching_distributions_give_entropy():
    s = torch.randn(3, 5, generator=_gen(), dtype=torch.float64)
    p = F.softmax(s / 0.1, dim=-1)
    entropy = -(p * p.log()).sum(dim=-1).mean()
    loss = dino_loss([s.clone(), s.clone()], [p, p])
    assert torch.allclose(loss, entropy, atol=1e-10)


def test_dino_invariant_to_teacher_logit_shift():
    g = _gen(2)
    t_logits = [torch.randn(4, 16, generator=g, dtype=torch.float64) for _ in range(2)]
    students = [torch.randn(4, 16, generator=g, dtype=torch.float64) for _ in range(4)]
    base = dino_loss(students, [sinkhorn_normalize(t, 0.04) for t in t_logits])
    shifted = dino_loss(students, [sinkhorn_normalize(t + 7.5, 0.04) for t in t_logits])
    assert abs(float(base - shifted)) < 1e-8


def test_dino_errors():
    with pytest.raises(ValidationError):
        dino_loss([torch.zeros(1, 3), torch.zeros(1, 4)], [torch.zeros(1, 3)])
    with pytest.raises(ValidationError):
        dino_loss([torch.zeros(1, 3)], [torch.zeros(1, 3)])


def test_dino_gradcheck():
    g = _gen(3)
    teacher = [F.softmax(torch.randn(2, 6, generator=g, dtype=torch.float64), dim=-1) for _ in range(2)]
    students = tuple(torch.randn(2, 6, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(3))
    assert torch.autograd.gradcheck(lambda *s: dino_loss(list(s), teacher), students)


# -- ibot -------------------------------------------------------------------------

def test_ibot_empty_mask_is_zero():
    s = torch.randn(2, 4, 8)
    loss = ibot_loss(s, F.softmax(torch.randn(2, 4, 8), -1), torch.zeros(2, 4, dtype=torch.bool))
    assert float(loss) == 0.0


def test_ibot_single_token_matches_cross_entropy():
    g = _gen(4)
    s = torch.randn(1, 5, 7, generator=g, dtype=torch.float64)
    t = F.softmax(torch.randn(1, 5, 7, generator=g, dtype=torch.float64), -1)
    mask = torch.zeros(1, 5, dtype=torch.bool)
    mask[0, 2] = True
    expected = -(t[0, 2] * F.log_softmax(s[0, 2] / 0.1, -1)).sum()
    assert torch.allclose(ibot_loss(s, t, mask), expected, atol=1e-12)
    # the dino formula on that token gives the same value
    assert torch.allclose(dino_loss([s[:, 2], s[:, 2]], [t[:, 2]]), expected, atol=1e-12)


def test_ibot_mask_may_be_a_grid():
    s = torch.randn(2, 16, 8, dtype=torch.float64)
    t = F.softmax(torch.randn(2, 16, 8, dtype=torch.float64), -1)
    grid_mask = torch.zeros(2, 4, 4, dtype=torch.bool)
    grid_mask[:, 1:3, 1:3] = True
    assert torch.allclose(ibot_loss(s, t, grid_mask), ibot_loss(s, t, grid_mask.reshape(2, 16)))


def test_ibot_gradcheck_and_shape_error():
    g = _gen(5)
    t = F.softmax(torch.randn(2, 4, 6, generator=g, dtype=torch.float64), -1)
    mask = torch.tensor([[1, 0, 1, 0], [0, 0, 0, 1]], dtype=torch.bool)
    s = torch.randn(2, 4, 6, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: ibot_loss(x, t, mask), (s,))
    with pytest.raises(ValidationError):
        ibot_loss(torch.zeros(2, 4, 6), torch.zeros(2, 4, 5), mask)


# -- koleo -------------------------------------------------------------------------

def test_koleo_antipodal_pair():
    x = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    assert math.isclose(float(koleo_loss(x)), -math.log(2 + 1e-8), abs_tol=1e-12)


def test_koleo_duplicates_are_guarded():
    x = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64, requires_grad=True)
    loss = koleo_loss(x)
    assert math.isclose(float(loss), -math.log(1e-8), rel_tol=1e-9)
    loss.backward()
    assert torch.isfinite(x.grad).all()


def test_koleo_small_batch_is_zero():
    assert float(koleo_loss(torch.randn(1, 4))) == 0.0


def test_koleo_rotation_invariance_and_gradcheck():
    g = _gen(6)
    x = torch.randn(8, 5, generator=g, dtype=torch.float64)
    q, _ = torch.linalg.qr(torch.randn(5, 5, generator=g, dtype=torch.float64))
    assert torch.allclose(koleo_loss(x), koleo_loss(x @ q), atol=1e-10)
    x.requires_grad_(True)
    assert torch.autograd.gradcheck(koleo_loss, (x,))


# -- gram -------------------------------------------------------------------------

def test_gram_identical_features_is_zero():
    f = torch.randn(2, 9, 6)
    assert float(gram_loss(f, f.clone())) == pytest.approx(0.0, abs=1e-12)


def test_gram_hand_computed_case():
    student = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    reference = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert math.isclose(float(gram_loss(student, reference)), 0.5, abs_tol=1e-12)


def test_gram_resizes_reference_grid():
    student = torch.randn(1, 16, 6, dtype=torch.float64)
    reference = torch.randn(1, 4, 6, dtype=torch.float64)
    loss = gram_loss(student, reference, student_grid=(4, 4), reference_grid=(2, 2))
    assert torch.isfinite(loss)
    with pytest.raises(ValidationError):
        gram_loss(student, reference)


def test_gram_gradcheck():
    g = _gen(7)
    ref = torch.randn(1, 6, 4, generator=g, dtype=torch.float64)
    s = torch.randn(1, 6, 4, generator=g, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: gram_loss(x, ref), (s,))


# -- ema ---------------------------------------------------------------------------

def _scalar_module(value):
    m = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        m.weight.fill_(value)
    return m


@pytest.mark.parametrize('momentum,expected', [(1.0, 1.0), (0.0, 0.0), (0.994, 0.994)])
def test_ema_recurrence(momentum, expected):
    teacher, student = _scalar_module(1.0), _scalar_module(0.0)
    ema_update(teacher, student, momentum)
    assert float(teacher.weight) == pytest.approx(expected, abs=1e-7)


def test_ema_errors():
    with pytest.raises(ValidationError):
        ema_update(_scalar_module(1.0), nn.Linear(1, 1), 0.9)
    with pytest.raises(ValidationError):
        ema_update(_scalar_module(1.0), _scalar_module(0.0), 1.5)


# -- weights, bookkeeping, heads -----------------------------------------------------------

def test_loss_weight_presets():
    assert LossWeights.preset("phase1") == LossWeights(1.0, 1.0, 0.1, 0.0)
    assert LossWeights.preset("phase1hr").gram == 1.5
    assert LossWeights.preset("phase2").dino == 0.5
    p3 = LossWeights.preset("phase3")
    assert (p3.dino, p3.ibot, p3.koleo, p3.gram, p3.clip, p3.osl) == (0.0, 1.0, 0.0, 0.0, 1.0, 0.5)
    with pytest.raises(ValidationError):
        LossWeights.preset("phase4")
    with pytest.raises(ValidationError):
        LossWeights(koleo=-0.1).validate()


def test_combine_skips_zero_weights():
    w = LossWeights(dino=0.5, ibot=1.0, koleo=0.0)
    total = w.combine({"dino": torch.tensor(2.0), "ibot": torch.tensor(3.0), "koleo": torch.tensor(float("nan"))})
    assert float(total) == 4.0
    assert float(LossWeights(dino=0.0).combine({"dino": torch.tensor(1.0)})) == 0.0


def test_non_finite_total_raises_divergence():
    components = {"dino": torch.tensor(1.0), "ibot": torch.tensor(float("inf"))}
    with pytest.raises(DivergenceError) as exc:
        check_finite(12, components, torch.tensor(float("inf")))
    assert exc.value.step == 12
    assert exc.value.components["dino"] == 1.0
    row = loss_history_row(3, {"dino": torch.tensor(0.25)}, torch.tensor(0.5))
    assert row == {"step": 3, "total": 0.5, "dino": 0.25}


def test_projection_head_shapes_and_prototype_norms():
    torch.manual_seed(0)
    head = ProjectionHead(48, HeadConfig.preset("toy"))
    out = head(torch.randn(5, 48))
    assert out.shape == (5, 256)
    assert torch.isfinite(out).all()
    weight = head.last_layer.weight
    assert torch.allclose(weight.norm(dim=1), torch.ones(256), atol=1e-5)
    assert out.abs().max() <= 1.0 + 1e-5
    with pytest.raises(ValidationError):
        HeadConfig.preset("tiny")
