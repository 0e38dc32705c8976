"""
Tests for the vision-language heads and the Phase-3 objectives.
"""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.core.errors import ValidationError
from src.losses.ssl import LossWeights
from src.losses.vlm import clip_loss, osl_loss, osl_loss_from_embeddings, phase3_loss
from src.models.vlm import LOGIT_SCALE_MAX, VisionLanguageModel, VLMHeads, project_vision
from src.text.encoder import TextConfig, ToyTextEncoder
from src.text.osl_pairs import OSLPair, OSLPairSet, build_osl_pairs
from src.text.reports import PositiveFindingDB
from src.text.synthetic import synthetic_pairs


def _unit_rows(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=g, dtype=torch.float64), dim=-1)


# -- heads ---------------------------------------------------------------------------

def test_logit_scale_init_and_clamp():
    heads = VLMHeads(48, 64, 32)
    assert math.isclose(float(heads.logit_scale), math.log(1 / 0.07), rel_tol=1e-6)
    assert math.isclose(float(heads.logit_scale), 2.66, abs_tol=0.01)
    with torch.no_grad():
        heads.logit_scale.fill_(9.0)
    heads.clamp_logit_scale()
    assert math.isclose(float(heads.logit_scale), LOGIT_SCALE_MAX, rel_tol=1e-6)
    assert float(heads.temperature) > 0
    assert heads.vision_proj.bias is None


def test_project_vision_hand_computed():
    heads = VLMHeads(4, 3, proj_dim=8).double()
    weight = torch.arange(64, dtype=torch.float64).reshape(8, 8) / 10.0
    with torch.no_grad():
        heads.vision_proj.weight.copy_(weight)
    cls = torch.tensor([1.0, 0.0, -1.0, 2.0], dtype=torch.float64)
    mean = torch.tensor([0.5, 0.5, 0.0, 1.0], dtype=torch.float64)
    z = weight @ torch.cat((cls, mean))
    assert torch.allclose(project_vision(cls, mean, heads), z / z.norm(), atol=1e-12)


def test_project_vision_is_unit_and_scale_free():
    torch.manual_seed(0)
    heads = VLMHeads(48, 64, 32).double()
    cls, mean = torch.randn(3, 48, dtype=torch.float64), torch.randn(3, 48, dtype=torch.float64)
    v = project_vision(cls, mean, heads)
    assert torch.allclose(v.norm(dim=-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(project_vision(2 * cls, 2 * mean, heads), v, atol=1e-12)


def test_project_vision_errors():
    heads = VLMHeads(4, 3, proj_dim=8)
    with pytest.raises(ValidationError):
        project_vision(torch.zeros(4), torch.zeros(5), heads)
    with torch.no_grad():
        heads.vision_proj.weight.zero_()
    with pytest.raises(ValidationError):
        project_vision(torch.ones(4), torch.ones(4), heads)


def test_vision_language_model_embeddings(toy_backbone):
    text = ToyTextEncoder(TextConfig.preset("toy"))
    model = VisionLanguageModel(toy_backbone, text, VLMHeads(48, 64, 32)).eval()
    v = model.embed_volume(torch.randn(2, 1, 16, 16, 16))
    t = model.embed_text(["Pleural effusion.", "No pleural effusion.", "Hepatic cyst is seen."])
    assert v.shape == (2, 32) and t.shape == (3, 32)
    assert torch.allclose(v.norm(dim=-1), torch.ones(2), atol=1e-5)
    assert torch.allclose(t.norm(dim=-1), torch.ones(3), atol=1e-5)


# -- clip --------------------------------------------------------------------------------

def test_clip_single_sample_is_zero():
    v = _unit_rows(1, 8)
    assert float(clip_loss(v, _unit_rows(1, 8, seed=1), 14.3)) == 0.0


def test_clip_identity_rows_closed_form():
    eye = torch.eye(2, dtype=torch.float64)
    loss = clip_loss(eye, eye.clone(), 1.0)
    assert math.isclose(float(loss), math.log(1 + math.exp(-1)), abs_tol=1e-12)
    assert math.isclose(float(loss), 0.3133, abs_tol=1e-4)


def test_clip_symmetry_and_rotation_invariance():
    v, t = _unit_rows(5, 6), _unit_rows(5, 6, seed=1)
    loss = clip_loss(v, t, 10.0)
    assert torch.allclose(loss, clip_loss(t, v, 10.0), atol=1e-12)
    q, _ = torch.linalg.qr(torch.randn(6, 6, generator=torch.Generator().manual_seed(2), dtype=torch.float64))
    assert torch.allclose(loss, clip_loss(v @ q, t @ q, 10.0), atol=1e-8)
    assert float(loss) >= 0


def test_clip_vanishes_for_dominant_diagonal():
    v = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    assert float(clip_loss(v, v.clone(), 20.0)) < 1e-3


def test_clip_errors_and_gradcheck():
    with pytest.raises(ValidationError):
        clip_loss(torch.zeros(0, 4), torch.zeros(0, 4), 1.0)
    with pytest.raises(ValidationError):
        clip_loss(torch.zeros(2, 4), torch.zeros(3, 4), 1.0)
    v = _unit_rows(3, 4).requires_grad_(True)
    t = _unit_rows(3, 4, seed=1).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a, b: clip_loss(a, b, 3.0), (v, t))


# -- osl -----------------------------------------------------------------------------------

def test_osl_equal_similarities_give_log_two():
    v = _unit_rows(2, 4)
    t = torch.randn(2, 8, 4, dtype=torch.float64)
    y = torch.randint(0, 2, (2, 8))
    loss = osl_loss_from_embeddings(v, t, t.clone(), y, torch.ones(2, 8, dtype=torch.bool), 5.0)
    assert math.isclose(float(loss), math.log(2), abs_tol=1e-12)


def test_osl_single_pair_closed_form():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    t_pos = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    t_neg = torch.tensor([[[-1.0, 0.0]]], dtype=torch.float64)
    loss = osl_loss_from_embeddings(v, t_pos, t_neg, torch.ones(1, 1), torch.ones(1, 1, dtype=torch.bool), 1.0)
    assert math.isclose(float(loss), -math.log(1 / (1 + math.exp(-2))), abs_tol=1e-12)
    assert math.isclose(float(loss), 0.1269, abs_tol=1e-4)


def test_osl_all_invalid_is_zero():
    v = _unit_rows(2, 4)
    t = torch.randn(2, 8, 4, dtype=torch.float64)
    loss = osl_loss_from_embeddings(v, t, -t, torch.ones(2, 8), torch.zeros(2, 8, dtype=torch.bool), 1.0)
    assert float(loss) == 0.0
    padded = OSLPairSet((OSLPair.padding(),) * 8)
    assert float(osl_loss(v[0], padded, lambda texts: pytest.fail("nothing to encode"), 1.0)) == 0.0


def test_osl_decreases_with_margin_for_true_pairs():
    v = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    losses = []
    for m in np.linspace(-3, 3, 13):
        t_pos = torch.tensor([[[m / 2, 0.0]]], dtype=torch.float64)
        t_neg = torch.tensor([[[-m / 2, 0.0]]], dtype=torch.float64)
        losses.append(float(osl_loss_from_embeddings(v, t_pos, t_neg, torch.ones(1, 1),
                                                     torch.ones(1, 1, dtype=torch.bool), 1.0)))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_osl_with_text_encoder_and_pair_sets():
    pairs = synthetic_pairs(6, seed=1, grid_shape=(16, 16, 16))
    db = PositiveFindingDB.from_reports(p.report for p in pairs)
    sets = [build_osl_pairs(p.report, db, np.random.default_rng(i)) for i, p in enumerate(pairs[:2])]
    encoder = ToyTextEncoder(TextConfig.preset("toy"))

    def encode(texts):
        return F.normalize(encoder.encode(texts), dim=-1)

    v = F.normalize(torch.randn(2, 64), dim=-1).requires_grad_(True)
    loss = osl_loss(v, sets, encode, 2.0)
    assert torch.isfinite(loss) and float(loss) > 0
    loss.backward()
    assert v.grad is not None
    with pytest.raises(ValidationError):
        osl_loss(v, sets[:1], encode, 2.0)


def test_osl_gradcheck():
    g = torch.Generator().manual_seed(4)
    t_pos = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    t_neg = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    y = torch.tensor([[1, 0, 1], [0, 1, 1]])
    valid = torch.tensor([[True, True, False], [True, False, True]])
    v = _unit_rows(2, 4).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x: osl_loss_from_embeddings(x, t_pos, t_neg, y, valid, 2.0), (v,))


# -- combined ------------------------------------------------------------------------------------

def test_phase3_weights():
    assert float(phase3_loss(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0))) == 0.0
    assert float(phase3_loss(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0))) == 2.5
    custom = LossWeights(ibot=2.0, clip=1.0, osl=1.0)
    assert float(phase3_loss(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0), custom)) == 4.0


def test_phase3_gradient_is_sum_of_gradients():
    v = _unit_rows(3, 4).requires_grad_(True)
    t = _unit_rows(3, 4, seed=1)
    assert torch.autograd.gradcheck(
        lambda x: phase3_loss((x ** 2).sum(), clip_loss(x, t, 2.0), x.sum()), (v,))
