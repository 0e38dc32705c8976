"""
Tests for prompt-pair zero-shot classification, ROC thresholds, embedding
retrieval and reciprocal rank fusion.
"""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.core.errors import ValidationError
from src.downstream.retrieval import (RetrievalReport, evaluate_rankings, extract_roi, label_relevance,
                                      multi_scale_retrieve, retrieve, rrf_fuse, rrf_scores,
                                      similarity_matrix)
from src.downstream.zero_shot import (PromptPair, ThresholdChoice, apply_thresholds, load_class_names,
                                      select_thresholds, threshold_select, zero_shot_classify)
from src.text.encoder import toy_encode


def _encode(texts):
    return F.normalize(torch.stack([toy_encode(t, dim=32) for t in texts]), dim=-1)


# -- zero-shot ---------------------------------------------------------------------------

def test_prompt_pair_texts():
    pair = PromptPair(" Pleural Effusion ")
    assert pair.positive == "pleural effusion."
    assert pair.negative == "No pleural effusion."


def test_probability_is_sigmoid_of_similarity_gap():
    names = ["pleural effusion", "lung nodule", "emphysema"]
    emb = F.normalize(torch.randn(4, 32, generator=torch.Generator().manual_seed(0)), dim=-1)
    tau = 14.3
    probs = zero_shot_classify(emb, names, _encode, tau)
    pos = _encode([PromptPair(n).positive for n in names]).double()
    neg = _encode([PromptPair(n).negative for n in names]).double()
    expected = torch.sigmoid(tau * (emb.double() @ pos.T - emb.double() @ neg.T)).numpy()
    assert probs.shape == (4, 3)
    assert np.allclose(probs, expected, atol=1e-10)


def test_single_embedding_and_errors():
    emb = F.normalize(torch.randn(32), dim=0)
    assert zero_shot_classify(emb.numpy(), ["a finding"], _encode, 1.0).shape == (1, 1)
    with pytest.raises(ValidationError):
        zero_shot_classify(emb, [], _encode, 1.0)


def test_load_class_names(tmp_path):
    path = tmp_path / "classes.txt"
    path.write_text("Pleural effusion\n\n  Emphysema  \n")
    assert load_class_names(path) == ["Pleural effusion", "Emphysema"]
    (tmp_path / "empty.txt").write_text("\n \n")
    with pytest.raises(ValidationError):
        load_class_names(tmp_path / "empty.txt")


def test_threshold_on_separable_scores():
    choice = threshold_select([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert choice == ThresholdChoice(0.8, 0.0, 1.0, 0.0)


def test_threshold_ties_take_the_lower_threshold():
    choice = threshold_select([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1])
    assert choice.threshold == 0.4
    assert choice.distance == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        threshold_select([0.1, 0.2], [1, 1])


def test_select_and_apply_thresholds():
    probs = np.array([[0.1, 0.7], [0.9, 0.2], [0.8, 0.6], [0.3, 0.1]])
    labels = np.array([[0, 1], [1, 0], [1, 1], [0, 0]])
    choices = select_thresholds(probs, labels)
    assert [c.threshold for c in choices] == [0.8, 0.6]
    assert np.array_equal(apply_thresholds(probs, choices), labels)
    with pytest.raises(ValidationError):
        select_thresholds(probs, labels[:, :1])


# -- retrieval ------------------------------------------------------------------------------

def test_similarity_matrix_is_cosine():
    sim = similarity_matrix(np.array([[2.0, 0.0]]), np.array([[1.0, 1.0], [0.0, 3.0]]))
    assert np.allclose(sim, [[np.sqrt(0.5), 0.0]])
    with pytest.raises(ValidationError):
        similarity_matrix(np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValidationError):
        similarity_matrix(np.ones((1, 2)), np.ones((1, 3)))


def test_retrieve_excludes_self_and_cuts_at_k():
    embs = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    ranked = retrieve(embs, embs, k=2)
    assert ranked == [[1, 2], [0, 2], [1, 0]]
    with_self = retrieve(embs, embs, k=1, exclude_self=False)
    assert with_self == [[0], [1], [2]]


def test_retrieve_breaks_ties_by_gallery_id():
    gallery = np.ones((3, 2))
    ranked = retrieve(np.ones((1, 2)), gallery, gallery_ids=["b", "a", "c"], query_ids=["q"])
    assert ranked == [["a", "b", "c"]]
    with pytest.raises(ValidationError):
        retrieve(np.ones((1, 2)), np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        retrieve(np.ones((1, 2)), gallery, gallery_ids=["a"])


def test_rrf_scores_and_fusion():
    lists = [["a", "b", "c"], ["b", "a"]]
    scores = rrf_scores(lists)
    assert scores["a"] == scores["b"] == pytest.approx(1 / 61 + 1 / 62)
    assert scores["c"] == pytest.approx(1 / 63)
    assert [item for item, _ in rrf_fuse(lists)] == ["a", "b", "c"]
    assert rrf_scores(list(reversed(lists))) == scores
    with pytest.raises(ValidationError):
        rrf_scores([["a", "a"]])


def test_multi_scale_retrieve_fuses_rankings():
    rng = np.random.default_rng(0)
    gallery = [rng.normal(size=(5, 8)) for _ in range(2)]
    queries = [g[:2] + 0.01 * rng.normal(size=(2, 8)) for g in gallery]
    fused = multi_scale_retrieve(queries, gallery, query_ids=["q0", "q1"],
                                 gallery_ids=["g0", "g1", "g2", "g3", "g4"])
    assert [r[0] for r in fused] == ["g0", "g1"]
    assert all(sorted(r) == ["g0", "g1", "g2", "g3", "g4"] for r in fused)
    with pytest.raises(ValidationError):
        multi_scale_retrieve(queries, gallery[:1])


def test_extract_roi():
    vol = np.arange(6 * 6 * 6, dtype=np.float32).reshape(6, 6, 6)
    roi = extract_roi(vol, (3, 3, 3), 4)
    assert np.array_equal(roi, vol[1:5, 1:5, 1:5])
    corner = extract_roi(vol, (0, 0, 0), 4)
    assert corner[0, 0, 0] == vol.min() and np.array_equal(corner[2:, 2:, 2:], vol[:2, :2, :2])
    outside = extract_roi(vol, (50, 0, 0), 4)
    assert np.all(outside == vol.min())
    with pytest.raises(ValidationError):
        extract_roi(vol[0], (1, 1), 2)
    with pytest.raises(ValidationError):
        extract_roi(vol, (1, 1, 1), 0)


def test_evaluate_rankings():
    gallery_labels = {"a": 1, "b": 0, "c": 1}
    perfect = evaluate_rankings([["a", "b"], ["b", "a"]], [1, 0], gallery_labels, ks=(1,))
    assert perfect.recall == {1: 1.0} and perfect.mean_ap == 1.0
    late = evaluate_rankings([["b", "a", "c"]], [1], gallery_labels, ks=(1, 3))
    assert late.recall == {1: 0.0, 3: 1.0}
    assert late.mean_ap == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert late.to_dict() == {"recall": {"R@1": 0.0, "R@3": 1.0}, "mAP": late.mean_ap}
    assert isinstance(late, RetrievalReport)
    with pytest.raises(ValidationError):
        evaluate_rankings([], [], gallery_labels)


def test_label_relevance():
    rel = label_relevance([1, 0], [0, 1, 1])
    assert rel.tolist() == [[False, True, True], [True, False, False]]
