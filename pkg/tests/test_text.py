"""
Tests for structured reports, negation, caption sampling, OSL pairs and the
toy text encoder.
"""

import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.core.errors import FormatError, ValidationError
from src.text.captions import CaptionSource, sample_caption, sample_caption_with_source, structured_text
from src.text.encoder import TextConfig, ToyTextEncoder, toy_encode, trigram_ids
from src.text.negation import load_rules, negate_finding
from src.text.osl_pairs import N_PAIRS, OSLPair, OSLPairSet, build_osl_pairs
from src.text.reports import (SECTION_NAMES, FindingCaption, Polarity, PositiveFindingDB,
                              StructuredReport, load_reports, save_report, section_key)
from src.text.synthetic import LESION_POSITIVE, add_finding_markers, report_for_spec, synthetic_pairs
from src.volume.phantom import gen_phantom, random_phantom_spec


def _report(report_id="r1", raw_text=None, **sections):
    return StructuredReport.from_dict({
        "report_id": report_id,
        "sections": {name: [{"text": t, "polarity": p} for t, p in items] for name, items in sections.items()},
        "raw_text": raw_text,
    })


SAMPLE = _report(
    "sample",
    pleura=[("Pleural effusion.", "positive")],
    lungs_and_airways=[("There is a nodule.", "positive"), ("No consolidation.", "negative")],
    upper_abdomen=[("Hepatic cyst is seen.", "positive")],
)


# -- reports -------------------------------------------------------------------

def test_eight_sections():
    assert len(SECTION_NAMES) == 8
    assert section_key("Lungs and airways") == "lungs_and_airways"
    with pytest.raises(ValidationError):
        section_key("Brain")


@pytest.mark.parametrize('text', ["", "No effusion", "Effusion. Also a nodule."])
def test_caption_must_be_one_sentence(text):
    with pytest.raises(ValidationError):
        FindingCaption(text, Polarity.POSITIVE, "pleura")


def test_report_json_round_trip(tmp_path):
    path = save_report(tmp_path / "sample.json", SAMPLE)
    (tmp_path / "other.json").write_text(json.dumps({"report_id": "raw", "raw_text": "Free text."}))
    reports = load_reports(tmp_path)
    assert [r.report_id for r in reports] == ["raw", "sample"]
    assert reports[1] == SAMPLE
    assert not reports[0].caption_bearing and reports[0].raw_text == "Free text."
    assert path.exists()


def test_report_errors(tmp_path):
    with pytest.raises(FormatError):
        StructuredReport.from_dict({"sections": {}})
    with pytest.raises(FormatError):
        StructuredReport.from_dict({"report_id": "x", "sections": {"pleura": "Effusion."}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(FormatError):
        load_reports(tmp_path)


def test_positive_and_negative_views():
    assert [c.text for c in SAMPLE.positives()] == [
        "There is a nodule.", "Pleural effusion.", "Hepatic cyst is seen."]
    assert [c.text for c in SAMPLE.negatives()] == ["No consolidation."]


# -- negation -----------------------------------------------------------------------

@pytest.mark.parametrize('sentence,expected', [
    ("Pleural effusion.", "No pleural effusion."),
    ("No pleural effusion.", "Pleural effusion."),
    ("There is a nodule.", "There is no nodule."),
    ("There is no opacity.", "There is an opacity."),
    ("There is fluid.", "There is no evidence of fluid."),
    ("There is no evidence of fluid.", "There is fluid."),
    ("There are no nodules.", "There are nodules."),
    ("Coronary calcifications are present.", "Coronary calcifications are absent."),
    ("Pneumothorax is absent.", "Pneumothorax is present."),
    ("Hepatic cyst is seen.", "Hepatic cyst is not seen."),
    ("pleural effusion.", "no pleural effusion."),
    ("CT angiography artifacts.", "No CT angiography artifacts."),
])
def test_negation_templates(sentence, expected):
    assert negate_finding(sentence) == expected


@pytest.mark.parametrize('sentence', [
    "No pleural effusion.", "There is a nodule.", "There is an opacity.", "There are no nodules.",
    "Coronary calcifications are absent.", "Hepatic cyst is not seen.", "Septal thickenings are present.",
    "There is fluid.", "There is mild atelectasis.", "There is no fluid.", "There is no evidence of fluid.",
    "There is no evidence of a nodule.", "There is a opacity.",
])
def test_negation_is_an_involution(sentence):
    assert negate_finding(negate_finding(sentence)) == sentence


def test_negation_rejects_empty_input():
    with pytest.raises(ValidationError):
        negate_finding("   ")
    with pytest.raises(ValidationError):
        negate_finding(".")


def test_broken_rule_file(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(json.dumps({"rules": [{"name": "x", "pattern": "(", "template": "{x}"}], "fallback": "No {x}"}))
    with pytest.raises(FormatError):
        load_rules(path)


# -- captions -----------------------------------------------------------------------

def test_raw_only_report_returns_raw_text():
    raw = _report("raw", raw_text="Findings: clear lungs.\nImpression: normal.")
    for seed in range(5):
        draw = sample_caption_with_source(raw, np.random.default_rng(seed))
        assert draw.text == raw.raw_text and draw.source is CaptionSource.RAW


def test_empty_report_gives_empty_caption():
    assert sample_caption(_report("empty"), np.random.default_rng(0)) == ""


def test_source_and_shuffle_frequencies():
    n = 3000
    draws = [sample_caption_with_source(SAMPLE, np.random.default_rng(seed)) for seed in range(n)]
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    for source in (CaptionSource.STRUCTURED, CaptionSource.POSITIVES, CaptionSource.NEGATIVES):
        assert abs(sum(d.source is source for d in draws) - n / 3) <= 3 * sigma
    shuffled = sum(d.shuffled for d in draws[:2000])
    assert abs(shuffled - 1000) <= 3 * np.sqrt(2000 * 0.25)


def test_structured_text_layout():
    text = structured_text(SAMPLE)
    assert text.splitlines() == [
        "Lungs and airways: There is a nodule. No consolidation.",
        "Pleura: Pleural effusion.",
        "Upper abdomen: Hepatic cyst is seen.",
    ]


# -- OSL pairs -------------------------------------------------------------------------

def _corpus():
    reports = [p.report for p in synthetic_pairs(12, seed=3)] + [SAMPLE]
    return PositiveFindingDB.from_reports(reports)


def test_no_positives_and_empty_db_gives_padding_only():
    only_negative = _report("neg", pleura=[("No pleural effusion.", "negative")])
    for report in (only_negative, _report("empty")):
        pairs = build_osl_pairs(report, PositiveFindingDB([]), np.random.default_rng(0))
        assert len(pairs.pairs) == N_PAIRS and pairs.n_valid == 0


def test_pair_labels_follow_provenance():
    db = _corpus()
    own = {c.text for c in SAMPLE.positives()}
    for seed in range(20):
        pairs = build_osl_pairs(SAMPLE, db, np.random.default_rng(seed))
        assert len(pairs.pairs) == N_PAIRS
        for p in pairs.pairs:
            if not p.valid:
                continue
            assert p.s_minus == negate_finding(p.s_plus)
            if p.y == 1:
                assert p.source_id == SAMPLE.report_id and p.s_plus in own
            else:
                assert p.source_id != SAMPLE.report_id and p.s_plus not in own
                assert p.section in {c.section for c in SAMPLE.positives()}


def test_osl_pairs_deterministic_per_seed():
    db = _corpus()
    a = build_osl_pairs(SAMPLE, db, np.random.default_rng(11))
    b = build_osl_pairs(SAMPLE, db, np.random.default_rng(11))
    assert a == b
    assert a.labels().shape == (8,) and a.valid_mask().dtype == bool


def test_pair_set_size_is_fixed():
    with pytest.raises(ValidationError):
        OSLPairSet((OSLPair.padding(),) * 7)
    with pytest.raises(ValidationError):
        build_osl_pairs(SAMPLE, _corpus(), np.random.default_rng(0), k=4)


# -- synthetic corpus ----------------------------------------------------------------------

def test_report_for_spec_tracks_lesion():
    spec = random_phantom_spec(1, grid_shape=(16, 16, 16), with_lesion=True)
    report = report_for_spec(spec, "s1", np.random.default_rng(0))
    assert LESION_POSITIVE in [c.text for c in report.positives()]
    pairs = synthetic_pairs(4, seed=0, grid_shape=(16, 16, 16))
    assert [p.label for p in pairs] == [0, 1, 0, 1]
    assert len({p.report.report_id for p in pairs}) == 4


def test_synthetic_positive_findings_are_drawn_as_markers():
    base = random_phantom_spec(3, grid_shape=(16, 16, 16), with_lesion=False)
    findings = (True, False, False, True, False, False)
    marked = add_finding_markers(base, findings)
    assert len(marked.organs) == len(base.organs) + 2
    assert not np.array_equal(gen_phantom(marked).voxels, gen_phantom(base).voxels)
    report = report_for_spec(marked, "m", np.random.default_rng(0), findings=findings)
    texts = {c.text for c in report.positives()}
    assert {"Septal thickenings.", "Coronary calcifications are present."} <= texts
    assert "Pleural effusion." not in texts
    for pair in synthetic_pairs(6, seed=4, grid_shape=(16, 16, 16)):
        n_filler = len(pair.report.positives()) - 1 - pair.label  # image quality and lesion
        assert len(pair.spec.organs) == 2 + n_filler


# -- toy encoder ------------------------------------------------------------------------------

def test_toy_encode_is_deterministic_and_distinguishes_negation():
    a = toy_encode("pleural effusion")
    assert torch.equal(a, toy_encode("pleural effusion"))
    b = toy_encode("no pleural effusion")
    assert float(F.cosine_similarity(a, b, dim=0)) < 0.999


def test_empty_text_maps_to_zero():
    assert not toy_encode("").any()
    assert trigram_ids("", 4096) == []


def test_tokenize_left_pads():
    enc = ToyTextEncoder(TextConfig.preset("toy"))
    ids = enc.tokenize("ab", 10)
    assert ids.shape == (10,)
    assert ids[:7].tolist() == [0] * 7 and (ids[7:] > 0).all()
    with pytest.raises(ValidationError):
        enc.tokenize("ab", 0)


def test_long_text_truncates_to_prefix():
    enc = ToyTextEncoder(TextConfig.preset("toy"))
    rng = np.random.default_rng(0)
    long_text = "".join(rng.choice(list("abcdefghij klmnop."), size=10_000))
    cfg = enc.cfg
    for max_len in (cfg.max_len_train, cfg.max_len_inference):
        assert torch.equal(enc.tokenize(long_text, max_len), enc.tokenize(long_text[:max_len], max_len))
        assert torch.equal(enc.encode(long_text, max_len), enc.encode(long_text[:max_len], max_len))


def test_encoder_batch_shapes():
    enc = ToyTextEncoder(TextConfig.preset("toy"))
    assert enc.encode(["a.", "b.", "c."]).shape == (3, 64)
    assert enc.encode([]).shape == (0, 64)
    assert not enc.bag.weight.requires_grad
    with pytest.raises(ValidationError):
        TextConfig.preset("xl")
