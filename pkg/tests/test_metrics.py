import pytest

from osfp.exceptions import DatasetError
from osfp.hierarchy import WindowsDecision
from osfp.metrics import (
    CATEGORIES,
    DCERPC_CATEGORIES,
    Prediction,
    dcerpc_category,
    evaluate,
    evaluate_dcerpc,
    match_category,
)
from osfp.signature_db import EndpointDump, Labels
from osfp.synth import WindowsLabel, generate_dcerpc_dataset

WIN2K = Labels(True, "Windows", "Windows 2000", "Professional", "0")
LINUX = Labels(True, "Linux", "Linux 2.4")


def test_match_category():
    assert match_category(WIN2K, Prediction("Windows", "Windows 2000", "Professional")) == "version_and_edition"
    assert match_category(WIN2K, Prediction("Windows", "Windows 2000", "Server")) == "version"
    assert match_category(WIN2K, Prediction("Windows", "Windows XP", "Professional")) == "family_only"
    assert match_category(WIN2K, Prediction("Windows")) == "partial"
    assert match_category(WIN2K, Prediction("Linux", "Linux 2.4")) == "mismatch"
    assert match_category(WIN2K, None) == "no_answer"
    assert match_category(LINUX, Prediction("Linux", "Linux 2.4")) == "version", "No edition to compare"
    assert match_category(Labels(False), Prediction("Linux")) == "mismatch", "Irrelevant host given a family"


def test_evaluate(trained_model, labeled_db, test_set):
    table = evaluate(trained_model, labeled_db, test_set[:120])
    assert list(table.index) == list(CATEGORIES), "One row per category"
    assert list(table.columns) == ["classic", "neural"], "One column per method"
    assert (table.sum() == 120).all(), "Every observation lands in exactly one category"
    with pytest.raises(DatasetError):
        evaluate(trained_model, labeled_db, [])


def test_dcerpc_category():
    truth = WindowsLabel("Windows 2000", "Server", "3")
    assert dcerpc_category(truth, WindowsLabel("Windows 2000", "Server", "3")) == "perfect"
    assert dcerpc_category(truth, WindowsDecision("Windows 2000", "Server", "4")) == "partial"
    assert dcerpc_category(truth, WindowsDecision("Windows 2000", None, None)) == "partial", "Version only"
    assert dcerpc_category(truth, WindowsLabel("Windows XP", "Professional", "1")) == "mismatch"
    assert dcerpc_category(truth, None) == "no_answer"


def test_evaluate_dcerpc(trained_model, profile):
    samples = generate_dcerpc_dataset(profile, 56, 4)
    samples = samples + [(None, samples[0][1]), (EndpointDump(()), samples[1][1])]
    table = evaluate_dcerpc(trained_model, profile, samples)
    assert list(table.index) == list(DCERPC_CATEGORIES), "One row per category"
    assert (table.sum() == len(samples)).all(), "Every listing lands in exactly one category"
    assert (table.loc["no_answer"] >= 2).all(), "Missing listings get no answer from either method"
    assert table.loc["perfect", "classic"] > table.loc["mismatch", "classic"], "Best fit mostly recognizes noisy listings"
    with pytest.raises(DatasetError):
        evaluate_dcerpc(trained_model, profile, [])
