import dataclasses

import numpy as np
import pytest
from sklearn.model_selection import train_test_split

from osfp.baselines import best_fit_baseline
from osfp.config import load_config
from osfp.encoder import build_nmap_schema, encode_nmap
from osfp.exceptions import DatasetError, SchemaMismatchError
from osfp.hierarchy import WindowsLabelGroups, classify, train_hierarchy
from osfp.metrics import stage_accuracy
from osfp.signature_db import Endpoint, EndpointDump, Program
from osfp.synth import (
    WindowsLabel,
    generate_dataset,
    load_observation,
    reference_dump,
    sample_observation,
    uniform_weights,
)

from conftest import CONFIG_PATH, DECOY_PATH, SOLARIS8_PATH


def test_label_groups(profile):
    groups = WindowsLabelGroups.from_profile(profile)
    assert groups.size == 4 + 10 + 11, "Versions, editions and service packs"
    label = WindowsLabel("Windows 2000", "Professional", "0")
    target = groups.target(label)
    assert (target == 1).sum() == 3, "Version, edition and service pack slots are on"
    decision = groups.decode(target)
    assert (decision.version, decision.edition, decision.service_pack) == ("Windows 2000", "Professional", "0"), \
        "Decoding a target gives its label back"
    assert WindowsLabelGroups.from_dict(groups.to_dict()) == groups, "Groups survive serialization"


def test_model_layout(trained_model):
    names = [name for name, _ in trained_model.stages()]
    assert names[:2] == ["relevance", "family"], "Relevance and family nets come first"
    assert "Windows" not in trained_model.per_family, "Windows versions come from the DCE-RPC net"
    for family in ("Linux", "Solaris", "OpenBSD", "FreeBSD", "NetBSD"):
        assert family in trained_model.per_family, f"{family} version net missing"
    assert trained_model.family.labels == ("Windows", "Linux", "Solaris", "OpenBSD", "FreeBSD", "NetBSD"), \
        "Family outputs in fixed order"


def test_solaris8(trained_model):
    report = classify(trained_model, load_observation(SOLARIS8_PATH))
    assert report.relevant, "Solaris 8 is relevant"
    assert report.family == "Solaris", f"Expected Solaris, got {report.family}"
    others = [s for name, s in report.family_scores.items() if name != "Solaris"]
    assert max(others) < report.family_scores["Solaris"], "Solaris has the highest family score"
    assert report.version == "Solaris 8", f"Expected Solaris 8, got {report.version}"
    assert "Setting OS to Solaris 8" in report.render_text(), "Text report names the decision"


def test_decoy_fools_best_fit_only(trained_model, labeled_db):
    obs = load_observation(DECOY_PATH)
    top = best_fit_baseline(labeled_db, obs)[0]
    assert top.name == "Foundry FastIron Edge Switch (load balancer)" and top.score == 1.0, \
        "Best-fit matching picks the two-rule signature"
    report = classify(trained_model, obs)
    assert report.relevant and report.family == "OpenBSD", "The classifier still sees OpenBSD"


def test_constant_tests_carry_no_information(trained_model):
    schema = trained_model.schema
    stage = trained_model.per_family["OpenBSD"]
    tests = {schema.slot_field(i)[0] for i in stage.pipeline.kept_columns}
    assert "T5" not in tests, "T5 is identical across OpenBSD signatures"


def test_holdout_accuracy(trained_model, test_set):
    accuracy = stage_accuracy(trained_model, test_set)
    assert accuracy["relevance"][0] >= 0.95, f"Relevance accuracy {accuracy['relevance']}"
    assert accuracy["family"][0] >= 0.95, f"Family accuracy {accuracy['family']}"


def test_dcerpc_refinement(trained_model, labeled_db, profile):
    obs = sample_observation(labeled_db.by_name("Microsoft Windows 2000 Professional SP0"), np.random.default_rng(0))
    dump = reference_dump(profile, WindowsLabel("Windows 2000", "Professional", "0"))
    first = dump.programs[0]
    noisy = EndpointDump(
        (Program(first.uuid, first.annotation, first.endpoints + (Endpoint("ncacn_ip_tcp", "1031"),)),)
        + dump.programs[1:]
    )
    report = classify(trained_model, obs, noisy)
    assert report.family == "Windows", "Windows host"
    assert report.windows.version == "Windows 2000" and report.version == "Windows 2000", "DCE-RPC decides the version"
    assert report.to_dict()["windows"]["version"] == "Windows 2000", "JSON document carries the decision"
    without = classify(trained_model, obs)
    assert without.windows is None and without.version is None, "No dump, no Windows version"


def test_irrelevant_stops_early(trained_model, dataset):
    strict = dataclasses.replace(trained_model, threshold=2.0)
    report = classify(strict, dataset[0])
    assert not report.relevant and report.family_scores is None, "Nothing runs after a rejection"
    assert report.label == "not relevant", "Label of a rejected observation"


def test_schema_checks(trained_model):
    fv = encode_nmap(load_observation(SOLARIS8_PATH), build_nmap_schema())
    assert classify(trained_model, fv).family == "Solaris", "Feature vectors are accepted"
    with pytest.raises(SchemaMismatchError):
        classify(trained_model, dataclasses.replace(fv, schema_hash="0" * 64))


def test_training_input_checks(label_rules, small_conf):
    with pytest.raises(DatasetError):
        train_hierarchy([], build_nmap_schema(), label_rules, small_conf)


def test_dcerpc_tolerates_a_missing_endpoint(trained_model, profile):
    labels = profile.labels()
    rng = np.random.default_rng(2024)
    groups = trained_model.dcerpc.groups
    stable = 0
    for _ in range(200):
        dump = reference_dump(profile, labels[int(rng.integers(len(labels)))])
        programs = [p for p in dump.programs if p.endpoints]
        i = int(rng.integers(len(programs)))
        j = int(rng.integers(len(programs[i].endpoints)))
        endpoints = programs[i].endpoints[:j] + programs[i].endpoints[j + 1:]
        shorter = EndpointDump(tuple(
            Program(p.uuid, p.annotation, endpoints) if p is programs[i] else p for p in dump.programs
        ))
        before = groups.decode(trained_model.dcerpc.scores(dump)).version
        after = groups.decode(trained_model.dcerpc.scores(shorter)).version
        stable += before == after
    assert stable >= 190, f"Version changed in {200 - stable} of 200 trials"


def test_default_config_holdout_accuracy(labeled_db, label_rules):
    conf = load_config(CONFIG_PATH)
    weights = uniform_weights(labeled_db, conf["synth"]["irrelevant_fraction"])
    observations = generate_dataset(labeled_db, weights, conf["synth"]["total"], conf["seed"])
    assert len(observations) == 6000, "Default dataset size"
    train_set, holdout = train_test_split(observations, test_size=conf["holdout"], random_state=conf["seed"], shuffle=True)
    model = train_hierarchy(train_set, build_nmap_schema(), label_rules, conf)
    accuracy = stage_accuracy(model, holdout)
    assert accuracy["relevance"][0] >= 0.98, f"Relevance accuracy {accuracy['relevance']}"
    assert accuracy["family"][0] >= 0.95, f"Family accuracy {accuracy['family']}"
