import os

import pytest

from osfp.config import load_config
from osfp.encoder import build_nmap_schema
from osfp.hierarchy import WindowsLabelGroups, train_hierarchy
from osfp.labels import LabelRuleSet, label_database
from osfp.signature_db import load_nmap_db
from osfp.synth import DcerpcProfile, generate_dataset, generate_dcerpc_dataset, uniform_weights

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DB_PATH = os.path.join(ROOT, "data", "nmap-os-fingerprints-mini")
LABELS_PATH = os.path.join(ROOT, "config", "labels.yml")
CONFIG_PATH = os.path.join(ROOT, "config", "osfp.yml")
PROFILE_PATH = os.path.join(ROOT, "data", "dcerpc", "profiles.yml")
DUMP_PATH = os.path.join(ROOT, "data", "dcerpc", "win2000_pro_sp0.txt")
SOLARIS8_PATH = os.path.join(ROOT, "data", "observations", "solaris8.txt")
DECOY_PATH = os.path.join(ROOT, "data", "observations", "openbsd_window_4001.txt")

SMALL_TRAINING = {
    "max_generations": 150,
    "target_error": 0.002,
    "lambda_init": 0.001,
    "lambda_max": 0.01,
}


@pytest.fixture(scope="session")
def label_rules():
    return LabelRuleSet.load(LABELS_PATH)


@pytest.fixture(scope="session")
def labeled_db(label_rules):
    return label_database(load_nmap_db(DB_PATH), label_rules)


@pytest.fixture(scope="session")
def profile():
    return DcerpcProfile.load(PROFILE_PATH)


@pytest.fixture(scope="session")
def small_conf():
    return load_config(CONFIG_PATH, {"training": SMALL_TRAINING, "dcerpc": {"total": 600}})


@pytest.fixture(scope="session")
def dataset(labeled_db, small_conf):
    weights = uniform_weights(labeled_db, small_conf["synth"]["irrelevant_fraction"])
    return generate_dataset(labeled_db, weights, 3000, small_conf["seed"])


@pytest.fixture(scope="session")
def test_set(labeled_db, small_conf):
    weights = uniform_weights(labeled_db, small_conf["synth"]["irrelevant_fraction"])
    return generate_dataset(labeled_db, weights, 600, small_conf["seed"] + 1)


@pytest.fixture(scope="session")
def trained_model(dataset, label_rules, profile, small_conf):
    """Hierarchy trained once per session on the shipped database with a short schedule."""
    samples = generate_dcerpc_dataset(profile, small_conf["dcerpc"]["total"], small_conf["seed"])
    return train_hierarchy(
        dataset,
        build_nmap_schema(),
        label_rules,
        small_conf,
        samples,
        WindowsLabelGroups.from_profile(profile),
    )
