import pytest

from osfp.exceptions import LabelConflictError, ParseError
from osfp.labels import LabelRuleSet, derive_labels, family_histogram, label_database
from osfp.signature_db import load_nmap_db

from conftest import DB_PATH


def test_shipped_labels(labeled_db):
    linux = labeled_db.by_name("Linux 2.6.3 - 2.6.10")
    assert linux.labels.relevant, "Linux 2.6 should be relevant"
    assert linux.labels.family == "Linux" and linux.labels.version == "Linux 2.6", "Wrong Linux labels"
    foundry = labeled_db.by_name("Foundry FastIron Edge Switch (load balancer)")
    assert not foundry.labels.relevant, "Foundry switch should not be relevant"
    windows = labeled_db.by_name("Microsoft Windows 2000 Professional SP0")
    assert windows.labels.version == "Windows 2000", "Windows version not labeled"
    assert windows.labels.edition == "Professional" and windows.labels.service_pack == "0", "Windows edition"
    openbsd = labeled_db.by_name("OpenBSD 2.2 - 2.3")
    assert openbsd.labels.version == "OpenBSD 2.0 - 2.3", "Name glob should select the early OpenBSD group"


def test_every_family_is_present(labeled_db):
    histogram = family_histogram(labeled_db)
    for family in ("Windows", "Linux", "Solaris", "OpenBSD", "FreeBSD", "NetBSD"):
        assert histogram.get(family, 0) >= 5, f"Too few {family} signatures"
    assert histogram["not relevant"] == 12, "Twelve signatures lie outside the six families"


def test_empty_rule_set():
    db = label_database(load_nmap_db(DB_PATH), LabelRuleSet())
    assert not any(s.labels.relevant for s in db), "No rules means nothing is relevant"


def test_conflicting_rules():
    rules = LabelRuleSet.from_dict(
        {
            "rules": [
                {"name": "a", "match": {"family": "Linux"}, "labels": {"relevant": True, "family": "Linux", "version": "A"}},
                {"name": "b", "match": {"generation": "2.6.X"}, "labels": {"relevant": True, "family": "Linux", "version": "B"}},
            ]
        }
    )
    sig = load_nmap_db(DB_PATH).by_name("Linux 2.6.3 - 2.6.10")
    with pytest.raises(LabelConflictError) as err:
        derive_labels(sig, rules)
    assert err.value.rules == ("a", "b"), "Both rule names should be reported"


def test_agreeing_rules_are_fine():
    labels = {"relevant": True, "family": "Linux", "version": "Linux 2.6"}
    rules = LabelRuleSet.from_dict(
        {"rules": [{"match": {"family": "linux"}, "labels": labels}, {"match": {"generation": "2.6.*"}, "labels": labels}]}
    )
    sig = derive_labels(load_nmap_db(DB_PATH).by_name("Linux 2.6.3 - 2.6.10"), rules)
    assert sig.labels.version == "Linux 2.6", "Agreeing rules should label the signature"


def test_rule_validation():
    with pytest.raises(ParseError):
        LabelRuleSet.from_dict({"rules": [{"match": {"colour": "red"}, "labels": {}}]})
    with pytest.raises(ParseError):
        LabelRuleSet.from_dict({"rules": [{"match": {"family": "AIX"}, "labels": {"relevant": True, "family": "AIX"}}]})


def test_versions_in_rule_order(label_rules):
    assert label_rules.versions("OpenBSD") == ["OpenBSD 2.0 - 2.3", "OpenBSD 2.4 - 2.9", "OpenBSD 3.X"], \
        "OpenBSD versions out of order"
