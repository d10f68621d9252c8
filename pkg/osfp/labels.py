import dataclasses
import fnmatch
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import yaml

from osfp.exceptions import LabelConflictError, ParseError
from osfp.signature_db import Labels, SignatureDb


logger = logging.getLogger(__name__)

FAMILIES = ("Windows", "Linux", "Solaris", "OpenBSD", "FreeBSD", "NetBSD")
MATCH_KEYS = ("name", "vendor", "family", "generation", "device_type")


@dataclass(frozen=True)
class LabelRule:
    name: str
    match: Dict[str, str]
    labels: Labels

    def applies_to(self, sig):
        subject = {"name": sig.name, **sig.os_class._asdict()}
        return all(
            fnmatch.fnmatchcase(subject[key].lower(), pattern.lower())
            for key, pattern in self.match.items()
        )


@dataclass(frozen=True)
class LabelRuleSet:
    """
    Ordered rules mapping os_class glob patterns to classification labels.
    See docs/labels.md for the file schema.
    """
    rules: Tuple[LabelRule, ...] = ()
    source: str = field(default="", compare=False)

    @classmethod
    def from_dict(cls, conf, source=""):
        rules = []
        for i, entry in enumerate((conf or {}).get("rules", []) or []):
            name = entry.get("name", f"rule-{i}")
            match = {str(k): str(v) for k, v in (entry.get("match") or {}).items()}
            unknown = set(match) - set(MATCH_KEYS)
            if unknown:
                raise ParseError(f"rule {name!r} matches on unknown keys {sorted(unknown)}")
            labels = Labels.from_dict(entry.get("labels") or {})
            if labels.relevant and labels.family not in FAMILIES:
                raise ParseError(
                    f"rule {name!r} marks family {labels.family!r} relevant; expected one of {FAMILIES}"
                )
            rules.append(LabelRule(name, match, labels))
        return cls(tuple(rules), source)

    @classmethod
    def load(cls, path):
        with open(path) as fid:
            text = fid.read()
        return cls.from_dict(yaml.safe_load(text), source=text)

    @property
    def content_hash(self):
        text = yaml.safe_dump(
            [{"name": r.name, "match": r.match, "labels": r.labels.to_dict()} for r in self.rules],
            sort_keys=True,
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def versions(self, family):
        """Version labels declared for a family, in rule order."""
        out = []
        for r in self.rules:
            if r.labels.relevant and r.labels.family == family and r.labels.version:
                if r.labels.version not in out:
                    out.append(r.labels.version)
        return out


def derive_labels(sig, label_rules):
    """
    Fill a signature's labels from the first matching rule.

    Raises:
        LabelConflictError: two matching rules assign different labels
    """
    chosen = None
    for rule in label_rules.rules:
        if not rule.applies_to(sig):
            continue
        if chosen is None:
            chosen = rule
        elif rule.labels != chosen.labels:
            raise LabelConflictError(sig.name, chosen.name, rule.name)
    labels = chosen.labels if chosen is not None else Labels()
    if labels.family not in FAMILIES:
        labels = dataclasses.replace(labels, relevant=False)
    return dataclasses.replace(sig, labels=labels)


def label_database(db, label_rules):
    labeled = SignatureDb(tuple(derive_labels(s, label_rules) for s in db), db.report)
    n_relevant = sum(s.labels.relevant for s in labeled)
    logger.info(f"{n_relevant} of {len(labeled)} signatures are relevant")
    return labeled


def family_histogram(db):
    counts: Dict[str, int] = {}
    for sig in db:
        key = sig.labels.family if sig.labels.relevant else "not relevant"
        counts[key] = counts.get(key, 0) + 1
    return counts


def relevant_signatures(db) -> List:
    return [s for s in db if s.labels.relevant]
