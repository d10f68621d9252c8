"""
Classic best-fit matching: score every signature by matching rules over considered rules,
and every DCE-RPC reference listing by shared items over the items either listing carries.
"""
from typing import List, NamedTuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from osfp.signature_db import RESPONSE_NO, RESPONSE_YES
from osfp.synth import WindowsLabel, reference_dump


class ScoredSignature(NamedTuple):
    score: float
    name: str
    index: int
    matched: int
    considered: int


def rule_counts(sig, obs):
    """
    (matched, considered) for one signature. Tests the observation does not contain are
    skipped; ``Resp`` counts as one rule and every field constraint as another.
    """
    matched = considered = 0
    for rule in sig.rules:
        if obs.is_missing(rule.test_id):
            continue
        if rule.expects_response == RESPONSE_NO:
            considered += 1
            matched += not obs.responded(rule.test_id)
            continue
        n_rules = len(rule.constraints) + (rule.expects_response == RESPONSE_YES)
        considered += n_rules
        if not obs.responded(rule.test_id):
            continue
        matched += rule.expects_response == RESPONSE_YES
        matched += sum(c.contains(obs.value(rule.test_id, name)) for name, c in rule.constraints.items())
    return matched, considered


def best_fit_baseline(db, obs) -> List[ScoredSignature]:
    """
    Score every signature against an observation.

    Returns:
        ScoredSignature list sorted by descending score, ties in database order
    """
    scored = []
    for i, sig in enumerate(db):
        matched, considered = rule_counts(sig, obs)
        score = matched / considered if considered else 0.0
        scored.append(ScoredSignature(score, sig.name, i, matched, considered))
    return sorted(scored, key=lambda s: (-s.score, s.index))


class BestFitClassifier(BaseEstimator):
    """
    Scikit-learn formatted best-fit classifier over a labeled signature database.
    ``predict`` returns the labels of the top signature, or None when nothing matched.
    """
    def __init__(self, db=None, n_jobs=1, verbose=0):
        self.db = db
        self.n_jobs = n_jobs
        self.verbose = verbose

    def fit(self, x=None, y=None):
        return self

    def predict_scores(self, observations):
        if self.n_jobs == 1:
            return [best_fit_baseline(self.db, obs) for obs in observations]
        return Parallel(n_jobs=self.n_jobs, verbose=self.verbose)(
            delayed(best_fit_baseline)(self.db, obs) for obs in observations
        )

    def predict(self, observations):
        predictions = []
        for scored in self.predict_scores(observations):
            if not scored or scored[0].score <= 0:
                predictions.append(None)
            else:
                predictions.append(self.db.signatures[scored[0].index].labels)
        return predictions

    def score_matrix(self, observations):
        """Scores in database order, one row per observation."""
        out = np.zeros((len(observations), len(self.db)))
        for row, scored in enumerate(self.predict_scores(observations)):
            for s in scored:
                out[row, s.index] = s.score
        return out


class ScoredListing(NamedTuple):
    score: float
    label: WindowsLabel
    index: int
    matched: int
    considered: int


def listing_items(dump):
    """UUIDs plus (uuid, protocol, endpoint) triples of an endpoint listing."""
    items = set(dump.uuids())
    items.update((p.uuid, ep.protocol, ep.endpoint) for p in dump.programs for ep in p.endpoints)
    return items


def reference_items(profile):
    return [(label, listing_items(reference_dump(profile, label))) for label in profile.labels()]


def dcerpc_best_fit(profile, dump, references=None) -> List[ScoredListing]:
    """
    Score every label of a DCE-RPC profile against an endpoint listing. An item counts as
    matched when both listings carry it and as considered when either does.

    Returns:
        ScoredListing list sorted by descending score, ties in profile order
    """
    references = references if references is not None else reference_items(profile)
    host = listing_items(dump)
    scored = []
    for i, (label, items) in enumerate(references):
        matched, considered = len(host & items), len(host | items)
        scored.append(ScoredListing(matched / considered if considered else 0.0, label, i, matched, considered))
    return sorted(scored, key=lambda s: (-s.score, s.index))


class BestFitListingClassifier(BaseEstimator):
    """
    Best-fit matcher for endpoint listings. ``predict`` returns the WindowsLabel of the
    closest reference listing, or None for a missing or empty listing.
    """
    def __init__(self, profile=None):
        self.profile = profile

    def fit(self, x=None, y=None):
        self.references_ = reference_items(self.profile)
        return self

    def predict(self, dumps):
        if not hasattr(self, "references_"):
            self.fit()
        predictions = []
        for dump in dumps:
            if dump is None or not dump.programs:
                predictions.append(None)
                continue
            scored = dcerpc_best_fit(self.profile, dump, self.references_)
            predictions.append(scored[0].label if scored and scored[0].score > 0 else None)
        return predictions
