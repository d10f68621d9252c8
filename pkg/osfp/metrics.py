"""
Comparison of the neural hierarchy against the best-fit baseline, and per-stage accuracies.
Match categories are defined in docs/evaluation.md.
"""
import logging
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score

from osfp.baselines import BestFitClassifier, BestFitListingClassifier
from osfp.encoder import encode_many
from osfp.exceptions import DatasetError
from osfp.hierarchy import classify_many


logger = logging.getLogger(__name__)

CATEGORIES = ("version_and_edition", "version", "partial", "family_only", "mismatch", "no_answer")
DCERPC_CATEGORIES = ("perfect", "partial", "mismatch", "no_answer")
METHODS = ("classic", "neural")


class Prediction(NamedTuple):
    family: Optional[str] = None
    version: Optional[str] = None
    edition: Optional[str] = None


def match_category(truth, prediction):
    """
    Args:
        truth: Labels of the observation
        prediction: Prediction, or None when the method gave no relevant answer
    """
    if prediction is None or prediction.family is None:
        return "no_answer"
    if not truth.relevant or prediction.family != truth.family:
        return "mismatch"
    if truth.version is None or prediction.version is None:
        return "partial"
    if prediction.version != truth.version:
        return "family_only"
    if truth.edition is not None and prediction.edition == truth.edition:
        return "version_and_edition"
    return "version"


def _from_labels(labels):
    if labels is None or not labels.relevant:
        return None
    return Prediction(labels.family, labels.version, labels.edition)


def _from_report(report):
    if not report.relevant:
        return None
    return Prediction(report.family, report.version, report.edition)


def evaluate(model, db, observations, dumps=None, n_jobs=1):
    """
    Count match categories for the best-fit baseline and the neural hierarchy.

    Args:
        model: HierarchicalModel
        db: labeled SignatureDb for the baseline
        observations: labeled test observations
        dumps: optional endpoint dumps parallel to ``observations`` (None entries allowed)
    Returns:
        pandas DataFrame indexed by category with one column per method
    """
    if not observations:
        raise DatasetError("test set is empty")
    if any(o.labels is None for o in observations):
        raise DatasetError("test set contains unlabeled observations")
    dumps = dumps or [None] * len(observations)
    table = pd.DataFrame(0, index=list(CATEGORIES), columns=list(METHODS))
    classic = BestFitClassifier(db, n_jobs=n_jobs).predict(observations)
    neural = classify_many(model, observations, dumps)
    for obs, labels, report in zip(observations, classic, neural):
        table.loc[match_category(obs.labels, _from_labels(labels)), "classic"] += 1
        table.loc[match_category(obs.labels, _from_report(report)), "neural"] += 1
    table.index.name = "result"
    logger.info(f"Evaluated {len(observations)} observations")
    return table


def dcerpc_category(truth, decision):
    """
    Args:
        truth: WindowsLabel of the host
        decision: WindowsLabel or WindowsDecision, or None when the method gave no answer
    """
    if decision is None or decision.version is None:
        return "no_answer"
    if decision.version != truth.version:
        return "mismatch"
    if decision.edition == truth.edition and str(decision.service_pack) == str(truth.service_pack):
        return "perfect"
    return "partial"


def evaluate_dcerpc(model, profile, samples):
    """
    Count perfect, partial, mismatch and no-answer results of the best-fit listing matcher
    and of the DCE-RPC net.

    Args:
        model: HierarchicalModel with a DCE-RPC stage
        profile: DcerpcProfile the reference listings come from
        samples: list of (EndpointDump or None, WindowsLabel)
    Returns:
        pandas DataFrame indexed by category with one column per method
    """
    if not samples:
        raise DatasetError("DCE-RPC test set is empty")
    if model.dcerpc is None:
        raise DatasetError("model has no DCE-RPC stage")
    dumps = [dump for dump, _ in samples]
    classic = BestFitListingClassifier(profile).fit().predict(dumps)
    table = pd.DataFrame(0, index=list(DCERPC_CATEGORIES), columns=list(METHODS))
    for (dump, truth), answer in zip(samples, classic):
        table.loc[dcerpc_category(truth, answer), "classic"] += 1
        decision = None
        if dump is not None and dump.programs:
            decision = model.dcerpc.groups.decode(model.dcerpc.scores(dump))
        table.loc[dcerpc_category(truth, decision), "neural"] += 1
    table.index.name = "result"
    logger.info(f"Evaluated {len(samples)} endpoint listings")
    return table


def stage_accuracy(model, observations):
    """
    Accuracy of the relevance net on every observation and of each later net on the
    observations it is responsible for.

    Returns:
        dict of stage name -> (accuracy, sample count)
    """
    if not observations:
        raise DatasetError("test set is empty")
    X = encode_many(observations, model.schema)
    relevant = np.array([o.labels.relevant for o in observations])
    predicted = model.relevance.scores_many(X)[:, 0] >= model.threshold
    out = {"relevance": (accuracy_score(relevant, predicted), len(observations))}
    if relevant.any():
        truth = [o.labels.family for o, r in zip(observations, relevant) if r]
        scores = model.family.scores_many(X[relevant])
        out["family"] = (accuracy_score(truth, [model.family.labels[i] for i in scores.argmax(axis=1)]), len(truth))
    for family, stage in model.per_family.items():
        rows = [
            i for i, o in enumerate(observations)
            if o.labels.relevant and o.labels.family == family and o.labels.version in stage.labels
        ]
        if not rows:
            continue
        scores = stage.scores_many(X[rows])
        predicted = [stage.labels[i] for i in scores.argmax(axis=1)]
        out[family] = (accuracy_score([observations[i].labels.version for i in rows], predicted), len(rows))
    return out
