"""
Hierarchical classifier: relevance filter, family net, per-family version nets and the
DCE-RPC refinement for Windows hosts.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from osfp.encoder import FeatureVector, build_dcerpc_schema, encode_dcerpc, encode_dcerpc_many, encode_many, encode_nmap
from osfp.exceptions import DatasetError, SchemaMismatchError
from osfp.labels import FAMILIES
from osfp.neuralnet import TrainConfig, forward, init_weights, predict_many, train
from osfp.reducer import fit_pipeline, transform
from osfp.seed import stage_seed


logger = logging.getLogger(__name__)

RELEVANCE = "relevance"
FAMILY = "family"
DCERPC = "dcerpc"
DEFAULT_VERSION_HIDDEN = 4


@dataclass(frozen=True)
class Stage:
    """One reduction pipeline and perceptron; ``labels`` names the outputs in order."""
    name: str
    pipeline: object
    net: object
    labels: Tuple[str, ...]
    history: Tuple[float, ...] = ()

    def scores(self, fv):
        return forward(self.net, transform(self.pipeline, fv))

    def scores_many(self, X):
        return predict_many(self.net, self.pipeline.transform_many(X))


@dataclass(frozen=True)
class WindowsDecision:
    version: str
    edition: Optional[str]
    service_pack: Optional[str]

    def render(self):
        text = self.version
        if self.edition:
            text += f" {self.edition}"
        if self.service_pack is not None:
            text += f" sp{self.service_pack}"
        return text


@dataclass(frozen=True)
class WindowsLabelGroups:
    """
    Output layout of the DCE-RPC net: one slot per version, then one slot per
    (version, edition), then one slot per (version, service pack).
    """
    versions: Tuple[str, ...]
    editions: Dict[str, Tuple[str, ...]]
    service_packs: Dict[str, Tuple[str, ...]]

    @classmethod
    def from_profile(cls, profile):
        return cls(
            tuple(profile.versions),
            {v: tuple(g["editions"]) for v, g in profile.versions.items()},
            {v: tuple(g["service_packs"]) for v, g in profile.versions.items()},
        )

    def slots(self):
        out = [("version", v, v) for v in self.versions]
        out += [("edition", v, e) for v in self.versions for e in self.editions[v]]
        out += [("service_pack", v, s) for v in self.versions for s in self.service_packs[v]]
        return out

    @property
    def size(self):
        return len(self.slots())

    def target(self, label):
        t = -np.ones(self.size)
        for i, (kind, version, value) in enumerate(self.slots()):
            if version != label.version:
                continue
            if kind == "version" or (kind == "edition" and value == label.edition) or (
                kind == "service_pack" and value == str(label.service_pack)
            ):
                t[i] = 1.0
        return t

    def targets(self, labels):
        return np.vstack([self.target(label) for label in labels])

    def decode(self, outputs):
        """Arg-max the version group, then the chosen version's editions and service packs."""
        slots = self.slots()

        def best(kind, version=None):
            candidates = [
                i for i, (k, v, _) in enumerate(slots) if k == kind and (version is None or v == version)
            ]
            if not candidates:
                return None
            return slots[max(candidates, key=lambda i: (outputs[i], -i))][2]

        version = best("version")
        return WindowsDecision(version, best("edition", version), best("service_pack", version))

    def grouped(self, outputs):
        """Nested {version: {"score", "editions", "service_packs"}} view of the outputs."""
        out = {v: {"score": None, "editions": {}, "service_packs": {}} for v in self.versions}
        for value, (kind, version, name) in zip(outputs, self.slots()):
            if kind == "version":
                out[version]["score"] = float(value)
            elif kind == "edition":
                out[version]["editions"][name] = float(value)
            else:
                out[version]["service_packs"][name] = float(value)
        return out

    def to_dict(self):
        return {
            "versions": list(self.versions),
            "editions": {v: list(e) for v, e in self.editions.items()},
            "service_packs": {v: list(s) for v, s in self.service_packs.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["versions"]),
            {v: tuple(e) for v, e in d["editions"].items()},
            {v: tuple(str(x) for x in s) for v, s in d["service_packs"].items()},
        )


@dataclass(frozen=True)
class DcerpcStage:
    schema: object
    net: object
    groups: WindowsLabelGroups
    history: Tuple[float, ...] = ()

    def scores(self, dump):
        return forward(self.net, encode_dcerpc(dump, self.schema).values)


@dataclass(frozen=True)
class HierarchicalModel:
    schema: object
    relevance: Stage
    family: Stage
    per_family: Dict[str, Stage] = field(default_factory=dict)
    dcerpc: Optional[DcerpcStage] = None
    threshold: float = 0.0
    refine_with_dcerpc: Tuple[str, ...] = ("Windows",)

    def stages(self):
        """(name, Stage) for every Nmap classifier, in classification order."""
        out = [(RELEVANCE, self.relevance), (FAMILY, self.family)]
        out += [(family, self.per_family[family]) for family in FAMILIES if family in self.per_family]
        return out


@dataclass
class ClassificationReport:
    relevance_score: float
    relevant: bool
    family_scores: Optional[Dict[str, float]] = None
    family: Optional[str] = None
    version_scores: Optional[Dict[str, float]] = None
    version: Optional[str] = None
    windows_scores: Optional[dict] = None
    windows: Optional[WindowsDecision] = None

    @property
    def label(self):
        if not self.relevant:
            return "not relevant"
        if self.windows is not None:
            return self.windows.render()
        return self.version or self.family

    @property
    def edition(self):
        return self.windows.edition if self.windows is not None else None

    def to_dict(self):
        return {
            "relevance": {"score": self.relevance_score, "relevant": self.relevant},
            "family": None if self.family_scores is None else {"scores": self.family_scores, "chosen": self.family},
            "version": None if self.version_scores is None else {"scores": self.version_scores, "chosen": self.version},
            "windows": None if self.windows is None else {
                "scores": self.windows_scores,
                "version": self.windows.version,
                "edition": self.windows.edition,
                "service_pack": self.windows.service_pack,
            },
            "label": self.label,
        }

    def render_text(self):
        lines = ["Relevant / not relevant analysis"]
        lines.append(f"    {self.relevance_score:<24.17f} {'relevant' if self.relevant else 'not relevant'}")
        if self.family_scores is not None:
            lines += ["", "Operating System analysis"]
            lines += [f"    {score:<24.17f} {name}" for name, score in self.family_scores.items()]
        if self.version_scores is not None:
            lines += ["", f"{self.family} version analysis"]
            ranked = sorted(self.version_scores.items(), key=lambda kv: -kv[1])
            lines += [f"    {score:<24.17f} {name}" for name, score in ranked]
        if self.windows is not None:
            lines += ["", "Neural Network Output (close to 1 is better):"]
            for version, group in self.windows_scores.items():
                lines.append(f"{version}: {group['score']:.12g}")
                lines.append("Editions:")
                lines += [f"    {name}: {score:.12g}" for name, score in group["editions"].items()]
                lines.append("Service Packs:")
                lines += [f"    {name}: {score:.12g}" for name, score in group["service_packs"].items()]
        if self.relevant:
            lines.append(f"Setting OS to {self.label}")
        return "\n".join(lines)


def _signed_targets(labels, classes):
    T = -np.ones((len(labels), len(classes)))
    index = {c: i for i, c in enumerate(classes)}
    for row, label in enumerate(labels):
        T[row, index[label]] = 1.0
    return T


def _fit_stage(name, X, T, labels, hidden, schema_hash, reduction, training, seed, optional=False, progress=False):
    try:
        pipeline = fit_pipeline(
            X, schema_hash, reduction["retention"], reduction["dependence_threshold"], name=name
        )
    except DatasetError as err:
        if optional:
            logger.warning(f"Skipping {name} net: {err}")
            return None
        raise
    s = stage_seed(seed, name)
    config = TrainConfig.from_dict(training, seed=s)
    net = init_weights((pipeline.k, hidden, T.shape[1]), config.weight_init_scale, s)
    result = train(net, pipeline.transform_many(X), T, config, name=name, progress=progress)
    return Stage(name, pipeline, result.net, tuple(labels), tuple(result.error_history))


def _fit_dcerpc_stage(samples, groups, hidden, training, seed, min_count=2, progress=False):
    dumps = [dump for dump, _ in samples]
    schema = build_dcerpc_schema(dumps, min_count)
    X = encode_dcerpc_many(dumps, schema)
    T = groups.targets([label for _, label in samples])
    s = stage_seed(seed, DCERPC)
    config = TrainConfig.from_dict(training, seed=s)
    net = init_weights((schema.dimension, hidden, groups.size), config.weight_init_scale, s)
    result = train(net, X, T, config, name=DCERPC, progress=progress)
    return DcerpcStage(schema, result.net, groups, tuple(result.error_history))


def _version_labels(family, observations, label_rules):
    present = {o.labels.version for o in observations if o.labels.version}
    ordered = [v for v in label_rules.versions(family) if v in present]
    return ordered + sorted(present - set(ordered))


def train_hierarchy(observations, schema, label_rules, conf, dcerpc_samples=None, dcerpc_groups=None, progress=False):
    """
    Fit every classifier of the hierarchy on its own subset of a labeled dataset.

    Args:
        observations: labeled Observations
        schema: Nmap EncodingSchema
        label_rules: LabelRuleSet, used to order version labels
        conf: run configuration (see osfp.config.DEFAULTS)
        dcerpc_samples: optional list of (EndpointDump, WindowsLabel) for the Windows refinement net
        dcerpc_groups: WindowsLabelGroups matching ``dcerpc_samples``
    Returns:
        HierarchicalModel
    """
    if not observations:
        raise DatasetError("training set is empty")
    if any(o.labels is None for o in observations):
        raise DatasetError("training set contains unlabeled observations")
    X = encode_many(observations, schema)
    relevant = np.array([o.labels.relevant for o in observations])
    if not relevant.any():
        raise DatasetError("training set has no relevant observations")
    topologies = conf["topologies"]
    refine = tuple(conf.get("refine_with_dcerpc") or ())
    common = dict(
        schema_hash=schema.hash,
        reduction=conf["reduction"],
        training=conf["training"],
        seed=conf["seed"],
        progress=progress,
    )
    jobs = [
        dict(
            name=RELEVANCE, X=X, T=np.where(relevant, 1.0, -1.0)[:, None], labels=("relevant",),
            hidden=topologies[RELEVANCE], **common,
        )
    ]
    rel_obs = [o for o in observations if o.labels.relevant]
    jobs.append(
        dict(
            name=FAMILY, X=X[relevant], T=_signed_targets([o.labels.family for o in rel_obs], FAMILIES),
            labels=FAMILIES, hidden=topologies[FAMILY], **common,
        )
    )
    for family in FAMILIES:
        if family in refine:
            continue
        rows = [i for i, o in enumerate(observations) if o.labels.relevant and o.labels.family == family and o.labels.version]
        subset = [observations[i] for i in rows]
        versions = _version_labels(family, subset, label_rules)
        if len(versions) < 2:
            if subset or any(o.labels.family == family for o in rel_obs):
                logger.warning(f"Skipping {family} version net: {len(versions)} distinct version label(s)")
            continue
        jobs.append(
            dict(
                name=family, X=X[rows], T=_signed_targets([o.labels.version for o in subset], versions),
                labels=tuple(versions),
                hidden=topologies.get(family, DEFAULT_VERSION_HIDDEN),
                optional=True, **common,
            )
        )
    n_jobs = int(conf.get("n_jobs", 1))
    logger.info(f"Training {len(jobs)} Nmap classifiers with n_jobs={n_jobs}")
    if n_jobs == 1:
        stages = [_fit_stage(**job) for job in jobs]
    else:
        stages = Parallel(n_jobs=n_jobs)(delayed(_fit_stage)(**job) for job in jobs)
    per_family = {job["name"]: stage for job, stage in zip(jobs[2:], stages[2:]) if stage is not None}
    dcerpc = None
    if dcerpc_samples:
        if dcerpc_groups is None:
            raise ValueError("dcerpc_groups is required with dcerpc_samples")
        dcerpc = _fit_dcerpc_stage(
            dcerpc_samples,
            dcerpc_groups,
            topologies[DCERPC],
            conf["training"],
            conf["seed"],
            (conf.get("dcerpc") or {}).get("min_count", 2),
            progress,
        )
    return HierarchicalModel(
        schema, stages[0], stages[1], per_family, dcerpc, float(conf["relevance_threshold"]), refine
    )


def _argmax_label(labels, scores):
    return labels[max(range(len(labels)), key=lambda i: (scores[i], -i))]


def classify(model, obs, dump=None):
    """
    Run an observation down the hierarchy. Stops after the relevance stage when the score
    is below the model threshold; per-family nets only run for the chosen family.
    """
    if isinstance(obs, FeatureVector):
        fv = obs
        if fv.schema_hash != model.schema.hash:
            raise SchemaMismatchError(model.schema.hash, fv.schema_hash, "feature vector")
    else:
        fv = encode_nmap(obs, model.schema)
    score = float(model.relevance.scores(fv)[0])
    report = ClassificationReport(score, score >= model.threshold)
    if not report.relevant:
        return report
    family_scores = model.family.scores(fv)
    report.family_scores = {name: float(s) for name, s in zip(model.family.labels, family_scores)}
    report.family = _argmax_label(model.family.labels, family_scores)
    stage = model.per_family.get(report.family)
    if stage is not None:
        version_scores = stage.scores(fv)
        report.version_scores = {name: float(s) for name, s in zip(stage.labels, version_scores)}
        report.version = _argmax_label(stage.labels, version_scores)
    if report.family in model.refine_with_dcerpc and dump is not None and model.dcerpc is not None:
        outputs = model.dcerpc.scores(dump)
        report.windows_scores = model.dcerpc.groups.grouped(outputs)
        report.windows = model.dcerpc.groups.decode(outputs)
        report.version = report.windows.version
    return report


def classify_many(model, observations, dumps=None) -> List[ClassificationReport]:
    dumps = dumps or [None] * len(observations)
    return [classify(model, obs, dump) for obs, dump in zip(observations, dumps)]
