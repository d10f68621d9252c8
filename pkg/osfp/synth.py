"""
Monte Carlo synthesis of labeled observations from fingerprint signatures and of
DCE-RPC endpoint listings from a version profile.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml
from joblib import Parallel, delayed

from osfp.exceptions import DatasetError, ParseError
from osfp.labels import relevant_signatures
from osfp.seed import shuffle_rng, spawn_generators
from osfp.signature_db import (
    NUMERIC_FIELDS,
    RESPONSE_NO,
    TESTS,
    Endpoint,
    EndpointDump,
    Labels,
    Program,
    _iter_lines,
    normalize_uuid,
    parse_test_line,
)


logger = logging.getLogger(__name__)

GENERATOR_VERSION = "osfp-synth/1"


@dataclass(frozen=True)
class Observation:
    """
    Concrete host responses. ``responses`` maps a test id to a field -> value dict,
    or to None when the host did not answer. Tests absent from the mapping are missing.
    """
    responses: Dict[str, Optional[Dict[str, object]]] = field(default_factory=dict)
    labels: Optional[Labels] = None
    signature: Optional[str] = None

    def is_missing(self, test_id):
        return test_id not in self.responses

    def responded(self, test_id):
        return self.responses.get(test_id) is not None

    def value(self, test_id, name):
        fields = self.responses.get(test_id)
        return None if fields is None else fields.get(name)

    def to_record(self):
        record = {
            "tests": {t: self.responses[t] for t in TESTS if t in self.responses},
        }
        if self.signature is not None:
            record["signature"] = self.signature
        if self.labels is not None:
            record["labels"] = self.labels.to_dict()
        return record

    @classmethod
    def from_record(cls, record):
        labels = record.get("labels")
        return cls(
            {t: record["tests"][t] for t in TESTS if t in record["tests"]},
            Labels.from_dict(labels) if labels is not None else None,
            record.get("signature"),
        )


def parse_observation(text):
    """
    Read an observation file: the signature test grammar with one concrete value per field.
    ``Resp=N`` records a test that got no answer.
    """
    responses = {}
    for number, line in _iter_lines(text):
        rule = parse_test_line(line, number)
        if rule.test_id in responses:
            raise ParseError(f"duplicate {rule.test_id} response", line=number, token=line)
        if rule.expects_response == RESPONSE_NO:
            responses[rule.test_id] = None
            continue
        fields = {}
        for name, constraint in rule.constraints.items():
            if constraint.kind != "exact":
                raise ParseError(
                    f"observation values must be concrete, got {constraint.kind} for {name}",
                    line=number,
                    token=line,
                )
            fields[name] = constraint.values[0]
        responses[rule.test_id] = fields
    return Observation(responses)


def load_observation(path):
    with open(path, encoding="utf-8") as fid:
        return parse_observation(fid.read())


def sample_value(constraint, rng):
    if constraint.kind == "exact":
        return constraint.values[0]
    if constraint.kind == "choice":
        return constraint.values[int(rng.integers(len(constraint.values)))]
    if constraint.kind == "range":
        lo, hi = constraint.values
        return int(rng.integers(lo, hi, endpoint=True))
    raise ValueError("cannot sample an unconstrained field")


def sample_observation(sig, rng):
    """
    Draw one observation from a signature: Exact copies the constant, Choice and Range
    are sampled uniformly. Tests without a rule are missing.
    """
    responses = {}
    for rule in sig.rules:
        if rule.expects_response == RESPONSE_NO:
            responses[rule.test_id] = None
            continue
        responses[rule.test_id] = {
            name: sample_value(c, rng)
            for name, c in rule.constraints.items()
            if c.kind != "any"
        }
    return Observation(responses, sig.labels, sig.name)


def check_observation(obs, sig):
    """True when every value of the observation satisfies the signature's constraints."""
    for rule in sig.rules:
        if rule.expects_response == RESPONSE_NO:
            if obs.responded(rule.test_id) or obs.is_missing(rule.test_id):
                return False
            continue
        if not obs.responded(rule.test_id):
            return False
        for name, c in rule.constraints.items():
            if not c.contains(obs.value(rule.test_id, name)):
                return False
    return True


def uniform_weights(db, irrelevant_fraction=0.2):
    """
    Uniform weights over relevant signatures, with irrelevant ones sharing
    ``irrelevant_fraction`` of the total mass.
    """
    relevant = [s.name for s in relevant_signatures(db)]
    irrelevant = [s.name for s in db if not s.labels.relevant]
    if not relevant or not irrelevant:
        return {s.name: 1.0 for s in db}
    weights = {name: (1.0 - irrelevant_fraction) / len(relevant) for name in relevant}
    weights.update({name: irrelevant_fraction / len(irrelevant) for name in irrelevant})
    return weights


def load_weights(path, db, irrelevant_fraction=0.2):
    """
    Read a YAML mapping of signature name or family -> weight. Family keys apply to every
    signature of that family that has no weight of its own.
    """
    with open(path) as fid:
        raw = yaml.safe_load(fid) or {}
    names = {s.name for s in db}
    families = {s.labels.family for s in db if s.labels.family}
    for key, value in raw.items():
        if key not in names and key not in families:
            raise DatasetError(f"weights file {path} names unknown signature or family {key!r}")
        if value is None or float(value) < 0:
            raise DatasetError(f"weight for {key!r} must be non-negative")
    weights = uniform_weights(db, irrelevant_fraction)
    for sig in db:
        if sig.name in raw:
            weights[sig.name] = float(raw[sig.name])
        elif sig.labels.family in raw:
            weights[sig.name] = float(raw[sig.labels.family])
    return weights


def weights_hash(weights):
    text = json.dumps({k: float(v) for k, v in weights.items()}, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def allocate_counts(weights, total):
    """
    Largest-remainder allocation of ``total`` samples proportional to ``weights``
    (an ordered list). Every positive weight receives at least one sample; ties go
    to the earlier entry.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise DatasetError("weights must be non-negative")
    if w.sum() <= 0:
        raise DatasetError("total weight is zero")
    positive = w > 0
    if total < positive.sum():
        raise DatasetError(
            f"total {total} is smaller than the {int(positive.sum())} weighted signatures"
        )
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    remainder = quota - counts
    order = sorted(range(len(w)), key=lambda i: (-remainder[i], i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    for i in np.flatnonzero(positive & (counts == 0)):
        donor = max(range(len(w)), key=lambda j: (counts[j], -j))
        counts[donor] -= 1
        counts[i] += 1
    return counts.tolist()


def _sample_many(sig, n, rng):
    return [sample_observation(sig, rng) for _ in range(n)]


def generate_dataset(db, weights, total, seed, n_jobs=1):
    """
    Sample ``total`` labeled observations from a labeled database.

    Args:
        db: labeled SignatureDb
        weights (dict): signature name -> non-negative weight, missing names count as 0
        total (int): dataset size
        seed (int): master seed; each signature gets its own stream spawned from it
        n_jobs (int): joblib workers, the output does not depend on it
    Returns:
        list of Observation, shuffled
    """
    if total <= 0:
        raise DatasetError("dataset size must be positive")
    unknown = set(weights) - {s.name for s in db}
    if unknown:
        raise DatasetError(f"weights name unknown signatures: {sorted(unknown)}")
    counts = allocate_counts([weights.get(s.name, 0.0) for s in db], total)
    streams = spawn_generators(seed, len(db))
    if n_jobs == 1:
        chunks = [_sample_many(s, n, r) for s, n, r in zip(db, counts, streams)]
    else:
        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_sample_many)(s, n, r) for s, n, r in zip(db, counts, streams)
        )
    dataset = [obs for chunk in chunks for obs in chunk]
    order = shuffle_rng(seed).permutation(len(dataset))
    logger.info(f"Generated {len(dataset)} observations from {sum(c > 0 for c in counts)} signatures")
    return [dataset[i] for i in order]


def _dumps(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_dataset(fn, observations, header):
    """One JSON record per line, the first being the provenance header."""
    with open(fn, "w", encoding="utf-8", newline="\n") as fid:
        fid.write(_dumps({"record": "header", "generator": GENERATOR_VERSION, **header}) + "\n")
        for obs in observations:
            fid.write(_dumps({"record": "observation", **obs.to_record()}) + "\n")


def read_dataset(fn):
    """
    Returns:
        (header dict, list of Observation)
    """
    header, observations = None, []
    with open(fn, encoding="utf-8") as fid:
        for number, line in enumerate(fid, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{fn}: line {number} is not JSON ({err.msg})") from None
            kind = record.pop("record", None)
            if kind == "header":
                header = record
            elif kind == "observation":
                observations.append(Observation.from_record(record))
            else:
                raise DatasetError(f"{fn}: line {number} has unknown record type {kind!r}")
    if header is None:
        raise DatasetError(f"{fn}: missing header record")
    return header, observations


@dataclass(frozen=True)
class WindowsLabel:
    version: str
    edition: str
    service_pack: str

    def render(self):
        return f"{self.version} {self.edition} sp{self.service_pack}"


@dataclass(frozen=True)
class ProfileProgram:
    uuid: str
    annotation: Optional[str]
    endpoints: Tuple[Tuple[Endpoint, dict], ...]
    when: dict


def _condition_holds(when, label):
    if not when:
        return True
    versions = when.get("versions")
    if versions is not None and label.version not in versions:
        return False
    editions = when.get("editions")
    if editions is not None and label.edition not in editions:
        return False
    service_packs = when.get("service_packs")
    if service_packs is not None:
        allowed = service_packs.get(label.version) if isinstance(service_packs, dict) else service_packs
        if allowed is not None and label.service_pack not in [str(s) for s in allowed]:
            return False
    return True


@dataclass(frozen=True)
class DcerpcProfile:
    """
    Endpoint inventory per Windows version, edition and service pack, loaded from YAML.
    ``versions`` keeps file order: version -> {"editions": [...], "service_packs": [...]}.
    """
    versions: Dict[str, dict]
    programs: Tuple[ProfileProgram, ...]

    @classmethod
    def from_dict(cls, conf):
        versions = {}
        for entry in conf["versions"]:
            versions[entry["name"]] = {
                "editions": [str(e) for e in entry["editions"]],
                "service_packs": [str(s) for s in entry["service_packs"]],
            }
        programs = []
        for entry in conf["programs"]:
            endpoints = []
            for ep in entry.get("endpoints", []):
                endpoints.append(
                    (Endpoint(ep["protocol"], ep.get("endpoint")), ep.get("when") or {})
                )
            programs.append(
                ProfileProgram(
                    normalize_uuid(entry["uuid"]),
                    entry.get("annotation"),
                    tuple(endpoints),
                    entry.get("when") or {},
                )
            )
        return cls(versions, tuple(programs))

    @classmethod
    def load(cls, path):
        with open(path) as fid:
            return cls.from_dict(yaml.safe_load(fid))

    def labels(self):
        return [
            WindowsLabel(version, edition, sp)
            for version, groups in self.versions.items()
            for edition in groups["editions"]
            for sp in groups["service_packs"]
        ]


def reference_dump(profile, label):
    """Complete endpoint listing a host with this label returns."""
    programs = []
    for program in profile.programs:
        if not _condition_holds(program.when, label):
            continue
        endpoints = tuple(ep for ep, when in program.endpoints if _condition_holds(when, label))
        programs.append(Program(program.uuid, program.annotation, endpoints))
    return EndpointDump(tuple(programs))


def sample_dump(profile, label, rng, keep_probability=0.9, novel_probability=0.1):
    """
    Noisy copy of the reference listing: each endpoint survives independently with
    ``keep_probability`` and, with ``novel_probability``, one program gains an endpoint
    that is not in the profile.
    """
    programs = []
    for program in reference_dump(profile, label).programs:
        keep = rng.random(len(program.endpoints)) < keep_probability
        programs.append(
            Program(program.uuid, program.annotation, tuple(ep for ep, k in zip(program.endpoints, keep) if k))
        )
    if programs and rng.random() < novel_probability:
        i = int(rng.integers(len(programs)))
        novel = Endpoint("ncacn_ip_tcp", f"{int(rng.integers(1025, 65536))}")
        programs[i] = Program(programs[i].uuid, programs[i].annotation, programs[i].endpoints + (novel,))
    return EndpointDump(tuple(programs))


def generate_dcerpc_dataset(profile, total, seed, keep_probability=0.9, novel_probability=0.1):
    """
    Returns:
        list of (EndpointDump, WindowsLabel), labels drawn uniformly from the profile
    """
    labels = profile.labels()
    if not labels:
        raise DatasetError("DCE-RPC profile declares no versions")
    counts = allocate_counts([1.0] * len(labels), max(total, len(labels)))
    streams = spawn_generators(seed, len(labels))
    samples = []
    for label, n, rng in zip(labels, counts, streams):
        samples.extend(
            (sample_dump(profile, label, rng, keep_probability, novel_probability), label)
            for _ in range(n)
        )
    order = shuffle_rng(seed).permutation(len(samples))
    return [samples[i] for i in order]
