"""
Fixed-length numeric encodings of observations.

The Nmap layout (568 slots) is documented slot by slot in docs/schema.md. Presence
slots take +1/-1, one-hot groups activate at most one member, numeric slots carry the
raw integer value; scaling happens in the reducer.
"""
import functools
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from osfp.exceptions import DatasetError, SchemaMismatchError
from osfp.signature_db import TCP_TESTS


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NMAP_DIMENSION = 568

ACK_TOKENS = ("S", "S++", "O")
# ECN-Echo is written B (bogus flag) in older databases
FLAG_LETTERS = (("ECN", "EB"), ("URG", "U"), ("ACK", "A"), ("PSH", "P"), ("RST", "R"), ("SYN", "S"), ("FIN", "F"))
OPTION_TOKENS = (("EOL", "L"), ("MAXSEG", "M"), ("NOP", "N"), ("TIMESTAMP", "T"), ("WINDOW", "W"), ("ECHOED", "E"))
OPTION_POSITIONS = 10

TSEQ_CLASS_TOKENS = ("TR", "RI", "TD", "C", "64K", "i800", "Z", "U")
TSEQ_IPID_TOKENS = ("I", "BI", "RPI", "RD", "Z")
TSEQ_TS_TOKENS = ("0", "2HZ", "100HZ", "1000HZ", "U")
PU_TOS_TOKENS = ("0", "C0", "20", "80")
PU_CHECK_TOKENS = ("E", "F", "0")


@dataclass(frozen=True)
class Slot:
    """
    One input dimension.

    kind is "presence" (+1/-1), "onehot" (member of the group named by ``group``) or "numeric".
    For DCE-RPC slots ``test`` holds the UUID and ``field`` the "protocol:endpoint" key.
    """
    name: str
    kind: str
    test: str
    field: Optional[str] = None
    group: Optional[str] = None
    token: Optional[str] = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class EncodingSchema:
    kind: str
    slots: Tuple[Slot, ...]
    index: Dict[str, int] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {s.name: i for i, s in enumerate(self.slots)})

    @property
    def dimension(self):
        return len(self.slots)

    @functools.cached_property
    def hash(self):
        payload = json.dumps(
            {"version": SCHEMA_VERSION, "kind": self.kind, "slots": [s.to_dict() for s in self.slots]},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def slot_field(self, i):
        s = self.slots[i]
        return s.test, s.field

    def group_indices(self, group):
        return [i for i, s in enumerate(self.slots) if s.group == group]

    def to_dict(self):
        return {
            "version": SCHEMA_VERSION,
            "kind": self.kind,
            "hash": self.hash,
            "slots": [s.to_dict() for s in self.slots],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema version {d.get('version')}")
        schema = cls(d["kind"], tuple(Slot(**s) for s in d["slots"]))
        if "hash" in d and d["hash"] != schema.hash:
            raise SchemaMismatchError(d["hash"], schema.hash, "stored schema")
        return schema

    def save(self, fn):
        with open(fn, "w") as fid:
            json.dump(self.to_dict(), fid, indent=1, sort_keys=True)

    @classmethod
    def load(cls, fn):
        with open(fn) as fid:
            return cls.from_dict(json.load(fid))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_hash: str

    def __len__(self):
        return len(self.values)


def _tcp_slots(test):
    slots = [Slot(f"{test}.ACK?", "presence", test, "ACK")]
    slots += [Slot(f"{test}.ACK={t}", "onehot", test, "ACK", f"{test}.ACK", t) for t in ACK_TOKENS]
    slots += [
        Slot(f"{test}.DF", "presence", test, "DF"),
        Slot(f"{test}.Resp", "presence", test, "Resp"),
        Slot(f"{test}.Flags?", "presence", test, "Flags"),
    ]
    slots += [Slot(f"{test}.Flags.{name}", "presence", test, "Flags", f"{test}.Flags", name) for name, _ in FLAG_LETTERS]
    for pos in range(1, OPTION_POSITIONS + 1):
        group = f"{test}.Ops[{pos}]"
        slots += [Slot(f"{group}={name}", "onehot", test, "Ops", group, name) for name, _ in OPTION_TOKENS]
    slots.append(Slot(f"{test}.W", "numeric", test, "W"))
    return slots


def _onehot(test, name, tokens):
    group = f"{test}.{name}"
    return [Slot(f"{group}={t}", "onehot", test, name, group, t) for t in tokens]


def _tseq_slots():
    slots = [Slot("TSeq.Resp", "presence", "TSeq", "Resp")]
    slots += _onehot("TSeq", "Class", TSEQ_CLASS_TOKENS)
    slots += _onehot("TSeq", "IPID", TSEQ_IPID_TOKENS)
    slots += _onehot("TSeq", "TS", TSEQ_TS_TOKENS)
    slots += [Slot(f"TSeq.{name}", "numeric", "TSeq", name) for name in ("GCD", "SI", "VAL")]
    return slots


def _pu_slots():
    slots = [
        Slot("PU.Resp", "presence", "PU", "Resp"),
        Slot("PU.DF", "presence", "PU", "DF"),
    ]
    slots += _onehot("PU", "TOS", PU_TOS_TOKENS)
    slots += [Slot(f"PU.{name}", "numeric", "PU", name) for name in ("IPLEN", "RIPTL", "ULEN")]
    for name in ("RID", "RIPCK", "UCK", "DAT"):
        slots += _onehot("PU", name, PU_CHECK_TOKENS)
    return slots


def build_nmap_schema(db=None):
    """
    The 568-slot Nmap layout: 75 slots for each of T1-T7, 22 for TSeq and 21 for PU.
    The layout is fixed; fields of ``db`` outside it are reported and not encoded.
    """
    slots = [s for test in TCP_TESTS for s in _tcp_slots(test)] + _tseq_slots() + _pu_slots()
    schema = EncodingSchema("nmap", tuple(slots))
    if schema.dimension != NMAP_DIMENSION:
        raise AssertionError(f"Nmap schema has {schema.dimension} slots")
    if db is not None:
        encoded = {(s.test, s.field) for s in slots}
        for test, name in db.field_vocabulary:
            if (test, name) not in encoded:
                logger.info(f"{test}.{name} appears in the database but is not encoded")
    return schema


@functools.lru_cache(maxsize=None)
def _warn_out_of_vocabulary(group, token):
    logger.warning(f"value {token!r} is outside the vocabulary of {group}; group encoded as all -1")


def _set_onehot(out, schema, group, token, tokens):
    for t in tokens:
        out[schema.index[f"{group}={t}"]] = 1.0 if t == token else -1.0
    if token not in tokens:
        _warn_out_of_vocabulary(group, token)


def _as_number(value):
    return float(value) if isinstance(value, (int, float)) else 0.0


def _encode_tcp(out, schema, test, fields):
    ix = schema.index
    if fields is None:
        for name in ("ACK?", "DF", "Resp", "Flags?"):
            out[ix[f"{test}.{name}"]] = -1.0
        for t in ACK_TOKENS:
            out[ix[f"{test}.ACK={t}"]] = -1.0
        for name, _ in FLAG_LETTERS:
            out[ix[f"{test}.Flags.{name}"]] = -1.0
        for pos in range(1, OPTION_POSITIONS + 1):
            for name, _ in OPTION_TOKENS:
                out[ix[f"{test}.Ops[{pos}]={name}"]] = -1.0
        return
    out[ix[f"{test}.Resp"]] = 1.0
    if "ACK" in fields:
        out[ix[f"{test}.ACK?"]] = 1.0
        _set_onehot(out, schema, f"{test}.ACK", fields["ACK"], ACK_TOKENS)
    else:
        out[ix[f"{test}.ACK?"]] = -1.0
    if "DF" in fields:
        out[ix[f"{test}.DF"]] = 1.0 if fields["DF"] == "Y" else -1.0
    if "Flags" in fields:
        out[ix[f"{test}.Flags?"]] = 1.0
        letters = str(fields["Flags"])
        for name, chars in FLAG_LETTERS:
            out[ix[f"{test}.Flags.{name}"]] = 1.0 if any(c in letters for c in chars) else -1.0
        known = "".join(chars for _, chars in FLAG_LETTERS)
        for c in letters:
            if c not in known:
                _warn_out_of_vocabulary(f"{test}.Flags", c)
    else:
        out[ix[f"{test}.Flags?"]] = -1.0
    if "Ops" in fields:
        ops = str(fields["Ops"])
        by_letter = {letter: name for name, letter in OPTION_TOKENS}
        if len(ops) > OPTION_POSITIONS:
            _warn_out_of_vocabulary(f"{test}.Ops", ops)
        for pos in range(1, OPTION_POSITIONS + 1):
            token = by_letter.get(ops[pos - 1], ops[pos - 1]) if pos <= len(ops) else None
            for name, _ in OPTION_TOKENS:
                out[ix[f"{test}.Ops[{pos}]={name}"]] = 1.0 if name == token else -1.0
            if token is not None and token not in by_letter.values():
                _warn_out_of_vocabulary(f"{test}.Ops[{pos}]", token)
    if "W" in fields:
        out[ix[f"{test}.W"]] = _as_number(fields["W"])


def _encode_tseq(out, schema, fields):
    ix = schema.index
    if fields is None:
        out[ix["TSeq.Resp"]] = -1.0
        for name, tokens in (("Class", TSEQ_CLASS_TOKENS), ("IPID", TSEQ_IPID_TOKENS), ("TS", TSEQ_TS_TOKENS)):
            for t in tokens:
                out[ix[f"TSeq.{name}={t}"]] = -1.0
        return
    out[ix["TSeq.Resp"]] = 1.0
    for name, tokens in (("Class", TSEQ_CLASS_TOKENS), ("IPID", TSEQ_IPID_TOKENS), ("TS", TSEQ_TS_TOKENS)):
        if name in fields:
            _set_onehot(out, schema, f"TSeq.{name}", str(fields[name]), tokens)
    for name in ("GCD", "SI", "VAL"):
        if name in fields:
            out[ix[f"TSeq.{name}"]] = _as_number(fields[name])


def _encode_pu(out, schema, fields):
    ix = schema.index
    onehots = [("TOS", PU_TOS_TOKENS)] + [(n, PU_CHECK_TOKENS) for n in ("RID", "RIPCK", "UCK", "DAT")]
    if fields is None:
        out[ix["PU.Resp"]] = -1.0
        out[ix["PU.DF"]] = -1.0
        for name, tokens in onehots:
            for t in tokens:
                out[ix[f"PU.{name}={t}"]] = -1.0
        return
    out[ix["PU.Resp"]] = 1.0
    if "DF" in fields:
        out[ix["PU.DF"]] = 1.0 if fields["DF"] == "Y" else -1.0
    for name, tokens in onehots:
        if name in fields:
            _set_onehot(out, schema, f"PU.{name}", str(fields[name]), tokens)
    for name in ("IPLEN", "RIPTL", "ULEN"):
        if name in fields:
            out[ix[f"PU.{name}"]] = _as_number(fields[name])


def encode_nmap(obs, schema):
    """
    Encode one observation. A missing test leaves its Resp slot at -1 and every other
    slot at 0; a test that got no answer is -1 on every presence and one-hot slot.
    """
    if schema.kind != "nmap":
        raise SchemaMismatchError("nmap", schema.kind, "schema kind")
    out = np.zeros(schema.dimension, dtype=np.float64)
    for test in TCP_TESTS:
        if obs.is_missing(test):
            out[schema.index[f"{test}.Resp"]] = -1.0
        else:
            _encode_tcp(out, schema, test, obs.responses[test])
    if obs.is_missing("TSeq"):
        out[schema.index["TSeq.Resp"]] = -1.0
    else:
        _encode_tseq(out, schema, obs.responses["TSeq"])
    if obs.is_missing("PU"):
        out[schema.index["PU.Resp"]] = -1.0
    else:
        _encode_pu(out, schema, obs.responses["PU"])
    return FeatureVector(out, schema.hash)


def encode_many(observations, schema):
    X = np.zeros((len(observations), schema.dimension), dtype=np.float64)
    for i, obs in enumerate(observations):
        X[i] = encode_nmap(obs, schema).values
    return X


def _endpoint_key(endpoint):
    return f"{endpoint.protocol}:{endpoint.endpoint or ''}"


def build_dcerpc_schema(corpus, min_count=1):
    """
    One slot per distinct UUID followed by one slot per distinct (protocol, endpoint) of
    that UUID, UUIDs in sorted order and endpoints sorted within each UUID.
    Endpoints seen in fewer than ``min_count`` dumps get no slot.
    """
    corpus = list(corpus)
    if not corpus:
        raise DatasetError("cannot build a DCE-RPC schema from an empty corpus")
    inventory: Dict[str, Counter] = {}
    for dump in corpus:
        for program in dump.programs:
            keys = inventory.setdefault(program.uuid, Counter())
            keys.update(set(_endpoint_key(ep) for ep in program.endpoints))
    slots = []
    for uuid in sorted(inventory):
        slots.append(Slot(uuid, "presence", uuid))
        kept = sorted(key for key, n in inventory[uuid].items() if n >= min_count)
        slots += [Slot(f"{uuid}/{key}", "presence", uuid, key) for key in kept]
    logger.info(f"DCE-RPC schema: {len(inventory)} programs, {len(slots)} slots")
    return EncodingSchema("dcerpc", tuple(slots))


def encode_dcerpc(dump, schema):
    """
    +1 for every program and endpoint present, -1 otherwise. Endpoints unknown to the
    schema are ignored; their program slot is still activated.
    """
    if schema.kind != "dcerpc":
        raise SchemaMismatchError("dcerpc", schema.kind, "schema kind")
    out = -np.ones(schema.dimension, dtype=np.float64)
    for program in dump.programs:
        i = schema.index.get(program.uuid)
        if i is None:
            continue
        out[i] = 1.0
        for ep in program.endpoints:
            j = schema.index.get(f"{program.uuid}/{_endpoint_key(ep)}")
            if j is not None:
                out[j] = 1.0
    return FeatureVector(out, schema.hash)


def encode_dcerpc_many(dumps, schema):
    X = np.zeros((len(dumps), schema.dimension), dtype=np.float64)
    for i, dump in enumerate(dumps):
        X[i] = encode_dcerpc(dump, schema).values
    return X
