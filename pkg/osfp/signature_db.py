"""
Parsers and types for first-generation Nmap fingerprint databases and DCE-RPC endpoint dumps.

The Nmap grammar is line oriented::

    # comment
    Fingerprint OpenBSD 3.6 (i386)
    Class OpenBSD | OpenBSD | 3.X | general purpose
    TSeq(Class=RI%SI=<1500&>60%IPID=RD%TS=2HZ)
    T1(DF=N%W=4000%ACK=S++%Flags=AS%Ops=MNWNNT)
    T2(Resp=N)

Fields are separated by ``%``, alternatives by ``|`` and numeric ranges by ``-``.
Numeric fields are hexadecimal.
"""
import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

from osfp.exceptions import (
    DuplicateSignatureError,
    ParseError,
    UnsupportedFormatError,
)


logger = logging.getLogger(__name__)

TCP_TESTS = ("T1", "T2", "T3", "T4", "T5", "T6", "T7")
TESTS = TCP_TESTS + ("PU", "TSeq")
TCP_FIELDS = ("Resp", "DF", "W", "ACK", "Flags", "Ops")
FIELD_VOCABULARY = {
    **{t: TCP_FIELDS for t in TCP_TESTS},
    "PU": ("Resp", "DF", "TOS", "IPLEN", "RIPTL", "RID", "RIPCK", "UCK", "ULEN", "DAT"),
    "TSeq": ("Resp", "Class", "GCD", "SI", "IPID", "TS", "VAL"),
}
NUMERIC_FIELDS = frozenset({"W", "GCD", "SI", "VAL", "IPLEN", "RIPTL", "ULEN"})
# upper bound used for open-ended inequalities such as SI=>60
NUMERIC_MAX = 0xFFFFFFFF
SECOND_GENERATION_TESTS = frozenset({"SCAN", "SEQ", "OPS", "WIN", "ECN", "U1", "IE"})

RESPONSE_YES = "yes"
RESPONSE_NO = "no"
RESPONSE_UNSPECIFIED = "unspecified"

_TEST_LINE = re.compile(r"^(?P<test>[A-Za-z][A-Za-z0-9]*)\((?P<body>[^()]*)\)\s*$")
_UUID = re.compile(
    r"^[0-9A-Fa-f]{8}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{12}$"
)
_ATTRIBUTE = re.compile(r'(?P<key>[A-Za-z_]+)="(?P<value>[^"]*)"')


def canonical_field(test_id, name):
    """Map a field name onto the per-test vocabulary, ignoring case. Unknown names pass through."""
    for known in FIELD_VOCABULARY[test_id]:
        if known.lower() == name.lower():
            return known
    return name


def parse_number(token):
    """
    Hexadecimal by default; ``0x`` is accepted and a lowercase ``0d`` marks a decimal literal.

    Uppercase ``0D`` stays hexadecimal, so ``0D10`` is 0xD10 while ``0d10`` is 10.
    """
    text = token.strip()
    try:
        if text.startswith("0d"):
            return int(text[2:], 10)
        return int(text, 16)
    except ValueError:
        raise ParseError("expected a hexadecimal value", token=token) from None


@dataclass(frozen=True)
class FieldConstraint:
    """
    Constraint on one response field.

    Attributes:
        kind: one of "exact", "choice", "range", "any"
        values: (value,) for exact, the ordered options for choice, (lo, hi) for range
    """
    kind: str
    values: tuple = ()

    def __post_init__(self):
        if self.kind == "exact" and len(self.values) != 1:
            raise ValueError("Exact constraint carries exactly one value")
        if self.kind == "choice" and not self.values:
            raise ValueError("Choice constraint must be non-empty")
        if self.kind == "range":
            lo, hi = self.values
            if lo > hi:
                raise ValueError(f"Range has lo > hi ({lo:X} > {hi:X})")
        if self.kind not in ("exact", "choice", "range", "any"):
            raise ValueError(f"Unknown constraint kind {self.kind!r}")

    @classmethod
    def exact(cls, value):
        return cls("exact", (value,))

    @classmethod
    def choice(cls, values):
        unique = tuple(dict.fromkeys(values))
        if len(unique) == 1:
            return cls.exact(unique[0])
        return cls("choice", unique)

    @classmethod
    def range(cls, lo, hi):
        return cls("range", (int(lo), int(hi)))

    @classmethod
    def any(cls):
        return cls("any", ())

    def contains(self, value):
        if self.kind == "any":
            return True
        if value is None:
            return False
        if self.kind == "exact":
            return value == self.values[0]
        if self.kind == "choice":
            return value in self.values
        lo, hi = self.values
        return isinstance(value, int) and lo <= value <= hi

    def render(self):
        def fmt(v):
            return f"{v:X}" if isinstance(v, int) else str(v)

        if self.kind == "any":
            return "*"
        if self.kind == "range":
            return f"{self.values[0]:X}-{self.values[1]:X}"
        return "|".join(fmt(v) for v in self.values)


def matches(value, constraint):
    """True when a concrete field value satisfies the constraint. None means the field is absent."""
    return constraint.contains(value)


@dataclass(frozen=True)
class TestRule:
    __test__ = False  # keep pytest from collecting it

    test_id: str
    expects_response: str = RESPONSE_UNSPECIFIED
    constraints: Dict[str, FieldConstraint] = field(default_factory=dict, hash=False)

    def render(self):
        parts = []
        if self.expects_response == RESPONSE_NO:
            parts.append("Resp=N")
        elif self.expects_response == RESPONSE_YES:
            parts.append("Resp=Y")
        parts.extend(f"{name}={c.render()}" for name, c in self.constraints.items())
        return f"{self.test_id}({'%'.join(parts)})"


class OsClass(NamedTuple):
    vendor: str = ""
    family: str = ""
    generation: str = ""
    device_type: str = ""

    def render(self):
        return " | ".join(self)


@dataclass(frozen=True)
class Labels:
    relevant: bool = False
    family: Optional[str] = None
    version: Optional[str] = None
    edition: Optional[str] = None
    service_pack: Optional[str] = None

    def to_dict(self):
        return {
            "relevant": self.relevant,
            "family": self.family,
            "version": self.version,
            "edition": self.edition,
            "service_pack": self.service_pack,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class Signature:
    name: str
    os_class: OsClass = OsClass()
    rules: Tuple[TestRule, ...] = ()
    labels: Labels = Labels()
    line: int = field(default=0, compare=False)

    def rule(self, test_id):
        for r in self.rules:
            if r.test_id == test_id:
                return r
        return None

    def render(self):
        lines = [f"Fingerprint {self.name}", f"Class {self.os_class.render()}"]
        lines.extend(r.render() for r in self.rules)
        return "\n".join(lines)


@dataclass
class ParseReport:
    unknown_fields: List[Tuple[int, str, str]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def __bool__(self):
        return bool(self.unknown_fields or self.notes)


@dataclass(frozen=True)
class SignatureDb:
    signatures: Tuple[Signature, ...] = ()
    report: ParseReport = field(default_factory=ParseReport, compare=False)

    def __len__(self):
        return len(self.signatures)

    def __iter__(self):
        return iter(self.signatures)

    @property
    def field_vocabulary(self):
        pairs = set()
        for sig in self.signatures:
            for r in sig.rules:
                pairs.update((r.test_id, name) for name in r.constraints)
        return sorted(pairs)

    def by_name(self, name):
        for sig in self.signatures:
            if sig.name == name:
                return sig
        raise KeyError(name)

    @property
    def content_hash(self):
        return hashlib.sha256(serialize_nmap_db(self).encode("utf-8")).hexdigest()


def _parse_value(test_id, name, raw, line):
    if raw.strip() == "*":
        return FieldConstraint.any()
    if name not in NUMERIC_FIELDS:
        if "|" in raw:
            return FieldConstraint.choice(raw.split("|"))
        return FieldConstraint.exact(raw)
    try:
        if "|" in raw:
            return FieldConstraint.choice([parse_number(v) for v in raw.split("|")])
        if raw.startswith(("<", ">")):
            lo, hi = 0, NUMERIC_MAX
            for term in raw.split("&"):
                bound = parse_number(term[1:])
                if term.startswith("<"):
                    hi = min(hi, bound - 1)
                elif term.startswith(">"):
                    lo = max(lo, bound + 1)
                else:
                    raise ParseError("expected an inequality", line=line, token=term)
            if lo > hi:
                raise ParseError("empty numeric interval", line=line, token=raw)
            return FieldConstraint.range(lo, hi)
        if "-" in raw:
            lo, _, hi = raw.partition("-")
            lo, hi = parse_number(lo), parse_number(hi)
            if lo > hi:
                raise ParseError("range lower bound exceeds upper bound", line=line, token=raw)
            return FieldConstraint.range(lo, hi)
        return FieldConstraint.exact(parse_number(raw))
    except ParseError as err:
        if err.line is None:
            raise ParseError(f"bad value for {test_id}.{name}", line=line, token=raw) from None
        raise


def parse_test_line(text, line, report=None):
    """
    Parse one ``TEST(field=value%...)`` line into a TestRule.

    Raises:
        UnsupportedFormatError: for second-generation test names
        ParseError: for unknown tests or malformed fields
    """
    m = _TEST_LINE.match(text)
    if not m:
        raise ParseError("malformed test line", line=line, token=text)
    test_id = m.group("test")
    if test_id.upper() in SECOND_GENERATION_TESTS:
        raise UnsupportedFormatError(
            "second-generation Nmap fingerprints are not supported", line=line, token=test_id
        )
    if test_id not in FIELD_VOCABULARY:
        raise ParseError("unknown test id", line=line, token=test_id)
    expects = RESPONSE_UNSPECIFIED
    constraints = {}
    body = m.group("body").strip()
    for item in filter(None, body.split("%")):
        name, sep, raw = item.partition("=")
        if not sep or not name.strip():
            raise ParseError("expected field=value", line=line, token=item)
        name = canonical_field(test_id, name.strip())
        if name == "Resp":
            if raw not in ("Y", "N"):
                raise ParseError("Resp must be Y or N", line=line, token=item)
            expects = RESPONSE_YES if raw == "Y" else RESPONSE_NO
            continue
        if name in constraints:
            raise ParseError(f"field {name} repeated in {test_id}", line=line, token=item)
        if name not in FIELD_VOCABULARY[test_id] and report is not None:
            report.unknown_fields.append((line, test_id, name))
            logger.warning(f"line {line}: unknown field {test_id}.{name} kept as symbolic")
        constraints[name] = _parse_value(test_id, name, raw, line)
    if expects == RESPONSE_NO and constraints:
        raise ParseError(f"{test_id} has Resp=N but lists fields", line=line, token=text)
    return TestRule(test_id, expects, constraints)


def _iter_lines(text):
    if not isinstance(text, str):
        text = text.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped and not stripped.startswith("#"):
            yield number, stripped


def parse_nmap_db(text):
    """
    Parse a first-generation Nmap OS fingerprint database.

    Args:
        text: database contents, a str or a readable text/binary stream
    Returns:
        SignatureDb in file order
    """
    report = ParseReport()
    signatures = []
    seen = {}
    current = None

    def close():
        if current is not None:
            signatures.append(
                Signature(current["name"], current["os_class"], tuple(current["rules"]), line=current["line"])
            )

    for number, line in _iter_lines(text):
        keyword, _, rest = line.partition(" ")
        if keyword == "Fingerprint":
            close()
            name = rest.strip()
            if not name:
                raise ParseError("fingerprint without a name", line=number, token=line)
            if name in seen:
                raise DuplicateSignatureError(name, seen[name], number)
            seen[name] = number
            current = {"name": name, "os_class": OsClass(), "rules": [], "tests": set(), "line": number, "has_class": False}
        elif keyword == "Class":
            if current is None:
                raise ParseError("Class line outside a Fingerprint block", line=number, token=line)
            parts = [p.strip() for p in rest.split("|")]
            if len(parts) != 4:
                raise ParseError("Class needs vendor | family | generation | type", line=number, token=rest)
            if current["has_class"]:
                report.notes.append(f"line {number}: extra Class line for {current['name']!r} ignored")
                continue
            current["os_class"] = OsClass(*parts)
            current["has_class"] = True
        elif keyword in ("MatchPoints",) or line.startswith("SCAN("):
            raise UnsupportedFormatError(
                "second-generation Nmap fingerprints are not supported", line=number, token=keyword
            )
        else:
            rule = parse_test_line(line, number, report)
            if current is None:
                raise ParseError("test line outside a Fingerprint block", line=number, token=line)
            if rule.test_id in current["tests"]:
                raise ParseError(f"duplicate {rule.test_id} rule", line=number, token=line)
            current["tests"].add(rule.test_id)
            current["rules"].append(rule)
    close()
    logger.info(f"Parsed {len(signatures)} signatures")
    return SignatureDb(tuple(signatures), report)


def serialize_nmap_db(db):
    return "".join(sig.render() + "\n\n" for sig in db.signatures)


def load_nmap_db(path):
    with open(path, encoding="utf-8") as fid:
        return parse_nmap_db(fid.read())


class Endpoint(NamedTuple):
    protocol: str
    endpoint: Optional[str] = None


@dataclass(frozen=True)
class Program:
    uuid: str
    annotation: Optional[str] = None
    endpoints: Tuple[Endpoint, ...] = ()


@dataclass(frozen=True)
class EndpointDump:
    programs: Tuple[Program, ...] = ()

    @property
    def endpoint_count(self):
        return sum(len(p.endpoints) for p in self.programs)

    def uuids(self):
        return [p.uuid for p in self.programs]


def normalize_uuid(token, line=None):
    if not _UUID.match(token):
        raise ParseError("invalid UUID", line=line, token=token)
    return token.upper()


def parse_endpoint_dump(text):
    """
    Parse an endpoint mapper listing made of ``key="value"`` attributes.

    ``uuid`` opens a program block, ``annotation`` names it, ``protocol`` opens an endpoint
    and ``endpoint`` sets its address. ``id`` attributes are accepted and dropped.
    """
    order = []
    programs = {}
    current = None
    last_endpoint = None
    for number, line in _iter_lines(text):
        pos = 0
        for m in _ATTRIBUTE.finditer(line):
            if line[pos:m.start()].strip():
                raise ParseError("expected key=\"value\"", line=number, token=line[pos:m.start()].strip())
            pos = m.end()
            key, value = m.group("key").lower(), m.group("value")
            if key == "uuid":
                current = normalize_uuid(value, number)
                if current not in programs:
                    order.append(current)
                    programs[current] = {"annotation": None, "endpoints": []}
                last_endpoint = None
                continue
            if current is None:
                raise ParseError(f"{key} attribute outside a uuid block", line=number, token=m.group(0))
            if key == "annotation":
                programs[current]["annotation"] = value
            elif key == "protocol":
                programs[current]["endpoints"].append([value, None])
                last_endpoint = programs[current]["endpoints"][-1]
            elif key == "endpoint":
                if last_endpoint is None or last_endpoint[1] is not None:
                    raise ParseError("endpoint without a preceding protocol", line=number, token=m.group(0))
                last_endpoint[1] = value
            elif key != "id":
                raise ParseError("unknown attribute", line=number, token=m.group(0))
        if line[pos:].strip():
            raise ParseError("expected key=\"value\"", line=number, token=line[pos:].strip())
    return EndpointDump(
        tuple(
            Program(
                uuid,
                programs[uuid]["annotation"],
                tuple(Endpoint(p, e) for p, e in programs[uuid]["endpoints"]),
            )
            for uuid in order
        )
    )


def load_endpoint_dump(path):
    with open(path, encoding="utf-8") as fid:
        return parse_endpoint_dump(fid.read())
