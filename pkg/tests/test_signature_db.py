import numpy as np
import pytest

from osfp.exceptions import DuplicateSignatureError, ParseError, UnsupportedFormatError
from osfp.signature_db import (
    NUMERIC_MAX,
    RESPONSE_NO,
    RESPONSE_YES,
    FieldConstraint,
    matches,
    load_nmap_db,
    load_endpoint_dump,
    parse_number,
    parse_endpoint_dump,
    parse_nmap_db,
    serialize_nmap_db,
)

from conftest import DB_PATH, DUMP_PATH

LINUX_BLOCK = """
Fingerprint Linux 2.6.0-test5 x86
Class Linux | Linux | 2.6.X | general purpose
TSeq(Class=RI)
T1(DF=Y)
T2(Resp=Y)
T3(Resp=Y)
T4(DF=Y)
T5(DF=Y)
T6(DF=Y)
T7(DF=Y)
PU(DF=N)
"""

OPENBSD_BLOCK = """
# two OpenBSD systems
Fingerprint OpenBSD 3.6 (i386)
Class OpenBSD | OpenBSD | 3.X | general purpose
T1(DF=N%W=4000%ACK=S++%Flags=AS%Ops=MNWNNT)
T2(Resp=N)
T3(Resp=N)
T4(DF=N%W=0%ACK=O%Flags=R%Ops=)
T5(DF=N%W=0%ACK=S++%Flags=AR%Ops=)

Fingerprint OpenBSD 2.2 - 2.3
Class OpenBSD | OpenBSD | 2.X | general purpose
T1(DF=N%W=402E%ACK=S++%Flags=AS%Ops=MNWNNT)
T2(Resp=N)
T3(Resp=Y%DF=N%W=402E%ACK=S++%Flags=AS%Ops=MNWNNT)
T4(DF=N%W=4000%ACK=O%Flags=R%Ops=)
T5(DF=N%W=0%ACK=S++%Flags=AR%Ops=)
"""


def test_parse_linux_block():
    db = parse_nmap_db(LINUX_BLOCK)
    assert len(db) == 1, "Expected one signature"
    sig = db.signatures[0]
    assert len(sig.rules) == 9, "Linux block has nine test lines"
    assert sig.os_class.generation == "2.6.X", "Class generation not parsed"
    assert sig.rule("T1").constraints == {"DF": FieldConstraint.exact("Y")}, "T1 should be DF=Y"
    assert sig.rule("TSeq").constraints == {"Class": FieldConstraint.exact("RI")}, "TSeq should be Class=RI"
    assert sig.rule("T2").expects_response == RESPONSE_YES, "T2 should expect a response"


def test_parse_openbsd_blocks():
    db = parse_nmap_db(OPENBSD_BLOCK)
    assert [s.name for s in db] == ["OpenBSD 3.6 (i386)", "OpenBSD 2.2 - 2.3"], "Names or order wrong"
    first = db.signatures[0]
    assert len(first.rules) == 5, "OpenBSD 3.6 has five rules"
    assert first.rule("T2").expects_response == RESPONSE_NO, "T2(Resp=N) not recognized"
    assert first.rule("T2").constraints == {}, "Resp=N rule must be empty"
    assert first.rule("T1").constraints["W"] == FieldConstraint.exact(0x4000), "W is hexadecimal"
    assert first.rule("T4").constraints["Ops"] == FieldConstraint.exact(""), "Ops= is an empty exact value"
    assert db.signatures[1].rule("T1").constraints["W"].values == (0x402E,), "402E parsed as hex"


def test_empty_input():
    assert len(parse_nmap_db("")) == 0, "Empty input should give an empty database"
    assert len(parse_nmap_db("# only a comment\n\n")) == 0, "Comments only should give an empty database"


def test_choice_range_and_inequalities():
    db = parse_nmap_db(
        "Fingerprint X\nClass a | b | c | d\n"
        "TSeq(Class=TR|RI%gcd=<6%SI=<1500&>60%IPID=I)\nT1(W=100-1FF%Flags=AS)\n"
    )
    tseq = db.signatures[0].rule("TSeq").constraints
    assert tseq["Class"] == FieldConstraint("choice", ("TR", "RI")), "Choice not parsed"
    assert tseq["GCD"] == FieldConstraint.range(0, 5), "gcd should canonicalize and <6 mean [0, 5]"
    assert tseq["SI"] == FieldConstraint.range(0x61, 0x14FF), "Conjunction of inequalities wrong"
    assert db.signatures[0].rule("T1").constraints["W"] == FieldConstraint.range(0x100, 0x1FF), "Range wrong"
    open_ended = parse_nmap_db("Fingerprint Y\nClass a | b | c | d\nTSeq(SI=>10)\n")
    assert open_ended.signatures[0].rule("TSeq").constraints["SI"].values == (0x11, NUMERIC_MAX), "Open bound wrong"


def test_decimal_prefix():
    db = parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(W=0d100)\n")
    assert db.signatures[0].rule("T1").constraints["W"].values == (100,), "0d prefix should be decimal"
    upper = parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(W=0D10)\n")
    assert upper.signatures[0].rule("T1").constraints["W"].values == (0xD10,), "0D stays hexadecimal"
    assert parse_number("0d10") == 10 and parse_number("0D10") == 0xD10, "Only lowercase 0d is decimal"


def test_truncated_test_line():
    with pytest.raises(ParseError) as err:
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(DF=Y%W=10\n")
    assert err.value.line == 3, "Missing closing parenthesis should be reported on its line"


def test_parse_errors_carry_line_and_token():
    with pytest.raises(ParseError) as err:
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT9(DF=Y)\n")
    assert err.value.line == 3 and err.value.token == "T9", "Unknown test id should name line and token"
    with pytest.raises(ParseError) as err:
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(W=ZZ)\n")
    assert err.value.line == 3, "Bad hex value should report its line"
    with pytest.raises(ParseError):
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(W=20-10)\n")
    with pytest.raises(ParseError):
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT2(Resp=N%DF=Y)\n")
    with pytest.raises(ParseError):
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(DF=Y)\nT1(DF=N)\n")


def test_duplicate_name():
    with pytest.raises(DuplicateSignatureError) as err:
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\n\nFingerprint X\nClass a | b | c | d\n")
    assert err.value.first_line == 1 and err.value.line == 4, "Both positions should be reported"


def test_second_generation_rejected():
    with pytest.raises(UnsupportedFormatError):
        parse_nmap_db("Fingerprint X\nClass a | b | c | d\nSEQ(SP=0-5%GCD=1)\n")


def test_unknown_field_is_reported():
    db = parse_nmap_db("Fingerprint X\nClass a | b | c | d\nT1(DF=Y%Q=7)\n")
    assert db.report.unknown_fields == [(3, "T1", "Q")], "Unknown field not listed in the report"
    assert db.signatures[0].rule("T1").constraints["Q"] == FieldConstraint.exact("7"), "Unknown field not kept"


def test_shipped_database_round_trip():
    db = load_nmap_db(DB_PATH)
    assert len(db) >= 60, "Shipped database should have at least 60 signatures"
    again = parse_nmap_db(serialize_nmap_db(db))
    assert again == db, "Serialize then parse should give an equal database"
    assert again.content_hash == db.content_hash, "Content hash should be stable"


def test_shipped_openbsd_share_t5():
    db = load_nmap_db(DB_PATH)
    rules = {s.rule("T5") for s in db if s.os_class.family == "OpenBSD"}
    assert len(rules) == 1, "Every OpenBSD signature should carry the same T5 rule"


def test_matches_is_total():
    rng = np.random.default_rng(7)
    candidates = ["AS", "AR", "R", None, 5, 15, 25]
    constraints = [
        FieldConstraint.exact("AS"),
        FieldConstraint.choice(["AS", "AR"]),
        FieldConstraint.range(10, 20),
        FieldConstraint.any(),
    ]
    for _ in range(200):
        value = candidates[int(rng.integers(len(candidates)))]
        for c in constraints:
            assert matches(value, c) in (True, False), "matches must always decide"
            assert matches(value, c) == matches(value, c), "matches must be deterministic"
    assert matches(None, FieldConstraint.any()), "Any accepts an absent value"
    assert not matches(None, FieldConstraint.exact("AS")), "An absent value fails an exact constraint"
    assert not matches("15", FieldConstraint.range(10, 20)), "Ranges only accept integers"


def test_constraint_invariants():
    with pytest.raises(ValueError):
        FieldConstraint("range", (5, 1))
    with pytest.raises(ValueError):
        FieldConstraint("choice", ())
    with pytest.raises(ValueError):
        FieldConstraint("exact", ("a", "b"))


def test_endpoint_dump():
    dump = load_endpoint_dump(DUMP_PATH)
    assert len(dump.programs) == 3, "Listing has three programs"
    assert [len(p.endpoints) for p in dump.programs] == [4, 2, 2], "Endpoint counts per program"
    assert dump.endpoint_count == 8, "Listing has eight endpoints"
    assert dump.programs[0].annotation == "Messenger Service", "Annotation lost"
    assert dump.programs[0].endpoints[3].endpoint is None, "UDP endpoint has no address"
    with open(DUMP_PATH) as fid:
        text = fid.read()
    lower = parse_endpoint_dump(text.replace("5A7B91F8-FF00-11D0-A9B2-00C04FB6E6FC", "5a7b91f8-ff00-11d0-a9b2-00c04fb6e6fc"))
    assert lower == dump, "UUIDs should be stored uppercase"


def test_endpoint_dump_edge_cases():
    single = parse_endpoint_dump('uuid="E1AF8308-5D1F-11C9-91A4-08002B14A0FA"\n')
    assert len(single.programs) == 1 and single.programs[0].endpoints == (), "Program without endpoints"
    with pytest.raises(ParseError) as err:
        parse_endpoint_dump('uuid="E1AF8308-5D1F-11C9-91A4"\n')
    assert "E1AF8308-5D1F-11C9-91A4" in str(err.value), "Bad UUID should be named"
    with pytest.raises(ParseError):
        parse_endpoint_dump('protocol="ncacn_np" endpoint="\\PIPE\\lsass"\n')


def test_rules_and_signatures_are_hashable():
    db = load_nmap_db(DB_PATH)
    assert len(set(db.signatures)) == len(db), "Distinct signatures should hash apart"
    sig = db.signatures[0]
    lookup = {sig: sig.name, sig.rules[0]: sig.rules[0].test_id}
    assert lookup[sig] == sig.name and lookup[sig.rules[0]] == sig.rules[0].test_id, "Usable as dict keys"
