import json
import logging
import os

import pytest

from osfp.bundle import load_bundle
from osfp.cli import EXIT_DATA, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main

from conftest import DB_PATH, DECOY_PATH, DUMP_PATH, LABELS_PATH, PROFILE_PATH, SOLARIS8_PATH


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli")
    dataset = str(path / "train.jsonl")
    assert main(["gen-dataset", DB_PATH, "--labels", LABELS_PATH, "--total", "400", "--out", dataset, "--quiet"]) == EXIT_OK
    bundle = str(path / "bundle")
    code = main([
        "train", dataset, "--labels", LABELS_PATH, "--out", bundle, "--dcerpc-profile", PROFILE_PATH,
        "--holdout", "0.2", "--max-generations", "5", "--quiet",
    ])
    assert code == EXIT_OK, "Training through the command line"
    return path


def test_gen_dataset_is_deterministic(tmp_path):
    first, second = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    for out in (first, second):
        assert main(["gen-dataset", DB_PATH, "--labels", LABELS_PATH, "--total", "120", "--seed", "7", "--out", out]) == EXIT_OK
    with open(first) as a, open(second) as b:
        assert a.read() == b.read(), "Same seed gives the same dataset file"


def test_classify_json(workdir, capsys):
    capsys.readouterr()
    code = main(["classify", str(workdir / "bundle"), SOLARIS8_PATH, "--json", "--quiet"])
    assert code == EXIT_OK, "classify succeeds"
    document = json.loads(capsys.readouterr().out)
    assert set(document) >= {"relevance", "family", "label"}, "JSON report layout"


def test_classify_with_dump(workdir):
    assert main(["classify", str(workdir / "bundle"), SOLARIS8_PATH, "--dcerpc", DUMP_PATH, "--quiet"]) == EXIT_OK


def test_baseline(capsys):
    capsys.readouterr()
    assert main(["classify", DECOY_PATH, "--baseline", "--db", DB_PATH, "--top", "3", "--quiet"]) == EXIT_OK
    first = capsys.readouterr().out.splitlines()[0]
    assert "Foundry" in first and first.startswith("1.0000 (3/3)"), "Best-fit top line"


def test_eval_and_inspect(workdir, capsys):
    assert main(["eval", str(workdir / "bundle"), "--db", DB_PATH, "--dcerpc-profile", PROFILE_PATH, "--quiet"]) == EXIT_OK
    assert main(["inspect", str(workdir / "bundle"), "--quiet"]) == EXIT_OK
    assert main(["inspect", DB_PATH, "--labels", LABELS_PATH, "--quiet"]) == EXIT_OK
    assert main(["inspect", DUMP_PATH, "--quiet"]) == EXIT_OK
    assert main(["inspect", str(workdir / "train.jsonl"), "--json", "--quiet"]) == EXIT_OK
    assert '"kind": "dataset"' in capsys.readouterr().out, "Dataset summary"


def test_exit_codes(tmp_path, workdir):
    bad = tmp_path / "bad.txt"
    bad.write_text("Fingerprint X\nClass a | b | c | d\nSEQ(SP=1)\n")
    assert main(["inspect", str(bad), "--quiet"]) == EXIT_PARSE, "Unsupported format is a parse error"
    assert main(["classify", str(tmp_path), SOLARIS8_PATH, "--quiet"]) == EXIT_DATA, "Not a bundle"
    assert main(["classify", SOLARIS8_PATH, "--quiet"]) == EXIT_USAGE, "classify without a bundle"
    assert main(["frobnicate"]) == EXIT_USAGE, "Unknown command"
    assert main(["eval", str(workdir / "bundle"), "--db", str(tmp_path / "missing"), "--quiet"]) == EXIT_DATA
    assert main(["train", str(workdir / "train.jsonl"), "--labels", LABELS_PATH, "--out", str(workdir / "bundle"),
                 "--max-generations", "1", "--quiet"]) == EXIT_DATA, "Existing bundle is not overwritten"
    assert not os.path.exists(str(tmp_path / "missing")), "Nothing created for a failed run"


def test_dataset_header_records_config(workdir):
    with open(str(workdir / "train.jsonl")) as fh:
        header = json.loads(fh.readline())
    assert header["config"]["synth"]["total"] == 400, "Command-line override lands in the header"
    assert {"seed", "training", "reduction", "topologies"} <= set(header["config"]), "Full effective configuration"


def test_train_uses_configured_holdout_and_profile(workdir, tmp_path, capsys):
    bundle = str(tmp_path / "bundle")
    capsys.readouterr()
    code = main(["train", str(workdir / "train.jsonl"), "--labels", LABELS_PATH, "--out", bundle,
                 "--max-generations", "2", "--json", "--quiet"])
    assert code == EXIT_OK, "Training with configured defaults"
    document = json.loads(capsys.readouterr().out)
    assert document["holdout_size"] == 80, "Configured hold-out fraction of 400 observations"
    assert load_bundle(bundle).model.dcerpc is not None, "Bundle carries the endpoint net"
    assert main(["train", str(workdir / "train.jsonl"), "--labels", LABELS_PATH, "--out", str(tmp_path / "all"),
                 "--holdout", "0", "--max-generations", "1", "--json", "--quiet"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["holdout_size"] == 0, "A zero fraction keeps every observation"


def test_eval_reports_endpoint_listings(workdir, capsys):
    capsys.readouterr()
    assert main(["eval", str(workdir / "bundle"), "--db", DB_PATH, "--dcerpc-profile", PROFILE_PATH, "--json", "--quiet"]) == EXIT_OK
    results = json.loads(capsys.readouterr().out)["dcerpc_results"]
    assert set(results) == {"classic", "neural"}, "One column per method"
    assert set(results["classic"]) == {"perfect", "partial", "mismatch", "no_answer"}, "One row per category"


def test_verbosity_from_config(tmp_path):
    cfg = tmp_path / "verbose.yml"
    cfg.write_text("verbose: 1\n")
    assert main(["inspect", DB_PATH, "--labels", LABELS_PATH, "-c", str(cfg)]) == EXIT_OK
    assert logging.getLogger().level == logging.DEBUG, "Configured verbosity applies without -v"
    assert main(["inspect", DB_PATH, "--labels", LABELS_PATH, "-c", str(cfg), "--quiet"]) == EXIT_OK
    assert logging.getLogger().level == logging.WARNING, "--quiet wins over the configuration"
