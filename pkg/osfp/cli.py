"""
Command line interface.

    osfp gen-dataset DB --out dataset.jsonl [--labels L] [--weights W] [--total N]
    osfp train DATASET --out BUNDLE [--labels L] [--dcerpc-profile P] [--holdout F] [--fixed-lr]
    osfp classify BUNDLE OBSERVATION [--dcerpc DUMP] [--baseline --db DB]
    osfp eval BUNDLE [DATASET] --db DB [--dcerpc-profile P]
    osfp inspect PATH [--labels L]

Every command accepts --seed, --config, --json, -v and --quiet.
"""
import json
import logging
import os
import sys
from argparse import ArgumentParser

import yaml
from sklearn.model_selection import train_test_split

from osfp.baselines import best_fit_baseline
from osfp.bundle import MANIFEST, load_bundle, save_bundle
from osfp.config import load_config, resolve_path
from osfp.encoder import build_nmap_schema
from osfp.exceptions import (
    BundleError,
    DatasetError,
    LabelConflictError,
    OsfpError,
    ParseError,
    SchemaMismatchError,
    TrainingDivergedError,
)
from osfp.hierarchy import WindowsLabelGroups, classify, train_hierarchy
from osfp.labels import LabelRuleSet, family_histogram, label_database
from osfp.metrics import evaluate, evaluate_dcerpc, stage_accuracy
from osfp.seed import spawn_generators
from osfp.signature_db import load_endpoint_dump, load_nmap_db, parse_endpoint_dump, parse_nmap_db
from osfp.synth import (
    DcerpcProfile,
    WindowsLabel,
    generate_dataset,
    generate_dcerpc_dataset,
    load_observation,
    load_weights,
    read_dataset,
    sample_dump,
    uniform_weights,
    weights_hash,
    write_dataset,
)


logger = logging.getLogger("osfp")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SCHEMA = 4
EXIT_DIVERGED = 5
EXIT_DATA = 6


def exit_code(err):
    if isinstance(err, SchemaMismatchError):
        return EXIT_SCHEMA
    if isinstance(err, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(err, (ParseError, LabelConflictError, yaml.YAMLError)):
        return EXIT_PARSE
    if isinstance(err, (DatasetError, BundleError, OSError)):
        return EXIT_DATA
    return EXIT_ERROR


def setup_logging(verbose=0, quiet=False):
    root = logging.getLogger()
    formatter = logging.Formatter("%(levelname)s:%(name)s:%(message)s")
    ch = logging.StreamHandler(sys.stderr)
    ch.setFormatter(formatter)
    for handler in list(root.handlers):
        if getattr(handler, "_osfp", False):
            root.removeHandler(handler)
    ch._osfp = True
    root.addHandler(ch)
    if quiet:
        root.setLevel(logging.WARNING)
    elif verbose:
        root.setLevel(logging.DEBUG)
    else:
        root.setLevel(logging.INFO)


def emit(args, text, document):
    if args.json:
        print(json.dumps(document, indent=1, sort_keys=True, default=str))
    else:
        print(text)


def _overrides(args):
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "n_jobs", None) is not None:
        out["n_jobs"] = args.n_jobs
    reduction = {}
    if getattr(args, "retention", None) is not None:
        reduction["retention"] = args.retention
    if getattr(args, "dependence_threshold", None) is not None:
        reduction["dependence_threshold"] = args.dependence_threshold
    if reduction:
        out["reduction"] = reduction
    training = {}
    if getattr(args, "max_generations", None) is not None:
        training["max_generations"] = args.max_generations
    if getattr(args, "fixed_lr", False):
        training["adaptive"] = False
    if training:
        out["training"] = training
    if getattr(args, "holdout", None) is not None:
        out["holdout"] = args.holdout
    return out


def _load_rules(args, conf):
    path = getattr(args, "labels", None) or resolve_path(conf["labels"])
    if not os.path.isfile(path):
        raise DatasetError(f"label rules file {path} not found")
    return LabelRuleSet.load(path)


def cmd_gen_dataset(args, conf):
    rules = _load_rules(args, conf)
    db = label_database(load_nmap_db(args.db), rules)
    irrelevant_fraction = conf["synth"]["irrelevant_fraction"]
    weights_file = args.weights or conf["synth"]["weights"]
    if weights_file:
        weights = load_weights(weights_file, db, irrelevant_fraction)
    else:
        weights = uniform_weights(db, irrelevant_fraction)
    total = args.total if args.total is not None else conf["synth"]["total"]
    observations = generate_dataset(db, weights, total, conf["seed"], conf["n_jobs"])
    header = {
        "seed": conf["seed"],
        "total": total,
        "database": os.path.basename(args.db),
        "database_hash": db.content_hash,
        "labels_hash": rules.content_hash,
        "weights_hash": weights_hash(weights),
        "config": conf,
    }
    write_dataset(args.out, observations, header)
    histogram = family_histogram(db)
    emit(
        args,
        f"Wrote {len(observations)} observations from {len(db)} signatures to {args.out}",
        {"out": args.out, "observations": len(observations), "signatures": len(db), "families": histogram},
    )


def cmd_train(args, conf):
    rules = _load_rules(args, conf)
    header, observations = read_dataset(args.dataset)
    if header.get("labels_hash") not in (None, rules.content_hash):
        logger.warning(f"{args.dataset} was labeled with different label rules")
    holdout = []
    fraction = float(conf["holdout"] or 0.0)
    if fraction > 0:
        observations, holdout = train_test_split(
            observations, test_size=fraction, random_state=int(conf["seed"]) % (2 ** 32), shuffle=True
        )
    dcerpc_samples = groups = None
    profile_path = _profile_path(args, conf)
    if profile_path:
        profile = DcerpcProfile.load(profile_path)
        groups = WindowsLabelGroups.from_profile(profile)
        dcerpc_samples = generate_dcerpc_dataset(
            profile,
            conf["dcerpc"]["total"],
            conf["seed"],
            conf["dcerpc"]["keep_probability"],
            conf["dcerpc"]["novel_probability"],
        )
    schema = build_nmap_schema()
    model = train_hierarchy(observations, schema, rules, conf, dcerpc_samples, groups, progress=args.progress)
    save_bundle(model, args.out, conf, rules, holdout=holdout)
    document = {
        "out": args.out,
        "train_size": len(observations),
        "holdout_size": len(holdout),
        "stages": {
            name: {"dimensions": stage.pipeline.dimensions(), "generations": len(stage.history), "final_error": stage.history[-1] if stage.history else None}
            for name, stage in model.stages()
        },
    }
    lines = [f"Saved model bundle to {args.out}"]
    lines += [
        f"    {name:<10} {info['dimensions']:<18} generations {info['generations']:<6} error {info['final_error']}"
        for name, info in document["stages"].items()
    ]
    if holdout:
        accuracy = stage_accuracy(model, holdout)
        document["holdout_accuracy"] = {name: acc for name, (acc, _) in accuracy.items()}
        lines.append("Hold-out accuracy:")
        lines += [f"    {name:<10} {acc:.4f} ({n} samples)" for name, (acc, n) in accuracy.items()]
    emit(args, "\n".join(lines), document)


def cmd_classify(args, conf):
    obs = load_observation(args.observation)
    if args.baseline:
        if not args.db:
            raise DatasetError("--baseline needs --db")
        db = load_nmap_db(args.db)
        scored = best_fit_baseline(db, obs)[: args.top]
        emit(
            args,
            "\n".join(f"{s.score:.4f} ({s.matched}/{s.considered}) {s.name}" for s in scored),
            {"baseline": [s._asdict() for s in scored]},
        )
        return
    bundle = load_bundle(args.bundle)
    dump = load_endpoint_dump(args.dcerpc) if args.dcerpc else None
    report = classify(bundle.model, obs, dump)
    emit(args, report.render_text(), report.to_dict())


def _profile_path(args, conf):
    """--dcerpc-profile, else the configured profile when it exists; None turns DCE-RPC off."""
    if args.dcerpc_profile:
        return args.dcerpc_profile
    path = resolve_path(conf["dcerpc"]["profiles"])
    if path and not os.path.isfile(path):
        logger.warning(f"DCE-RPC profile {path} not found, skipping the endpoint net")
        return None
    return path


def _windows_label(labels):
    return WindowsLabel(labels.version, labels.edition, str(labels.service_pack))


def _dcerpc_dumps(model, observations, profile, seed):
    if profile is None or model.dcerpc is None:
        return None
    known = set(profile.labels())
    streams = spawn_generators(seed, len(observations))
    dumps = []
    for obs, rng in zip(observations, streams):
        label = _windows_label(obs.labels) if obs.labels.family in model.refine_with_dcerpc else None
        dumps.append(sample_dump(profile, label, rng) if label in known else None)
    return dumps


def cmd_eval(args, conf):
    bundle = load_bundle(args.bundle)
    dataset = args.dataset or bundle.holdout_path
    if dataset is None:
        raise DatasetError(f"no dataset given and {args.bundle} has no hold-out set")
    _, observations = read_dataset(dataset)
    db = label_database(load_nmap_db(args.db), bundle.label_rules)
    profile_path = _profile_path(args, conf)
    profile = DcerpcProfile.load(profile_path) if profile_path else None
    dumps = _dcerpc_dumps(bundle.model, observations, profile, conf["seed"])
    table = evaluate(bundle.model, db, observations, dumps, n_jobs=conf["n_jobs"])
    text = table.to_string()
    document = {"dataset": dataset, "results": _counts(table)}
    samples = [
        (dump, _windows_label(obs.labels)) for obs, dump in zip(observations, dumps or []) if dump is not None
    ]
    if samples:
        dcerpc_table = evaluate_dcerpc(bundle.model, profile, samples)
        text += "\n\nDCE-RPC endpoint listings:\n" + dcerpc_table.to_string()
        document["dcerpc_results"] = _counts(dcerpc_table)
    emit(args, text, document)


def _counts(table):
    return {m: {c: int(n) for c, n in table[m].items()} for m in table.columns}


def _surviving_fields(model, stage):
    by_test = {}
    for column in stage.pipeline.kept_columns:
        test, name = model.schema.slot_field(column)
        by_test.setdefault(test, set()).add(name)
    return {test: sorted(names) for test, names in by_test.items()}


def inspect_bundle(path):
    bundle = load_bundle(path)
    model = bundle.model
    tests = sorted({s.test for s in model.schema.slots})
    document = {"schema_hash": model.schema.hash, "stages": {}}
    lines = [f"Model bundle {path} (schema {model.schema.hash[:12]})"]
    for name, stage in model.stages():
        fields = _surviving_fields(model, stage)
        silent = [t for t in tests if t not in fields]
        document["stages"][name] = {
            "dimensions": stage.pipeline.dimensions(),
            "explained_variance_ratio": stage.pipeline.explained_variance_ratio,
            "outputs": list(stage.labels),
            "surviving_fields": fields,
            "tests_without_information": silent,
        }
        lines.append(f"{name}: {stage.pipeline.dimensions()}")
        for test in tests:
            if test in fields:
                lines.append(f"    {test:<5} {', '.join(fields[test])}")
        if silent:
            lines.append(f"    no surviving input from: {', '.join(silent)}")
    if model.dcerpc is not None:
        document["dcerpc"] = {"inputs": model.dcerpc.schema.dimension, "outputs": model.dcerpc.groups.size}
        lines.append(f"dcerpc: {model.dcerpc.schema.dimension} inputs, {model.dcerpc.groups.size} outputs")
    return "\n".join(lines), document


def cmd_inspect(args, conf):
    path = args.path
    if os.path.isdir(path):
        if not os.path.isfile(os.path.join(path, MANIFEST)):
            raise BundleError(f"{path} is a directory but not a model bundle")
        text, document = inspect_bundle(path)
        emit(args, text, document)
        return
    with open(path, encoding="utf-8") as fid:
        content = fid.read()
    stripped = content.lstrip()
    if stripped.startswith("{"):
        header, observations = read_dataset(path)
        counts = {}
        for obs in observations:
            key = obs.labels.family if obs.labels and obs.labels.relevant else "not relevant"
            counts[key] = counts.get(key, 0) + 1
        emit(
            args,
            f"Dataset {path}: {len(observations)} observations\n"
            + "\n".join(f"    {k:<14} {v}" for k, v in sorted(counts.items())),
            {"kind": "dataset", "header": header, "observations": len(observations), "families": counts},
        )
    elif "Fingerprint" in content:
        db = label_database(parse_nmap_db(content), _load_rules(args, conf))
        histogram = family_histogram(db)
        lines = [f"Signature database {path}: {len(db)} signatures"]
        lines += [f"    {k:<14} {v}" for k, v in sorted(histogram.items())]
        lines += [f"    unknown field {t}.{n} on line {line}" for line, t, n in db.report.unknown_fields]
        emit(
            args,
            "\n".join(lines),
            {"kind": "database", "signatures": len(db), "families": histogram, "content_hash": db.content_hash},
        )
    elif 'uuid="' in content:
        dump = parse_endpoint_dump(content)
        emit(
            args,
            f"Endpoint dump {path}: {len(dump.programs)} programs, {dump.endpoint_count} endpoints",
            {"kind": "dcerpc", "programs": len(dump.programs), "endpoints": dump.endpoint_count},
        )
    else:
        raise BundleError(f"{path}: unknown artifact type")


def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master random seed")
    common.add_argument("-c", "--config", dest="config", default=None, help="Path to a YAML run configuration")
    common.add_argument("--json", action="store_true", help="Write a JSON document to stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--n-jobs", dest="n_jobs", type=int, default=None)

    parser = ArgumentParser(prog="osfp", description="Neural network OS fingerprinting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", parents=[common], help="Sample a labeled dataset from a signature database")
    p.add_argument("db")
    p.add_argument("--labels", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", parents=[common], help="Train the classifier hierarchy")
    p.add_argument("dataset")
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dcerpc-profile", dest="dcerpc_profile", default=None,
                   help="DCE-RPC profile, defaults to dcerpc.profiles of the config")
    p.add_argument("--holdout", type=float, default=None,
                   help="Fraction kept out of training and stored in the bundle, 0 to train on everything")
    p.add_argument("--fixed-lr", dest="fixed_lr", action="store_true")
    p.add_argument("--retention", type=float, default=None)
    p.add_argument("--dependence-threshold", dest="dependence_threshold", type=float, default=None)
    p.add_argument("--max-generations", dest="max_generations", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", parents=[common], help="Classify one observation")
    p.add_argument("bundle", nargs="?", default=None)
    p.add_argument("observation")
    p.add_argument("--dcerpc", default=None, help="Endpoint mapper dump of the same host")
    p.add_argument("--baseline", action="store_true", help="Score with best-fit matching instead")
    p.add_argument("--db", default=None)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", parents=[common], help="Compare the model against best-fit matching")
    p.add_argument("bundle")
    p.add_argument("dataset", nargs="?", default=None)
    p.add_argument("--db", required=True)
    p.add_argument("--dcerpc-profile", dest="dcerpc_profile", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="Summarize a database, dataset, dump or bundle")
    p.add_argument("path")
    p.add_argument("--labels", default=None)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    setup_logging(args.verbose, args.quiet)
    if args.command == "classify" and not args.baseline and args.bundle is None:
        logger.error("classify needs a bundle unless --baseline is given")
        return EXIT_USAGE
    try:
        conf = load_config(args.config, _overrides(args))
        if conf["verbose"] and not args.verbose and not args.quiet:
            setup_logging(conf["verbose"])
        args.func(args, conf)
    except (OsfpError, OSError, yaml.YAMLError) as err:
        logger.error(str(err))
        return exit_code(err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
