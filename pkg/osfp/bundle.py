"""
Model bundle: a directory holding the encoding schema, one sub-directory per classifier
and a manifest with the SHA-256 of every file.

    bundle/
        manifest.yml
        schema.json
        labels.yml
        config.yml
        relevance/{pipeline.json, model.json, history.txt}
        family/...
        <Family>/...
        dcerpc/{schema.json, groups.json, model.json, history.txt}
        holdout.jsonl            (optional)
"""
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import pandas as pd
import yaml

from osfp.config import dump_config
from osfp.encoder import EncodingSchema
from osfp.exceptions import BundleError, SchemaMismatchError
from osfp.hierarchy import DCERPC, FAMILY, RELEVANCE, DcerpcStage, HierarchicalModel, Stage, WindowsLabelGroups
from osfp.labels import FAMILIES, LabelRuleSet
from osfp.neuralnet import load_mlp, save_mlp
from osfp.reducer import load_pipeline, save_pipeline
from osfp.synth import write_dataset


logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 1
MANIFEST = "manifest.yml"
HOLDOUT = "holdout.jsonl"


@dataclass(frozen=True)
class Bundle:
    model: HierarchicalModel
    manifest: dict
    config: dict
    label_rules: LabelRuleSet
    path: str

    @property
    def holdout_path(self):
        fn = os.path.join(self.path, HOLDOUT)
        return fn if HOLDOUT in self.manifest["files"] else None


def file_hash(fn):
    digest = hashlib.sha256()
    with open(fn, "rb") as fid:
        for block in iter(lambda: fid.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_history(history, fn):
    """Two columns: generation and mean quadratic error."""
    frame = pd.DataFrame({"generation": range(len(history)), "error": list(history)})
    frame.to_csv(fn, sep=" ", header=False, index=False, float_format="%.17g")


def read_history(fn):
    if os.path.getsize(fn) == 0:
        return ()
    frame = pd.read_csv(fn, sep=" ", header=None, names=["generation", "error"])
    return tuple(float(e) for e in frame["error"])


def _save_stage(stage, directory):
    os.makedirs(directory, exist_ok=True)
    save_pipeline(stage.pipeline, os.path.join(directory, "pipeline.json"))
    save_mlp(stage.net, os.path.join(directory, "model.json"))
    write_history(stage.history, os.path.join(directory, "history.txt"))
    with open(os.path.join(directory, "labels.json"), "w") as fid:
        json.dump(list(stage.labels), fid)


def _load_stage(name, directory):
    with open(os.path.join(directory, "labels.json")) as fid:
        labels = tuple(json.load(fid))
    return Stage(
        name,
        load_pipeline(os.path.join(directory, "pipeline.json")),
        load_mlp(os.path.join(directory, "model.json")),
        labels,
        read_history(os.path.join(directory, "history.txt")),
    )


def save_bundle(model, path, config, label_rules, holdout=None):
    """
    Write a trained model and its provenance. Fails when ``path`` already holds a bundle.

    Args:
        model: HierarchicalModel
        path: output directory
        config: effective run configuration
        label_rules: LabelRuleSet used to label the training data
        holdout: optional observations kept out of training, stored as holdout.jsonl
    """
    if os.path.exists(os.path.join(path, MANIFEST)):
        raise BundleError(f"{path} already contains a model bundle")
    os.makedirs(path, exist_ok=True)
    model.schema.save(os.path.join(path, "schema.json"))
    with open(os.path.join(path, "labels.yml"), "w") as fid:
        if label_rules.source:
            fid.write(label_rules.source)
        else:
            yaml.safe_dump(
                {"rules": [{"name": r.name, "match": r.match, "labels": r.labels.to_dict()} for r in label_rules.rules]},
                fid,
                sort_keys=False,
            )
    dump_config(config, os.path.join(path, "config.yml"))
    stages = []
    for name, stage in model.stages():
        _save_stage(stage, os.path.join(path, name))
        stages.append(name)
    if model.dcerpc is not None:
        directory = os.path.join(path, DCERPC)
        os.makedirs(directory, exist_ok=True)
        model.dcerpc.schema.save(os.path.join(directory, "schema.json"))
        save_mlp(model.dcerpc.net, os.path.join(directory, "model.json"))
        write_history(model.dcerpc.history, os.path.join(directory, "history.txt"))
        with open(os.path.join(directory, "groups.json"), "w") as fid:
            json.dump(model.dcerpc.groups.to_dict(), fid, indent=1)
    if holdout:
        write_dataset(os.path.join(path, HOLDOUT), holdout, {"kind": "holdout", "seed": config.get("seed")})
    files = {}
    for root, _, names in os.walk(path):
        for fn in names:
            full = os.path.join(root, fn)
            rel = os.path.relpath(full, path).replace(os.sep, "/")
            if rel != MANIFEST:
                files[rel] = file_hash(full)
    manifest = {
        "format": BUNDLE_FORMAT,
        "schema_hash": model.schema.hash,
        "threshold": model.threshold,
        "refine_with_dcerpc": list(model.refine_with_dcerpc),
        "stages": stages,
        "dcerpc": model.dcerpc is not None,
        "files": dict(sorted(files.items())),
    }
    with open(os.path.join(path, MANIFEST), "w") as fid:
        yaml.safe_dump(manifest, fid, sort_keys=True)
    logger.info(f"Saved bundle with {len(stages)} classifiers to {path}")
    return manifest


def read_manifest(path):
    fn = os.path.join(path, MANIFEST)
    if not os.path.isfile(fn):
        raise BundleError(f"{path} is not a model bundle (no {MANIFEST})")
    with open(fn) as fid:
        manifest = yaml.safe_load(fid)
    if not isinstance(manifest, dict) or manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"{fn}: unsupported bundle format")
    return manifest


def verify_bundle(path, manifest=None):
    manifest = manifest or read_manifest(path)
    for rel, expected in manifest["files"].items():
        fn = os.path.join(path, *rel.split("/"))
        if not os.path.isfile(fn):
            raise BundleError(f"{path}: missing file {rel}")
        if file_hash(fn) != expected:
            raise BundleError(f"{path}: {rel} does not match its manifest hash")
    return manifest


def load_bundle(path) -> Bundle:
    """
    Load and verify a bundle.

    Raises:
        BundleError: missing or modified files
        SchemaMismatchError: a classifier was fitted against another schema
    """
    manifest = verify_bundle(path)
    schema = EncodingSchema.load(os.path.join(path, "schema.json"))
    if schema.hash != manifest["schema_hash"]:
        raise SchemaMismatchError(manifest["schema_hash"], schema.hash, "bundle")
    stages = {name: _load_stage(name, os.path.join(path, name)) for name in manifest["stages"]}
    for name, stage in stages.items():
        if stage.pipeline.schema_hash != schema.hash:
            raise SchemaMismatchError(schema.hash, stage.pipeline.schema_hash, f"{name} pipeline")
    if RELEVANCE not in stages or FAMILY not in stages:
        raise BundleError(f"{path}: relevance and family classifiers are required")
    dcerpc: Optional[DcerpcStage] = None
    if manifest.get("dcerpc"):
        directory = os.path.join(path, DCERPC)
        with open(os.path.join(directory, "groups.json")) as fid:
            groups = WindowsLabelGroups.from_dict(json.load(fid))
        dcerpc = DcerpcStage(
            EncodingSchema.load(os.path.join(directory, "schema.json")),
            load_mlp(os.path.join(directory, "model.json")),
            groups,
            read_history(os.path.join(directory, "history.txt")),
        )
    model = HierarchicalModel(
        schema,
        stages[RELEVANCE],
        stages[FAMILY],
        {name: stages[name] for name in manifest["stages"] if name in FAMILIES},
        dcerpc,
        float(manifest["threshold"]),
        tuple(manifest["refine_with_dcerpc"]),
    )
    with open(os.path.join(path, "config.yml")) as fid:
        config = yaml.safe_load(fid)
    return Bundle(model, manifest, config, LabelRuleSet.load(os.path.join(path, "labels.yml")), path)
