import copy
import logging
import os

import yaml


logger = logging.getLogger(__name__)

PACKAGE_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

DEFAULTS = {
    "seed": 1000,
    "n_jobs": 1,
    "verbose": 0,
    "labels": os.path.join("config", "labels.yml"),
    "synth": {
        "total": 6000,
        "irrelevant_fraction": 0.2,
        "weights": None,
    },
    "reduction": {
        "retention": 0.98,
        "dependence_threshold": 0.999,
    },
    "training": {
        "max_generations": 600,
        "target_error": 0.002,
        "adaptive": True,
        "lr_up": 1.05,
        "lr_down": 0.7,
        "lambda_init": 0.001,
        "mu_momentum": 0.5,
        "weight_init_scale": 0.1,
        "lambda_min": None,
        "lambda_max": None,
    },
    "topologies": {
        "relevance": 20,
        "family": 20,
        "Linux": 18,
        "Solaris": 7,
        "OpenBSD": 4,
        "FreeBSD": 4,
        "NetBSD": 4,
        "dcerpc": 42,
    },
    "relevance_threshold": 0.0,
    "refine_with_dcerpc": ["Windows"],
    "dcerpc": {
        "profiles": os.path.join("data", "dcerpc", "profiles.yml"),
        "total": 1500,
        "keep_probability": 0.9,
        "novel_probability": 0.1,
        "min_count": 2,
    },
    "holdout": 0.2,
}


def merge(base, override):
    """Recursively overlay ``override`` onto a copy of ``base``."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(config_file=None, overrides=None):
    """
    Load a run configuration.

    Args:
        config_file (str): Path to a YAML config. None uses the built-in defaults only.
        overrides (dict): Nested values applied last (CLI flags).
    Returns:
        dict with every key of DEFAULTS resolved.
    """
    conf = {}
    if config_file:
        with open(config_file) as cf:
            conf = yaml.safe_load(cf) or {}
        logger.info(f"Loaded configuration from {config_file}")
    return merge(merge(DEFAULTS, conf), overrides or {})


def resolve_path(path):
    """Paths in the config are relative to the working directory, falling back to the repo root."""
    if path is None or os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(PACKAGE_ROOT, path)
    return candidate if os.path.exists(candidate) else path


def dump_config(conf, fn):
    with open(fn, "w") as fid:
        yaml.safe_dump(conf, fid, sort_keys=True)
