"""Python access to the plmix C++ core.

Configs are plain dicts in the same schema as the CLI's JSON config files.
"""

import json

from . import _core
from ._core import (
    CONFIG_FORMAT_VERSION,
    ConfigError,
    Error,
    InputError,
    calibrate_threshold,
    edit_distance,
    grad_check,
    merge_consecutive,
    per,
    plan,
)

__all__ = [
    "CONFIG_FORMAT_VERSION",
    "ConfigError",
    "Error",
    "InputError",
    "calibrate_threshold",
    "config_issues",
    "default_config",
    "edit_distance",
    "grad_check",
    "merge_consecutive",
    "normalize_config",
    "per",
    "plan",
    "run_suite",
    "split_summary",
]


def _dump(config):
    return "" if config is None else json.dumps(config)


def default_config():
    return json.loads(_core.default_config_json())


def normalize_config(config):
    """Fills in defaults; raises ConfigError on invalid input."""
    return json.loads(_core.normalize_config_json(_dump(config)))


def config_issues(config):
    """Field-level problems as "path: message" strings (empty when valid)."""
    return list(_core.config_issues(_dump(config)))


def split_summary(config=None, run_seed=1):
    return dict(_core.split_summary(_dump(config), run_seed))


def run_suite(suite, config=None, workers=1):
    """Returns (results_csv, results dict, trend checks)."""
    csv, results, checks = _core.run_suite(suite, _dump(config), workers)
    return csv, json.loads(results), [dict(c) for c in checks]
