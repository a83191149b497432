"""Plain-text key = value configuration files and stable config hashing.

Every run embeds the hash of its resolved configuration in the experiment
manifest, so records are traceable to the exact settings that produced
them. Unknown keys are rejected to catch typos early.
"""

from __future__ import annotations

import hashlib
import json

from .errors import InvalidInput

# Defaults for every recognized key; the value type doubles as the parser.
DEFAULTS = {
    # solver options
    "max_iters": 4000,
    "success_tol": 1e-3,
    "stall_window": 50,
    "stall_rel_change": 1e-12,
    "stall_sigma_factor": 10.0,
    "stall_detection": True,
    # instance generation
    "mu": 100.0,
    "ensemble": "gaussian",
    "operator_mode": "auto",
    # sweep grid
    "trials": 50,
    "delta_window": 0.05,
    "delta_step": 0.01,
    # calibration
    "n_cal": 300,
    "cal_reps": 20,
    "mu_cal": 1000.0,
    "cal_grid_points": 80,
    "cal_seed": 1729,
    # execution
    "workers": 1,
    "master_seed": 20170825,
}


def _parse_value(key, raw):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise InvalidInput(f"config key {key!r}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise InvalidInput(f"config key {key!r}: expected an integer") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise InvalidInput(f"config key {key!r}: expected a number") from exc
    return raw


def parse_config(path):
    """Read a key = value file ('#' starts a comment) into a settings dict."""
    settings = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInput(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise InvalidInput(f"{path}:{lineno}: unknown config key {key!r}")
            settings[key] = _parse_value(key, raw)
    return settings


def resolve_config(path=None, overrides=None):
    """Defaults <- config file <- explicit overrides, in that order."""
    settings = dict(DEFAULTS)
    if path is not None:
        settings.update(parse_config(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            settings[key] = value
    return settings


def config_hash(settings):
    payload = json.dumps(settings, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
