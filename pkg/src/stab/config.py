"""Scenario files: YAML schema, defaults, validation and seeding.

A scenario is one YAML mapping. Every key below is optional except the
ones marked required; missing keys take the listed defaults, and the
filled-in scenario is echoed into every report.

    version: 1                  # schema version (required)
    name: local_linear
    mode: local                 # local | global
    dim: 2                      # d (required)
    n: 100                      # N (required)
    seed: 0
    field: {label: linear_steer, C0: null}
    controls: {kind: axis, amplitude: 1.0}
        # or {kind: list, values: [[0, 0], [1, 0]]}
        # or {kind: lattice, levels: [-1, 0, 1]}
    clp: {kind: builtin, eps0: 1.0, calibrate: true}
    target: {kind: origin}      # or {kind: file, path: target.csv}
    initial: {kind: generator, w2: 2.0, mean: null}
        # or {kind: file, path: start.csv}
    r: 0.2                      # required
    R: 2.0                      # required
    horizon: 10.0
    partition: {rule: uniform, delta: null, delta_min: null}
    integrator: {substeps: null, max_dt: 0.01}
    infconv: {probes: 16, repair_every: 10, max_iter: 10000}
    overrides: {kappa: null, eps: null}
    shells: {Q0: 1.0, i_min: -4, i_max: 4}
    policy: {kind: feedback, index: 0}    # or {kind: constant, index: k}
    reach_time: analytic        # analytic | theory | <number>
    verify: {trials: 20, probes: 64}
    outputs: {snapshot_stride: 10, figures: true}
    tolerance: 1.0e-6

Relative file paths resolve against the scenario file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .dynamics import FIELDS, ControlSet, make_field
from .measures import EmpiricalMeasure, read_measure_csv

__all__ = ["ConfigError", "Scenario", "DEFAULTS", "SCHEMA_VERSION", "load_scenario", "scenario_from_dict", "sub_seed"]

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "version": SCHEMA_VERSION,
    "name": "scenario",
    "mode": "local",
    "seed": 0,
    "field": {"label": "linear_steer", "C0": None},
    "controls": {"kind": "axis", "amplitude": 1.0, "values": None, "levels": None},
    "clp": {"kind": "builtin", "eps0": 1.0, "calibrate": True},
    "target": {"kind": "origin", "path": None},
    "initial": {"kind": "generator", "w2": 2.0, "mean": None, "path": None},
    "horizon": 10.0,
    "partition": {"rule": "uniform", "delta": None, "delta_min": None},
    "integrator": {"substeps": None, "max_dt": 0.01},
    "infconv": {"probes": 16, "repair_every": 10, "max_iter": 10000},
    "overrides": {"kappa": None, "eps": None},
    "shells": {"Q0": 1.0, "i_min": -4, "i_max": 4},
    "policy": {"kind": "feedback", "index": 0},
    "reach_time": "analytic",
    "verify": {"trials": 20, "probes": 64},
    "outputs": {"snapshot_stride": 10, "figures": True},
    "tolerance": 1e-6,
}
REQUIRED = ("version", "dim", "n", "r", "R")


class ConfigError(ValueError):
    """Schema or validation failure; the message names the offending field."""


def sub_seed(seed: int, name: str) -> int:
    """Independent stream for component ``name``: SeedSequence([seed, crc32(name)])."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {path}{key!s}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            out[key] = _merge(defaults[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def _num(d: dict, key: str, label: str, positive: bool = False, allow_none: bool = False):
    v = d[key]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{label} must be a number")
    if positive and not v > 0:
        raise ConfigError(f"{label} must be positive")
    return float(v)


@dataclass(frozen=True)
class Scenario:
    """Validated scenario; ``data`` is the full dict with defaults filled in."""

    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def mode(self) -> str:
        return self.data["mode"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def r(self) -> float:
        return float(self.data["r"])

    @property
    def R(self) -> float:
        return float(self.data["R"])

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def seed_for(self, name: str) -> int:
        return sub_seed(self.seed, name)

    def replace(self, **changes) -> "Scenario":
        """Copy with dotted-path overrides, e.g. ``replace(**{"partition.delta": 0.01})``."""
        data = copy.deepcopy(self.data)
        for key, val in changes.items():
            *head, last = key.split(".")
            node = data
            for h in head:
                node = node[h]
            node[last] = val
        return scenario_from_dict(data, self.base_dir)

    # builders

    def field(self):
        return make_field(self.data["field"]["label"], self.data["field"]["C0"])

    def controls(self) -> ControlSet:
        c, d = self.data["controls"], int(self.data["dim"])
        if c["kind"] == "axis":
            return ControlSet.axis_grid(d, float(c["amplitude"]))
        if c["kind"] == "lattice":
            return ControlSet.lattice(d, c["levels"])
        return ControlSet(np.asarray(c["values"], dtype=float))

    def target(self) -> EmpiricalMeasure:
        t = self.data["target"]
        if t["kind"] == "origin":
            return EmpiricalMeasure.dirac(np.zeros(int(self.data["dim"])))
        return read_measure_csv(self.base_dir / t["path"])

    def initial(self) -> EmpiricalMeasure:
        """Start measure: from file, or mean + centred normal spread scaled to the W2 radius."""
        s = self.data["initial"]
        if s["kind"] == "file":
            return read_measure_csv(self.base_dir / s["path"])
        n, d = int(self.data["n"]), int(self.data["dim"])
        w2 = float(s["w2"])
        mean = np.zeros(d) if s["mean"] is None else np.asarray(s["mean"], dtype=float)
        spread2 = w2 * w2 - float(mean @ mean)
        if spread2 < -1e-12:
            raise ConfigError("initial.mean lies farther from the origin than initial.w2")
        rng = np.random.default_rng(self.seed_for("initial"))
        v = rng.normal(size=(n, d))
        v -= v.mean(axis=0)
        rms = float(np.sqrt(np.mean(np.sum(v * v, axis=1))))
        if n == 1 or rms == 0.0 or spread2 <= 0.0:
            if abs(spread2) > 1e-12:
                raise ConfigError("a single particle cannot carry spread; set initial.mean with |mean| = w2")
            return EmpiricalMeasure(np.tile(mean, (n, 1)))
        return EmpiricalMeasure(v * (np.sqrt(spread2) / rms) + mean)


def _validate(data: dict, base_dir: Path) -> None:
    if data["version"] != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {data['version']!r} (supported: {SCHEMA_VERSION})")
    for key in ("dim", "n"):
        v = data[key]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{key} must be an integer >= 1")
    r = _num(data, "r", "r", positive=True)
    R = _num(data, "R", "R", positive=True)
    if not r < R:
        raise ConfigError("r must be smaller than R")
    if data["mode"] not in ("local", "global"):
        raise ConfigError("mode must be 'local' or 'global'")
    if data["field"]["label"] not in FIELDS:
        raise ConfigError(f"field.label: unknown label {data['field']['label']!r}; supported: {sorted(FIELDS)}")
    _num(data["field"], "C0", "field.C0", positive=True, allow_none=True)
    kind = data["controls"]["kind"]
    if kind not in ("axis", "list", "lattice"):
        raise ConfigError("controls.kind must be axis, list or lattice")
    if kind == "list":
        vals = np.asarray(data["controls"]["values"], dtype=float)
        if vals.ndim != 2 or vals.shape[1] != data["dim"]:
            raise ConfigError("controls.values must be a list of dim-length vectors")
    if kind == "lattice" and not data["controls"]["levels"]:
        raise ConfigError("controls.levels must be a non-empty list")
    if data["clp"]["kind"] != "builtin":
        raise ConfigError("clp.kind: only 'builtin' is supported from scenario files")
    _num(data["clp"], "eps0", "clp.eps0", positive=True)
    for sect, kinds in (("target", ("origin", "file")), ("initial", ("generator", "file"))):
        k = data[sect]["kind"]
        if k not in kinds:
            raise ConfigError(f"{sect}.kind must be one of {kinds}")
        if k == "file":
            p = data[sect]["path"]
            if not p or not (base_dir / p).is_file():
                raise ConfigError(f"{sect}.path: file not found: {p}")
    if data["initial"]["kind"] == "generator":
        _num(data["initial"], "w2", "initial.w2")
        if data["initial"]["mean"] is not None and len(data["initial"]["mean"]) != data["dim"]:
            raise ConfigError("initial.mean must have dim entries")
    _num(data, "horizon", "horizon", positive=True)
    if data["partition"]["rule"] not in ("uniform", "jittered"):
        raise ConfigError("partition.rule must be uniform or jittered")
    _num(data["partition"], "delta", "partition.delta", positive=True, allow_none=True)
    _num(data["partition"], "delta_min", "partition.delta_min", positive=True, allow_none=True)
    sub = data["integrator"]["substeps"]
    if sub is not None and (not isinstance(sub, int) or sub < 1):
        raise ConfigError("integrator.substeps must be a positive integer or null")
    for key in ("kappa", "eps"):
        _num(data["overrides"], key, f"overrides.{key}", positive=True, allow_none=True)
    sh = data["shells"]
    _num(sh, "Q0", "shells.Q0", positive=True)
    if not (isinstance(sh["i_min"], int) and isinstance(sh["i_max"], int) and sh["i_min"] < 0 < sh["i_max"]):
        raise ConfigError("shells: need integers i_min < 0 < i_max")
    if data["policy"]["kind"] not in ("feedback", "constant"):
        raise ConfigError("policy.kind must be feedback or constant")
    rt = data["reach_time"]
    if rt not in ("analytic", "theory") and (isinstance(rt, bool) or not isinstance(rt, (int, float))):
        raise ConfigError("reach_time must be 'analytic', 'theory' or a number")
    for key in ("probes", "repair_every", "max_iter"):
        if not isinstance(data["infconv"][key], int) or data["infconv"][key] < 1:
            raise ConfigError(f"infconv.{key} must be a positive integer")
    _num(data, "tolerance", "tolerance")


def scenario_from_dict(raw: dict, base_dir: Path | str = ".") -> Scenario:
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a mapping")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required key {key}")
    defaults = dict(DEFAULTS, dim=None, n=None, r=None, R=None)
    data = _merge(defaults, raw, "")
    base = Path(base_dir)
    _validate(data, base)
    return Scenario(data, base)


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from None
    return scenario_from_dict(raw, p.parent)
