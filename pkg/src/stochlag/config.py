"""Experiment configuration: JSON schema, defaults, hashing and object factories."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from . import fields
from .eulerian import DirectSolverConfig
from .lagrangian import LagrangianConfig, PicardConfig
from .noise import BrownianPath, NoiseBasis, NoiseMode, sample_brownian
from .spectral import TorusGrid


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d": {"enum": [2, 3]},
        "n": {"type": "integer", "minimum": 8, "multipleOf": 2},
        "s": _POS,
        "initial": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["taylor-green", "shear", "random-bandlimited", "zero"]},
                "amplitude": _NUM,
                "k": {"type": "integer", "minimum": 1},
                "kmax": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "noise": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["trig", "constant", "cellular"]},
                    "wavevector": {"type": "array", "items": {"type": "integer"}, "minItems": 2,
                                   "maxItems": 3},
                    "amplitude": _NUM,
                    "phase": _NUM,
                    "polarization": _VEC,
                    "vector": _VEC,
                },
            },
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "T": {"type": "number", "minimum": 0},
        "dt": _POS,
        "realizations": {"type": "integer", "minimum": 1},
        "picard": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _POS,
                "ratio_max": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "T_min": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "M": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "window": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "continuation": {"type": "boolean"},
            },
        },
        "lagrangian": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "interp_order": {"enum": [1, 3, 5]},
                "substeps": {"type": "integer", "minimum": 1},
                "inversion_method": {"enum": ["fixed-point", "newton"]},
                "inversion_tol": _POS,
                "inversion_max_iter": {"type": "integer", "minimum": 1},
                "dealias": {"type": "boolean"},
            },
        },
        "direct": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dealias": {"type": "boolean"},
                "viscosity": {"type": "number", "minimum": 0},
                "retry": {"type": "boolean"},
            },
        },
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"weber": {"type": "boolean"}},
        },
        "output_stride": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS = {
    "d": 2,
    "n": 64,
    "s": 3.0,
    "initial": {"kind": "taylor-green"},
    "noise": [],
    "seed": 0,
    "T": 0.25,
    "dt": 1e-3,
    "realizations": 1,
    "picard": {},
    "lagrangian": {},
    "direct": {},
    "diagnostics": {"weber": True},
    "output_stride": 1,
    "out": "out",
    "threads": 1,
}

# keys that change only where or how fast results are produced, not what they are
_NON_SEMANTIC = ("out", "threads")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _where(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_where(e)}: {e.message}" for e in errors))


def load(path=None, overrides: dict | None = None) -> "ExperimentConfig":
    """Read a JSON config (or start from defaults), apply overrides, validate."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
    if overrides:
        raw = _merge(raw, {k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(raw)


class ExperimentConfig:
    """Validated experiment description; ``data`` holds the defaults-merged dict."""

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        validate(raw)
        self.data = _merge(DEFAULTS, raw)
        validate(self.data)
        self._check_semantics()

    def __getitem__(self, key):
        return self.data[key]

    def _check_semantics(self):
        d = self.data
        for i, mode in enumerate(d["noise"]):
            vec = mode.get("vector") if mode["kind"] == "constant" else mode.get("wavevector")
            if vec is None:
                need = "vector" if mode["kind"] == "constant" else "wavevector"
                raise ConfigError(f"noise/{i}: '{need}' is required for kind {mode['kind']}")
            if len(vec) != d["d"]:
                raise ConfigError(f"noise/{i}: expected {d['d']} entries, got {len(vec)}")
        if d["T"] > 0 and abs(d["T"] / d["dt"] - round(d["T"] / d["dt"])) > 1e-9 * d["T"] / d["dt"]:
            raise ConfigError("T: horizon must be an integer multiple of dt")
        T_min = d["picard"].get("T_min")
        if T_min is not None and T_min > d["T"]:
            raise ConfigError(f"picard/T_min: {T_min} exceeds the horizon T={d['T']}")
        init = d["initial"]
        if init["kind"] == "random-bandlimited" and init.get("kmax", 4) >= d["n"] / 3:
            raise ConfigError(f"initial/kmax: must be below n/3 = {d['n'] / 3:g}")

    @property
    def hash(self) -> str:
        semantic = {k: v for k, v in self.data.items() if k not in _NON_SEMANTIC}
        text = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    # factories -----------------------------------------------------------

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.data["d"], self.data["n"])

    @property
    def steps(self) -> int:
        return int(round(self.data["T"] / self.data["dt"]))

    def initial_field(self, grid: TorusGrid | None = None) -> np.ndarray:
        grid = grid or self.grid
        init = self.data["initial"]
        amp = init.get("amplitude", 1.0)
        if init["kind"] == "taylor-green":
            return fields.taylor_green(grid, amp)
        if init["kind"] == "shear":
            return fields.shear(grid, amp, init.get("k", 1))
        if init["kind"] == "random-bandlimited":
            return fields.random_bandlimited(grid, init.get("seed", self.data["seed"]), init.get("kmax", 4), amp)
        return np.zeros((grid.d, *grid.shape))

    def basis(self) -> NoiseBasis:
        return NoiseBasis(self.grid, [NoiseMode.from_dict(m) for m in self.data["noise"]])

    def path(self, seed: int | None = None) -> BrownianPath:
        """Brownian path on the uniform mesh; a zero horizon still gets one step so the mesh is valid."""
        seed = self.data["seed"] if seed is None else seed
        m = len(self.data["noise"])
        N = max(self.steps, 1)
        return sample_brownian(m, N * self.data["dt"], N, seed)

    def picard(self) -> PicardConfig:
        return PicardConfig(s=self.data["s"], **self.data["picard"])

    def lagrangian(self) -> LagrangianConfig:
        return LagrangianConfig(**self.data["lagrangian"])

    def direct(self) -> DirectSolverConfig:
        return DirectSolverConfig(s=self.data["s"], **self.data["direct"])
