"""Run configuration: JSON schema, physics validation, object construction.

A run is described by one JSON document.  Validation happens in two passes:
structural validation against a schema (all violations are collected, not
just the first), then physical validation by constructing the domain
objects (energies sorted, detailed balance, small-divisor margin, ...) with
every failure reported against its configuration path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .domain import Grid
from .errors import ConfigError, ModelError, ValidationError
from .profile_builder import ProfileSet, lift_initial_data
from .quantum import LevelSystem, gibbs_populations
from .spectral import BX, BY, EZ, PhaseLattice

_COMPLEX = {
    "oneOf": [
        {"type": "number"},
        {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    ]
}

_ENVELOPE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["shape"],
    "properties": {
        "shape": {"enum": ["gaussian", "constant", "file"]},
        "center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "width": {"type": "number", "exclusiveMinimum": 0},
        "amplitude": _COMPLEX,
        "path": {"type": "string"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["level_system", "lattice", "grids", "solver", "mode",
                 "epsilons", "initial_data", "output_dir", "seed"],
    "properties": {
        "level_system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_levels", "omega", "gamma", "temperature", "dipole_z", "pauli"],
            "properties": {
                "n_levels": {"type": "integer", "minimum": 2},
                "omega": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "gamma": {"type": "number", "minimum": 0},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "dipole_z": {"type": "array", "items": {"type": "array", "items": _COMPLEX}},
                "pauli": {
                    "type": "object",
                    "additionalProperties": False,
                    "minProperties": 1,
                    "maxProperties": 1,
                    "properties": {
                        "upper": {"type": "array", "items": {"type": "array",
                                                             "items": {"type": "number"}}},
                        "full": {"type": "array", "items": {"type": "array",
                                                            "items": {"type": "number"}}},
                    },
                },
            },
        },
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d", "k", "a", "c_dioph", "a_max"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "k": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "a": {"type": "number", "exclusiveMinimum": 0},
                "c_dioph": {"type": "number", "exclusiveMinimum": 0},
                "a_max": {"type": "integer", "minimum": 1},
            },
        },
        "grids": {
            "type": "object",
            "additionalProperties": False,
            "required": ["nx", "ny", "ntheta"],
            "properties": {
                "nx": {"type": "integer", "minimum": 2},
                "ny": {"type": "integer", "minimum": 2},
                "nz": {"type": "integer", "minimum": 1},
                "ntheta": {"type": "integer", "minimum": 2},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt_cfl": {"type": "number", "exclusiveMinimum": 0, "maximum": 1.0},
                "t_star": {"type": "number", "exclusiveMinimum": 0},
                "observer_stride": {"type": "integer", "minimum": 1},
                "dt_reduced": {"type": "number", "exclusiveMinimum": 0},
                "dt_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1.0},
                "residual_samples": {"type": "integer", "minimum": 2},
            },
        },
        "mode": {"enum": ["tm_prepared", "tm_unprepared", "reduced3d"]},
        "epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                     "minItems": 1},
        "initial_data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "field_modes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["beta", "polarization", "envelope"],
                        "properties": {
                            "beta": {"type": "array", "items": {"type": "integer"},
                                     "minItems": 1},
                            "polarization": {"enum": ["c_plus", "c_minus", "c_zero",
                                                      "by_mean"]},
                            "envelope": _ENVELOPE,
                        },
                    },
                },
                "populations": {
                    "oneOf": [
                        {"enum": ["gibbs"]},
                        {"type": "array", "items": {"type": "number", "minimum": 0}},
                    ]
                },
                "population_modes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["beta", "level", "envelope"],
                        "properties": {
                            "beta": {"type": "array", "items": {"type": "integer"}},
                            "level": {"type": "integer", "minimum": 1},
                            "envelope": _ENVELOPE,
                        },
                    },
                },
                "coherences": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["m", "n", "beta", "envelope"],
                        "properties": {
                            "m": {"type": "integer", "minimum": 1},
                            "n": {"type": "integer", "minimum": 1},
                            "beta": {"type": "array", "items": {"type": "integer"}},
                            "envelope": _ENVELOPE,
                        },
                    },
                },
            },
        },
        "delta": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "amplitude": {"type": "number", "minimum": 0},
                "exponent": {"type": "number", "minimum": 0},
            },
        },
        "acceptance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "residual_slope": {"type": "array", "items": {"type": "number"},
                                   "minItems": 2, "maxItems": 2},
                "error_slope": {"type": "array", "items": {"type": "number"},
                                "minItems": 2, "maxItems": 2},
            },
        },
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def _as_complex(value) -> complex:
    if isinstance(value, (int, float)):
        return complex(value)
    return complex(value[0], value[1])


@dataclass
class RunConfig:
    """Validated run description with constructors for the domain objects."""

    raw: dict
    path: str | None = None

    # -- constructors ---------------------------------------------------------

    def level_system(self) -> LevelSystem:
        ls = self.raw["level_system"]
        dipole_z = np.array([[_as_complex(v) for v in row] for row in ls["dipole_z"]])
        pauli = ls["pauli"]
        if "upper" in pauli:
            return LevelSystem.tm(ls["omega"], ls["gamma"], ls["temperature"], dipole_z,
                                  pauli_upper=np.asarray(pauli["upper"], dtype=float))
        return LevelSystem.tm(ls["omega"], ls["gamma"], ls["temperature"], dipole_z,
                              pauli_full=np.asarray(pauli["full"], dtype=float))

    def lattice(self) -> PhaseLattice:
        lt = self.raw["lattice"]
        if len(lt["k"]) != lt["d"]:
            raise ValidationError(f"k has {len(lt['k'])} components, expected d={lt['d']}")
        return PhaseLattice(k=np.asarray(lt["k"], dtype=float), a=lt["a"],
                            c_dioph=lt["c_dioph"], a_max=lt["a_max"])

    def grid(self) -> Grid:
        g = self.raw["grids"]
        return Grid(nx=g["nx"], ny=g["ny"], nz=g.get("nz", 1))

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def epsilons(self) -> list[float]:
        return [float(e) for e in self.raw["epsilons"]]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def solver_opt(self, key: str, default):
        return self.raw.get("solver", {}).get(key, default)

    def delta_opt(self, key: str, default):
        return self.raw.get("delta", {}).get(key, default)

    def acceptance_band(self, key: str, default):
        return tuple(self.raw.get("acceptance", {}).get(key, default))

    # -- initial data ---------------------------------------------------------

    def _envelope(self, spec, grid: Grid) -> np.ndarray:
        shape = spec["shape"]
        if shape == "constant":
            amp = _as_complex(spec.get("amplitude", 1.0))
            return np.full(grid.shape, amp, dtype=complex)
        if shape == "gaussian":
            amp = _as_complex(spec.get("amplitude", 1.0))
            cx, cy = spec.get("center", [grid.lx / 2, grid.ly / 2])
            width = spec.get("width", 0.5)
            xs, ys, _ = grid.mesh()
            env = np.zeros(grid.shape)
            for mx in (-1, 0, 1):
                for my in (-1, 0, 1):
                    env += np.exp(-(((xs - cx + grid.lx * mx) ** 2)
                                    + (ys - cy + grid.ly * my) ** 2) / (2 * width ** 2))
            return amp * env.astype(complex)
        if shape == "file":
            base = Path(self.path).parent if self.path else Path(".")
            data = np.loadtxt(base / spec["path"], delimiter=",")
            env = np.zeros(grid.shape, dtype=complex)
            for ix, iy, re, im in np.atleast_2d(data):
                env[int(ix), int(iy), 0] = complex(re, im)
            return env
        raise ValidationError(f"unknown envelope shape {shape!r}")

    def initial_profiles(self) -> ProfileSet:
        """Lift the configured initial data onto the polarized mode classes."""
        sys = self.level_system()
        lat = self.lattice()
        grid = self.grid()
        init = self.raw.get("initial_data", {})
        u_ini: dict = {}
        d = lat.d

        def add_field(beta, value):
            beta = tuple(beta)
            if beta in u_ini:
                u_ini[beta] = u_ini[beta] + value
            else:
                u_ini[beta] = value

        for entry in init.get("field_modes", []):
            beta = tuple(entry["beta"])
            if len(beta) != d:
                raise ValidationError(f"field mode beta {beta} has wrong dimension")
            env = self._envelope(entry["envelope"], grid)
            val = np.zeros(grid.shape + (6,), dtype=complex)
            pol = entry["polarization"]
            if pol == "c_plus":
                val[..., EZ] = env
                val[..., BY] = -env
            elif pol == "c_minus":
                val[..., EZ] = env
                val[..., BY] = env
            elif pol == "c_zero":
                val[..., BX] = env
            elif pol == "by_mean":
                if any(b != 0 for b in beta):
                    raise ValidationError("by_mean polarization requires beta = 0")
                val[..., BY] = env
            if all(b == 0 for b in beta):
                add_field(beta, val)
            else:
                add_field(beta, val)
                add_field(tuple(-b for b in beta), np.conj(val))
        pops_spec = init.get("populations", "gibbs")
        if pops_spec == "gibbs":
            mean = gibbs_populations(sys)
        else:
            mean = np.asarray(pops_spec, dtype=float)
            if mean.size != sys.n_levels:
                raise ValidationError("populations array must have one entry per level")
        pop_ini = {(0,) * d: np.broadcast_to(mean, grid.shape + (sys.n_levels,)).astype(complex)}
        for entry in init.get("population_modes", []):
            beta = tuple(entry["beta"])
            env = self._envelope(entry["envelope"], grid)
            lvl = entry["level"] - 1
            if not (0 <= lvl < sys.n_levels):
                raise ValidationError(f"population mode level {entry['level']} out of range")
            for b, e in ((beta, env), (tuple(-x for x in beta), np.conj(env))):
                if all(x == 0 for x in b) and b == beta and beta == tuple(-x for x in beta):
                    e = env.real.astype(complex)  # self-paired mode must be real
                arr = pop_ini.get(b)
                if arr is None:
                    arr = np.zeros(grid.shape + (sys.n_levels,), dtype=complex)
                else:
                    arr = arr.copy()
                arr[..., lvl] += e
                pop_ini[b] = arr
                if b == tuple(-x for x in b):
                    break
        coh_ini: dict = {}
        for entry in init.get("coherences", []):
            m, n, beta = entry["m"], entry["n"], tuple(entry["beta"])
            env = self._envelope(entry["envelope"], grid)
            coh_ini[(m, n, beta)] = coh_ini.get((m, n, beta), 0) + env
            mirror = (n, m, tuple(-b for b in beta))
            coh_ini[mirror] = coh_ini.get(mirror, 0) + np.conj(env)
        return lift_initial_data(sys, lat, grid, u_ini, pop_ini, coh_ini)


def validate_document(doc) -> list[str]:
    """Structural + physical validation; returns the full violation list."""
    validator = Draft202012Validator(SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if problems:
        return problems
    cfg = RunConfig(raw=doc)
    ls = doc["level_system"]
    omega = np.asarray(ls["omega"], dtype=float)
    if omega.size != ls["n_levels"]:
        problems.append("level_system.omega: expected one energy per level")
    if np.any(np.diff(omega) < 0):
        problems.append("level_system.omega: energies must be sorted increasingly")
    try:
        cfg.level_system()
    except (ValidationError, ModelError, IndexError) as exc:
        problems.append(f"level_system.pauli: {exc}" if "balance" in str(exc)
                        else f"level_system: {exc}")
    try:
        lat = cfg.lattice()
        ntheta = doc["grids"]["ntheta"]
        if ntheta < 2 * lat.a_max + 2:
            problems.append("grids.ntheta: too small to resolve the mode truncation"
                            f" (need >= {2 * lat.a_max + 2})")
    except (ValidationError, ModelError) as exc:
        problems.append(f"lattice: {exc}")
    try:
        cfg.grid()
    except (ValidationError, ModelError) as exc:
        problems.append(f"grids: {exc}")
    if doc["mode"] == "tm_prepared" and doc.get("initial_data", {}).get("coherences"):
        problems.append("initial_data.coherences: prepared mode requires zero coherences")
    if doc["mode"] in ("tm_prepared", "tm_unprepared") and doc["grids"].get("nz", 1) != 1:
        problems.append("grids.nz: transverse-magnetic modes require nz = 1")
    return problems


def parse_config(path) -> RunConfig:
    """Load and fully validate a run configuration file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([f"<io>: {exc}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<json>: {exc}"])
    problems = validate_document(doc)
    if problems:
        raise ConfigError(problems)
    return RunConfig(raw=doc, path=str(path))
