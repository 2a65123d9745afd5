"""Command-line experiment runner.

Every subcommand reads a JSON config, validates it, runs one study and writes
CSV tables plus a ``manifest.json`` into the output directory. Given the same
config (and seed) the CSV files are byte-identical.

Exit status: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .elliptic import solve_poisson, solve_resolvent
from .errors import EllipticityError, NumericalError
from .exclusion import RateModel, hydrodynamic_check
from .homogenize import (
    CoefficientSequenceSpec,
    Law,
    RandomEnvironmentSpec,
    build_field,
    fit_fourier_coefficient,
    homogenized_field,
    predicted_homogenized_matrix,
    random_homogenization_study,
    run_h_convergence_study,
    trigonometric_reference,
    weak_pairings,
)
from .interp import ContinuousFunctional, discretize_functional, test_dictionary
from .mesh import TorusGrid, norm_l2, norm_sobolev
from .weights import WProduct

log = logging.getLogger("wsobolev")

OUTPUT_ENV = "WSOBOLEV_OUTPUT_DIR"
DEFAULT_OUTPUT = "wsobolev-output"
COMMANDS = ("solve", "converge", "homogenize", "random-homogenize", "hydro")


class ConfigError(ValueError):
    pass


# -- schema -----------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_FN = {
    "oneOf": [
        {"type": "number"},
        {
            "type": "object",
            "properties": {
                "constant": _NUM,
                "terms": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "amplitude": _NUM,
                            "mode": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                            "type": {"enum": ["cos", "sin"]},
                        },
                        "required": ["amplitude", "mode", "type"],
                        "additionalProperties": False,
                    },
                },
            },
            "additionalProperties": False,
        },
    ]
}
_WEIGHT = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "properties": {
            "slopes": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
            "atoms": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
        },
        "additionalProperties": False,
    },
}
_LAW = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"kind": {"const": "uniform"}, "low": _POS, "high": _POS},
            "required": ["kind", "low", "high"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "discrete"},
                "values": {"type": "array", "items": _POS, "minItems": 1},
                "probs": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
            "required": ["kind", "values", "probs"],
            "additionalProperties": False,
        },
    ]
}
_COEFF = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"kind": {"const": "constant"}, "value": _POS},
            "required": ["kind", "value"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"kind": {"const": "periodic"}, "patterns": {"type": "array", "minItems": 1}, "theta": _POS},
            "required": ["kind", "patterns"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "fixed"},
                "fields": {"type": "array", "items": _FN, "minItems": 1},
                "theta": _POS,
            },
            "required": ["kind", "fields", "theta"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "kind": {"const": "random"},
                "laws": {"type": "array", "items": _LAW, "minItems": 1},
                "theta": _POS,
                "model": {"enum": ["iid", "markov"]},
                "transition": {"type": "array"},
            },
            "required": ["kind", "laws", "theta"],
            "additionalProperties": False,
        },
    ]
}
_COMMON = {
    "command": {"enum": list(COMMANDS)},
    "d": {"type": "integer", "minimum": 1, "maximum": 3},
    "w": _WEIGHT,
    "A": _COEFF,
    "seed": {"type": "integer", "minimum": 0},
    "output": {"type": "string"},
}
_NLIST = {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1}
_SOLVER = {"method": {"enum": ["auto", "direct", "cg"]}, "rtol": _POS}

SCHEMAS = {
    "solve": {
        "type": "object",
        "properties": {**_COMMON, **_SOLVER, "N": {"type": "integer", "minimum": 2},
                       "lambda": {"type": "number", "minimum": 0}, "f": _FN,
                       "f_flux": {"type": "array", "items": _FN}},
        "required": ["d", "N", "lambda", "f"],
        "additionalProperties": False,
    },
    "converge": {
        "type": "object",
        "properties": {**_COMMON, **_SOLVER, "N_list": _NLIST, "lambda": _POS, "f": _FN,
                       "reference": {"enum": ["auto", "analytic", "fine"]},
                       "fine_factor": {"type": "integer", "minimum": 2}},
        "required": ["d", "N_list", "lambda", "f"],
        "additionalProperties": False,
    },
    "random-homogenize": {
        "type": "object",
        "properties": {**_COMMON, "N": {"type": "integer", "minimum": 2}, "lambda": _POS, "f": _FN,
                       "replicas": {"type": "integer", "minimum": 2},
                       "fine_factor": {"type": "integer", "minimum": 2}},
        "required": ["d", "N", "lambda", "f", "A", "seed"],
        "additionalProperties": False,
    },
    "hydro": {
        "type": "object",
        "properties": {**_COMMON, "N": {"type": "integer", "minimum": 2}, "b": {"type": "number"},
                       "b3": {"type": "number"}, "rho0": _FN,
                       "t_list": {"type": "array", "items": _POS, "minItems": 1},
                       "replicas": {"type": "integer", "minimum": 2},
                       "n_fourier": {"type": "integer", "minimum": 0},
                       "profiles": {"type": "boolean"},
                       "pde_method": {"enum": ["explicit", "implicit"]}},
        "required": ["d", "N", "rho0", "t_list", "replicas", "seed"],
        "additionalProperties": False,
    },
}
SCHEMAS["homogenize"] = {
    **SCHEMAS["converge"],
    "properties": {**SCHEMAS["converge"]["properties"], "dictionary_size": {"type": "integer", "minimum": 0}},
    "required": ["d", "N_list", "lambda", "f", "A"],
}


# -- config parsing -------------------------------------------------------------------

def _trig_terms(desc, d: int):
    if isinstance(desc, (int, float)):
        return float(desc), []
    terms = []
    for t in desc.get("terms", []):
        if len(t["mode"]) != d:
            raise ConfigError(f"term mode {t['mode']} does not have {d} components")
        terms.append((float(t["amplitude"]), [int(m) for m in t["mode"]], t["type"]))
    return float(desc.get("constant", 0.0)), terms


def make_function(desc, d: int):
    """Callable on points (..., d) from a trigonometric descriptor."""
    c0, terms = _trig_terms(desc, d)

    def fn(p):
        p = np.asarray(p, dtype=float)
        out = np.full(p.shape[:-1], c0)
        for amp, m, kind in terms:
            phase = 2 * np.pi * (p @ np.asarray(m, dtype=float))
            out = out + amp * (np.cos(phase) if kind == "cos" else np.sin(phase))
        return out

    return fn


def make_weight(cfg) -> WProduct:
    d = cfg["d"]
    if "w" not in cfg:
        return WProduct.identity(d)
    if len(cfg["w"]) != d:
        raise ConfigError(f"w describes {len(cfg['w'])} axes, d={d}")
    return WProduct.from_json(cfg["w"])


def make_spec(cfg) -> CoefficientSequenceSpec:
    d = cfg["d"]
    A = cfg.get("A", {"kind": "constant", "value": 1.0})
    kind = A["kind"]
    if kind == "constant":
        return CoefficientSequenceSpec.constant(float(A["value"]), d)
    if kind == "periodic":
        pats = A["patterns"]
        if len(pats) != d:
            raise ConfigError(f"need one pattern per axis, got {len(pats)}")
        return CoefficientSequenceSpec.periodic(pats, A.get("theta"))
    if kind == "fixed":
        if len(A["fields"]) != d:
            raise ConfigError(f"need one field per axis, got {len(A['fields'])}")
        return CoefficientSequenceSpec.fixed([make_function(f, d) for f in A["fields"]], float(A["theta"]))
    laws = tuple(Law.from_dict(x) for x in A["laws"])
    if len(laws) != d:
        raise ConfigError(f"need one law per axis, got {len(laws)}")
    trans = A.get("transition")
    env = RandomEnvironmentSpec(
        laws, A.get("model", "iid"), tuple(np.asarray(t, dtype=float) for t in trans) if trans else None
    )
    return CoefficientSequenceSpec.random(env, float(A["theta"]))


def load_config(path, command: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(raw, dict) and "config" in raw and "config_sha256" in raw:
        raw = raw["config"]  # re-run from a manifest
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("command", command) != command:
        raise ConfigError(f"config is for {raw['command']!r}, not {command!r}")
    try:
        jsonschema.validate(raw, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message} at {list(exc.absolute_path)}") from exc
    cfg = dict(raw)
    cfg["command"] = command
    if cfg.get("A", {}).get("kind") == "random" and "seed" not in cfg:
        raise ConfigError("random coefficient fields need an explicit seed")
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- output ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


# -- commands -------------------------------------------------------------------------

def _solver_kw(cfg):
    kw = {}
    if "method" in cfg:
        kw["method"] = cfg["method"]
    if "rtol" in cfg:
        kw["rtol"] = float(cfg["rtol"])
    return kw


def _functional(cfg) -> ContinuousFunctional:
    d = cfg["d"]
    flux = [make_function(f, d) for f in cfg.get("f_flux", [])]
    return ContinuousFunctional(make_function(cfg["f"], d), tuple(flux))


def run_solve(cfg, out: Path, jobs: int) -> list[str]:
    w = make_weight(cfg)
    grid = TorusGrid(cfg["d"], cfg["N"], w)
    A = build_field(make_spec(cfg), grid, cfg.get("seed"))
    f = discretize_functional(_functional(cfg), grid).to_mesh()
    lam = float(cfg["lambda"])
    if lam == 0:
        u = solve_poisson(A, f, **_solver_kw(cfg))
    else:
        u = solve_resolvent(A, lam, f, **_solver_kw(cfg))
    u.to_csv(out / "solution.csv")
    write_json(out / "summary.json", {"l2_norm": norm_l2(u), "sobolev_norm": norm_sobolev(u), "mean": u.mean()})
    return ["solution.csv", "solution.json", "summary.json"]


def _reference(cfg, spec, w):
    """Analytic trigonometric reference when the limit has constant coefficients and W = x."""
    choice = cfg.get("reference", "auto")
    affine = all(c.is_affine and c.slopes[0] == 1.0 for c in w.coords)
    const = spec.kind == "periodic_pattern"
    if choice == "fine" or (choice == "auto" and not (affine and const)):
        return "fine"
    if not (affine and const):
        raise ConfigError("an analytic reference needs W = x and constant homogenized coefficients")
    a = [1.0 / float(np.mean(1.0 / p)) for p in spec.patterns]
    c0, terms = _trig_terms(cfg["f"], cfg["d"])
    if cfg.get("f_flux"):
        raise ConfigError("the analytic reference does not support flux terms")
    return trigonometric_reference(float(cfg["lambda"]), a, terms, c0)


def _study(cfg, jobs):
    w = make_weight(cfg)
    spec = make_spec(cfg)
    result = run_h_convergence_study(
        spec, w, _functional(cfg), float(cfg["lambda"]), cfg["N_list"],
        reference=_reference(cfg, spec, w), seed=cfg.get("seed"),
        fine_factor=cfg.get("fine_factor", 4), jobs=jobs, **_solver_kw(cfg),
    )
    return w, spec, result


def _study_summary(result) -> dict:
    return {
        "predicted": result.predicted,
        "reference": result.reference,
        "reference_l2_mass": result.reference_mass,
        "reference_w_energy": result.reference_energy,
    }


def run_converge(cfg, out: Path, jobs: int) -> list[str]:
    _, _, result = _study(cfg, jobs)
    write_csv(out / "converge.csv", ["N", "metric", "value"], result.to_rows())
    write_json(out / "summary.json", _study_summary(result))
    return ["converge.csv", "summary.json"]


def run_homogenize(cfg, out: Path, jobs: int) -> list[str]:
    w, spec, result = _study(cfg, jobs)
    summary = _study_summary(result)
    # weak convergence of 1/a^N towards 1/a_hom, probed by a test dictionary
    dictionary = test_dictionary(w, n_fourier=cfg.get("dictionary_size", 4))
    predicted = predicted_homogenized_matrix(spec, w)
    rows = []
    ss = np.random.SeedSequence(cfg.get("seed")).spawn(len(cfg["N_list"])) if spec.kind == "random_ergodic" else None
    for i, N in enumerate(cfg["N_list"]):
        grid = TorusGrid(cfg["d"], N, w)
        A = build_field(spec, grid, np.random.default_rng(ss[i]) if ss else None)
        pts = grid.points()
        for k in range(grid.d):
            disc = weak_pairings(1.0 / A.coeffs[k], grid, k, dictionary)
            lim = weak_pairings(1.0 / predicted(k, pts), grid, k, dictionary)
            for (name, _), a, b in zip(dictionary, disc, lim):
                rows.append((N, k + 1, name, a, b))
    write_csv(out / "weak_pairings.csv", ["N", "axis", "test", "discrete_inverse", "predicted_inverse"], rows)
    if cfg["d"] == 1 and spec.kind == "periodic_pattern" and all(c.is_affine for c in w.coords):
        c0, terms = _trig_terms(cfg["f"], 1)
        if len(terms) == 1 and terms[0][2] == "cos":
            N = cfg["N_list"][-1]
            grid = TorusGrid(1, N, w)
            f = discretize_functional(_functional(cfg), grid).to_mesh()
            u = solve_resolvent(build_field(spec, grid), float(cfg["lambda"]), f)
            summary["fitted_coefficient"] = fit_fourier_coefficient(u, f, float(cfg["lambda"]), terms[0][1][0])
    write_csv(out / "homogenize.csv", ["N", "metric", "value"], result.to_rows())
    write_json(out / "summary.json", summary)
    return ["homogenize.csv", "weak_pairings.csv", "summary.json"]


def run_random_homogenize(cfg, out: Path, jobs: int) -> list[str]:
    spec = make_spec(cfg)
    if spec.kind != "random_ergodic":
        raise ConfigError("random-homogenize needs a random coefficient field")
    if cfg["d"] != 1:
        raise ConfigError("random-homogenize fits a one-dimensional effective coefficient; use d = 1")
    w = make_weight(cfg)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(cfg.get("replicas", 8))
    study = random_homogenization_study(
        spec, w, _functional(cfg), float(cfg["lambda"]), cfg["N"], seeds,
        fine_factor=cfg.get("fine_factor", 4), jobs=jobs,
    )
    write_csv(out / "random_homogenize.csv", ["replica", "fitted"], enumerate(study.fitted))
    write_json(out / "summary.json", {
        "mean": study.mean, "std": study.std, "stderr": study.stderr, "predicted_off_membrane": study.predicted,
        "predicted_on_membrane": spec.env.mean_b(0),
    })
    return ["random_homogenize.csv", "summary.json"]


def run_hydro(cfg, out: Path, jobs: int) -> list[str]:
    d = cfg["d"]
    w = make_weight(cfg)
    grid = TorusGrid(d, cfg["N"], w)
    spec = make_spec(cfg)
    field_ss, run_ss = np.random.SeedSequence(cfg["seed"]).spawn(2)
    A = build_field(spec, grid, np.random.default_rng(field_ss) if spec.kind == "random_ergodic" else None)
    A_hom = A if spec.kind == "discretized_fixed" else homogenized_field(spec, grid)
    model = RateModel(A, float(cfg.get("b", 0.0)), float(cfg.get("b3", 0.0)))
    rho0 = make_function(cfg["rho0"], d)
    n_f = cfg.get("n_fourier", 1)
    tests = [("one", lambda p: np.ones(p.shape[:-1]))]
    for k in range(d):
        for j in range(1, n_f + 1):
            tests.append((f"cos{j}_x{k + 1}", lambda p, j=j, k=k: np.cos(2 * np.pi * j * p[..., k])))
            tests.append((f"sin{j}_x{k + 1}", lambda p, j=j, k=k: np.sin(2 * np.pi * j * p[..., k])))
    report = hydrodynamic_check(
        model, rho0, cfg["t_list"], cfg["replicas"], tests, run_ss, A_hom=A_hom, jobs=jobs,
        method=cfg.get("pde_method", "explicit"),
    )
    write_csv(out / "hydro.csv", ["t", "test", "mean", "stderr", "pde", "gap"], report.to_rows())
    files = ["hydro.csv"]
    if cfg.get("profiles", False):
        rows = []
        idx = np.indices(grid.shape).reshape(d, -1, order="F").T
        for i, t in enumerate(report.times):
            pm = report.profile_mean[i].reshape(-1, order="F")
            ps = report.profile_stderr[i].reshape(-1, order="F")
            pp = report.pde_profiles[i].reshape(-1, order="F")
            for j, x in enumerate(idx):
                rows.append((float(t), *x.tolist(), pm[j], ps[j], pp[j]))
        header = ["t"] + [f"x{k + 1}" for k in range(d)] + ["particle_mean", "particle_stderr", "pde"]
        write_csv(out / "profiles.csv", header, rows)
        files.append("profiles.csv")
    return files


RUNNERS = {
    "solve": run_solve,
    "converge": run_converge,
    "homogenize": run_homogenize,
    "random-homogenize": run_random_homogenize,
    "hydro": run_hydro,
}


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel N-levels/replicas")
    common.add_argument("--output-dir", default=argparse.SUPPRESS,
                        help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="wsobolev", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run a {name} study")
        p.add_argument("--config", required=True, help="JSON config (or a manifest to re-run)")
    return parser


def run(cfg: dict, output_dir: Path, jobs: int = 1) -> Path:
    """Execute a validated config; returns the manifest path."""
    output_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    files = RUNNERS[cfg["command"]](cfg, output_dir, max(1, jobs))
    manifest = {
        "command": cfg["command"],
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": cfg.get("seed"),
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - start, 6),
        "outputs": files,
    }
    path = output_dir / "manifest.json"
    write_json(path, manifest)
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        out = getattr(args, "output_dir", None) or cfg.get("output") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        path = run(cfg, Path(out), getattr(args, "jobs", 1))
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, EllipticityError, ValueError, KeyError) as exc:
        print(f"configuration error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
