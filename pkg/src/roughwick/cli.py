"""Seeded batch experiments writing CSV/JSON tables and a manifest.

Usage: python -m roughwick --kind strato-check --fn cubic --N 3 --out runs
"""

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .functions import REGISTRY, get_function
from .gaussian_model import Bump, FbmModel, sample_ensemble
from .grid_increments import Partition
from .rough_lift import GridPath, check_geometricity, check_multiplicativity, holder_profile, lift_piecewise_linear

KINDS = ("sample", "lift-check", "strato-check", "wick-check", "sko-check", "duality", "compare")
SCHEMA = 1

DEFAULTS = {
    "H": 0.5, "T": 1.0, "d": 1, "n": 64, "levels": 4, "fn": "half_square", "N": 2, "seed": 0,
    "n_samples": 1000, "path": "fbm", "p": "1", "configs": 10, "hermite_n": 0, "s": 0.25, "t": 0.75,
    "variant": "literal",
}
TYPES = {
    "H": float, "T": float, "d": int, "n": int, "levels": int, "fn": str, "N": int, "seed": int,
    "n_samples": int, "path": str, "p": str, "configs": int, "hermite_n": int, "s": float, "t": float,
    "variant": str, "kind": str, "out": str,
}
MAX_GRID = 4096
MAX_SAMPLES = 10 ** 6


class ConfigError(ValueError):
    pass


def read_config(path):
    """Flat `key = value` lines; blank lines and lines starting with # are ignored."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(file_cfg, overrides):
    cfg = dict(DEFAULTS)
    for source in (file_cfg, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key not in TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                cfg[key] = TYPES[key](value)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
    validate(cfg)
    return cfg


def _grid_size(cfg):
    return cfg["n"] * 2 ** cfg["levels"]


def validate(cfg):
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; known: {list(KINDS)}")
    if cfg["fn"] not in REGISTRY:
        raise ConfigError(f"unknown function id {cfg['fn']!r}; known: {sorted(REGISTRY)}")
    if not 0 < cfg["H"] < 1:
        raise ConfigError("H must lie in (0, 1)")
    if not 1 <= cfg["d"] <= 3:
        raise ConfigError("budget: d must lie in 1..3")
    if not 1 <= cfg["N"] <= 4:
        raise ConfigError("budget: N must lie in 1..4")
    if cfg["n"] < 1 or cfg["levels"] < 0:
        raise ConfigError("n must be positive and levels nonnegative")
    if _grid_size(cfg) > MAX_GRID:
        raise ConfigError(f"budget: grid size n * 2^levels = {_grid_size(cfg)} exceeds {MAX_GRID}")
    if not 1 <= cfg["n_samples"] <= MAX_SAMPLES:
        raise ConfigError(f"budget: n_samples must lie in 1..{MAX_SAMPLES}")
    if kind in ("strato-check", "sko-check", "compare") and cfg["levels"] < 2:
        raise ConfigError("insufficient refinement for order estimate: levels must be at least 2")
    if cfg["path"] not in ("fbm", "smooth"):
        raise ConfigError("path must be 'fbm' or 'smooth'")
    if cfg["variant"] not in ("literal", "expanded"):
        raise ConfigError("variant must be 'literal' or 'expanded'")
    try:
        p = [int(v) for v in cfg["p"].split(",")]
    except ValueError:
        raise ConfigError(f"bad multi-index p={cfg['p']!r}") from None
    if kind == "wick-check" and (len(p) != cfg["d"] or min(p) < 0 or sum(p) > 8):
        raise ConfigError("p must list d nonnegative entries with sum at most 8")
    if kind == "compare" and cfg["d"] != 1:
        raise ConfigError("compare needs d = 1")
    if kind == "duality" and not 0 <= cfg["s"] < cfg["t"] <= cfg["T"]:
        raise ConfigError("need 0 <= s < t <= T")


def config_hash(cfg):
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _smooth_path(partition, d):
    t = partition.points
    return GridPath(partition, np.stack([t ** (k + 1) for k in range(d)], axis=1))


def _model(cfg):
    return FbmModel(cfg["H"], cfg["T"], cfg["d"])


def _default_bumps(cfg):
    T = cfg["T"]
    return [Bump(T * (0.5 + 0.05 * k), 0.25 * T) for k in range(cfg["d"])]


# ---------------------------------------------------------------- kinds

def run_sample(cfg, out, workers):
    part = Partition.uniform(_grid_size(cfg), cfg["T"])
    ens = sample_ensemble(_model(cfg), part, cfg["n_samples"], cfg["seed"], workers)
    ens.to_csv(os.path.join(out, "ensemble.csv"), os.path.join(out, "ensemble.json"))


def _single_path(cfg, size):
    part = Partition.uniform(size, cfg["T"])
    if cfg["path"] == "smooth":
        return _smooth_path(part, cfg["d"])
    ens = sample_ensemble(_model(cfg), part, 1, cfg["seed"])
    return GridPath(part, ens.paths[0])


def run_lift_check(cfg, out, workers):
    size = _grid_size(cfg)
    path = _single_path(cfg, size)
    lift = lift_piecewise_linear(path, cfg["N"], budget={"n": MAX_GRID})
    report = {"multiplicativity": check_multiplicativity(lift).to_dict()}
    if cfg["N"] >= 2:
        report["geometricity"] = check_geometricity(lift).to_dict()
    if size >= 8:
        report["holder"] = [{"level": k + 1, "exponent": e.exponent, "norm": e.norm}
                            for k, e in enumerate(holder_profile(lift))]
    _write_json(os.path.join(out, "lift_report.json"), report)
    if size <= 256:
        with open(os.path.join(out, "lift.json"), "w") as fh:
            fh.write(lift.to_json())


def run_strato_check(cfg, out, workers):
    from .strato_calculus import change_of_variable_residual

    size = _grid_size(cfg)
    path = _single_path(cfg, size)
    f = get_function(cfg["fn"], cfg["d"])
    strides = [2 ** k for k in range(cfg["levels"], -1, -1)]
    table = change_of_variable_residual(f, path, cfg["N"], strides, budget={"n": MAX_GRID})
    table.to_csv(os.path.join(out, "convergence.csv"))
    _write_json(os.path.join(out, "summary.json"),
                {"order": table.order, "final_abs_err": float(table.errors[-1]), "reference": table.reference})


def run_wick_check(cfg, out, workers):
    from .wick_chaos import random_pattern_covariance, wick_correction_multi

    G = get_function(cfg["fn"], cfg["d"])
    p = [int(v) for v in cfg["p"].split(",")]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg["seed"])))
    rows = []
    for c in range(cfg["configs"]):
        cov = random_pattern_covariance(cfg["d"], rng)
        sample = rng.standard_normal(2 * cfg["d"])
        x, y = sample[:cfg["d"]], sample[cfg["d"]:]
        rep = wick_correction_multi(G, cov, p, (x, y))
        rows.append(rep.to_dict())
    _write_json(os.path.join(out, "wick_report.json"),
                {"reports": rows, "max_deviation": max(max(r["max_coefficient_deviation"], r["value_deviation"])
                                                       for r in rows)})


def run_sko_check(cfg, out, workers):
    from .skorohod_bridge import skorohod_convergence

    part = Partition.uniform(_grid_size(cfg), cfg["T"])
    model = _model(cfg)
    ens = sample_ensemble(model, part, cfg["n_samples"], cfg["seed"], workers)
    f = get_function(cfg["fn"], cfg["d"])
    strides = [2 ** k for k in range(cfg["levels"], -1, -1)]
    table = skorohod_convergence(f, ens, model, cfg["N"], strides, cfg["variant"])
    table.to_csv(os.path.join(out, "breakdown.csv"))
    _write_json(os.path.join(out, "summary.json"), {
        "meshes": table.meshes.tolist(), "median": table.median.tolist(), "order": table.order})


def run_duality(cfg, out, workers):
    from .skorohod_bridge import duality_check

    part = Partition.uniform(_grid_size(cfg), cfg["T"])
    f = get_function(cfg["fn"], cfg["d"])
    rep = duality_check(f, _default_bumps(cfg), cfg["hermite_n"], _model(cfg), part, cfg["s"], cfg["t"],
                        cfg["n_samples"], cfg["seed"], workers)
    with open(os.path.join(out, "duality.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")


def run_compare(cfg, out, workers):
    from .skorohod_bridge import weighted_sum_diagnostics

    part = Partition.uniform(_grid_size(cfg), cfg["T"])
    model = _model(cfg)
    ens = sample_ensemble(model, part, cfg["n_samples"], cfg["seed"], workers)
    g = get_function(cfg["fn"], 1)
    strides = [2 ** k for k in range(cfg["levels"], -1, -1)]
    diag = weighted_sum_diagnostics(g, g, ens, model, strides)
    with open(os.path.join(out, "weighted.csv"), "w") as fh:
        fh.write("level,mean_v2,var_scaled_v2,mean_scaled_v3\n")
        for lev, v2, sv, sm in zip(diag.levels, diag.v2, diag.scaled_v2_var, diag.scaled_v3_mean):
            fh.write(f"{lev},{float(np.mean(v2))!r},{float(sv)!r},{float(sm)!r}\n")
    _write_json(os.path.join(out, "summary.json"),
                {"v3_target": diag.v3_target, "identity_residual": diag.identity_residual})


RUNNERS = {
    "sample": run_sample, "lift-check": run_lift_check, "strato-check": run_strato_check,
    "wick-check": run_wick_check, "sko-check": run_sko_check, "duality": run_duality, "compare": run_compare,
}


def run(cfg, workers=1):
    """Run a resolved config; returns the output directory."""
    digest = config_hash(cfg)
    base = os.path.join(cfg.get("out", "runs"), f"{cfg['kind']}-{digest[:12]}")
    out, k = base, 1
    while os.path.exists(out):
        out = f"{base}-{k}"
        k += 1
    os.makedirs(out)
    RUNNERS[cfg["kind"]](cfg, out, workers)
    files = {name: _file_hash(os.path.join(out, name)) for name in sorted(os.listdir(out))}
    _write_json(os.path.join(out, "manifest.json"), {
        "schema": SCHEMA, "version": __version__, "kind": cfg["kind"], "config_hash": digest,
        "config": {k: v for k, v in cfg.items() if k != "out"}, "files": files,
    })
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="roughwick", description="Seeded stochastic-calculus experiments.")
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--kind", help="one of: " + ", ".join(KINDS))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--H", type=float)
    ap.add_argument("--N", type=int)
    ap.add_argument("--levels", type=int)
    ap.add_argument("--n-samples", dest="n_samples", type=int)
    ap.add_argument("--fn")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="any other config key, e.g. --set d=2 --set p=1,1")
    ap.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        file_cfg = read_config(args.config) if args.config else {}
        extra = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            extra[key.strip().replace("-", "_")] = value.strip()
        overrides = dict(extra)
        overrides.update({k: getattr(args, k) for k in ("kind", "seed", "out", "H", "N", "levels", "n_samples", "fn")})
        cfg = resolve(file_cfg, overrides)
        if args.workers < 1:
            raise ConfigError("workers must be positive")
    except (ConfigError, OSError) as exc:
        print(json.dumps({"status": "error", "stage": "config", "error": str(exc)}))
        return 2
    try:
        out = run(cfg, args.workers)
    except Exception as exc:  # report any failure as machine-readable JSON
        print(json.dumps({"status": "error", "stage": "run", "error": f"{type(exc).__name__}: {exc}"}))
        return 1
    print(json.dumps({"status": "ok", "out": out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
