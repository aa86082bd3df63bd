"""
Command-line driver: one experiment per invocation.

Every run writes ``<subcommand>.csv`` and ``<subcommand>.json`` into the
output directory.  CSV files start with ``#``-prefixed metadata lines
(config hash, package versions, tolerances); both files are free of
timestamps so identical inputs give identical bytes.

Exit status: 0 on success, 2 on invalid configuration or a model that
fails validation, 3 on numerical-limit errors.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import scipy
import tomli
from threadpoolctl import threadpool_limits

from . import __version__
from .cumulants import KINDS, cumulant_decay_scan, enumerate_partitions
from .dynamics import METHODS, Evolver, Window
from .errors import ConfigInvalid, LimitError, ModelInvalid, QLatticeError
from .lieb_robinson import commutator_norm_grid, fit_light_cone, theoretical_velocity
from .open_chain import (LindbladModel, equilibrium_report, gibbs_stationarity_residual,
                         validate_model)
from .operators import LocalOperator
from .states import ProductGibbsState, state_from_descriptor
from .transport import (RayPlan, drude_weight, euler_correlator,
                        find_conserved_charges, onsager_estimate, ray_average)

SUBCOMMANDS = ("validate", "lr-cone", "ray-average", "cumulants", "drude", "euler",
               "onsager", "bound", "stationarity")
OUT_ENV = "QLATTICE_OUT"
EXIT_OK, EXIT_INVALID, EXIT_LIMIT = 0, 2, 3

TOLERANCES = {"charge_residual": 1e-8, "gram_psd": 1e-10, "pinv_cutoff": 1e-10,
              "telescope": 1e-10, "divergence": 1e-12, "step_tol": 1e-8}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigInvalid(f"config: file {path} not found")
    text = p.read_text()
    try:
        if p.suffix == ".json":
            return json.loads(text)
        return tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"config: cannot parse {path}: {exc}") from exc


def _get(cfg: dict, key: str, default=None, kind=None, required=False):
    """Look up a dotted key; the message of ConfigInvalid names the key."""
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigInvalid(f"{key}: missing")
            return default
        node = node[part]
    if kind is not None:
        try:
            if kind is list:
                if not isinstance(node, (list, tuple)):
                    raise TypeError("expected a list")
                return list(node)
            return kind(node)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"{key}: {exc}") from exc
    return node


def _model(cfg: dict, base: Path) -> LindbladModel:
    entry = _get(cfg, "model", required=True)
    if isinstance(entry, str):
        path = Path(entry)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigInvalid(f"model: file {entry} not found")
        entry = json.loads(path.read_text())
    if not isinstance(entry, dict):
        raise ConfigInvalid("model: expected a file path or a table")
    try:
        return LindbladModel.from_json(entry)
    except ModelInvalid as exc:
        raise ConfigInvalid(f"model: {exc}") from exc


def _operator(cfg: dict, key: str, default: str) -> LocalOperator:
    text = _get(cfg, key, default, str)
    try:
        return LocalOperator.from_string(text)
    except (ValueError, IndexError, KeyError) as exc:
        raise ConfigInvalid(f"{key}: cannot parse operator {text!r}") from exc


def _window(cfg: dict, default_size: int, periodic: bool) -> Window:
    size = _get(cfg, "evolver.size", default_size, int)
    start = _get(cfg, "evolver.start", 0, int)
    per = _get(cfg, "evolver.periodic", periodic, bool)
    return Window(start, size, per)


def _evolver(cfg: dict, model: LindbladModel, default_size: int, periodic: bool,
             default_method: str = "dense-rk4", default_dt: float = 0.01) -> Evolver:
    method = _get(cfg, "evolver.method", default_method, str)
    if method not in METHODS:
        raise ConfigInvalid(f"evolver.method: must be one of {METHODS}")
    dt = _get(cfg, "evolver.dt", default_dt, float)
    window = _window(cfg, default_size, periodic)
    step_tol = _get(cfg, "evolver.step_tol", TOLERANCES["step_tol"], float)
    return Evolver(model.generator(), window, method, dt, step_tol=step_tol)


def _state(cfg: dict):
    desc = _get(cfg, "state", {"kind": "product_gibbs", "mu": 0.0})
    if not isinstance(desc, dict):
        raise ConfigInvalid("state: expected a table")
    if desc.get("kind", "product_gibbs") != "product_gibbs":
        raise ConfigInvalid("state.kind: only 'product_gibbs' is supported from the CLI")
    try:
        return state_from_descriptor(desc)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"state: {exc}") from exc


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, LocalOperator):
        return obj.to_json()
    return obj


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Output:
    def __init__(self, out_dir: Path, name: str, cfg: dict, args: argparse.Namespace):
        self.dir = out_dir
        self.name = name
        self.meta = {"subcommand": name, "config_hash": config_hash(cfg),
                     "config": cfg, "seed": args.seed, "chaotic": args.chaotic,
                     "versions": {"qlattice": __version__, "numpy": np.__version__,
                                  "scipy": scipy.__version__},
                     "tolerances": TOLERANCES}

    def write(self, header: list[str], rows, summary: dict) -> tuple[Path, Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        for key in ("subcommand", "config_hash", "versions", "tolerances", "seed"):
            buf.write(f"# {key}: {json.dumps(self.meta[key], sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        csv_path = self.dir / f"{self.name}.csv"
        csv_path.write_text(buf.getvalue())
        doc = {"metadata": self.meta, "summary": summary}
        json_path = self.dir / f"{self.name}.json"
        json_path.write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")
        return csv_path, json_path


def _complex_cols(z) -> tuple[float, float]:
    z = complex(z)
    return z.real, z.imag


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    rep = validate_model(m)
    d = rep.to_dict()
    rows = [(k, v) for k, v in sorted(d.items()) if isinstance(v, (int, float))]
    rows += [(f"conservation_jump_{i}", v) for i, v in enumerate(rep.conservation_jumps)]
    summary = dict(d, strongly_conserving=rep.strongly_conserving,
                   detailed_balance=rep.detailed_balance)
    out.write(["quantity", "value"], rows, summary)
    print(json.dumps(_jsonable({"strongly_conserving": rep.strongly_conserving,
                                "detailed_balance": rep.detailed_balance,
                                "condition_residual": rep.condition_residual}), sort_keys=True))
    ok = rep.strongly_conserving and rep.detailed_balance
    return EXIT_OK if ok else EXIT_INVALID


def cmd_lr_cone(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    ev = _evolver(cfg, m, 12, False, "ode-rk4", 0.01)
    A = _operator(cfg, "lr_cone.A", "Z2")
    B = _operator(cfg, "lr_cone.B", "Z2")
    xs = _get(cfg, "lr_cone.displacements", list(range(8)), list)
    ts = _get(cfg, "lr_cone.times", [0.1, 0.2, 0.3, 0.4, 0.5], list)
    margin_v = _get(cfg, "lr_cone.margin_velocity", 0.0, float)
    grid = commutator_norm_grid(A, B, xs, ts, ev, margin_velocity=margin_v)
    grid.metadata["v_theory"] = theoretical_velocity(m)
    fit = fit_light_cone(grid, _get(cfg, "lr_cone.threshold", None),
                         _get(cfg, "lr_cone.norm_scale", 1.0, float))
    summary = {"fit": fit.summary(), "grid": grid.metadata,
               "velocity_below_theory": fit.v_fit <= fit.v_theory}
    out.write(["x", "t", "commutator_norm"], grid.to_rows(), summary)
    print(json.dumps(_jsonable({"v_fit": fit.v_fit, "v_theory": fit.v_theory}), sort_keys=True))
    return EXIT_OK


def cmd_ray_average(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    ev = _evolver(cfg, m, 12, True, "dense-exponential", 0.02)
    state = _state(cfg)
    A = _operator(cfg, "ray_average.A", "Z0")
    B = _operator(cfg, "ray_average.B", "Z0")
    plan = RayPlan(_get(cfg, "ray_average.v", 0.3, float),
                   _get(cfg, "ray_average.direction", 1, int),
                   _get(cfg, "ray_average.T", 8.0, float),
                   _get(cfg, "ray_average.dt", 0.02, float),
                   _get(cfg, "ray_average.k", 0.0, float),
                   _get(cfg, "ray_average.f", 0.0, float))
    res = ray_average(A, B, plan, state, ev, margin=_get(cfg, "ray_average.margin", 0, int),
                      on_exit=_get(cfg, "ray_average.on_exit", "raise", str))
    rows = [(t, d, *_complex_cols(g), *_complex_cols(a)) for t, d, g, a in res.to_rows()]
    dev = res.deviation()
    summary = {"target": res.target, "final_average": res.average[-1],
               "final_deviation": dev[-1], "truncated_at": res.truncated_at,
               "metadata": res.metadata}
    out.write(["t", "displacement", "integrand_re", "integrand_im", "average_re", "average_im"],
              rows, summary)
    print(json.dumps(_jsonable({"final_deviation": dev[-1]}), sort_keys=True))
    return EXIT_OK


def cmd_cumulants(cfg, args, out: Output, base: Path) -> int:
    n = args.n if args.n is not None else _get(cfg, "cumulants.n", 4, int)
    kind = args.kind or _get(cfg, "cumulants.kind", "all", str)
    if kind not in KINDS:
        raise ConfigInvalid(f"cumulants.kind: must be one of {KINDS}")
    parts = enumerate_partitions(n, kind)
    if args.count_only:
        print(len(parts))
        return EXIT_OK
    ops = _get(cfg, "cumulants.ops", None, list)
    if ops is None:
        rows = [(i, json.dumps(p.to_list())) for i, p in enumerate(parts)]
        out.write(["index", "blocks"], rows, {"n": n, "kind": kind, "count": len(parts)})
        print(len(parts))
        return EXIT_OK
    ops = [_operator({"op": o}, "op", "") for o in ops]
    state = _state(cfg)
    schedule = _get(cfg, "cumulants.schedule", required=True)
    times = _get(cfg, "cumulants.times", [0.0] * len(ops), list)
    ev = None
    if any(t > 0 for t in times):
        ev = _evolver(cfg, _model(cfg, base), 12, False, "ode-rk4", 0.01)
    table = cumulant_decay_scan(state, ev, ops, schedule, times,
                                "noncrossing" if kind == "noncrossing" else "classical")
    out.write(["z", "n", "abs_cumulant"], table.to_rows(),
              {"log_slope": table.log_slope, "metadata": table.metadata})
    print(json.dumps(_jsonable({"log_slope": table.log_slope}), sort_keys=True))
    return EXIT_OK


def _correlator(cfg, args, out: Output, base: Path, euler: bool) -> int:
    section = "euler" if euler else "drude"
    m = _model(cfg, base)
    ev = _evolver(cfg, m, 10, True, "dense-exponential", 0.02)
    state = _state(cfg)
    A = _operator(cfg, f"{section}.A", "Z0")
    B = _operator(cfg, f"{section}.B", "Z0")
    f = _get(cfg, f"{section}.f", 0.0, float)
    k = _get(cfg, f"{section}.k", 0.0, float)
    T = _get(cfg, f"{section}.T", 8.0, float)
    dt = _get(cfg, f"{section}.dt", 0.02, float)
    radius = _get(cfg, f"{section}.radius", None)
    r = _get(cfg, f"{section}.charge_radius", 0, int)
    basis = None
    if r > 0:
        ring = _get(cfg, f"{section}.charge_ring", None)
        basis = find_conserved_charges(m, f, r, k=k, ring=ring, state=state)
    if euler:
        kappa = _get(cfg, "euler.kappa", 0.0, float)
        res = euler_correlator(A, B, f, k, kappa, T, state, ev, radius, dt, basis)
    else:
        res = drude_weight(A, B, f, k, T, radius, state, ev, dt, basis)
    proj = res.projected if res.projected is not None else np.full_like(res.value, np.nan)
    rows = [(t, *_complex_cols(v), *_complex_cols(p)) for t, v, p in
            zip(res.times, res.value, proj)]
    summary = {"final_value": res.value[-1], "basis_size": 0 if basis is None else len(basis),
               "final_residual": None if res.residual is None else res.residual[-1],
               "metadata": res.metadata}
    out.write(["T", "value_re", "value_im", "projected_re", "projected_im"], rows, summary)
    print(json.dumps(_jsonable({"final_value": res.value[-1]}), sort_keys=True))
    return EXIT_OK


def cmd_drude(cfg, args, out, base) -> int:
    return _correlator(cfg, args, out, base, euler=False)


def cmd_euler(cfg, args, out, base) -> int:
    return _correlator(cfg, args, out, base, euler=True)


def cmd_onsager(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    mu = _get(cfg, "onsager.mu", _get(cfg, "state.mu", 0.0, float), float)
    ev = _evolver(cfg, m, 8, True, "dense-rk4", 0.005)
    Ts = _get(cfg, "onsager.times", [0.25, 0.5, 1.0], list)
    chaotic = args.chaotic != "off"
    basis = None
    if not chaotic:
        basis = find_conserved_charges(m, 0.0, _get(cfg, "onsager.charge_radius", 2, int),
                                       state=ProductGibbsState(mu))
    res = onsager_estimate(m, mu, Ts, ev, _get(cfg, "onsager.radius", None), basis, chaotic)
    summary = {"v": res.v, "chi": res.chi, "static": res.static, "static_ring": res.static_ring,
               "max_identity_residual": float(res.identity_residual.max()),
               "metadata": res.metadata}
    out.write(["T", "L_gk", "L_norm", "L_irr", "identity_residual"], res.to_rows(), summary)
    print(json.dumps(_jsonable({"max_identity_residual": summary["max_identity_residual"]}),
                     sort_keys=True))
    return EXIT_OK


def cmd_bound(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    mu = args.mu if args.mu is not None else _get(cfg, "bound.mu",
                                                  _get(cfg, "state.mu", 0.0, float), float)
    rep = validate_model(m)
    if not rep.strongly_conserving:
        raise ModelInvalid("model does not conserve the magnetization")
    eq = equilibrium_report(m, mu)
    d = eq.to_dict()
    summary = dict(d, validation=rep.to_dict())
    out.write(["quantity", "value"], sorted(d.items()), summary)
    print(json.dumps(_jsonable(d), sort_keys=True))
    return EXIT_OK


def cmd_stationarity(cfg, args, out: Output, base: Path) -> int:
    m = _model(cfg, base)
    N = _get(cfg, "stationarity.N", 6, int)
    mus = _get(cfg, "stationarity.mu", [0.0, 0.5, 1.0], list)
    rows = [(float(mu), gibbs_stationarity_residual(m, float(mu), N)) for mu in mus]
    out.write(["mu", "residual"], rows, {"N": N, "max_residual": max(r for _, r in rows)})
    print(json.dumps({"max_residual": max(r for _, r in rows)}))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "lr-cone": cmd_lr_cone, "ray-average": cmd_ray_average,
            "cumulants": cmd_cumulants, "drude": cmd_drude, "euler": cmd_euler,
            "onsager": cmd_onsager, "bound": cmd_bound, "stationarity": cmd_stationarity}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlattice", description="Spin-lattice dynamics experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML or JSON experiment configuration")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chaotic", choices=("on", "off"), default="on",
                   help="project the Onsager current onto the magnetization only")
    p.add_argument("--model", help="model JSON file (overrides the config entry)")
    p.add_argument("--mu", type=float, help="chemical potential for 'bound'")
    p.add_argument("--n", type=int, help="arity for 'cumulants'")
    p.add_argument("--kind", choices=KINDS, help="partition lattice for 'cumulants'")
    p.add_argument("--count-only", action="store_true", help="print the partition count")
    return p


def run(subcommand: str, cfg: dict, args: argparse.Namespace, base: Path | None = None) -> int:
    base = Path.cwd() if base is None else base
    out_dir = Path(args.out or os.environ.get(OUT_ENV) or cfg.get("out", "qlattice-out"))
    out = Output(out_dir, subcommand, cfg, args)
    with threadpool_limits(limits=max(1, args.threads)):
        return COMMANDS[subcommand](cfg, args, out, base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.model:
            cfg = dict(cfg, model=str(Path(args.model).resolve()))
        base = Path(args.config).resolve().parent if args.config else Path.cwd()
        return run(args.subcommand, cfg, args, base)
    except (ConfigInvalid, ModelInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except LimitError as exc:
        print(f"limit: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except QLatticeError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_LIMIT


if __name__ == "__main__":
    sys.exit(main())
