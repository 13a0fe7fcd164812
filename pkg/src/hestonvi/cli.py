"""``hestonvi`` command line: price, verify, converge.

Exit codes: 0 success, 1 runtime or solver failure (or a failed check),
2 configuration error.  Outputs contain no timings or host details, so a
rerun with the same config and seed is byte identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Optional


from . import __version__, verify
from .fem import Grid, energy_constants
from .model import ConfigError, HestonParams, MeasureWeights, Payoff, default_weights
from .solver import SolveConfig, penalty_violation, solve_vi

SCHEMA = 1

BENCHMARK = {
    "model": {"kappa": 2.0, "theta": 0.04, "sigma": 0.3, "rho": -0.5, "r": 0.05, "delta": 0.0},
    "payoff": {"kind": "put", "strike": 100.0},
    "spot": 100.0,
    "y0": 0.04,
    "grid": {"n_x": 50, "n_y": 50},
    "solve": {"maturity": 0.5, "n_t": 25},
}

MC_DEFAULTS = {"n_paths": 100_000, "n_steps": None, "seed": 0}
OUTPUT_DEFAULTS = {"surface_csv": "surface.csv", "summary_json": "summary.json", "csv_stride": 1}
CONVERGE_DEFAULTS = {"mode": "all", "base_n_x": 50, "base_n_y": 50, "base_n_t": 25}
SOLVE_KEYS = {"maturity", "n_t", "epsilon", "lambda", "scheme", "newton_tol", "newton_max_iter",
              "outer_mode", "lumped_mass", "penalty", "rannacher_steps", "picard_tol",
              "picard_max_iter", "exercise_tol"}


@dataclass
class RunConfig:
    model: HestonParams
    weights: MeasureWeights
    payoff: Payoff
    spot: float
    y0: float
    grid: Grid
    solve: SolveConfig
    mc: dict
    outputs: dict
    converge: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "weights": self.weights.to_dict(),
                "payoff": self.payoff.to_dict(), "spot": self.spot, "y0": self.y0,
                "grid": self.grid.to_dict(), "solve": self.solve.to_dict(), "mc": dict(self.mc),
                "outputs": dict(self.outputs), "converge": dict(self.converge)}


def _section(doc: dict, name: str, required: bool = True) -> dict:
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(name, "missing section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be an object")
    return sec


def _prefixed(section: str, ctor, **kw):
    """Build a sub-config, qualifying the field name of any validation error."""
    try:
        return ctor(**kw)
    except ConfigError as e:
        name = e.field if "." in e.field else f"{section}.{e.field}"
        raise ConfigError(name, str(e).split(": ", 1)[-1]) from None
    except TypeError as e:
        raise ConfigError(section, str(e)) from None


def _number(doc: dict, key: str, section: str, positive: bool = True, default=None) -> float:
    if key not in doc:
        if default is None:
            raise ConfigError(f"{section}.{key}" if section else key, "required")
        return default
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"{section}.{key}" if section else key, f"must be a number, got {val!r}")
    if positive and not val > 0:
        raise ConfigError(f"{section}.{key}" if section else key, f"must be > 0, got {val!r}")
    return float(val)


def parse_config(doc: dict, seed: Optional[int] = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    m = _section(doc, "model")
    params = _prefixed("model", HestonParams, **m)

    p = dict(_section(doc, "payoff"))
    kind = p.get("kind", "put")
    if kind not in ("put", "call", "zero"):
        raise ConfigError("payoff.kind", f"must be put, call or zero, got {kind!r}")
    if kind == "zero":
        payoff = Payoff.zero()
    else:
        strike = _number(p, "strike", "payoff")
        payoff = _prefixed("payoff", Payoff, kind=kind, strike=strike)

    w = _section(doc, "weights", required=False)
    if w:
        weights = _prefixed("weights", MeasureWeights, **w)
        _prefixed("weights", weights.check_against, payoff=payoff)
    else:
        weights = default_weights(params, payoff)

    spot = _number(doc, "spot", "")
    y0 = _number(doc, "y0", "", positive=False)
    if y0 < 0:
        raise ConfigError("y0", f"must be >= 0, got {y0!r}")

    s = dict(_section(doc, "solve"))
    unknown = set(s) - SOLVE_KEYS
    if unknown:
        raise ConfigError(f"solve.{sorted(unknown)[0]}", "unknown key")
    if "lambda" in s:
        s["lam"] = s.pop("lambda")
    maturity = _number(s, "maturity", "solve")
    s["maturity"] = maturity
    solve = _prefixed("solve", SolveConfig, **s)

    g = dict(_section(doc, "grid"))
    n_x, n_y = g.pop("n_x", 50), g.pop("n_y", 50)
    centre = spot if payoff.is_zero else payoff.strike
    base = _prefixed("grid", Grid.default, params=params, strike=centre, T=maturity,
                     n_x=n_x, n_y=n_y, grading=g.get("grading", 2.0))
    grid = _prefixed("grid", Grid, x_min=g.get("x_min", base.x_min), x_max=g.get("x_max", base.x_max),
                     y_max=g.get("y_max", base.y_max), n_x=n_x, n_y=n_y,
                     grading=g.get("grading", base.grading))

    mcd = {**MC_DEFAULTS, **_section(doc, "mc", required=False)}
    if seed is not None:
        mcd["seed"] = int(seed)
    if not (isinstance(mcd["n_paths"], int) and mcd["n_paths"] >= 2):
        raise ConfigError("mc.n_paths", "must be an integer >= 2")
    outputs = {**OUTPUT_DEFAULTS, **_section(doc, "outputs", required=False)}
    conv = {**CONVERGE_DEFAULTS, **_section(doc, "converge", required=False)}
    if conv["mode"] not in ("all", "epsilon"):
        raise ConfigError("converge.mode", "must be 'all' or 'epsilon'")
    return RunConfig(params, weights, payoff, spot, y0, grid, solve, mcd, outputs, conv)


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    if path is None:
        return parse_config(json.loads(json.dumps(BENCHMARK)), seed)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON ({e.msg} at line {e.lineno})") from None
    return parse_config(doc, seed)


def _dump(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(verify._jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_price(cfg: RunConfig, out_dir: str) -> dict:
    consts = energy_constants(cfg.model, cfg.weights)
    surface = solve_vi(cfg.model, cfg.weights, cfg.payoff, cfg.grid, cfg.solve)
    x0 = math.log(cfg.spot)
    u0 = surface.value_at(x0, cfg.y0, 0)
    viol = penalty_violation(surface)
    solved = surface.config.to_dict()
    summary = {
        "schema": SCHEMA,
        "version": __version__,
        "command": "price",
        "config": {**cfg.to_dict(), "solve": solved},
        "price": {
            "spot_convention": {"spot": cfg.spot, "y0": cfg.y0, "t": 0.0, "value": u0,
                                "note": "option value in currency at t = 0"},
            "shifted_convention": {
                "x": x0, "y": cfg.y0, "t": 0.0, "value": u0, "cbar": cfg.model.cbar,
                "note": ("x = log S - cbar t with cbar = r - delta - rho kappa theta / sigma; "
                         "u carries the exp(-r t) discount, so spot value(t) = exp(r t) u(t, x)"),
            },
        },
        "penalty_violation": viol,
        "grid_stats": {"n_x": cfg.grid.n_x, "n_y": cfg.grid.n_y, "n_nodes": cfg.grid.n_nodes,
                       "n_t": cfg.solve.n_t, "x_min": cfg.grid.x_min, "x_max": cfg.grid.x_max,
                       "y_max": cfg.grid.y_max, "grading": cfg.grid.grading},
        "energy_constants": consts.to_dict(),
        "solver": {k: v for k, v in surface.meta.items() if not isinstance(v, list)},
    }
    csv_path = os.path.join(out_dir, cfg.outputs["surface_csv"])
    surface.to_csv(csv_path, stride=int(cfg.outputs.get("csv_stride", 1)))
    _dump(summary, os.path.join(out_dir, cfg.outputs["summary_json"]))
    return summary


def _suite_run(cfg: RunConfig, suite: str):
    p, w, seed = cfg.model, cfg.weights, int(cfg.mc["seed"])
    n = int(cfg.mc["n_paths"])
    x0 = math.log(cfg.spot)
    steps = cfg.mc.get("n_steps")
    if suite == "forms":
        return verify.forms_battery(p, w, cfg.grid, seed=seed)
    if suite == "riccati":
        return verify.riccati_battery(p, x0, cfg.y0, cfg.solve.maturity, n, seed, steps)
    if suite == "semigroup":
        return verify.semigroup_battery(p, w, x0, cfg.y0, n_paths=n, seed=seed,
                                        exponent_paths=n, n_steps=steps)
    if suite == "density":
        return verify.density_battery(p, cfg.y0, n_ks=n, seed=seed)
    if suite == "comparison":
        return verify.comparison_battery(p, w, cfg.grid, cfg.solve.maturity, cfg.solve.n_t, seed=seed)
    return verify.flow_battery(p, n_paths=n, seed=seed)


def cmd_verify(cfg: RunConfig, suite: str, out_dir: str) -> dict:
    if suite not in verify.SUITES:
        raise ConfigError("--suite", f"unknown suite {suite!r}; choose from {', '.join(verify.SUITES)}")
    rep = _suite_run(cfg, suite)
    report = {"schema": SCHEMA, "version": __version__, "command": "verify",
              "config": cfg.to_dict(), **rep.to_dict()}
    _dump(report, os.path.join(out_dir, f"verify_{suite}.json"))
    return report


CONVERGE_FIELDS = ("level", "n_x", "n_y", "n_t", "epsilon", "price", "diff", "order", "violation")


def converge_levels(cfg: RunConfig, n_levels: int) -> list:
    """(grid, solve) per level: resolutions double, or only epsilon halves."""
    c = cfg.converge
    eps0 = cfg.solve.epsilon if cfg.solve.epsilon is not None else 1e-6 * cfg.payoff.strike
    out = []
    for k in range(n_levels):
        if c["mode"] == "epsilon":
            grid, n_t, eps = cfg.grid, cfg.solve.n_t, eps0 / 2**k
        else:
            f = 2**k
            n_x, n_y, n_t = int(c["base_n_x"]) * f, int(c["base_n_y"]) * f, int(c["base_n_t"]) * f
            grid = replace(cfg.grid, n_x=n_x, n_y=n_y)
            eps = eps0
        out.append((grid, replace(cfg.solve, n_t=n_t, epsilon=eps)))
    return out


def cmd_converge(cfg: RunConfig, n_levels: int, out_dir: str) -> list:
    if n_levels < 1:
        raise ConfigError("--levels", "must be >= 1")
    rows = []
    x0 = math.log(cfg.spot)
    for k, (grid, solve) in enumerate(converge_levels(cfg, n_levels)):
        s = solve_vi(cfg.model, cfg.weights, cfg.payoff, grid, solve)
        price = s.value_at(x0, cfg.y0, 0)
        row = {"level": k, "n_x": grid.n_x, "n_y": grid.n_y, "n_t": solve.n_t,
               "epsilon": s.config.epsilon, "price": price, "diff": None, "order": None,
               "violation": penalty_violation(s)}
        if rows:
            row["diff"] = price - rows[-1]["price"]
        if len(rows) >= 2 and rows[-1]["diff"] and row["diff"]:
            row["order"] = math.log2(abs(rows[-1]["diff"] / row["diff"]))
        rows.append(row)
    with open(os.path.join(out_dir, "converge.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CONVERGE_FIELDS)
        for r in rows:
            wr.writerow(["" if r[f] is None else repr(r[f]) if isinstance(r[f], float) else r[f]
                         for f in CONVERGE_FIELDS])
    return rows


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hestonvi", description="American and European options "
                                 "under Heston by a penalized weighted-space finite element solver.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("price", "solve the obstacle problem and write surface and summary"),
                      ("verify", "run an invariant battery"),
                      ("converge", "price on a refinement ladder")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--config", help="JSON run configuration (default: benchmark put)")
        sp.add_argument("--seed", type=int, help="overrides mc.seed")
        sp.add_argument("--out", default=".", help="output directory")
        if name == "verify":
            sp.add_argument("--suite", required=True, help=", ".join(verify.SUITES))
        if name == "converge":
            sp.add_argument("--levels", type=int, default=3, help="number of ladder levels")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if os.environ.get("PRICER_THREADS") is not None:
            try:
                if int(os.environ["PRICER_THREADS"]) < 1:
                    raise ValueError
            except ValueError:
                raise ConfigError("PRICER_THREADS", "must be a positive integer") from None
        cfg = load_config(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "price":
            s = cmd_price(cfg, args.out)
            print(json.dumps({"price": s["price"]["spot_convention"]["value"],
                              "penalty_violation": s["penalty_violation"]}))
            return 0
        if args.command == "verify":
            rep = cmd_verify(cfg, args.suite, args.out)
            for c in rep["checks"]:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: value={c['value']} "
                      f"tol={c['tolerance']}")
            return 0 if rep["passed"] else 1
        rows = cmd_converge(cfg, args.levels, args.out)
        for r in rows:
            print(",".join("" if r[f] is None else str(r[f]) for f in CONVERGE_FIELDS))
        return 0
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # solver, assembly, integration and I/O failures
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
