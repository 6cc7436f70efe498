"""Command-line front end.

    cloudauction scenario1 --preset table1-uniform --reps 100 --out runs/s1
    cloudauction chain --lam 10 --delta 3 --mechanism second
    cloudauction curve --preset table2 --out runs/curve

Config files are flat ``key = value`` text; ``#`` starts a comment.  Keys map
onto ScenarioConfig and StageTwoParams fields, and ``preset = NAME`` pulls in a
named preset first.  Results are staged in memory and written with
write-then-rename, so a failing run leaves only ``diagnostic.txt`` behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np
import scipy

from . import __version__, chain, plotting, sim
from .hjb import StageTwoParams, solve_second_price_curve
from .obsa import Mechanism

SCENARIO_KEYS = {f.name: f for f in dataclasses.fields(sim.ScenarioConfig) if f.name != "stage2"}
STAGE2_KEYS = {f.name: f for f in dataclasses.fields(StageTwoParams)}

REQUIRED = ("seed", "reps", "bids", "v_min", "v_max", "delta")

DESCRIPTIONS = {
    "scenario": "scenario id, integer 1..4",
    "seed": "master seed, integer",
    "reps": "replications per cell, integer >= 1",
    "bids": "bid law, 'uniform' or 'laplace'",
    "v_min": "lowest bid on the grid, money",
    "v_max": "highest bid on the grid, money",
    "delta": "bid quantum, money > 0",
    "laplace_mu": "Laplace location on the grid, money",
    "laplace_w": "Laplace scale, money > 0",
    "lams": "mean bidders per auction, comma list of reals >= 0",
    "deltas": "patience values, comma list of integers >= 0",
    "pB": "probability a bumped bidder stays per round, in [0, 1]",
    "mechanisms": "comma list of 'first'/'second'",
    "gammas": "rates of time preference, comma list of reals >= 0",
    "steps": "RK4 steps over the window, integer >= 1",
    "server_types": "number of server types, integer",
    "capacity": "auction slots per type per minute, integer",
    "bundle_min": "smallest bundle size, integer",
    "bundle_max": "largest bundle size, integer",
    "avail_lo": "lowest availability rate, in [0, 1]",
    "avail_hi": "highest availability rate, in [0, 1]",
    "arrival_rate": "customer arrivals per minute, real >= 0",
    "horizon": "scenario 3 minutes, integer >= 0",
    "patience": "scenario 3 matching window in minutes, integer >= 0",
    "mean_available": "mean arriving agents per instant, real >= 0",
    "informed": "fraction of informed agents, in [0, 1]",
    "low_period": "instants between low-price instants, integer >= 1",
    "instants": "scenario 4 instants, integer >= 0",
    "variance_instants": "rounds per variance run, integer >= 1",
    "variance_seeds": "seeds in the variance sweep, integer >= 1",
    "u": "instant utility, money per time",
    "gamma": "rate of time preference, 1/time >= 0",
    "varpi": "flat price, money > z",
    "mu_active": "active bidder fraction, in [0, 1]",
    "lambdaA": "auction rate, 1/time >= 0",
    "lambdaCCN": "mean competing managers, >= 0",
    "lambdaCP": "mean providers, >= 0",
    "Tp": "participation window, time > 0",
    "a": "bid support lower end, money > 0",
    "z": "bid support upper end, money",
    "q": "offered-price support lower end, money or 'none'",
}

_BASE = {"seed": "12345", "reps": "10000", "v_min": "48", "v_max": "312", "delta": "1", "pB": "0.5"}

PRESETS = {
    "table1-uniform": {**_BASE, "scenario": "1", "bids": "uniform"},
    "table1-laplace": {**_BASE, "scenario": "1", "bids": "laplace", "laplace_mu": "70", "laplace_w": "50"},
    "table2": {
        **_BASE,
        "scenario": "2",
        "bids": "uniform",
        "u": "5",
        "mu_active": "0.6",
        "lambdaA": "0.2",
        "lambdaCCN": "0.5",
        "lambdaCP": "0.75",
        "z": "104",
        "a": "0.01",
        "varpi": "312",
        "Tp": "30",
        "gamma": "0.1",
    },
}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str, default):
    what = DESCRIPTIONS.get(key, "")
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if not items:
                raise ValueError("empty list")
            kind = type(default[0]) if default else float
            return tuple(kind(x) if kind is not int else _int(x) for x in items)
        if default is None:
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, int):
            return _int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} ({what})") from exc


def _int(x: str) -> int:
    v = float(x)
    if v != int(v):
        raise ValueError(x)
    return int(v)


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def build_config(pairs: dict, preset: Optional[str] = None) -> sim.ScenarioConfig:
    """Validated ScenarioConfig from raw key/value strings (preset first, pairs on top)."""
    pairs = dict(pairs)
    file_preset = pairs.pop("preset", None)
    merged: dict = {}
    for name in (preset, file_preset):
        if name is None:
            continue
        if name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        merged.update(PRESETS[name])
    merged.update(pairs)

    unknown = sorted(k for k in merged if k not in SCENARIO_KEYS and k not in STAGE2_KEYS)
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(unknown))
    missing = [k for k in REQUIRED if k not in merged]
    if missing:
        raise ConfigError(
            "missing required keys: " + "; ".join(f"{k} ({DESCRIPTIONS[k]})" for k in missing)
        )

    defaults = sim.ScenarioConfig.__dataclass_fields__
    s_kw, p_kw = {}, {}
    for k, raw in merged.items():
        if k in SCENARIO_KEYS:
            f = defaults[k]
            d = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            s_kw[k] = _convert(k, raw, d)
        else:
            d = STAGE2_KEYS[k].default
            p_kw[k] = _convert(k, raw, d)
    try:
        stage2 = StageTwoParams(**p_kw)
        return sim.ScenarioConfig(**s_kw, stage2=stage2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path, preset: Optional[str] = None) -> sim.ScenarioConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return build_config(parse_text(p.read_text()), preset)


def config_lines(cfg: sim.ScenarioConfig) -> list:
    """Every setting as ``key = value`` in a fixed order (re-readable by parse_config)."""
    out = []
    for k in SCENARIO_KEYS:
        v = getattr(cfg, k)
        out.append(f"{k} = {_fmt(v)}")
    for k in STAGE2_KEYS:
        out.append(f"{k} = {_fmt(getattr(cfg.stage2, k))}")
    return out


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ output


@dataclass
class RunConfig:
    command: str
    cfg: sim.ScenarioConfig
    out: Path
    json: bool = False
    extras: dict = field(default_factory=dict)


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue().encode()


def _json(header, rows) -> bytes:
    recs = [dict(zip(header, r)) for r in rows]
    return (json.dumps(recs, indent=1, sort_keys=True) + "\n").encode()


class Staging:
    def __init__(self, want_json: bool):
        self.files: dict = {}
        self.want_json = want_json

    def table(self, stem: str, header, rows):
        rows = [list(r) for r in rows]
        self.files[f"{stem}.csv"] = _csv(header, rows)
        if self.want_json:
            self.files[f"{stem}.json"] = _json(header, rows)

    def blob(self, name: str, data: bytes):
        self.files[name] = data


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _manifest(run: RunConfig, files: dict) -> bytes:
    lines = [
        f"command = {run.command}",
        f"cloudauction = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        f"matplotlib = {matplotlib.__version__}",
    ]
    lines += [f"arg.{k} = {_fmt(v)}" for k, v in sorted(run.extras.items())]
    lines += ["[config]"] + config_lines(run.cfg) + ["[files]"]
    lines += [f"{n} = sha256:{hashlib.sha256(files[n]).hexdigest()}" for n in sorted(files)]
    return ("\n".join(lines) + "\n").encode()


# ------------------------------------------------------------------ commands


def _scenario1(run: RunConfig, st: Staging):
    results = []
    for m in run.cfg.mechanisms:
        res = sim.run_scenario1(run.cfg, m)
        results.append(res)
        st.table(
            f"scenario1_{res.mechanism.value}",
            ["N", "Delta", "analytic_income", "simulated_income", "stderr"],
            [[r.N, r.Delta, r.analytic_income, r.simulated_income, r.stderr] for r in res.rows],
        )
    st.blob("scenario1.png", plotting.scenario1_figure(results))


def _scenario2(run: RunConfig, st: Staging):
    curves = sim.run_scenario2(run.cfg)
    keys = sorted(curves)
    r = curves[keys[0]].r
    rows = [[float(r[i])] + [float(curves[g].values[i]) for g in keys] for i in range(r.size)]
    st.table("scenario2", ["r"] + [f"gamma_{g:g}" for g in keys], rows)
    st.blob("scenario2.png", plotting.curves_figure(curves))


def _scenario3(run: RunConfig, st: Staging):
    res = sim.run_scenario3(run.cfg)
    rows = []
    for name, rep in (("obsa", res.obsa), ("combinatorial", res.baseline)):
        v = sim.payment_variance(rep)
        rows.append([name, rep.total_winners, rep.total_sold, rep.mean_income, "" if v is None else v])
    st.table("scenario3", ["mechanism", "winners", "sold_servers", "income", "payment_variance"], rows)
    st.blob("scenario3.png", plotting.scenario3_figure(res.obsa, res.baseline))


def _scenario4(run: RunConfig, st: Staging):
    cfg = run.cfg
    res = sim.run_scenario4(cfg)
    low = set(res.low_instants)
    st.table(
        "scenario4",
        ["instant", "obsa_participants", "baseline_participants", "low_price"],
        [[t, o, b, int(t in low)] for t, (o, b) in enumerate(zip(res.obsa, res.baseline))],
    )
    vrows = sim.variance_comparison(cfg, seeds=range(cfg.variance_seeds))
    st.table(
        "scenario4_variance",
        ["N", "Delta", "seed", "obsa_variance", "baseline_variance"],
        [[r.N, r.Delta, r.seed, r.obsa_variance, r.baseline_variance] for r in vrows],
    )
    st.blob("scenario4.png", plotting.scenario4_figure(res, vrows))


def chain_query(cfg: sim.ScenarioConfig, lam: float, Delta: int, mechanism) -> float:
    model = chain.build_model(cfg.distribution(), lam, cfg.pB)
    return chain.expected_revenue(model, Mechanism(mechanism), Delta)


def _curve(run: RunConfig, st: Staging):
    p = run.cfg.stage2
    c = solve_second_price_curve(p, p.Tp / run.cfg.steps)
    st.table("curve", ["r", "b"], [[float(x), float(y)] for x, y in zip(c.r, c.values)])
    st.blob("curve.png", plotting.curves_figure({p.gamma: c}))


COMMANDS = {
    "scenario1": _scenario1,
    "scenario2": _scenario2,
    "scenario3": _scenario3,
    "scenario4": _scenario4,
    "curve": _curve,
}


def dispatch(run: RunConfig) -> int:
    st = Staging(run.json)
    run.out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[run.command](run, st)
    except Exception as exc:  # noqa: BLE001 - reported through the diagnostic file
        diag = f"command = {run.command}\nerror = {type(exc).__name__}: {exc}\n\n"
        diag += traceback.format_exc()
        _write_atomic(run.out / "diagnostic.txt", diag.encode())
        print(f"error: {exc} (see {run.out / 'diagnostic.txt'})", file=sys.stderr)
        return 1
    st.blob("config.txt", ("\n".join(config_lines(run.cfg)) + "\n").encode())
    for name in sorted(st.files):
        _write_atomic(run.out / name, st.files[name])
    _write_atomic(run.out / "manifest.txt", _manifest(run, st.files))
    return 0


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cloudauction", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    helps = {
        "scenario1": "analytic vs simulated income over the rate and patience grid",
        "scenario2": "second-price bid curves for several discount rates",
        "scenario3": "multi-type server market against the greedy bundle baseline",
        "scenario4": "participant stability and payment-variance comparison",
        "curve": "one second-price bid curve",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps.get(name))
        sp.add_argument("--out", default=f"runs/{name}")
        sp.add_argument("--json", action="store_true", help="also write JSON mirrors of the CSVs")
    cp = sub.add_parser("chain", parents=[common], help="expected income from the payment chain")
    cp.add_argument("--lam", type=float, required=True)
    cp.add_argument("--delta", type=int, required=True, dest="Delta")
    cp.add_argument("--mechanism", default="second")
    cp.add_argument("--json", action="store_true")
    return ap


def _load(args) -> sim.ScenarioConfig:
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    pairs = parse_text(Path(args.config).read_text()) if args.config else {}
    if not args.config and args.preset is None:
        pairs = {**PRESETS["table1-uniform"], **pairs}
    for kv in args.set:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        pairs[k.strip()] = v.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.reps is not None:
        pairs["reps"] = str(args.reps)
    return build_config(pairs, args.preset)


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        ap.error(str(exc))
    if args.command == "chain":
        try:
            v = chain_query(cfg, args.lam, args.Delta, args.mechanism)
        except ValueError as exc:
            ap.error(str(exc))
        print(json.dumps({"revenue": v}) if args.json else repr(v))
        return 0
    scen = {"scenario1": 1, "scenario2": 2, "scenario3": 3, "scenario4": 4}.get(args.command)
    if scen is not None:
        cfg = dataclasses.replace(cfg, scenario=scen)
    return dispatch(RunConfig(args.command, cfg, Path(args.out), args.json))


if __name__ == "__main__":
    sys.exit(main())
