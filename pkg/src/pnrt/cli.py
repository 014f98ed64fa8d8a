"""Command-line front end: ``pnrt {test,sequential,simulate,power,oracle}``.

Every run is driven by a JSON config; ``--seed``, ``--workers``, ``--out`` and
``--format`` override or complement it. Artifacts embed the resolved config
and seed so a rerun reproduces them byte for byte.

Exit codes: 0 on completion (a rejection is a result, not a failure),
2 on malformed input, 3 on a violated precondition.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .design import (
    CompleteRandomization,
    EnumeratedPool,
    enumerate_support,
    mechanism_from_config,
    write_pool_csv,
)
from .engines import ConditioningEvent, crt, frt, naive_rt, pnrt_min, pnrt_pair
from .errors import ContractError, InputError, PNRTError, SupportTooLarge, UnknownAssignment
from .network import DenseProximity, MembershipTable, load_network
from .sequential import EngineConfig, pure_control_descent, sequential_test, two_step_pretest
from .sim import (
    SimConfig,
    build_setup,
    gen_schedule,
    imputation_table,
    oracle_schedule,
    run_power_study,
)
from .stats import StatisticSpec, load_outcomes_csv

ENGINE_FUNCS = {"frt": frt, "naive": naive_rt, "pair": pnrt_pair, "min": pnrt_min}

COMMON_KEYS = {
    "seed": "master seed (u64); generated and echoed when omitted",
    "workers": "worker threads for resampling (default: available cores)",
}
DATA_KEYS = {
    "network": "object: path, format (dense|coordinates|membership), metric, sidecar",
    "outcomes": "outcome CSV path (unit_id,y,<covariates>)",
    "observed": "observed assignment: list of treated unit ids, or an assignment id (membership)",
    "mechanism": "object: variant (bernoulli|complete|stratified|pool) plus parameters; "
                 "defaults to the membership pool when the network is a membership table",
    "statistic": "object: kind, sidedness, eps_s, eps_c, covariates, weighting, residuals",
    "alpha": "significance level (default 0.05)",
    "R": "Monte Carlo replicates (default 1000)",
    "mode": "monte_carlo | exhaustive",
    "tie_rule": "count_as_ge | half_discount | uniform_break",
    "unadjusted": "decide the pair engine at alpha instead of alpha/2",
    "min_mode": "min engine, Monte Carlo mode: sampled (default) | exact (minimum over the enumerated support)",
}
KEYS = {
    "test": {**COMMON_KEYS, **DATA_KEYS,
             "engine": "frt | naive | pair | min | crt",
             "event": "CRT only: object with focal_units (ids) and focal_assignments (lists of treated ids)"},
    "sequential": {**COMMON_KEYS, **DATA_KEYS,
                   "engine": "pair | min",
                   "thresholds": "increasing distance grid eps_0 < ... < eps_K",
                   "procedure": "sequential | descent | pretest",
                   "k_target": "pretest only: index of the hypothesis tested in step 2"},
    "simulate": {**COMMON_KEYS,
                 "sim": "object with simulation settings (see power)",
                 "tau": "spillover size of the generated dataset",
                 "out_dir": "directory receiving network, outcomes, pool and test config"},
    "power": {**COMMON_KEYS,
              "sim": "object: " + ", ".join(SimConfig.__dataclass_fields__)},
    "oracle": {**COMMON_KEYS,
               "N": "ring size when no network is given (default 6)",
               "network": "optional network object (as in test)",
               "eps_s": "partial-null threshold (default 0)",
               "y": "observed outcomes (default: toy outcomes for N=6, oracle draws otherwise)",
               "observed": "treated unit indices of the observed assignment (default [0])",
               "mechanism": "mechanism object whose support lists the rows (default: one treated unit)"},
}
STAT_KEYS = {"kind", "sidedness", "eps_s", "eps_c", "covariates", "weighting", "residuals"}
TOY_Y = [2.0, 5.0, 3.0, 1.0, 4.0, 6.0]


# -- config handling --------------------------------------------------------

def _check_keys(cfg: dict, allowed, where: str):
    if not isinstance(cfg, dict):
        raise InputError(f"{where} must be a JSON object")
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise InputError(f"unknown {where} keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _read_config(path) -> tuple:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        return json.loads(p.read_text()), p.parent
    except FileNotFoundError:
        raise InputError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _load_net(spec: dict, base: Path):
    _check_keys(spec, {"path", "format", "metric", "sidecar", "matrix"}, "network")
    if "matrix" in spec:
        return DenseProximity(np.array(spec["matrix"], dtype=float))
    if "path" not in spec:
        raise InputError("network.path is required")
    path = _resolve(base, spec["path"])
    if not path.exists():
        raise InputError(f"network file not found: {path}")
    kw = {}
    if "metric" in spec:
        kw["metric"] = spec["metric"]
    if spec.get("sidecar"):
        kw["sidecar"] = _resolve(base, spec["sidecar"])
    return load_network(path, spec.get("format", "dense"), **kw)


def _statistic(cfg: dict) -> StatisticSpec:
    st = dict(cfg.get("statistic", {}))
    _check_keys(st, STAT_KEYS, "statistic")
    if "eps_c" not in st:
        st["eps_c"] = 1.0
    for k in ("eps_s", "eps_c"):
        if k in st:
            st[k] = float(st[k])
    return StatisticSpec(**st)


def _observed(cfg: dict, G):
    if "observed" not in cfg:
        raise InputError("observed assignment is required")
    obs = cfg["observed"]
    if isinstance(obs, str):
        if not isinstance(G, MembershipTable):
            raise InputError("assignment ids need a membership-table network")
        try:
            return G.treated[G.resolve(obs)].copy()
        except UnknownAssignment as exc:
            raise ContractError(str(exc)) from None
    d = np.zeros(G.n, dtype=bool)
    for u in obs:
        d[G.index_of(u)] = True
    return d


def _mechanism(cfg: dict, G, base: Path):
    if "mechanism" in cfg:
        return mechanism_from_config(cfg["mechanism"], G.n, G.ids, base)
    if isinstance(G, MembershipTable):
        return EnumeratedPool(G.pool_matrix(), ids=tuple(G.assignment_ids))
    raise InputError("mechanism is required")


def _load_inputs(cfg: dict, base: Path):
    if "network" not in cfg:
        raise InputError("network is required")
    G = _load_net(cfg["network"], base)
    if "outcomes" not in cfg:
        raise InputError("outcomes file is required")
    opath = _resolve(base, cfg["outcomes"])
    if not opath.exists():
        raise InputError(f"outcomes file not found: {opath}")
    data = load_outcomes_csv(opath, G.ids)
    d_obs = _observed(cfg, G)
    mech = _mechanism(cfg, G, base)
    if isinstance(mech, EnumeratedPool) and mech.index_of(d_obs) is None:
        raise ContractError("observed assignment is not in the assignment pool")
    if getattr(mech, "n", G.n) != G.n:
        raise InputError("mechanism size does not match the network")
    return G, data, d_obs, mech


def _engine_kwargs(cfg, seed, workers):
    return dict(seed=seed, mode=cfg.get("mode", "monte_carlo"), workers=workers,
                unadjusted=bool(cfg.get("unadjusted", False)),
                min_mode=cfg.get("min_mode", "sampled"))


# -- subcommands ------------------------------------------------------------

def cmd_test(cfg: dict, base: Path, seed: int, workers: int) -> dict:
    _check_keys(cfg, KEYS["test"], "test config")
    G, data, d_obs, mech = _load_inputs(cfg, base)
    spec = _statistic(cfg)
    engine = cfg.get("engine", "pair")
    alpha = float(cfg.get("alpha", 0.05))
    R = int(cfg.get("R", 1000))
    tie = cfg.get("tie_rule", "count_as_ge")
    if engine == "crt":
        ev = cfg.get("event")
        if ev is None:
            raise InputError("engine crt needs an event")
        _check_keys(ev, {"focal_units", "focal_assignments", "probabilities"}, "event")
        focal = np.zeros(G.n, dtype=bool)
        focal[[G.index_of(u) for u in ev["focal_units"]]] = True
        rows = np.zeros((len(ev["focal_assignments"]), G.n), dtype=bool)
        for r, treated in enumerate(ev["focal_assignments"]):
            rows[r, [G.index_of(u) for u in treated]] = True
        event = ConditioningEvent(focal, rows, ev.get("probabilities"))
        if not event.contains(d_obs):
            raise ContractError("observed assignment is not one of the focal assignments")
        res = crt(spec, data, d_obs, event, G, R, alpha, tie, seed=seed,
                  mode=cfg.get("mode", "monte_carlo"))
    else:
        if engine not in ENGINE_FUNCS:
            raise InputError(f"engine must be one of {sorted(ENGINE_FUNCS) + ['crt']}, got {engine!r}")
        res = ENGINE_FUNCS[engine](spec, data, d_obs, mech, G, R, alpha, tie,
                                   **_engine_kwargs(cfg, seed, workers))
    return {"kind": "test_result", "result": res.to_dict(), "_obj": res}


def cmd_sequential(cfg: dict, base: Path, seed: int, workers: int) -> dict:
    _check_keys(cfg, KEYS["sequential"], "sequential config")
    G, data, d_obs, mech = _load_inputs(cfg, base)
    if "thresholds" not in cfg:
        raise InputError("thresholds grid is required")
    spec = _statistic({"statistic": {**cfg.get("statistic", {}), "eps_s": 0.0, "eps_c": 1.0}})
    ecfg = EngineConfig(engine=cfg.get("engine", "pair"), statistic=spec, R=int(cfg.get("R", 1000)),
                        tie_rule=cfg.get("tie_rule", "count_as_ge"), seed=seed,
                        mode=cfg.get("mode", "monte_carlo"),
                        unadjusted=bool(cfg.get("unadjusted", False)), workers=workers,
                        min_mode=cfg.get("min_mode", "sampled"))
    alpha = float(cfg.get("alpha", 0.05))
    proc = cfg.get("procedure", "sequential")
    if proc == "sequential":
        res = sequential_test(ecfg, data, d_obs, mech, G, cfg["thresholds"], alpha)
    elif proc == "descent":
        res = pure_control_descent(ecfg, data, d_obs, mech, G, cfg["thresholds"], alpha)
    elif proc == "pretest":
        step1 = sequential_test(ecfg, data, d_obs, mech, G, cfg["thresholds"], alpha)
        step2 = two_step_pretest(ecfg, data, d_obs, mech, G, cfg["thresholds"], alpha,
                                 int(cfg.get("k_target", 0)), first_step=step1)
        return {"kind": "pretest", "first_step": step1.to_dict(), "result": step2.to_dict(),
                "_obj": step2, "_text": step1.to_text() + "\n\nstep 2\n" + step2.to_text()}
    else:
        raise InputError(f"procedure must be sequential, descent or pretest, got {proc!r}")
    return {"kind": "sequential_result", "result": res.to_dict(), "_obj": res}


def _sim_config(cfg: dict, seed: int, workers: int) -> SimConfig:
    sim = dict(cfg.get("sim", {}))
    sim["seed"] = seed
    sim.setdefault("workers", workers)
    return SimConfig.from_dict(sim)


def cmd_power(cfg: dict, base: Path, seed: int, workers: int) -> dict:
    _check_keys(cfg, KEYS["power"], "power config")
    table = run_power_study(_sim_config(cfg, seed, workers))
    return {"kind": "power_table", "result": table.rows, "_csv": table.to_csv()}


def cmd_simulate(cfg: dict, base: Path, seed: int, workers: int) -> dict:
    """Write one simulated dataset plus a ready-to-run ``test`` config."""
    _check_keys(cfg, KEYS["simulate"], "simulate config")
    sc = _sim_config(cfg, seed, workers)
    tau = float(cfg.get("tau", 0.0))
    out_dir = _resolve(base, cfg.get("out_dir", "simulated"))
    out_dir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(sc)
    ridx = int(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,))).integers(setup.pool.size))
    d_obs = setup.pool.assignments[ridx]
    g = sc.thresholds
    sched = gen_schedule(sc, setup.hotspots, tau, G=setup.G, base_control=setup.base_control)
    y = sched.outcomes(d_obs)
    ids = setup.G.ids
    with (out_dir / "coordinates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y"])
        for u, (a, b) in zip(ids, setup.G.coords):
            w.writerow([u, repr(float(a)), repr(float(b))])
    with (out_dir / "outcomes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "y", "hotspot"])
        for u, v, h in zip(ids, y, setup.hotspots):
            w.writerow([u, repr(float(v)), int(h)])
    pool = EnumeratedPool(setup.pool.assignments, ids=tuple(f"a{r}" for r in range(setup.pool.size)))
    write_pool_csv(pool, out_dir / "pool.csv")
    test_cfg = {
        "network": {"path": "coordinates.csv", "format": "coordinates"},
        "outcomes": "outcomes.csv",
        "observed": [ids[i] for i in np.flatnonzero(d_obs)],
        "mechanism": {"variant": "pool", "path": "pool.csv"},
        "engine": "pair",
        "statistic": {"kind": sc.statistic, "sidedness": sc.sidedness,
                      "eps_s": g[0], "eps_c": g[1], "covariates": []},
        "R": sc.R,
        "alpha": sc.alpha,
        "seed": seed,
    }
    (out_dir / "test_config.json").write_text(json.dumps(test_cfg, indent=2, sort_keys=True) + "\n")
    return {"kind": "simulated_dataset",
            "result": {"out_dir": str(out_dir), "tau": tau, "N": sc.N,
                       "observed": test_cfg["observed"],
                       "files": ["coordinates.csv", "outcomes.csv", "pool.csv", "test_config.json"]}}


def ring_network(n: int) -> DenseProximity:
    i = np.arange(n)
    gap = np.abs(i[:, None] - i[None, :])
    return DenseProximity(np.minimum(gap, n - gap).astype(float))


def cmd_oracle(cfg: dict, base: Path, seed: int, workers: int) -> dict:
    """Imputation pattern under the partial null: which outcomes are known per assignment."""
    _check_keys(cfg, KEYS["oracle"], "oracle config")
    if "network" in cfg:
        G = _load_net(cfg["network"], base)
    else:
        G = ring_network(int(cfg.get("N", 6)))
    eps_s = float(cfg.get("eps_s", 0.0))
    obs = np.zeros(G.n, dtype=bool)
    obs[list(cfg.get("observed", [0]))] = True
    if "mechanism" in cfg:
        mech = mechanism_from_config(cfg["mechanism"], G.n, G.ids, base)
    else:
        mech = CompleteRandomization(G.n, int(obs.sum()))
    B, _ = enumerate_support(mech)
    order = [i for i in range(B.shape[0]) if np.array_equal(B[i], obs)]
    order += [i for i in range(B.shape[0]) if i not in order]
    B = B[order]
    if "y" in cfg:
        y = np.asarray(cfg["y"], dtype=float)
    elif G.n == 6:
        y = np.array(TOY_Y)
    else:
        y = oracle_schedule(G, eps_s, seed).outcomes(obs)
    if y.size != G.n:
        raise InputError(f"y has {y.size} entries for {G.n} units")
    table = imputation_table(G, obs, y, eps_s, B)
    rows = []
    for bits, vals in zip(B, table):
        rows.append({"assignment": "".join("1" if b else "0" for b in bits),
                     "outcomes": [None if np.isnan(v) else float(v) for v in vals]})
    return {"kind": "imputation_table", "result": {"units": list(G.ids), "eps_s": eps_s, "rows": rows}}


COMMANDS = {"test": cmd_test, "sequential": cmd_sequential, "simulate": cmd_simulate,
            "power": cmd_power, "oracle": cmd_oracle}


# -- output -----------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items() if not str(k).startswith("_")}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return "inf" if np.isinf(x) else ("nan" if np.isnan(x) else x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def render(cmd: str, payload: dict, fmt: str) -> str:
    art = _jsonable(payload)
    if fmt == "json":
        return json.dumps(art, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        if "_csv" in payload:
            return payload["_csv"]
        res = payload["result"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if cmd == "oracle":
            w.writerow(["assignment"] + res["units"])
            for r in res["rows"]:
                w.writerow([r["assignment"]] + ["?" if v is None else f"{v:g}" for v in r["outcomes"]])
            return buf.getvalue()
        flat = {k: v for k, v in _jsonable(res).items() if not isinstance(v, (dict, list))}
        w.writerow(list(flat))
        w.writerow(list(flat.values()))
        return buf.getvalue()
    # text
    if "_text" in payload:
        return payload["_text"] + "\n"
    obj = payload.get("_obj")
    if obj is not None and hasattr(obj, "to_text"):
        return obj.to_text() + "\n"
    if cmd == "power":
        return payload["_csv"]
    if cmd == "oracle":
        res = payload["result"]
        w = max(6, len(res["rows"][0]["assignment"]))
        lines = ["assignment".ljust(w + 2) + " ".join(u.rjust(6) for u in res["units"])]
        for r in res["rows"]:
            cells = ["?".rjust(6) if v is None else f"{v:6g}" for v in r["outcomes"]]
            lines.append(r["assignment"].ljust(w + 2) + " ".join(cells))
        return "\n".join(lines) + "\n"
    return json.dumps(art["result"], indent=2, sort_keys=True) + "\n"


def _help_epilog() -> str:
    lines = ["config keys per subcommand:"]
    for cmd, keys in KEYS.items():
        lines.append(f"  {cmd}:")
        for k, desc in keys.items():
            lines.append(f"    {k:<12} {desc}")
    lines.append("  statistic object keys: " + ", ".join(sorted(STAT_KEYS)))
    lines.append("exit codes: 0 completed, 2 input error, 3 precondition violated")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnrt", description="Partial-null randomization tests.",
                                epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, epilog="config keys:\n" + "\n".join(
            f"  {k:<12} {v}" for k, v in KEYS[name].items()),
            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--workers", type=int, help="worker count (overrides config)")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=("json", "csv", "text"),
                        default="csv" if name == "power" else "json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, base = _read_config(args.config)
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % (2**63))
            print(f"seed: {seed}", file=sys.stderr)
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InputError("seed must be an unsigned 64-bit integer")
        workers = args.workers if args.workers is not None else cfg.get("workers", os.cpu_count() or 1)
        workers = max(1, int(workers))
        payload = COMMANDS[args.command](cfg, base, seed, workers)
        resolved = {k: v for k, v in cfg.items() if k not in ("seed", "workers")}
        payload = {"command": args.command, "config": resolved, "seed": seed, **payload}
        text = render(args.command, payload, args.format)
    except ContractError as exc:
        print(f"pnrt: contract violation: {exc}", file=sys.stderr)
        return 3
    except (InputError, SupportTooLarge) as exc:
        print(f"pnrt: input error: {exc}", file=sys.stderr)
        return 2
    except PNRTError as exc:
        print(f"pnrt: error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
