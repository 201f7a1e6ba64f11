"""Command-line entry point: exact | train | check | oracle.

Every output is reproducible byte-for-byte from (config, seed): CSVs carry a
header row and 17-significant-digit floats, JSON manifests embed the resolved
config and the package version, and nothing records wall-clock state.

Exit codes: 0 ok, 2 config error, 3 non-convergence, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .exact_metrics import (ConvergenceError, bisim_fixed_point,
                            chrono_fixed_point, chrono_table_to_csv,
                            metric_table_to_csv, mico_fixed_point)
from .grad import save_params_json
from .mdp import (Policy, TabularMdp, epsilon_greedy_policy, four_rooms,
                  load_mdp_json, mdp_from_json_dict, random_mdp,
                  random_policy, reference_six_state_mdp, uniform_policy,
                  validate, validate_policy, value_iteration)
from .temporal import (UnreachableEndpointError, conditioned_return,
                       lower_bound_violation_sweep)
from .trainer import DivergenceError, TrainerConfig, TrainingReport, train
from .verify import run_all

OUT_DIR_ENV = "SCR_OUT_DIR"


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def load_config(path: str | None) -> dict:
    if path is None:
        raise ConfigError("--config is required for this command")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def build_mdp(cfg: dict) -> TabularMdp:
    spec = cfg.get("mdp")
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("config needs an 'mdp' object with a 'kind'")
    kind = spec["kind"]
    try:
        if kind == "inline":
            return mdp_from_json_dict(spec["mdp"])
        if kind == "file":
            path = Path(spec["path"])
            if not path.exists():
                raise ConfigError(f"mdp file not found: {path}")
            return load_mdp_json(path)
        if kind == "four_rooms":
            return four_rooms(int(spec["size"]), tuple(spec["goal"]),
                              float(spec.get("slip", 0.0)),
                              float(spec.get("gamma", 0.99)))
        if kind == "random":
            return random_mdp(int(spec["n_states"]), int(spec["n_actions"]),
                              float(spec["gamma"]), int(spec["seed"]),
                              max_support=spec.get("max_support"))
        if kind == "reference":
            return reference_six_state_mdp()
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid mdp config: {exc}") from exc
    raise ConfigError(f"unknown mdp kind {kind!r}")


def build_policy(cfg: dict, mdp: TabularMdp) -> Policy:
    spec = cfg.get("policy", {"kind": "epsilon_greedy", "epsilon": 0.3})
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("'policy' must be an object with a 'kind'")
    kind = spec["kind"]
    try:
        if kind == "epsilon_greedy":
            return epsilon_greedy_policy(mdp, float(spec.get("epsilon", 0.3)))
        if kind == "uniform":
            return uniform_policy(mdp)
        if kind == "random":
            return random_policy(mdp, int(spec.get("seed", 0)))
        if kind == "inline":
            pi = Policy(np.asarray(spec["probs"], dtype=np.float64))
            validate_policy(pi, mdp)
            return pi
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid policy config: {exc}") from exc
    raise ConfigError(f"unknown policy kind {kind!r}")


def build_trainer_config(cfg: dict) -> TrainerConfig:
    spec = cfg.get("trainer", {})
    if not isinstance(spec, dict):
        raise ConfigError("'trainer' must be an object")
    known = set(TrainerConfig.__dataclass_fields__)
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
    try:
        config = TrainerConfig(**spec)
        if config.step_range is not None:
            config.step_range = (int(config.step_range[0]),
                                 int(config.step_range[1]))
        config.check()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid trainer config: {exc}") from exc
    return config


def resolve_out_dir(args, cfg: dict) -> Path:
    if args.out:
        root = args.out
    elif cfg.get("out_dir"):
        root = cfg["out_dir"]
    else:
        root = os.environ.get(OUT_DIR_ENV, "scr_out")
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    seed = int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return seed


def _write_manifest(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _resolved_config(cfg: dict, seed: int) -> dict:
    resolved = dict(cfg)
    resolved["seed"] = seed
    return resolved


def cmd_exact(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    out = resolve_out_dir(args, cfg)
    mdp = build_mdp(cfg)
    validate(mdp)
    pi = build_policy(cfg, mdp)
    oracle = cfg.get("oracle", {})
    tol = float(oracle.get("tol", 1e-10))
    max_iter = oracle.get("max_iter")
    max_iter = int(max_iter) if max_iter is not None else None
    K = int(oracle.get("K", 10))
    try:
        mico = mico_fixed_point(mdp, pi, tol, max_iter)
        bisim = bisim_fixed_point(mdp, pi, tol, max_iter)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    chrono = chrono_fixed_point(mdp, pi, K)
    metric_table_to_csv(mico.values, out / "mico.csv")
    metric_table_to_csv(bisim.values, out / "bisim.csv")
    chrono_table_to_csv(chrono, out / "chrono_k.csv")
    _write_manifest(out / "manifest.json", {
        "version": __version__,
        "config": _resolved_config(cfg, seed),
        "mico": {"iterations": mico.iterations, "residual": mico.residual},
        "bisim": {"iterations": bisim.iterations, "residual": bisim.residual},
        "chrono": {"K": K},
    })
    print(f"wrote mico.csv, bisim.csv, chrono_k.csv, manifest.json to {out}")
    return 0


def write_training_report_csv(report: TrainingReport, path) -> None:
    snap = {int(s): (report.snapshot_mae[i], report.snapshot_rank_corr[i])
            for i, s in enumerate(report.snapshot_steps)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_phi", "loss_psi", "loss_low", "loss_up",
                         "total", "mae", "rank_corr"])
        if 0 in snap:
            writer.writerow([0, "", "", "", "", "",
                             _fmt(snap[0][0]), _fmt(snap[0][1])])
        for i, step in enumerate(report.steps):
            step = int(step)
            extra = ([_fmt(snap[step][0]), _fmt(snap[step][1])]
                     if step in snap else ["", ""])
            writer.writerow([
                step,
                _fmt(report.loss_phi[i]), _fmt(report.loss_psi[i]),
                _fmt(report.loss_low[i]), _fmt(report.loss_up[i]),
                _fmt(report.loss_total[i]), *extra,
            ])


def training_summary_dict(report: TrainingReport, cfg: dict, seed: int) -> dict:
    return {
        "version": __version__,
        "config": _resolved_config(cfg, seed),
        "trainer": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in asdict(report.config).items()},
        "steps": int(len(report.steps)),
        "final_mae": report.final_mae,
        "final_rank_corr": report.final_rank_corr,
        "max_exact_distance": report.max_exact_distance,
        "final_losses": {
            name: float(getattr(report, name)[-1]) if len(report.steps) else None
            for name in ("loss_phi", "loss_psi", "loss_low", "loss_up",
                         "loss_total")
        },
        "snapshots": [
            [int(s), float(m), float(r)]
            for s, m, r in zip(report.snapshot_steps, report.snapshot_mae,
                               report.snapshot_rank_corr)
        ],
    }


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    out = resolve_out_dir(args, cfg)
    mdp = build_mdp(cfg)
    validate(mdp)
    config = build_trainer_config(cfg)
    policy_spec = cfg.get("policy",
                          {"kind": "epsilon_greedy", "epsilon": config.eps_greedy})
    pi = build_policy({"policy": policy_spec}, mdp)
    try:
        report = train(mdp, pi, config, seed)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    write_training_report_csv(report, out / "report.csv")
    _write_manifest(out / "summary.json", training_summary_dict(report, cfg, seed))
    save_params_json(report.params, out / "checkpoint.json")
    print(f"wrote report.csv, summary.json, checkpoint.json to {out}; "
          f"final mae {report.final_mae:.4f}, "
          f"rank corr {report.final_rank_corr:.4f}")
    return 0


def cmd_check(args) -> int:
    results = run_all()
    all_ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        all_ok = all_ok and res.passed
        print(f"{status} {res.name} ({res.n_checks} checks): {res.detail}")
    print(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    return 0 if all_ok else 1


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args, cfg)
    out = resolve_out_dir(args, cfg)
    mdp = build_mdp(cfg)
    validate(mdp)
    pi = build_policy(cfg, mdp)
    oracle = cfg.get("oracle", {})
    k_max = int(oracle.get("k_max", 5))
    n_policies = int(oracle.get("n_policies", 100))
    with open(out / "conditioned_returns.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "k", "endpoint_prob", "conditioned_return"])
        for k in range(k_max + 1):
            for x in range(mdp.n_states):
                for y in range(mdp.n_states):
                    try:
                        ret = conditioned_return(mdp, pi, x, y, k)
                        writer.writerow([x, y, k, _fmt(ret.endpoint_prob),
                                         _fmt(ret.value)])
                    except UnreachableEndpointError:
                        writer.writerow([x, y, k, _fmt(0.0), "unreachable"])
    _, greedy = value_iteration(mdp)
    with open(out / "lower_bound_violations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "k", "m_star", "n_policies", "n_evaluated",
                         "violation_rate", "max_violation"])
        for k in range(1, k_max + 1):
            for x in range(mdp.n_states):
                for y in range(mdp.n_states):
                    try:
                        m_val = conditioned_return(mdp, greedy, x, y, k).value
                    except UnreachableEndpointError:
                        writer.writerow([x, y, k, "unreachable", n_policies,
                                         0, "", ""])
                        continue
                    sweep = lower_bound_violation_sweep(
                        mdp, x, y, k, n_policies, seed, m_value=m_val)
                    writer.writerow([x, y, k, _fmt(m_val), n_policies,
                                     sweep.n_evaluated,
                                     _fmt(sweep.violation_rate),
                                     _fmt(sweep.max_violation)])
    _write_manifest(out / "manifest.json", {
        "version": __version__,
        "config": _resolved_config(cfg, seed),
        "k_max": k_max,
        "n_policies": n_policies,
    })
    print(f"wrote conditioned_returns.csv, lower_bound_violations.csv, "
          f"manifest.json to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="statechrono",
        description="Behavioral-metric representations on tabular MDPs: "
                    "exact oracles, property checks, and training runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
            ("exact", cmd_exact, True),
            ("train", cmd_train, True),
            ("check", cmd_check, False),
            ("oracle", cmd_oracle, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config, default=None)
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")
        p.add_argument("--out", default=None,
                       help=f"output directory (default: config out_dir, "
                            f"then ${OUT_DIR_ENV})")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
