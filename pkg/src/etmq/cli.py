"""Experiment driver: train, label, fit, certify, simulate, report.

Each subcommand is one pipeline stage reading/writing files under the
configured artifact directory and recording them in the manifest.  Failures
exit nonzero after printing a single machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import (
    TRIGGER_KINDS,
    ConfigError,
    RunConfig,
    config_hash,
    load_config,
    scope_hash,
)
from .env import PursuitEnv
from .manifest import (
    ManifestError,
    RunManifest,
    load_or_create_manifest,
    save_manifest,
)
from .planner import (
    PolicyTable,
    bellman_residual,
    greedy_policy,
    load_qtable,
    suboptimality_gap,
    train,
    save_qtable,
)
from .risk import epsilon_bounds
from .rollout import (
    ExactTrigger,
    FullCommTrigger,
    LearnedTrigger,
    NeverTrigger,
    geometric_tail,
    geometric_total,
    learned_trigger_delta,
    load_episodes,
    run_batch,
    save_episodes,
)
from .surrogate import RadiusCalculator, load_samples, sample_radii, save_samples
from .svr import (
    SvrConvergenceError,
    count_outliers,
    fit_svr,
    load_svr_model,
    save_svr_model,
)

SUMMARY_CSV_HEADER = (
    "alpha", "mean_return", "std_return", "mean_length", "std_length",
    "mean_msgs", "std_msgs", "msg_rate", "eps_hi", "delta"
)

# Published reference results for the ten-by-ten arena at gamma = 0.97
# (iota = 1.57): per-alpha mean return, mean game length, messages per game,
# messages per step, certified miss probability, and loss bound.  Used only
# for side-by-side columns in reports; nothing is fitted to them.
REFERENCE_GAMMA = 0.97
REFERENCE_IOTA = 1.57
REFERENCE_RESULTS = (
    {"alpha": 0.0, "return": 2.72, "return_std": 0.50, "length": 10.72,
     "length_std": 0.44, "msgs": 21.49, "msgs_std": 0.89, "msg_rate": 2.00,
     "eps_hi": None, "delta": None},
    {"alpha": 0.4, "return": 2.72, "return_std": 0.53, "length": 10.77,
     "length_std": 0.44, "msgs": 19.13, "msgs_std": 0.87, "msg_rate": 1.78,
     "eps_hi": 0.079, "delta": 16.33},
    {"alpha": 0.5, "return": 1.62, "return_std": 0.92, "length": 12.45,
     "length_std": 0.58, "msgs": 16.75, "msgs_std": 0.85, "msg_rate": 1.35,
     "eps_hi": 0.148, "delta": 22.39},
    {"alpha": 0.6, "return": 0.99, "return_std": 1.09, "length": 13.71,
     "length_std": 0.71, "msgs": 14.49, "msgs_std": 0.87, "msg_rate": 1.06,
     "eps_hi": 0.205, "delta": 26.61},
    {"alpha": 0.7, "return": 0.93, "return_std": 1.08, "length": 13.74,
     "length_std": 0.69, "msgs": 14.09, "msgs_std": 0.85, "msg_rate": 1.03,
     "eps_hi": 0.117, "delta": 26.85},
    {"alpha": 0.8, "return": 0.74, "return_std": 1.10, "length": 14.65,
     "length_std": 0.80, "msgs": 14.11, "msgs_std": 0.87, "msg_rate": 0.96,
     "eps_hi": 0.075, "delta": 28.10},
    {"alpha": 0.9, "return": 0.64, "return_std": 1.08, "length": 14.82,
     "length_std": 0.83, "msgs": 14.33, "msgs_std": 0.88, "msg_rate": 0.96,
     "eps_hi": 0.097, "delta": 31.69},
)


class CliError(ValueError):
    """Command cannot proceed (missing artifact, bad override, ...)."""


# -- artifact naming -----------------------------------------------------------

def _fmt_alpha(alpha: float) -> str:
    return format(alpha, "g")


def qtable_name() -> str:
    return "qtable.etmq"


def samples_name(alpha: float) -> str:
    return f"samples_alpha{_fmt_alpha(alpha)}.csv"


def model_name(alpha: float) -> str:
    return f"svr_alpha{_fmt_alpha(alpha)}.json"


def bounds_name(alpha: float) -> str:
    return f"bounds_alpha{_fmt_alpha(alpha)}.json"


def episodes_name(alpha: float, trigger: str) -> str:
    return f"episodes_alpha{_fmt_alpha(alpha)}_{trigger}.csv"


def summary_name(alpha: float, trigger: str) -> str:
    return f"summary_alpha{_fmt_alpha(alpha)}_{trigger}.csv"


def _root(cfg: RunConfig) -> str:
    os.makedirs(cfg.paths.artifacts, exist_ok=True)
    return cfg.paths.artifacts


def _manifest(cfg: RunConfig) -> RunManifest:
    return load_or_create_manifest(_root(cfg), f"etmq {__version__}", config_hash(cfg))


def _load_fresh_qtable(cfg: RunConfig, manifest: RunManifest):
    path = manifest.require(_root(cfg), qtable_name(), "train",
                            scope_hash(cfg, "train"))
    q = load_qtable(path)
    return q


# -- stages ----------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> None:
    env = PursuitEnv(cfg.env)
    result = train(env, cfg.gamma, cfg.train)
    root = _root(cfg)
    meta = {
        "mode": cfg.train.mode,
        "sweeps": result.sweeps,
        "steps": result.steps,
        "residual": None if math.isnan(result.residual) else result.residual,
    }
    path = os.path.join(root, qtable_name())
    try:
        save_qtable(result.table, path, meta=meta)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc
    if cfg.train.mode == "value-iteration":
        residual = bellman_residual(result.table, env)
        if residual > cfg.train.vi_tol:
            raise CliError(
                f"persisted table fails residual recheck: {residual} > {cfg.train.vi_tol}"
            )
    manifest = _manifest(cfg)
    manifest.record(root, qtable_name(), "train", scope_hash(cfg, "train"))
    save_manifest(manifest, root)
    print(json.dumps({
        "status": "ok", "command": "train", "mode": cfg.train.mode,
        "states": result.table.n_states, "sweeps": result.sweeps,
        "steps": result.steps,
        "residual": None if math.isnan(result.residual) else result.residual,
        "path": path,
    }))


def cmd_surrogate(cfg: RunConfig, alphas: list[float]) -> None:
    manifest = _manifest(cfg)
    q = _load_fresh_qtable(cfg, manifest)
    env = PursuitEnv(cfg.env)
    calc = RadiusCalculator(env, q)
    root = _root(cfg)
    for alpha in alphas:
        samples = sample_radii(env, calc, alpha, cfg.sample_size,
                               seed=cfg.sim.master_seed)
        name = samples_name(alpha)
        save_samples(samples, os.path.join(root, name))
        manifest.record(root, name, "surrogate",
                        scope_hash(cfg, "surrogate", alpha=alpha))
        save_manifest(manifest, root)
        print(json.dumps({
            "status": "ok", "command": "surrogate", "alpha": alpha,
            "samples": len(samples), "path": os.path.join(root, name),
        }))


def cmd_fit(cfg: RunConfig, alphas: list[float]) -> int:
    manifest = _manifest(cfg)
    root = _root(cfg)
    failures = 0
    for alpha in alphas:
        params = cfg.svr_for(alpha)
        if params is None:
            raise ConfigError(f"no svr hyper-parameters configured for alpha={alpha}")
        path = manifest.require(root, samples_name(alpha), "surrogate",
                                scope_hash(cfg, "surrogate", alpha=alpha))
        samples = load_samples(path)
        states = samples.states.astype(float)
        try:
            fit = fit_svr(states, samples.radii.astype(float), rho=params.rho,
                          tau=params.tau, bandwidth=params.bandwidth)
        except SvrConvergenceError as exc:
            # Keep going: one stubborn sensitivity level should not block
            # the rest of the sweep.
            failures += 1
            print(json.dumps({
                "status": "error", "command": "fit", "alpha": alpha,
                "type": "SvrConvergenceError", "message": str(exc),
            }), file=sys.stderr)
            continue
        model = fit.model
        outliers = count_outliers(model, states, samples.radii.astype(float))
        bounds = epsilon_bounds(len(samples), outliers, cfg.beta)
        save_svr_model(model, os.path.join(root, model_name(alpha)))
        bounds_payload = {
            "alpha": alpha,
            "sample_count": bounds.sample_count,
            "outliers": bounds.outliers,
            "beta": bounds.beta,
            "eps_lo": bounds.eps_lo,
            "eps_hi": bounds.eps_hi,
            "kappa": model.tube,
            "iterations": fit.iterations,
        }
        with open(os.path.join(root, bounds_name(alpha)), "w") as fh:
            json.dump(bounds_payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        fit_scope = scope_hash(cfg, "fit", alpha=alpha)
        manifest.record(root, model_name(alpha), "fit", fit_scope)
        manifest.record(root, bounds_name(alpha), "fit", fit_scope)
        save_manifest(manifest, root)
        print(json.dumps({
            "status": "ok", "command": "fit", "alpha": alpha,
            "kappa": model.tube, "support": len(model.coefficients),
            "outliers": outliers, "outlier_share": outliers / len(samples),
            "eps_hi": bounds.eps_hi, "iterations": fit.iterations,
        }))
    return 1 if failures else 0


def cmd_bounds(cfg: RunConfig, alphas: list[float]) -> None:
    """Recompute certified bounds from the stored fit and cross-check them."""
    manifest = _manifest(cfg)
    root = _root(cfg)
    q = _load_fresh_qtable(cfg, manifest)
    iota = suboptimality_gap(q)
    for alpha in alphas:
        fit_scope = scope_hash(cfg, "fit", alpha=alpha)
        model = load_svr_model(manifest.require(root, model_name(alpha), "fit", fit_scope))
        samples = load_samples(manifest.require(
            root, samples_name(alpha), "surrogate",
            scope_hash(cfg, "surrogate", alpha=alpha)))
        states = samples.states.astype(float)
        outliers = count_outliers(model, states, samples.radii.astype(float))
        bounds = epsilon_bounds(len(samples), outliers, cfg.beta)
        with open(manifest.require(root, bounds_name(alpha), "fit", fit_scope)) as fh:
            stored = json.load(fh)
        drift = abs(stored["eps_hi"] - bounds.eps_hi)
        if drift > 1e-9:
            raise CliError(
                f"alpha={alpha}: recomputed eps_hi {bounds.eps_hi} differs from "
                f"stored {stored['eps_hi']} by {drift}"
            )
        print(json.dumps({
            "status": "ok", "command": "bounds", "alpha": alpha,
            "outliers": outliers, "sample_count": len(samples),
            "eps_lo": bounds.eps_lo, "eps_hi": bounds.eps_hi,
            "delta_tail": learned_trigger_delta(alpha, bounds.eps_hi, iota, cfg.gamma),
            "delta_total": learned_trigger_delta(alpha, bounds.eps_hi, iota,
                                                 cfg.gamma, horizon=geometric_total),
            "iota": iota,
        }))


def _make_trigger(cfg: RunConfig, manifest: RunManifest, env: PursuitEnv, q,
                  alpha: float, kind: str):
    if kind == "full-comm":
        return FullCommTrigger()
    if kind == "never":
        return NeverTrigger()
    if kind == "exact":
        return ExactTrigger(RadiusCalculator(env, q), alpha)
    if kind == "svr":
        path = manifest.require(_root(cfg), model_name(alpha), "fit",
                                scope_hash(cfg, "fit", alpha=alpha))
        return LearnedTrigger(load_svr_model(path), env)
    raise CliError(f"unknown trigger kind {kind!r}; choose from {TRIGGER_KINDS}")


def cmd_simulate(cfg: RunConfig, alpha: float, trigger_kind: str) -> None:
    manifest = _manifest(cfg)
    q = _load_fresh_qtable(cfg, manifest)
    env = PursuitEnv(replace(cfg.env, step_cap=cfg.sim_step_cap()))
    trigger = _make_trigger(cfg, manifest, env, q, alpha, trigger_kind)
    policy = greedy_policy(q)
    batch = run_batch(env, policy, trigger, cfg.sim.n_games,
                      cfg.sim.master_seed, cfg.gamma, alpha=alpha)
    root = _root(cfg)
    epi_name = episodes_name(alpha, trigger_kind)
    save_episodes(batch.records, os.path.join(root, epi_name))

    eps_hi = delta = ""
    if trigger_kind == "svr":
        with open(manifest.require(root, bounds_name(alpha), "fit",
                                   scope_hash(cfg, "fit", alpha=alpha))) as fh:
            stored = json.load(fh)
        eps_hi = repr(stored["eps_hi"])
        delta = repr(learned_trigger_delta(alpha, stored["eps_hi"],
                                           suboptimality_gap(q), cfg.gamma))
    s = batch.summary
    sum_name = summary_name(alpha, trigger_kind)
    with open(os.path.join(root, sum_name), "w", newline="") as fh:
        fh.write(",".join(SUMMARY_CSV_HEADER) + "\n")
        fh.write(",".join([
            repr(alpha), repr(s.mean_return), repr(s.std_return),
            repr(s.mean_length), repr(s.std_length), repr(s.mean_msgs),
            repr(s.std_msgs), repr(s.msg_rate), eps_hi, delta,
        ]) + "\n")
    sim_scope = scope_hash(cfg, "simulate", alpha=alpha, trigger=trigger_kind)
    manifest.record(root, epi_name, "simulate", sim_scope)
    manifest.record(root, sum_name, "simulate", sim_scope)
    save_manifest(manifest, root)
    print(json.dumps({
        "status": "ok", "command": "simulate", "alpha": alpha,
        "trigger": trigger_kind, "games": s.n_games,
        "mean_return": s.mean_return, "mean_length": s.mean_length,
        "mean_msgs": s.mean_msgs, "msg_rate": s.msg_rate,
    }))


def _read_summary(path: str) -> dict:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        row = fh.readline().strip().split(",")
    if tuple(header) != SUMMARY_CSV_HEADER:
        raise CliError(f"{path}: unexpected summary header")
    out = dict(zip(header, row))
    return out


def _reference_row(alpha: float) -> dict | None:
    for row in REFERENCE_RESULTS:
        if math.isclose(row["alpha"], alpha, abs_tol=1e-9):
            return row
    return None


def cmd_report(cfg: RunConfig) -> None:
    manifest = _manifest(cfg)
    root = _root(cfg)
    q = _load_fresh_qtable(cfg, manifest)
    iota = suboptimality_gap(q)

    rows = []
    gaps = []
    long_rows = []
    expected = []
    for alpha in cfg.alphas:
        kinds = ["full-comm", "exact"] + (["svr"] if cfg.svr_for(alpha) else [])
        expected.extend((alpha, k) for k in kinds)
    for alpha, kind in expected:
        name = summary_name(alpha, kind)
        scope = scope_hash(cfg, "simulate", alpha=alpha, trigger=kind)
        try:
            path = manifest.require(root, name, "simulate", scope)
        except ManifestError:
            gaps.append((alpha, kind))
            continue
        row = _read_summary(path)
        row["trigger_kind"] = kind
        bounds = None
        bpath = os.path.join(root, bounds_name(alpha))
        if cfg.svr_for(alpha) is not None and os.path.exists(bpath):
            with open(bpath) as fh:
                bounds = json.load(fh)
        if bounds is not None:
            row["eps_hi"] = repr(bounds["eps_hi"])
            row["delta_tail"] = repr(learned_trigger_delta(
                alpha, bounds["eps_hi"], iota, cfg.gamma))
            row["delta_total"] = repr(learned_trigger_delta(
                alpha, bounds["eps_hi"], iota, cfg.gamma, horizon=geometric_total))
        else:
            row["delta_tail"] = row["delta_total"] = ""
        rows.append(row)
        for epi in load_episodes(os.path.join(root, episodes_name(alpha, kind))):
            long_rows.append((epi["game_id"], alpha, kind, epi["return"],
                              epi["length"], epi["messages"]))
    if not rows:
        raise CliError("no simulation summaries found; run simulate first")

    md = [
        "# Triggered-communication results",
        "",
        f"Arena {cfg.env.width}x{cfg.env.width}, gamma {cfg.gamma}, "
        f"action-value gap iota {iota:.4f}, {cfg.sim.n_games} games per row.",
        "",
        "Loss bounds are reported twice: `delta_tail` uses the horizon "
        "constant gamma/(1-gamma); `delta_total` uses 1/(1-gamma).  The "
        "published reference numbers (ten-by-ten arena) appear on the right "
        "where a matching sensitivity level exists.",
        "",
        "| alpha | trigger | return | +/- | length | msgs/game | msgs/step | "
        "eps_hi | delta_tail | delta_total | ref msgs/step | ref delta |",
        "|---|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        ref = _reference_row(float(row["alpha"]))
        ref_rate = "" if ref is None else f"{ref['msg_rate']:.2f}"
        ref_delta = "" if ref is None or ref["delta"] is None else f"{ref['delta']:.2f}"
        md.append(
            f"| {float(row['alpha']):g} | {row['trigger_kind']} "
            f"| {float(row['mean_return']):.3f} | {float(row['std_return']):.3f} "
            f"| {float(row['mean_length']):.2f} | {float(row['mean_msgs']):.2f} "
            f"| {float(row['msg_rate']):.3f} "
            f"| {_brief(row['eps_hi'])} | {_brief(row['delta_tail'])} "
            f"| {_brief(row['delta_total'])} | {ref_rate} | {ref_delta} |"
        )
    if gaps:
        md.extend(["", "## Gaps", ""])
        md.extend(f"- alpha={a:g} trigger={k}: no summary artifact" for a, k in gaps)
    md.append("")
    with open(os.path.join(root, "report.md"), "w") as fh:
        fh.write("\n".join(md))

    with open(os.path.join(root, "report_summary.csv"), "w", newline="") as fh:
        fh.write("alpha,trigger_kind,mean_return,std_return,mean_length,std_length,"
                 "mean_msgs,std_msgs,msg_rate,eps_hi,delta_tail,delta_total,"
                 "ref_msg_rate,ref_delta\n")
        for row in rows:
            ref = _reference_row(float(row["alpha"]))
            ref_rate = "" if ref is None else repr(ref["msg_rate"])
            ref_delta = "" if ref is None or ref["delta"] is None else repr(ref["delta"])
            fh.write(",".join([
                row["alpha"], row["trigger_kind"], row["mean_return"],
                row["std_return"], row["mean_length"], row["std_length"],
                row["mean_msgs"], row["std_msgs"], row["msg_rate"],
                row["eps_hi"], row["delta_tail"], row["delta_total"],
                ref_rate, ref_delta,
            ]) + "\n")

    with open(os.path.join(root, "report_long.csv"), "w", newline="") as fh:
        fh.write("game_id,alpha,trigger_kind,return,length,messages\n")
        for game_id, alpha, kind, ret, length, msgs in long_rows:
            fh.write(f"{game_id},{alpha:g},{kind},{ret!r},{length},{msgs}\n")

    print(json.dumps({
        "status": "ok", "command": "report", "rows": len(rows),
        "gaps": len(gaps), "path": os.path.join(root, "report.md"),
    }))


def _brief(text: str) -> str:
    if not text:
        return ""
    return f"{float(text):.3f}"


# -- argument plumbing -------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etmq",
        description="Train, certify, and simulate communication-triggered "
                    "pursuit policies.",
    )
    parser.add_argument("--version", action="version", version=f"etmq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, alpha=False, alpha_required=False):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--arena", type=int, default=None,
                       help="override the arena width")
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed used by this stage")
        if alpha:
            p.add_argument("--alpha", type=float, default=None,
                           required=alpha_required,
                           help="sensitivity level (default: every configured one)")

    common(sub.add_parser("train", help="fit the joint action-value table"))
    common(sub.add_parser("surrogate", help="label sampled states with radii"),
           alpha=True)
    common(sub.add_parser("fit", help="fit radius models and certify them"),
           alpha=True)
    common(sub.add_parser("bounds", help="recompute certified bounds"), alpha=True)
    sim = sub.add_parser("simulate", help="run triggered games")
    common(sim, alpha=True, alpha_required=True)
    sim.add_argument("--trigger", required=True, choices=TRIGGER_KINDS)
    sim.add_argument("--games", type=int, default=None,
                     help="override the number of games")
    common(sub.add_parser("report", help="aggregate results into md + csv"))
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "arena", None) is not None:
        cfg = replace(cfg, env=replace(cfg.env, width=args.arena))
    if getattr(args, "seed", None) is not None:
        if args.command == "train":
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        else:
            cfg = replace(cfg, sim=replace(cfg.sim, master_seed=args.seed))
    if getattr(args, "games", None) is not None:
        cfg = replace(cfg, sim=replace(cfg.sim, n_games=args.games))
    return cfg


def _alpha_list(cfg: RunConfig, args, svr_only: bool) -> list[float]:
    if getattr(args, "alpha", None) is not None:
        return [args.alpha]
    if svr_only:
        return [p.alpha for p in cfg.svr]
    return list(cfg.alphas)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "surrogate":
            cmd_surrogate(cfg, _alpha_list(cfg, args, svr_only=False))
        elif args.command == "fit":
            return cmd_fit(cfg, _alpha_list(cfg, args, svr_only=True))
        elif args.command == "bounds":
            cmd_bounds(cfg, _alpha_list(cfg, args, svr_only=True))
        elif args.command == "simulate":
            cmd_simulate(cfg, args.alpha, args.trigger)
        elif args.command == "report":
            cmd_report(cfg)
    except (ValueError, OSError) as exc:
        print(json.dumps({
            "status": "error",
            "command": args.command,
            "type": type(exc).__name__,
            "message": str(exc),
        }), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
