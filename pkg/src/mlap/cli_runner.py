"""Command line entry point and batch experiment runner."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .experiment import (CACHE_ENV_VAR, MLAP_METHODS, ConfigError, ExperimentConfig, _task_seed,
                         base_dataset, config_to_dict, half_width, layer_profile, load_config,
                         make_environment_tasks, run_cell)
from .objectives import Kind, ObjectiveSpec, TaskStats, env_complexity, objective_parts
from .report import RESULTS_SCHEMA, RESULTS_VERSION, emit_report
from .trainer import evaluate_bound, meta_test, meta_train

log = logging.getLogger("mlap")

CSV_COLUMNS = ["family", "method", "seed", "n_train_tasks", "status", "test_error_mean", "half_width_95",
               "bound", "kl_hyper", "kl_task_mean", "emp_err_mean", "env_term", "layer_mean_log_var"]


class RunFailed(RuntimeError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(records) -> str:
    """Deterministic table of all cells; wall-clock times are kept out of it."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        kl = r.get("kl") or {}
        prof = ";".join(repr(p["mean_log_var"]) for p in r.get("layer_profile") or [])
        w.writerow([_fmt(x) for x in (r["family"], r["method"], r["seed"], r["n_train_tasks"], r["status"],
                                      r.get("test_error_mean"), r.get("half_width_95"), r.get("bound"),
                                      kl.get("kl_hyper"), kl.get("kl_task_mean"), kl.get("emp_err_mean"),
                                      kl.get("env_term"))] + [prof])
    return buf.getvalue()


def _cell_job(args):
    cfg, method, seed, n, cache_dir = args
    try:
        base = base_dataset(cfg.environment, cache_dir)
        return run_cell(cfg, method, seed, n, base)
    except Exception as exc:  # recorded per cell
        return {"method": method, "seed": seed, "n_train_tasks": n, "family": cfg.environment.family,
                "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def experiment_cells(cfg: ExperimentConfig):
    cells = []
    for method in cfg.methods:
        counts = cfg.environment.n_train_tasks
        if method == "scratch-s" or method == "scratch-d":
            # these never look at training tasks
            counts = [max(counts)]
        for seed in cfg.seeds:
            for n in counts:
                cells.append((method, seed, n))
    return cells


def run_experiment(cfg: ExperimentConfig | str | Path, out_dir=None, workers: int = 1, fail_fast: bool = False,
                   cache_dir=None) -> dict:
    """Run every (method, seed, task-count) cell and write results, CSV and checkpoints.

    Raises :class:`RunFailed` after writing results if any cell failed.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, m, s, n, cache_dir) for m, s, n in experiment_cells(cfg)]
    records = []
    if workers > 1 and not fail_fast:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_cell_job, jobs))
    else:
        for job in jobs:
            r = _cell_job(job)
            records.append(r)
            log.info("%s seed=%s n=%s: %s", r["method"], r["seed"], r["n_train_tasks"],
                     r.get("test_error_mean", r.get("error")))
            if fail_fast and r["status"] != "ok":
                break
    for r in records:
        r.setdefault("status", "ok")
        prior, arch = r.pop("_prior", None), r.pop("_arch", None)
        if prior is not None:
            name = f"{r['family']}_{r['method']}_seed{r['seed']}_n{r['n_train_tasks']}_prior.json"
            checkpoint.save_checkpoint(out / "checkpoints" / name, prior, arch, "prior",
                                       {k: r[k] for k in ("family", "method", "seed", "n_train_tasks")})
            r["checkpoint"] = f"checkpoints/{name}"
    data = {"schema": RESULTS_SCHEMA, "version": RESULTS_VERSION, "config": config_to_dict(cfg),
            "records": records}
    (out / "results.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    (out / "results.csv").write_text(results_csv(records))
    timing = io.StringIO()
    w = csv.writer(timing, lineterminator="\n")
    w.writerow(["method", "seed", "n_train_tasks", "wall_clock_s"])
    for r in records:
        w.writerow([r["method"], r["seed"], r["n_train_tasks"], _fmt(r.get("wall_clock_s"))])
    (out / "timing.csv").write_text(timing.getvalue())
    failed = [r for r in records if r["status"] != "ok"]
    if failed:
        raise RunFailed(f"{len(failed)} of {len(jobs)} cells failed; see {out / 'results.json'}")
    return data


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if getattr(args, "out", None):
        cfg = replace(cfg, output=args.out)
    return cfg


def _cmd_run(args):
    cfg = _apply_overrides(load_config(args.config), args)
    run_experiment(cfg, cfg.output, args.workers, args.fail_fast, args.cache_dir)
    emit_report(cfg.output, svg=args.svg)
    print(f"results written to {cfg.output}")


def _mlap_method(cfg):
    for m in cfg.methods:
        if m in MLAP_METHODS:
            return m
    raise ConfigError("methods: meta-train needs at least one mlap-* method")


def _cmd_meta_train(args):
    cfg = _apply_overrides(load_config(args.config), args)
    method = _mlap_method(cfg)
    env = cfg.environment
    n = max(env.n_train_tasks)
    seed = cfg.seeds[0]
    base = base_dataset(env, args.cache_dir)
    arch = env.arch(base.dim, base.class_count)
    tasks, _ = make_environment_tasks(env, base, seed, n)
    spec = replace(cfg.train.objective, kind=MLAP_METHODS[method], n_tasks=n)
    tcfg = replace(cfg.train, seed=seed, objective=spec)
    res = meta_train(tasks, arch, tcfg)
    out = Path(cfg.output)
    meta = {"family": env.family, "method": method, "seed": seed, "n_train_tasks": n}
    checkpoint.save_checkpoint(out / "prior.json", res.prior, arch, "prior", meta)
    for i, q in enumerate(res.posteriors):
        checkpoint.save_checkpoint(out / f"posterior{i}.json", q, arch, "posterior", {**meta, "task": i})
    b = evaluate_bound(res.prior, res.posteriors, tasks, arch, tcfg, kind=Kind.MCALLESTER)
    summary = {**meta, "final_objective": res.history[-1]["objective"] if res.history else None,
               "bound": b["bound"], "kl_hyper": b["kl_hyper"], "layer_profile": layer_profile(res.prior, arch)}
    (out / "meta_train.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


def _cmd_meta_test(args):
    cfg = _apply_overrides(load_config(args.config), args)
    prior, arch, _, meta = checkpoint.load_checkpoint(args.prior)
    env = cfg.environment
    seed = cfg.seeds[0]
    base = base_dataset(env, args.cache_dir)
    _, test_tasks = make_environment_tasks(env, base, seed, max(env.n_train_tasks))
    kind = MLAP_METHODS.get(meta.get("method"), Kind.SEEGER)
    epochs = cfg.meta_test_epochs if cfg.meta_test_epochs is not None else cfg.train.epochs
    tcfg = replace(cfg.train, epochs=epochs, objective=replace(cfg.train.objective, kind=kind))
    errors = [meta_test(prior, t, arch, replace(tcfg, seed=_task_seed(seed, 2, j))).test_error
              for j, t in enumerate(test_tasks)]
    out = {"prior": str(args.prior), "test_errors": errors, "test_error_mean": float(np.mean(errors)),
           "half_width_95": half_width(errors)}
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output) / "meta_test.json").write_text(json.dumps(out, indent=1) + "\n")
    print(json.dumps(out, indent=1))


def _cmd_toy(args):
    from .toy2d import ToyConfig, ellipse_rows, ellipse_svg, run_toy, toy_bound
    cfg = ToyConfig(seed=args.seed if args.seed is not None else 0)
    res = run_toy(cfg)
    out = Path(args.out or "toy_out")
    out.mkdir(parents=True, exist_ok=True)
    rows = ellipse_rows(res)
    with (out / "ellipses.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "mean_x", "mean_y", "std_x", "std_y"])
        w.writerows([[r[0], *map(repr, map(float, r[1:]))] for r in rows])
    (out / "toy.svg").write_text(ellipse_svg(res))
    spec = cfg.objective
    params = {"objective": {"kind": spec.kind.value, "delta": spec.delta, "kappa_p": spec.kappa_p,
                            "kappa_q": spec.kappa_q},
              "prior": {"mu": res.prior.mu.tolist(), "rho": res.prior.rho.tolist()},
              "posteriors": [{"mu": q.mu.tolist(), "rho": q.rho.tolist()} for q in res.posteriors],
              "final_objective": res.history[-1], "bound_clipped_loss": toy_bound(res, spec)}
    (out / "toy.json").write_text(json.dumps(params, indent=1) + "\n")
    for r in rows:
        print("%-11s mean=(%.3f, %.3f) std=(%.4f, %.4f)" % r)


def _cmd_gradcheck(args):
    from .gradcheck import run_gradcheck
    res = run_gradcheck(args.instances, seed=args.seed or 0)
    worst = max(r.max_rel_err for r in res)
    for r in res:
        print(f"{r.kind:16s} weights={r.n_weights} J={r.objective:.6g} max_rel_err={r.max_rel_err:.3e}")
    print(f"worst relative error {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol:
        raise RunFailed("gradient check failed")


def _cmd_bound_eval(args):
    spec = ObjectiveSpec(args.kind, delta=args.delta, n_tasks=args.n_tasks, kappa_q=args.kappa_q,
                         kappa_p=args.kappa_p)
    ms = args.m
    emps = args.emp_err if len(args.emp_err) == len(ms) else args.emp_err * len(ms)
    kls = args.kl_task if len(args.kl_task) == len(ms) else args.kl_task * len(ms)
    stats = [TaskStats(m, e, k, args.kl_hyper) for m, e, k in zip(ms, emps, kls)]
    val = objective_parts(stats, spec)
    out = {"kind": spec.kind.value, "objective": val.value, "task_terms": list(val.task_terms),
           "env_term": val.env_term}
    if spec.n_tasks >= 2 and spec.kind not in (Kind.VB, Kind.NONE):
        out["env_complexity"] = env_complexity(spec, args.kl_hyper)
    print(json.dumps(out, indent=1))


def _cmd_report(args):
    for p in emit_report(args.results, svg=args.svg):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlap", description="Meta-learning of weight priors by PAC-Bayes objectives.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--cache-dir", default=None, help=f"dataset cache (default: ${CACHE_ENV_VAR})")

    sp = sub.add_parser("run", help="full experiment over methods, seeds and task counts")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--fail-fast", action="store_true")
    sp.add_argument("--svg", action="store_true")
    sp.set_defaults(func=_cmd_run)

    sp = sub.add_parser("meta-train", help="learn a prior from training tasks")
    common(sp)
    sp.set_defaults(func=_cmd_meta_train)

    sp = sub.add_parser("meta-test", help="learn posteriors on new tasks from a saved prior")
    common(sp)
    sp.add_argument("--prior", required=True)
    sp.set_defaults(func=_cmd_meta_test)

    sp = sub.add_parser("toy", help="2-D mean-estimation example")
    common(sp, config=False)
    sp.set_defaults(func=_cmd_toy)

    sp = sub.add_parser("gradcheck", help="finite-difference check of objective gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(func=_cmd_gradcheck)

    sp = sub.add_parser("bound-eval", help="evaluate an objective from error and KL values")
    sp.add_argument("--kind", default="mcallester", choices=[k.value for k in Kind])
    sp.add_argument("--m", type=int, nargs="+", required=True, help="samples per task")
    sp.add_argument("--emp-err", type=float, nargs="+", default=[0.0])
    sp.add_argument("--kl-task", type=float, nargs="+", default=[0.0])
    sp.add_argument("--kl-hyper", type=float, default=0.0)
    sp.add_argument("--n-tasks", type=int, default=None)
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--kappa-q", type=float, default=1e-3)
    sp.add_argument("--kappa-p", type=float, default=2000.0)
    sp.set_defaults(func=_cmd_bound_eval)

    sp = sub.add_parser("report", help="tables and plot data from a results directory")
    sp.add_argument("results")
    sp.add_argument("--svg", action="store_true")
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "n_tasks", 0) is None:
        args.n_tasks = len(args.m)
    try:
        args.func(args)
    except (ConfigError, RunFailed, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
