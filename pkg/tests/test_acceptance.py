"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line straight to the
terminal (also under output capture).  Run just this file with

    pytest tests/test_acceptance.py -v

The transfer runs (criteria 4, 5, 6b, 7) take roughly 20 minutes on one core.
"""

import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mlap.checkpoint import load_checkpoint, save_checkpoint
from mlap.cli_runner import run_experiment
from mlap.experiment import base_dataset, load_config, run_cell
from mlap.gauss import DiagGaussian, HyperPosterior, hyper_kl, kl_diag_gaussian, kl_mc_oracle
from mlap.gradcheck import run_gradcheck
from mlap.objectives import Kind, ObjectiveSpec, TaskStats, complexity_mcallester, complexity_seeger
from mlap.report import pooled_se

sys.path.insert(0, str(Path(__file__).parent))
from test_objectives import SEEGER_CROSSOVER  # noqa: E402
from test_toy import oracle  # noqa: E402,F401

CONFIGS = Path(__file__).parents[1] / "configs"
COUNTS = [1, 2, 3, 5, 8]
SEEDS = [0, 1, 2, 3, 4]

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def strip(record):
    return {k: v for k, v in record.items() if not k.startswith("_")}


@pytest.fixture(scope="module")
def pixel_runs():
    """MLAP-S at every task count, MLAP-M/PL at five tasks and Scratch-S, on the desk pixels config."""
    cfg = load_config(CONFIGS / "desk_pixels.toml")
    base = base_dataset(cfg.environment)
    t0 = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        for n in COUNTS:
            runs["mlap-s", seed, n] = strip(run_cell(cfg, "mlap-s", seed, n, base))
        for m in ("mlap-m", "mlap-pl"):
            runs[m, seed, 5] = strip(run_cell(cfg, m, seed, 5, base))
        runs["scratch-s", seed, max(COUNTS)] = strip(run_cell(cfg, "scratch-s", seed, max(COUNTS), base))
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def label_runs():
    cfg = load_config(CONFIGS / "desk_labels.toml")
    base = base_dataset(cfg.environment)
    return {seed: strip(run_cell(cfg, "mlap-s", seed, 5, base)) for seed in SEEDS}


def test_criterion_1_toy(oracle, verdict):  # noqa: F811
    from mlap.toy2d import run_toy
    from test_toy import oracle_objective

    t0 = time.perf_counter()
    res = run_toy()
    seconds = time.perf_counter() - t0
    best, samples = oracle
    x = np.concatenate([res.prior.flat(), *[q.flat() for q in res.posteriors]])
    d0 = np.linalg.norm(res.posteriors[0].mu - [2, 1])
    d1 = np.linalg.norm(res.posteriors[1].mu - [4, 1])
    dp = np.linalg.norm(res.prior.mu - [3, 1])
    gap = oracle_objective(x, samples) - best.fun
    ok = (d0 < 0.15 and d1 < 0.15 and dp < 0.3 and res.prior.std[0] > res.prior.std[1]
          and np.linalg.norm(res.prior.mu - best.x[:2]) < 0.01 and gap < 1e-3 and seconds < 60)
    verdict(1, ok, f"posterior offsets {d0:.3f}, {d1:.3f}; prior offset {dp:.3f}; "
                   f"prior std {res.prior.std[0]:.3f} > {res.prior.std[1]:.4f}; "
                   f"objective {gap:.1e} above oracle; {seconds:.1f}s")
    assert ok


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    res = run_gradcheck(20, seed=0)
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in res)
    kinds = {r.kind for r in res}
    ok = worst < 1e-5 and len(res) >= 20 and res[0].n_weights <= 120 and len(kinds) == 5 and seconds < 120
    verdict(2, ok, f"max relative error {worst:.2e} over {len(res)} instances, "
                   f"{res[0].n_weights} weights, kinds {sorted(kinds)}; {seconds:.1f}s")
    assert ok


def test_criterion_3_kl(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        d = int(rng.integers(1, 17))
        q = DiagGaussian(rng.normal(0, 1, d), rng.uniform(-2, 1, d))
        p = DiagGaussian(rng.normal(0, 1, d), rng.uniform(-1, 1, d))
        est, se = kl_mc_oracle(q, p, 20_000, seed=i)
        worst = max(worst, abs(est - kl_diag_gaussian(q, p)) / se)
    worst_h = 0.0
    for i in range(100):
        n = int(rng.integers(1, 10))
        h = HyperPosterior(rng.normal(0, 1, n), float(rng.uniform(0.2, 1.5)), float(rng.uniform(0.5, 3)))
        q = DiagGaussian(h.theta, np.full(n, 2 * math.log(h.kappa_q)))
        p = DiagGaussian(np.zeros(n), np.full(n, 2 * math.log(h.kappa_p)))
        est, se = kl_mc_oracle(q, p, 20_000, seed=1000 + i)
        worst_h = max(worst_h, abs(est - hyper_kl(h)) / se)
    seconds = time.perf_counter() - t0
    ok = worst < 3 and worst_h < 3 and seconds < 60
    verdict(3, ok, f"largest deviation {worst:.2f} SE (diagonal KL), {worst_h:.2f} SE (hyper-KL) "
                   f"over 100 + 100 cases; {seconds:.1f}s")
    assert ok


def test_criterion_4_bound_validity(verdict):
    cfg = load_config(CONFIGS / "desk_pixels.toml")
    env = replace(cfg.environment, n_train_tasks=[5], meta_test_m_train=200, n_test_tasks=3)
    cfg = replace(cfg, environment=env, bound_eval=True)
    cfg.train = replace(cfg.train, objective=replace(cfg.train.objective, delta=0.1))
    base = base_dataset(env)
    t0 = time.perf_counter()
    held = 0
    bounds, errors = [], []
    for seed in range(20):
        r = run_cell(cfg, "mlap-m", seed, 5, base)
        bounds.append(r["bound"])
        errors.append(r["test_error_mean"])
        held += r["bound"] > r["test_error_mean"]
    seconds = time.perf_counter() - t0
    ok = held >= 19 and seconds < 1800
    verdict(4, ok, f"bound above held-out transfer error in {held}/20 seeds "
                   f"(bound {min(bounds):.3f}..{max(bounds):.3f}, error {min(errors):.3f}..{max(errors):.3f}); "
                   f"{seconds:.0f}s")
    assert ok


def test_criterion_5_transfer_trend(pixel_runs, verdict):
    runs, seconds = pixel_runs
    scratch = np.concatenate([runs["scratch-s", s, max(COUNTS)]["test_errors"] for s in SEEDS])
    curve, ses, gaps = [], [], {}
    for n in COUNTS:
        errs = np.concatenate([runs["mlap-s", s, n]["test_errors"] for s in SEEDS])
        curve.append(errs.mean())
        ses.append(pooled_se(errs))
        if n >= 3:
            gaps[n] = float(np.mean(errs - scratch))
    pooled = math.sqrt(float(np.mean(np.square(ses))))
    steps_ok = all(b <= a + pooled for a, b in zip(curve[:-1], curve[1:]))
    ok = steps_ok and all(g < 0 for g in gaps.values()) and len(scratch) >= 50 and seconds < 3600
    verdict(5, ok, "MLAP-S error by task count " + ", ".join(f"{n}:{e:.3f}" for n, e in zip(COUNTS, curve))
            + f" (pooled SE {pooled:.3f}); Scratch-S {scratch.mean():.3f}; paired gaps "
            + ", ".join(f"{n}:{g:+.3f}" for n, g in gaps.items()) + f"; {seconds:.0f}s for all desk runs")
    assert ok


def test_criterion_6_tightness(pixel_runs, verdict):
    sweep_ok = True
    for n in (1, 2, 5, 10, 50):
        s = ObjectiveSpec(Kind.SEEGER, n_tasks=n)
        for m in (100, 200, 500, 1000, 5000, 10_000):
            for r in np.linspace(0, SEEGER_CROSSOVER, 9):
                ts = TaskStats(m, 0.0, r * m, 0.0)
                sweep_ok &= complexity_seeger(ts, s) <= complexity_mcallester(ts, s)
    runs, _ = pixel_runs
    pl = np.mean([runs["mlap-pl", s, 5]["test_error_mean"] for s in SEEDS])
    mc = np.mean([runs["mlap-m", s, 5]["test_error_mean"] for s in SEEDS])
    ok = sweep_ok and pl >= mc
    verdict(6, ok, f"(a) Seeger <= McAllester on the sweep up to KL/m = {SEEGER_CROSSOVER}: {sweep_ok}; "
                   f"(b) MLAP-PL {pl:.3f} >= MLAP-M {mc:.3f}")
    assert ok


def test_criterion_7_layer_variance(pixel_runs, label_runs, verdict):
    runs, _ = pixel_runs
    lab = 0
    pix = 0
    for s in SEEDS:
        prof = [p["mean_log_var"] for p in label_runs[s]["layer_profile"]]
        lab += all(prof[-1] > v for v in prof[:-1])
        prof = [p["mean_log_var"] for p in runs["mlap-s", s, 5]["layer_profile"]]
        pix += prof[0] > prof[-1]
    ok = lab >= 4 and pix >= 4
    verdict(7, ok, f"labels: output above hidden in {lab}/5 seeds; pixels: input above output in {pix}/5 seeds")
    assert ok


def test_criterion_8_determinism(tmp_path, verdict):
    from test_cli import TINY

    t0 = time.perf_counter()
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    run_experiment(p, tmp_path / "a")
    run_experiment(p, tmp_path / "b")
    same_csv = (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    exact = True
    for ck in sorted((tmp_path / "a" / "checkpoints").iterdir()):
        dist, arch, role, meta = load_checkpoint(ck)
        again = save_checkpoint(tmp_path / "again.json", dist, arch, role, meta)
        back, *_ = load_checkpoint(again)
        exact &= again.read_bytes() == ck.read_bytes()
        exact &= np.array_equal(back.mu, dist.mu) and np.array_equal(back.rho, dist.rho)
    seconds = time.perf_counter() - t0
    ok = same_csv and exact and seconds < 300
    verdict(8, ok, f"byte-identical CSV on rerun: {same_csv}; checkpoint round-trip bit-exact: {exact}; "
                   f"{seconds:.1f}s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
