"""Experiment configuration and execution of (method, seed, task-count) cells."""

from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineKind, run_baseline
from .envgen import BaseDataset, gen_blobs, load_idx, make_permuted_labels_task, make_permuted_pixels_task
from .objectives import Kind, ObjectiveSpec
from .stochnet import NetworkArch
from .trainer import TrainConfig, evaluate_bound, meta_test, meta_train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MLAP_METHODS = {
    "mlap-m": Kind.MCALLESTER,
    "mlap-s": Kind.SEEGER,
    "mlap-pl": Kind.PENTINA_LAMPERT,
    "mlap-vb": Kind.VB,
}
BASELINE_METHODS = {
    "scratch-d": BaselineKind.SCRATCH_D,
    "scratch-s": BaselineKind.SCRATCH_S,
    "warm-start": BaselineKind.WARM_START,
    "oracle": BaselineKind.ORACLE,
    "averaged": BaselineKind.AVERAGED,
}
METHODS = {**MLAP_METHODS, **BASELINE_METHODS}


class ConfigError(ValueError):
    pass


@dataclass
class EnvironmentConfig:
    family: str = "permuted_pixels"
    class_count: int = 4
    dim: int = 64
    per_class: int = 500
    spread: float = 0.8
    base_seed: int = 1
    n_swaps: int = 8
    m_train: int = 200
    m_test: int = 1000
    meta_test_m_train: int = 50
    n_train_tasks: list = field(default_factory=lambda: [5])
    n_test_tasks: int = 10
    hidden: list = field(default_factory=lambda: [32, 32, 32])
    idx_images: str | None = None
    idx_labels: str | None = None
    share_permutations: bool = False

    def arch(self, input_dim: int | None = None, class_count: int | None = None) -> NetworkArch:
        return NetworkArch((input_dim or self.dim, *self.hidden, class_count or self.class_count))


@dataclass
class ExperimentConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta_test_epochs: int | None = None
    methods: list = field(default_factory=lambda: ["mlap-s", "scratch-s"])
    seeds: list = field(default_factory=lambda: [0])
    output: str = "results"
    bound_eval: bool = True

    def validate(self):
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"methods: unknown method(s) {unknown}; choose from {sorted(METHODS)}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        env = self.environment
        if env.family not in ("permuted_labels", "permuted_pixels"):
            raise ConfigError(f"environment.family: unknown family {env.family!r}")
        if not env.n_train_tasks or min(env.n_train_tasks) < 1:
            raise ConfigError("environment.n_train_tasks: need positive task counts")
        if env.n_test_tasks < 1:
            raise ConfigError("environment.n_test_tasks: need at least one meta-test task")
        if (env.idx_images is None) != (env.idx_labels is None):
            raise ConfigError("environment.idx_images/idx_labels: give both or neither")
        cache = os.environ.get(CACHE_ENV_VAR)
        for name in ("idx_images", "idx_labels"):
            p = getattr(env, name)
            if p is not None and not _resolve(p, cache).exists():
                raise ConfigError(f"environment.{name}: file not found: {p}")
        return self


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    try:
        env = _build(EnvironmentConfig, dict(data.pop("environment", {})), "environment")
        if isinstance(env.n_train_tasks, int):
            env.n_train_tasks = [env.n_train_tasks]
        obj = _build(ObjectiveSpec, dict(data.pop("objective", {})), "objective")
        tdata = dict(data.pop("train", {}))
        if "adam_betas" in tdata:
            tdata["adam_betas"] = tuple(tdata["adam_betas"])
        train = _build(TrainConfig, {**tdata, "objective": obj}, "train")
        cfg = _build(ExperimentConfig, {**data, "environment": env, "train": train}, "top level")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    train = d.pop("train")
    obj = train.pop("objective")
    obj["kind"] = Kind(obj["kind"]).value
    train["adam_betas"] = list(train["adam_betas"])
    d["train"] = {k: v for k, v in train.items() if v is not None}
    d["objective"] = obj
    d["environment"] = {k: v for k, v in d["environment"].items() if v is not None}
    return {k: v for k, v in d.items() if v is not None}


CACHE_ENV_VAR = "MLAP_CACHE_DIR"


def _resolve(path, cache_dir):
    p = Path(path)
    if not p.exists() and cache_dir is not None and (Path(cache_dir) / p).exists():
        return Path(cache_dir) / p
    return p


def base_dataset(env: EnvironmentConfig, cache_dir=None) -> BaseDataset:
    """IDX data if configured, otherwise synthetic blobs.

    With a cache directory (argument or ``MLAP_CACHE_DIR``) generated blobs are
    stored as ``.npz`` and relative IDX paths are also looked up there.
    """
    cache_dir = cache_dir or os.environ.get(CACHE_ENV_VAR) or None
    if env.idx_images is not None:
        return load_idx(_resolve(env.idx_images, cache_dir), _resolve(env.idx_labels, cache_dir))
    key = (env.class_count, env.dim, env.per_class, repr(float(env.spread)), env.base_seed)
    if cache_dir is None:
        return gen_blobs(*key[:3], env.spread, env.base_seed)
    path = Path(cache_dir) / ("blobs_%d_%d_%d_%s_%d.npz" % key)
    if path.exists():
        with np.load(path) as z:
            return BaseDataset(z["inputs"], z["labels"], int(z["class_count"]), str(z["provenance"]))
    base = gen_blobs(*key[:3], env.spread, env.base_seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, inputs=base.inputs, labels=base.labels, class_count=base.class_count,
             provenance=base.provenance)
    return base


def _task_seed(*key) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def _transform_key(task):
    return (task.transform, np.asarray(task.params).tobytes())


def make_environment_tasks(env: EnvironmentConfig, base: BaseDataset, seed: int, n_train: int):
    """Training tasks (nested across task counts) and meta-test tasks for one seed.

    Unless ``share_permutations`` is set, meta-test tasks whose transform
    coincides with a training task's are skipped and redrawn.
    """
    def make(s, m):
        if env.family == "permuted_labels":
            return make_permuted_labels_task(base, s, m, env.m_test)
        return make_permuted_pixels_task(base, s, env.n_swaps, m, env.m_test)

    n_max = max(max(env.n_train_tasks), n_train)
    train_all = [make(_task_seed(env.base_seed, seed, 0, i), env.m_train) for i in range(n_max)]
    used = {_transform_key(t) for t in train_all}
    test = []
    j = 0
    while len(test) < env.n_test_tasks:
        t = make(_task_seed(env.base_seed, seed, 1, j), env.meta_test_m_train)
        j += 1
        if env.share_permutations or _transform_key(t) not in used:
            test.append(t)
        if j > 1000 * env.n_test_tasks:
            raise ConfigError("could not draw enough distinct meta-test tasks")
    return train_all[:n_train], test


def layer_profile(prior, arch: NetworkArch) -> list:
    """Mean and standard deviation of the log-variance in each layer."""
    idx = arch.layer_index()
    return [{"layer": k, "mean_log_var": float(prior.rho[idx == k].mean()),
             "std_log_var": float(prior.rho[idx == k].std())} for k in range(arch.n_layers)]


def half_width(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size < 2:
        return 0.0
    return float(1.96 * errors.std(ddof=1) / math.sqrt(errors.size))


def run_cell(cfg: ExperimentConfig, method: str, seed: int, n_train: int, base=None) -> dict:
    """Meta-train (if the method needs it) and meta-test one configuration."""
    env = cfg.environment
    base = base if base is not None else base_dataset(env)
    arch = env.arch(base.dim, base.class_count)
    train_tasks, test_tasks = make_environment_tasks(env, base, seed, n_train)
    tcfg = replace(cfg.train, seed=seed)
    test_cfg = replace(tcfg, epochs=cfg.meta_test_epochs if cfg.meta_test_epochs is not None else tcfg.epochs)
    t0 = time.perf_counter()
    record = {"method": method, "seed": seed, "n_train_tasks": n_train, "family": env.family}
    errors = []
    if method in MLAP_METHODS:
        kind = MLAP_METHODS[method]
        tcfg = replace(tcfg, objective=replace(tcfg.objective, kind=kind, n_tasks=n_train))
        test_cfg = replace(test_cfg, objective=tcfg.objective)
        res = meta_train(train_tasks, arch, tcfg)
        for j, t in enumerate(test_tasks):
            errors.append(meta_test(res.prior, t, arch, replace(test_cfg, seed=_task_seed(seed, 2, j))).test_error)
        record["layer_profile"] = layer_profile(res.prior, arch)
        if cfg.bound_eval:
            b = evaluate_bound(res.prior, res.posteriors, train_tasks, arch, tcfg, kind=Kind.MCALLESTER)
            record["bound"] = b["bound"]
            record["kl"] = {"kl_hyper": b["kl_hyper"], "kl_task_mean": float(np.mean(b["kl_task"])),
                            "emp_err_mean": float(np.mean(b["emp_err"])), "env_term": b["env_term"]}
        record["final_objective"] = res.history[-1]["objective"] if res.history else None
        record["_prior"], record["_arch"] = res.prior, arch
    else:
        kind = BASELINE_METHODS[method]
        for j, t in enumerate(test_tasks):
            r = run_baseline(kind, train_tasks, t, arch, replace(test_cfg, seed=_task_seed(seed, 2, j)),
                             family=env.family)
            errors.append(r.test_error)
    record["status"] = "ok"
    record["test_errors"] = errors
    record["test_error_mean"] = float(np.mean(errors))
    record["half_width_95"] = half_width(errors)
    record["wall_clock_s"] = time.perf_counter() - t0
    return record
