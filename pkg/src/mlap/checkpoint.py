"""Versioned JSON checkpoints of Gaussian weight distributions.

Floats are written with ``repr`` precision, which round-trips IEEE doubles
exactly, so ``save(load(path))`` reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gauss import DiagGaussian
from .stochnet import NetworkArch

FORMAT = "mlap-checkpoint"
VERSION = "1.0"


class SchemaVersionError(ValueError):
    pass


def check_version(version: str, supported: str = VERSION, what: str = "file"):
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise SchemaVersionError(f"{what}: malformed schema version {version!r}") from None
    if major != int(supported.split(".")[0]):
        raise SchemaVersionError(f"{what}: unsupported schema version {version} (reader supports {supported})")


def checkpoint_dict(dist: DiagGaussian, arch: NetworkArch, role: str = "prior", meta: dict | None = None) -> dict:
    if dist.dim != arch.n_params:
        raise ValueError(f"distribution has {dist.dim} weights, architecture needs {arch.n_params}")
    return {
        "format": FORMAT,
        "version": VERSION,
        "role": role,
        "arch": arch.to_dict(),
        "meta": meta or {},
        "mu": [float(v) for v in dist.mu],
        "rho": [float(v) for v in dist.rho],
    }


def dumps(d: dict) -> str:
    return json.dumps(d, indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_checkpoint(path, dist: DiagGaussian, arch: NetworkArch, role: str = "prior", meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(checkpoint_dict(dist, arch, role, meta)))
    return path


def load_checkpoint(path):
    """Returns ``(dist, arch, role, meta)``."""
    d = json.loads(Path(path).read_text())
    if d.get("format") != FORMAT:
        raise SchemaVersionError(f"{path}: not a checkpoint file")
    check_version(d.get("version", ""), what=str(path))
    arch = NetworkArch(tuple(d["arch"]["layer_sizes"]), d["arch"].get("activation", "elu"))
    dist = DiagGaussian(np.array(d["mu"], dtype=float), np.array(d["rho"], dtype=float))
    if dist.dim != arch.n_params:
        raise ValueError(f"{path}: {dist.dim} weights stored for an architecture with {arch.n_params}")
    return dist, arch, d["role"], d["meta"]
