"""Flat run configuration: defaults, ``key = value`` files, environment and CLI overrides.

Precedence, highest first: command line, ``FIBERINFER_<KEY>`` environment
variables, config file, dataclass defaults.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

ENV_PREFIX = "FIBERINFER_"


class ConfigError(ValueError):
    """Invalid key, unparsable value or out-of-range setting."""


@dataclass
class RunConfig:
    # data
    scheme: str = ""  # gradient table path; empty selects the built-in two-shell scheme
    seed: int = 0
    n_samples: int = 5000
    sigma_e: float = 0.0620
    n_fibers: int = 0  # 0 draws n uniformly from 1..3
    kappa: float = 0.0  # 0 means kappa -> infinity (stick-like fibers)
    # inverter training
    iterations: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    checkpoint_every: int = 1000
    # posterior networks
    mdn_records: int = 200000
    mdn_epochs: int = 30
    mdn_batch_size: int = 512
    mdn_lr: float = 1e-3
    mdn_weight_decay: float = 0.05
    # inference
    Q: int = 5000
    B: int = 1000
    alpha: float = 0.05
    n_bins: int = 100
    b0: str = ""  # optional (voxels x repeats) text file for the noise estimate
    # evaluation
    methods: str = "lfi,mle1,mle2,prior_mean"
    nlls_records: int = 500
    misspec_size: int = 0
    prior_draws: int = 10**7
    # plumbing
    out: str = "artifacts"
    models: str = "artifacts"
    dataset: str = ""
    inference: str = ""
    threads: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            ("seed", self.seed >= 0),
            ("n_samples", self.n_samples >= 0),
            ("sigma_e", 0.0 <= self.sigma_e < 1.0),
            ("n_fibers", 0 <= self.n_fibers <= 3),
            ("kappa", self.kappa >= 0.0),
            ("iterations", self.iterations >= 1),
            ("batch_size", self.batch_size >= 1),
            ("lr", 0.0 < self.lr < 1.0),
            ("checkpoint_every", self.checkpoint_every >= 1),
            ("mdn_records", self.mdn_records >= 10),
            ("mdn_epochs", self.mdn_epochs >= 1),
            ("mdn_weight_decay", self.mdn_weight_decay >= 0),
            ("mdn_batch_size", self.mdn_batch_size >= 1),
            ("mdn_lr", 0.0 < self.mdn_lr < 1.0),
            ("Q", self.Q >= 1),
            ("B", self.B >= 0),
            ("alpha", 0.0 < self.alpha < 1.0),
            ("n_bins", self.n_bins >= 2),
            ("nlls_records", self.nlls_records >= 0),
            ("misspec_size", self.misspec_size >= 0),
            ("prior_draws", self.prior_draws >= 1),
            ("threads", self.threads >= 1),
        ]
        bad = [k for k, ok in checks if not ok]
        if bad:
            raise ConfigError("out of range: " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        unknown = set(self.method_list) - {"lfi", "mle1", "mle2", "prior_mean"}
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        return self

    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    try:
        if typ == "int":
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        if typ == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = _coerce(k, v)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    lower = {k.lower(): k for k in _FIELDS}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX) :]
            key = key if key in _FIELDS else lower.get(key.lower(), key)
            out[key] = _coerce(key, v)
    return out


def resolve(cli: dict | None = None, path=None, environ=None) -> RunConfig:
    """Merge defaults, file, environment and CLI values, then validate."""
    merged = {}
    if path:
        merged.update(read_config_file(path))
    merged.update(env_overrides(environ))
    for k, v in (cli or {}).items():
        if v is not None:
            merged[k] = _coerce(k, v)
    return RunConfig(**merged).validate()
