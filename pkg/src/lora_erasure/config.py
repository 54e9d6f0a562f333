"""Flat TOML run configuration, sweeps and config snapshots."""

from __future__ import annotations

import itertools
import json
import sys
from dataclasses import asdict, dataclass, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diffusion import BaseTrainingConfig
from .errors import ConfigValidationError
from .training import TrainingConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # toy world
    n_concepts: int = 8
    radius: float = 4.0
    sigma: float = 0.3
    n_clusters: int = 2
    # base denoiser
    base_steps: int = 3000
    base_learning_rate: float = 2e-3
    cluster_embedding_mix: float = 0.0
    # adapters
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda_pbo: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    samples_per_concept: int = 1024
    learning_rate: float = 1e-3
    pair_sample_count: int = 50
    rank: int = 8
    alpha: float = 8.0
    adapted_set: tuple = ("v", "o")
    context_fraction: float = 0.0
    # sampling and evaluation
    guidance: float = 3.0
    sampling_steps: int = 50
    samples: int = 200
    points_per_concept: int = 4
    strategy: str = "composite"
    scope_sizes: tuple = (5, 8)
    subset_sizes: tuple = (2, 3, 4, 5)

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda_pbo=self.lambda_pbo,
            epochs=self.epochs,
            batch_size=self.batch_size,
            samples_per_concept=self.samples_per_concept,
            learning_rate=self.learning_rate,
            pair_sample_count=self.pair_sample_count,
            seed=self.seed,
            adapted_set=tuple(self.adapted_set),
            rank=self.rank,
            alpha=self.alpha,
            context_fraction=self.context_fraction,
        )

    def base_training(self) -> BaseTrainingConfig:
        return BaseTrainingConfig(
            steps=self.base_steps,
            learning_rate=self.base_learning_rate,
            cluster_embedding_mix=self.cluster_embedding_mix,
            seed=self.seed,
        )

    def base_key(self) -> dict:
        """Fields that determine the base denoiser."""
        keys = (
            "seed", "n_concepts", "radius", "sigma", "n_clusters", "base_steps", "base_learning_rate",
            "cluster_embedding_mix",
        )
        return {k: getattr(self, k) for k in keys}


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()
SWEEPABLE = ("lambda1", "lambda2")


def _coerce(key: str, value):
    """Check ``value`` against the default's type; ints widen to floats."""
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        kind = type(default[0])
        ok = isinstance(value, list) and all(isinstance(v, kind) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    return ok, value


def _check(cfg: RunConfig) -> list[str]:
    bad = []
    positive = (
        "n_concepts", "base_steps", "epochs", "batch_size", "samples_per_concept", "rank",
        "sampling_steps", "samples", "points_per_concept", "pair_sample_count",
    )
    bad += [k for k in positive if getattr(cfg, k) < 1]
    bad += [k for k in ("radius", "sigma", "learning_rate", "base_learning_rate", "alpha") if not getattr(cfg, k) > 0]
    bad += [k for k in ("lambda1", "lambda2", "lambda_pbo", "guidance") if getattr(cfg, k) < 0]
    if not 0.0 <= cfg.context_fraction <= 1.0:
        bad.append("context_fraction")
    if not 0.0 <= cfg.cluster_embedding_mix < 1.0:
        bad.append("cluster_embedding_mix")
    if cfg.strategy not in ("composite", "merge", "switch"):
        bad.append("strategy")
    if not set(cfg.adapted_set) <= set("qkvo") or not cfg.adapted_set:
        bad.append("adapted_set")
    if any(not 1 <= s <= cfg.n_concepts for s in cfg.scope_sizes):
        bad.append("scope_sizes")
    if any(not 2 <= s <= 5 for s in cfg.subset_sizes):
        bad.append("subset_sizes")
    if not 1 <= cfg.n_clusters <= cfg.n_concepts:
        bad.append("n_clusters")
    return bad


def parse_config(text: str) -> tuple[RunConfig, dict]:
    """Read flat key/value TOML with an optional ``[sweep]`` table of lists.

    Returns the config and the sweep (key -> list of values). Every offending
    key is reported at once.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigValidationError([], f"malformed config: {exc}") from exc
    sweep_raw = raw.pop("sweep", {})
    bad, values = [], {}
    for key, value in raw.items():
        if key not in _FIELDS or isinstance(value, dict):
            bad.append(key)
            continue
        ok, value = _coerce(key, value)
        if ok:
            values[key] = value
        else:
            bad.append(key)
    sweep = {}
    if not isinstance(sweep_raw, dict):
        bad.append("sweep")
        sweep_raw = {}
    for key, options in sweep_raw.items():
        coerced = [_coerce(key, v) for v in options] if key in SWEEPABLE and isinstance(options, list) else []
        if not coerced or not all(ok for ok, _ in coerced):
            bad.append(f"sweep.{key}")
        else:
            sweep[key] = [v for _, v in coerced]
    cfg = RunConfig(**values)
    bad += _check(cfg) + [f"sweep.{k}" for k, vs in sweep.items() if any(v < 0 for v in vs)]
    if bad:
        raise ConfigValidationError(set(bad), "invalid configuration keys")
    return cfg, sweep


def expand_sweep(cfg: RunConfig, sweep: dict) -> list[tuple[str, RunConfig]]:
    """``(subdirectory name, config)`` per combination; one unnamed run without a sweep."""
    if not sweep:
        return [("", cfg)]
    keys = [k for k in SWEEPABLE if k in sweep]
    runs = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        changes = dict(zip(keys, combo))
        name = "_".join(f"{k}_{v:g}" for k, v in changes.items())
        runs.append((name, replace(cfg, **changes)))
    return runs


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def config_to_toml(cfg: RunConfig) -> str:
    """Snapshot that :func:`parse_config` reads back to an equal config."""
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in asdict(cfg).items())
