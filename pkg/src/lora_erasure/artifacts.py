"""On-disk layout of a training run.

A run directory holds ``config.toml`` (a full snapshot), ``base.npz``,
``adapters/concept_<id>.lora`` and ``train_log.jsonl``. A sweep directory
holds one run directory per swept value combination.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .attention import LoraAdapter, adapter_from_bytes, adapter_to_bytes
from .config import RunConfig, config_to_toml, parse_config
from .diffusion import ConceptWorld, Denoiser, denoiser_from_bytes, denoiser_to_bytes, make_world, train_base
from .errors import ArtifactError, ConfigValidationError, ContractError
from .training import TrainingLog, train_scope


@dataclass
class Run:
    name: str
    path: Path
    config: RunConfig
    denoiser: Denoiser
    adapters: dict


def world_for(cfg: RunConfig) -> ConceptWorld:
    return make_world(cfg.n_concepts, cfg.radius, cfg.sigma, cfg.n_clusters)


def write_atomic(path: Path, data: bytes | str):
    """Write through a temporary file so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8")
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def base_model(cfg: RunConfig, cache_dir: Path, log=None) -> Denoiser:
    """Load the base denoiser cached under ``cache_dir`` or train and cache it."""
    key_path, model_path = cache_dir / "base.json", cache_dir / "base.npz"
    key = json.dumps(cfg.base_key(), sort_keys=True)
    if model_path.exists() and key_path.exists() and key_path.read_text(encoding="utf-8") == key:
        return denoiser_from_bytes(model_path.read_bytes())
    den = train_base(world_for(cfg), cfg.base_training(), log)
    write_atomic(model_path, denoiser_to_bytes(den))
    write_atomic(key_path, key)
    return den


def save_run(path: Path, cfg: RunConfig, den: Denoiser, adapters: list[LoraAdapter], log: TrainingLog):
    write_atomic(path / "config.toml", config_to_toml(cfg))
    write_atomic(path / "base.npz", denoiser_to_bytes(den))
    write_atomic(path / "base.json", json.dumps(cfg.base_key(), sort_keys=True))
    for a in adapters:
        write_atomic(path / "adapters" / f"concept_{a.concept}.lora", adapter_to_bytes(a))
    write_atomic(path / "train_log.jsonl", log.to_jsonl())


def train_run(path: Path, cfg: RunConfig, base_cache: Path, log=None) -> list[LoraAdapter]:
    den = base_model(cfg, base_cache, log)
    adapters, tlog = train_scope(world_for(cfg), den, range(cfg.n_concepts), cfg.training())
    save_run(path, cfg, den, adapters, tlog)
    return adapters


def load_run(path: Path, name: str = "") -> Run:
    path = Path(path)
    cfg_path = path / "config.toml"
    if not cfg_path.exists():
        raise ArtifactError(f"{path} has no config.toml snapshot")
    try:
        cfg, _ = parse_config(cfg_path.read_text(encoding="utf-8"))
    except ConfigValidationError as exc:
        raise ArtifactError(f"{cfg_path}: {exc}") from exc
    if not (path / "base.npz").exists():
        raise ArtifactError(f"{path} has no base.npz")
    den = denoiser_from_bytes((path / "base.npz").read_bytes())
    adapters = {}
    missing = []
    for c in range(cfg.n_concepts):
        f = path / "adapters" / f"concept_{c}.lora"
        if not f.exists():
            missing.append(f.name)
            continue
        try:
            adapters[c] = adapter_from_bytes(f.read_bytes())
        except ContractError as exc:
            raise ArtifactError(f"{f}: {exc}") from exc
    if missing:
        raise ArtifactError(f"{path / 'adapters'} is missing {', '.join(missing)}")
    return Run(name, path, cfg, den, adapters)


def find_runs(root: Path) -> list[Run]:
    """The run at ``root``, or every run directly beneath a sweep directory."""
    root = Path(root)
    if not root.is_dir():
        raise ArtifactError(f"{root} is not a directory")
    if (root / "adapters").is_dir():
        return [load_run(root)]
    subs = sorted(p for p in root.iterdir() if (p / "adapters").is_dir())
    if not subs:
        raise ArtifactError(f"no adapters found under {root}")
    return [load_run(p, p.name) for p in subs]
