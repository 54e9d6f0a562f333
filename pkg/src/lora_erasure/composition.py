"""Inference-time combination of concept adapters.

Three strategies are available: averaging each adapter's guided prediction
(``composite``), summing their weight deltas (``merge``), and rotating through
them across denoising steps (``switch``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import PROJECTIONS, AttentionWeights, LoraAdapter, WeightDelta
from .diffusion import Denoiser, ddim_sample_batch, initial_noise
from .errors import ContractError, DimensionError, RequestValidationError

STRATEGIES = ("composite", "merge", "switch")


@dataclass(frozen=True)
class ErasureRequest:
    """Concepts the deployment can erase (``scope``) and those erased now (``subset``)."""

    scope: frozenset
    subset: frozenset

    def __init__(self, scope, subset):
        object.__setattr__(self, "scope", frozenset(int(c) for c in scope))
        object.__setattr__(self, "subset", frozenset(int(c) for c in subset))
        self.validate()

    def validate(self, universe: int | None = None):
        if not self.subset <= self.scope:
            extra = sorted(self.subset - self.scope)
            raise RequestValidationError(f"subset concepts {extra} are outside the scope")
        if universe is not None and any(not 0 <= c < universe for c in self.scope):
            raise RequestValidationError(f"scope has concepts outside 0..{universe - 1}")


def composite_predict(denoiser: Denoiser, condition, x_t, t, active: Sequence[LoraAdapter], guidance_w: float):
    """Mean of the guided predictions obtained with each active adapter alone."""
    if not active:
        raise ContractError("no active adapters; use the base prediction instead")
    preds = [denoiser.guided(condition, x_t, t, guidance_w, a) for a in active]
    return ad.scale(ad.total(preds), 1.0 / len(preds))


def merge_adapters(active: Sequence[LoraAdapter], base: AttentionWeights) -> WeightDelta:
    """Sum of the adapters' weight deltas, per projection."""
    if not active:
        raise ContractError("nothing to merge")
    deltas = {}
    for proj in PROJECTIONS:
        parts = [a.delta(proj) for a in active if proj in a.adapted_set]
        if not parts:
            continue
        for p in parts:
            if ad.value(p).shape != base.weight(proj).shape:
                raise DimensionError(f"{proj} delta {ad.value(p).shape} vs base {base.weight(proj).shape}")
        deltas[proj] = ad.total(parts)
    return WeightDelta(deltas)


def switch_index(step_index: int, n_active: int) -> int:
    return step_index % n_active


def switch_predict(denoiser: Denoiser, condition, x_t, t, active: Sequence[LoraAdapter], guidance_w: float, step_index: int):
    """Guided prediction from one adapter chosen round-robin by step."""
    if not active:
        raise ContractError("no active adapters")
    return denoiser.guided(condition, x_t, t, guidance_w, active[switch_index(step_index, len(active))])


def strategy_predictor(denoiser: Denoiser, condition, active, strategy: str, guidance_w: float):
    """``predictor(x_t, t, step)`` for the DDIM loop; base guidance if ``active`` is empty."""
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    if not active:
        return lambda x, t, k: denoiser.guided(condition, x, t, guidance_w)
    if strategy == "composite":
        return lambda x, t, k: composite_predict(denoiser, condition, x, t, active, guidance_w)
    if strategy == "switch":
        return lambda x, t, k: switch_predict(denoiser, condition, x, t, active, guidance_w, k)
    merged = merge_adapters(active, denoiser.attention())
    return lambda x, t, k: denoiser.guided(condition, x, t, guidance_w, merged)


def prompt_concepts(condition) -> frozenset:
    if condition is None or isinstance(condition, str):
        return frozenset()
    if isinstance(condition, (int, np.integer)):
        return frozenset({int(condition)})
    return frozenset(int(c) for c in condition if not isinstance(c, str))


def active_adapters(request: ErasureRequest, condition, adapters: Mapping[int, LoraAdapter]) -> list[LoraAdapter]:
    """The subset's adapters when the prompt mentions a subset concept, else none."""
    if not prompt_concepts(condition) & request.subset:
        return []
    missing = sorted(c for c in request.subset if c not in adapters)
    if missing:
        raise ContractError(f"no trained adapters for concepts {missing}")
    return [adapters[c] for c in sorted(request.subset)]


def erase_sample_batch(
    denoiser: Denoiser,
    request: ErasureRequest,
    condition,
    adapters: Mapping[int, LoraAdapter],
    seeds: Sequence[int],
    strategy: str = "composite",
    guidance_w: float = 3.0,
    steps: int = 50,
) -> np.ndarray:
    """Samples (2 x len(seeds)) with only the relevant adapters switched on."""
    request.validate()
    active = active_adapters(request, condition, adapters)
    predictor = strategy_predictor(denoiser, condition, active, strategy, guidance_w)
    return ddim_sample_batch(denoiser, condition, initial_noise(seeds), steps, guidance_w, predictor)


def erase_sample(
    denoiser: Denoiser,
    request: ErasureRequest,
    prompt_condition,
    adapters: Mapping[int, LoraAdapter],
    strategy: str = "composite",
    seed: int = 0,
    guidance_w: float = 3.0,
    steps: int = 50,
) -> np.ndarray:
    return erase_sample_batch(
        denoiser, request, prompt_condition, adapters, [seed], strategy, guidance_w, steps
    )[:, 0]


def parse_request(text: str) -> dict:
    """Decode a JSON erasure request and check its fields."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RequestValidationError(f"malformed request: {exc}") from exc
    if not isinstance(raw, dict):
        raise RequestValidationError("request must be a JSON object")
    missing = {"scope", "subset", "condition"} - set(raw)
    if missing:
        raise RequestValidationError(f"request is missing {sorted(missing)}")
    strategy = raw.get("strategy", "composite")
    if strategy not in STRATEGIES:
        raise RequestValidationError(f"unknown strategy {strategy!r}")
    try:
        cond = raw["condition"]
        if isinstance(cond, list):
            cond = tuple(_concept_id(c) for c in cond)
        elif cond is not None:
            cond = _concept_id(cond)
        request = ErasureRequest([_concept_id(c) for c in raw["scope"]], [_concept_id(c) for c in raw["subset"]])
        guidance, seed = float(raw.get("guidance", 3.0)), raw.get("seed", 0)
    except (TypeError, ValueError) as exc:
        raise RequestValidationError(f"bad request field: {exc}") from exc
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise RequestValidationError("seed must be an integer")
    return {"request": request, "condition": cond, "strategy": strategy, "guidance": guidance, "seed": seed}


def _concept_id(value) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ValueError(f"concept ids are non-negative integers, got {value!r}")
    return value
