"""Joint training of per-concept erasure adapters."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import LoraAdapter
from .diffusion import NEUTRAL, Adam, ConceptWorld, Denoiser, _schedule_for, forward_noise
from .errors import ContractError, TrainingDivergedError
from .orthogonality import (
    AwareStats,
    build_M,
    loss_input_agnostic,
    loss_input_aware,
    pbo_loss,
    sample_pairs,
    vo_attention_map,
)
from .seeding import generator


@dataclass
class TrainingConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda_pbo: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    samples_per_concept: int = 1024
    learning_rate: float = 1e-3
    pair_sample_count: int = 50
    exhaustive_pairs_up_to: int = 12
    aware_queries: int = 8
    seed: int = 0
    adapted_set: tuple = ("v", "o")
    rank: int = 8
    alpha: float = 8.0
    init_std: float = 1e-2
    context_fraction: float = 0.0
    max_context: int = 5

    def __post_init__(self):
        bad = []
        if self.epochs < 1:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if not 0.0 <= self.context_fraction <= 1.0:
            bad.append("context_fraction")
        if self.max_context < 2:
            bad.append("max_context")
        for k in ("lambda1", "lambda2", "lambda_pbo"):
            if getattr(self, k) < 0:
                bad.append(k)
        if bad:
            from .errors import ConfigValidationError

            raise ConfigValidationError(bad)
        self.adapted_set = tuple(sorted(self.adapted_set, key="qkvo".index))

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.samples_per_concept / self.batch_size))


def reconstruction_terms(denoiser: Denoiser, adapters: dict, batch, params_of=None):
    """Per-concept errors between the adapted prediction and the frozen neutral target.

    ``batch`` maps concept -> ``(x_t, t)`` or ``(x_t, t, prompt)``, where
    ``prompt`` is a conjunction containing the concept; the target is the base
    prediction for the same prompt with the concept replaced by the neutral
    substitute. The target is a constant array, so no gradient reaches the base.
    """
    terms = {}
    for c, item in batch.items():
        if c not in adapters:
            raise ContractError(f"no adapter for concept {c}")
        x_t, t = item[0], item[1]
        prompt = item[2] if len(item) > 2 else c
        target = denoiser.predict(neutral_substitute(prompt, c), x_t, t)
        pred = denoiser.predict(prompt, x_t, t, adapters[c])
        terms[c] = ad.mse(pred, target)
    return terms


def neutral_substitute(prompt, concept: int):
    """``prompt`` with ``concept`` swapped for the neutral substitute."""
    if isinstance(prompt, (int, np.integer)):
        if int(prompt) != concept:
            raise ContractError(f"prompt {prompt} does not mention concept {concept}")
        return NEUTRAL
    if concept not in prompt:
        raise ContractError(f"prompt {prompt} does not mention concept {concept}")
    return tuple(NEUTRAL if m == concept else m for m in prompt)


def draw_prompt(concept: int, n_concepts: int, cfg: TrainingConfig, rng: np.random.Generator):
    """The concept alone, or with probability ``context_fraction`` inside a random conjunction."""
    if cfg.context_fraction == 0.0 or n_concepts < 2 or rng.random() >= cfg.context_fraction:
        return concept
    k = int(rng.integers(2, min(cfg.max_context, n_concepts) + 1))
    others = [o for o in range(n_concepts) if o != concept]
    return (concept, *(int(o) for o in rng.choice(others, size=k - 1, replace=False)))


def reconstruction_loss(denoiser: Denoiser, adapters: dict, batch):
    """Sum over concepts of each adapter's reconstruction error."""
    terms = reconstruction_terms(denoiser, adapters, batch)
    return ad.total(list(terms.values()))


@dataclass
class LossBreakdown:
    total: object
    rec: float
    aware: float
    agnostic: float
    pbo: float
    mean_os: float
    skipped: int


def total_loss(
    denoiser: Denoiser,
    adapters: list[LoraAdapter],
    batch: dict,
    pairs,
    cfg: TrainingConfig,
    aware_items=None,
) -> LossBreakdown:
    """``L_rec + lambda1 L_aware + lambda2 L_agnostic`` (+ optional PBO term).

    ``aware_items`` is a list of ``(X, Z)`` token/query pairs for the
    input-aware term; by default every concept group in ``batch`` supplies one.
    """
    by_concept = {a.concept: a for a in adapters}
    rec = reconstruction_loss(denoiser, by_concept, batch)
    base = denoiser.attention()
    stats = AwareStats()
    parts = [rec]
    aware = agn = pbo = None
    if pairs:
        if aware_items is None:
            aware_items = [
                (denoiser.tokens(c), _queries(denoiser, x_t[:, : cfg.aware_queries], t[: cfg.aware_queries]))
                for c, (x_t, t, *_) in batch.items()
            ]
        if set(cfg.adapted_set) <= {"v", "o"}:
            # v/o-only adapters leave the attention map alone, so the shift is M X A
            Ms = [build_M(base, a) for a in adapters]
            shifts = []
            for X, Z in aware_items:
                xa = ad.matmul(X, vo_attention_map(base, X, Z))
                shifts.append([ad.matmul(M, xa) for M in Ms])
            aware = loss_input_aware(base, adapters, pairs, aware_items, stats, shifts=shifts)
            agn = loss_input_agnostic(base, adapters, pairs, Ms=Ms)
        else:
            aware = loss_input_aware(base, adapters, pairs, aware_items, stats)
            agn = loss_input_agnostic(base, adapters, pairs)
        if cfg.lambda1:
            parts.append(ad.scale(aware, cfg.lambda1))
        if cfg.lambda2:
            parts.append(ad.scale(agn, cfg.lambda2))
        if cfg.lambda_pbo:
            pbo = pbo_loss(adapters, pairs)
            parts.append(ad.scale(pbo, cfg.lambda_pbo))
    total = parts[0] if len(parts) == 1 else ad.total(parts)

    def f(x):
        return 0.0 if x is None else float(ad.value(x)[0, 0])

    return LossBreakdown(total, f(rec), f(aware), f(agn), f(pbo), stats.mean_os, stats.skipped)


def _queries(denoiser: Denoiser, x_t, t):
    p = denoiser.params
    phi = denoiser.features(x_t, t)
    return np.tanh(p["w_z"] @ phi + p["b_z"])


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _concept_stream(seed: int, concept: int):
    return generator(seed, "train", concept)


def init_adapters(denoiser: Denoiser, scope, cfg: TrainingConfig) -> list[LoraAdapter]:
    base = denoiser.attention()
    return [
        LoraAdapter.init(
            c,
            base,
            generator(cfg.seed, "init", c),
            rank=cfg.rank,
            alpha=cfg.alpha,
            adapted=cfg.adapted_set,
            a_std=cfg.init_std,
        )
        for c in scope
    ]


def train_scope(
    world: ConceptWorld,
    denoiser: Denoiser,
    scope,
    cfg: TrainingConfig | None = None,
    log: TrainingLog | None = None,
) -> tuple[list[LoraAdapter], TrainingLog]:
    """Train one adapter per scope concept under the joint objective.

    Every step draws a mini-batch for each concept from that concept's own
    random stream, so with zero orthogonality weights each adapter follows
    exactly the trajectory of a single-concept run.
    """
    cfg = cfg or TrainingConfig()
    log = log if log is not None else TrainingLog()
    scope = [int(c) for c in scope]
    if not scope:
        raise ContractError("scope is empty")
    if len(set(scope)) != len(scope):
        raise ContractError("scope has duplicate concepts")
    if not denoiser.frozen:
        raise ContractError("base denoiser must be frozen before adapter training")
    sched = _schedule_for(denoiser.T)
    adapters = init_adapters(denoiser, scope, cfg)
    params = [p for a in adapters for p in a.parameters()]
    opt = Adam(lr=cfg.learning_rate)
    streams = {c: _concept_stream(cfg.seed, c) for c in scope}
    pair_rng = generator(cfg.seed, "pairs")
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch = {}
            for c in scope:
                r = streams[c]
                prompt = draw_prompt(c, world.n_concepts, cfg, r)
                x0 = world.sample(prompt, cfg.batch_size, r)
                t = r.integers(1, denoiser.T + 1, size=cfg.batch_size)
                eps = r.standard_normal((2, cfg.batch_size))
                batch[c] = (forward_noise(x0, t, eps, sched), t, prompt)
            pairs = (
                sample_pairs(len(scope), pair_rng, cfg.pair_sample_count, cfg.exhaustive_pairs_up_to)
                if len(scope) > 1
                else []
            )
            tape = ad.Tape()
            taped = [a.on_tape(tape) for a in adapters]
            res = total_loss(denoiser, taped, batch, pairs, cfg)
            comps = (res.rec, res.aware, res.agnostic, res.pbo)
            if not all(math.isfinite(v) for v in comps):
                raise TrainingDivergedError(f"non-finite loss at step {step}: {comps}")
            grads = ad.gradient(res.total, [p for a in taped for p in a.parameters()])
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(f"non-finite gradient at step {step}")
            opt.step(params, grads)
            log.append(
                step=step,
                epoch=epoch,
                L_rec=res.rec,
                L_aware=res.aware,
                L_agnostic=res.agnostic,
                L_pbo=res.pbo,
                mean_os=None if math.isnan(res.mean_os) else res.mean_os,
                skipped_pairs=res.skipped,
            )
            step += 1
    return adapters, log


def config_dict(cfg: TrainingConfig) -> dict:
    d = asdict(cfg)
    d["adapted_set"] = list(cfg.adapted_set)
    return d




def probe_batch(denoiser: Denoiser, concepts, seed: int = 0, queries: int = 8) -> list:
    """One ``(X, Z)`` item per concept prompt, with queries from random noisy states."""
    rng = generator(seed, "probe")
    items = []
    for c in concepts:
        x_t = rng.standard_normal((2, queries))
        t = rng.integers(1, denoiser.T + 1, size=queries)
        items.append((denoiser.tokens(int(c)), _queries(denoiser, x_t, t)))
    return items
