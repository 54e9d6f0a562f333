"""Toy conditional diffusion over 2-D points.

Concepts are modes of a Gaussian mixture on a circle; a neutral substitute
sits at the origin. The denoiser sees its condition only through one
cross-attention layer, so concept adapters act exactly where conditioning
enters.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionWeights, attention_output
from .errors import ContractError, DimensionError

NEUTRAL = "neutral"


@dataclass(frozen=True)
class ConceptWorld:
    centers: np.ndarray
    sigmas: np.ndarray
    neutral_center: np.ndarray
    neutral_sigma: float
    clusters: tuple = ()

    def __post_init__(self):
        n = len(self.centers)
        for i in range(n):
            if np.allclose(self.centers[i], self.neutral_center):
                raise ContractError(f"concept {i} coincides with the neutral mode")
            for j in range(i + 1, n):
                if np.allclose(self.centers[i], self.centers[j]):
                    raise ContractError(f"concepts {i} and {j} share a center")

    @property
    def n_concepts(self) -> int:
        return len(self.centers)

    def cluster_of(self, c: int) -> int:
        return self.clusters[c] if self.clusters else 0

    def sample(self, condition, k: int, rng: np.random.Generator) -> np.ndarray:
        """``k`` data points (2 x k) for a concept, a conjunction, or the neutral substitute."""
        if condition == NEUTRAL:
            return self.neutral_center[:, None] + self.neutral_sigma * rng.standard_normal((2, k))
        members = (condition,) if isinstance(condition, (int, np.integer)) else tuple(condition)
        # the neutral mode may itself appear inside a conjunction
        centers = np.vstack([self.centers, self.neutral_center])
        sigmas = np.append(self.sigmas, self.neutral_sigma)
        idx = np.array([self.n_concepts if m == NEUTRAL else int(m) for m in members])
        which = idx[rng.integers(0, len(idx), size=k)]
        return centers[which].T + sigmas[which][None, :] * rng.standard_normal((2, k))


def make_world(
    n_concepts: int = 8,
    radius: float = 4.0,
    sigma: float = 0.3,
    n_clusters: int = 2,
    neutral_sigma: float = 0.5,
) -> ConceptWorld:
    """Modes evenly spaced on a circle, grouped into contiguous arcs."""
    angles = 2 * np.pi * np.arange(n_concepts) / n_concepts
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    clusters = tuple(int(i * n_clusters // n_concepts) for i in range(n_concepts))
    return ConceptWorld(centers, np.full(n_concepts, sigma), np.zeros(2), neutral_sigma, clusters)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[t]`` for t = 0..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        a = self.alpha_bar
        if a.ndim != 1 or len(a) < 2:
            raise ContractError("schedule needs at least two levels")
        if np.any(a < 0) or np.any(a > 1) or np.any(np.diff(a) >= 0):
            raise ContractError("alpha_bar must lie in [0, 1] and strictly decrease")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def sigma(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[t])

    @classmethod
    def cosine(cls, T: int = 100, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1 - abar[1:] / abar[:-1], 0, max_beta)
        return cls(np.concatenate([[1.0], np.cumprod(1 - betas)]))


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ContractError(f"timestep out of range 0..{sched.T}")
    a = sched.alpha_bar[t_arr]
    return np.sqrt(a) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)


def _init_params(rng, n_tokens, d_x, d_z, d_e, d_v, d_out, n_feat, hidden):
    def g(r, c):
        return rng.standard_normal((r, c)) / math.sqrt(c)

    return {
        "embed": rng.standard_normal((d_x, n_tokens)),
        "w_z": g(d_z, n_feat),
        "b_z": np.zeros((d_z, 1)),
        "w_q": g(d_e, d_z),
        "w_k": g(d_e, d_x),
        "w_v": g(d_v, d_x),
        "w_o": g(d_out, d_v),
        "w_1": g(hidden, n_feat + d_z + d_out),
        "b_1": np.zeros((hidden, 1)),
        "w_2": g(hidden, hidden),
        "b_2": np.zeros((hidden, 1)),
        "w_3": g(2, hidden) * 0.1,
        "b_3": np.zeros((2, 1)),
    }


@dataclass
class Denoiser:
    """Noise predictor ``eps(x_t, t, condition)``.

    Token columns of ``embed``: concepts ``0..n-1``, then neutral, null and a
    start token that opens every prompt.
    """

    n_concepts: int
    params: dict
    T: int
    frozen: bool = False
    n_freq: int = 4

    @classmethod
    def create(
        cls,
        n_concepts: int,
        rng: np.random.Generator,
        T: int = 100,
        d_x: int = 16,
        d_z: int = 16,
        d_e: int = 16,
        d_v: int = 16,
        d_out: int = 16,
        hidden: int = 64,
        n_freq: int = 4,
        clusters: tuple = (),
        cluster_mix: float = 0.0,
    ) -> "Denoiser":
        """Random initial weights.

        With ``cluster_mix > 0`` each concept embedding blends a shared
        per-cluster direction into its own, so concepts in one cluster start
        with similar prompt embeddings (the toy counterpart of semantically
        related names).
        """
        if not 0.0 <= cluster_mix < 1.0:
            raise ContractError("cluster_mix must lie in [0, 1)")
        n_feat = 3 + 2 * n_freq
        params = _init_params(rng, n_concepts + 3, d_x, d_z, d_e, d_v, d_out, n_feat, hidden)
        if cluster_mix > 0.0:
            if len(clusters) != n_concepts:
                raise ContractError("cluster_mix needs one cluster id per concept")
            shared = rng.standard_normal((d_x, max(clusters) + 1))
            own = params["embed"][:, :n_concepts]
            params["embed"][:, :n_concepts] = (
                math.sqrt(1.0 - cluster_mix) * own + math.sqrt(cluster_mix) * shared[:, list(clusters)]
            )
        return cls(n_concepts, params, T, n_freq=n_freq)

    @property
    def neutral_token(self) -> int:
        return self.n_concepts

    @property
    def null_token(self) -> int:
        return self.n_concepts + 1

    @property
    def start_token(self) -> int:
        return self.n_concepts + 2

    def freeze(self) -> "Denoiser":
        for v in self.params.values():
            v.flags.writeable = False
        self.frozen = True
        return self

    def attention(self, params: dict | None = None) -> AttentionWeights:
        p = self.params if params is None else params
        return AttentionWeights(p["w_q"], p["w_k"], p["w_v"], p["w_o"])

    def token_ids(self, condition) -> list[int]:
        if condition is None:
            body = [self.null_token]
        elif condition == NEUTRAL:
            body = [self.neutral_token]
        elif isinstance(condition, (int, np.integer)):
            body = [int(condition)]
        else:
            body = [self.neutral_token if c == NEUTRAL else int(c) for c in condition]
            if not body:
                raise ContractError("empty conjunction")
        for c in body:
            if not 0 <= c < self.n_concepts + 2:
                raise ContractError(f"unknown concept {c}")
        return [self.start_token, *body]

    def selector(self, condition) -> np.ndarray:
        ids = self.token_ids(condition)
        s = np.zeros((self.n_concepts + 3, len(ids)))
        s[ids, np.arange(len(ids))] = 1.0
        return s

    def tokens(self, condition, params: dict | None = None):
        p = self.params if params is None else params
        return ad.matmul(p["embed"], self.selector(condition))

    def features(self, x_t: np.ndarray, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[0] != 2:
            raise DimensionError(f"expected states of shape 2 x n, got {x_t.shape}")
        s = np.broadcast_to(np.asarray(t, dtype=np.float64) / self.T, (x_t.shape[1],))[None, :]
        k = np.arange(1, self.n_freq + 1)[:, None]
        return np.vstack([x_t / 2.0, s, np.sin(np.pi * k * s), np.cos(np.pi * k * s)])

    def predict(self, condition, x_t, t, adapters=None, params: dict | None = None):
        """Noise prediction for a group of states sharing one condition.

        ``adapters`` is None, one adapter, or a list whose deltas are summed.
        ``params`` overrides the stored weights (used with taped leaves).
        """
        p = self.params if params is None else params
        phi = self.features(x_t, t)
        n = phi.shape[1]
        ones = np.ones((1, n))
        Z = ad.tanh(ad.add(ad.matmul(p["w_z"], phi), ad.matmul(p["b_z"], ones)))
        O = attention_output(self.attention(p), adapters, self.tokens(condition, p), Z)
        h = ad.tanh(ad.add(ad.matmul(p["w_1"], ad.vstack([phi, Z, O])), ad.matmul(p["b_1"], ones)))
        h = ad.tanh(ad.add(ad.matmul(p["w_2"], h), ad.matmul(p["b_2"], ones)))
        return ad.add(ad.matmul(p["w_3"], h), ad.matmul(p["b_3"], ones))

    def guided(self, condition, x_t, t, w: float, adapters=None):
        """Classifier-free guidance ``e_null + w (e_cond - e_null)``; adapters act on both branches."""
        e_c = self.predict(condition, x_t, t, adapters)
        if w == 1.0:
            return e_c
        e_u = self.predict(None, x_t, t, adapters)
        return e_u + w * (e_c - e_u)


def denoise_loss(denoiser: Denoiser, batch: Sequence, adapters=None, params: dict | None = None):
    """Mean squared noise-prediction error.

    ``batch`` holds ``(x0, condition, t, eps)`` items; items are grouped by
    condition so each group shares one attention pass.
    """
    if not batch:
        raise ContractError("batch is empty")
    groups: dict = {}
    for x0, cond, t, eps in batch:
        key = cond if cond is None or isinstance(cond, (str, int, np.integer)) else tuple(cond)
        groups.setdefault(key, []).append((x0, t, eps))
    preds, targets = [], []
    sched = _schedule_for(denoiser.T)
    for cond, items in groups.items():
        x0 = np.array([np.asarray(i[0], dtype=np.float64) for i in items]).T
        ts = np.array([i[1] for i in items])
        eps = np.array([np.asarray(i[2], dtype=np.float64) for i in items]).T
        x_t = forward_noise(x0, ts, eps, sched)
        preds.append(denoiser.predict(cond, x_t, ts, adapters, params))
        targets.append(eps)
    return ad.mse(ad.hstack(preds), np.hstack(targets))


_SCHEDULES: dict = {}


def _schedule_for(T: int) -> NoiseSchedule:
    if T not in _SCHEDULES:
        _SCHEDULES[T] = NoiseSchedule.cosine(T)
    return _SCHEDULES[T]


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if steps < 1:
        raise ContractError("steps must be >= 1")
    return np.round(np.linspace(T, 0, steps + 1)).astype(int)


@dataclass
class Adam:
    """Adam over a list of arrays, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class BaseTrainingConfig:
    steps: int = 3000
    groups_per_step: int = 16
    group_size: int = 32
    learning_rate: float = 2e-3
    cond_dropout: float = 0.1
    neutral_fraction: float = 0.1
    conjunction_fraction: float = 0.3
    max_conjunction: int = 5
    neutral_in_conjunction: float = 0.5
    cluster_embedding_mix: float = 0.0
    seed: int = 0


def _draw_condition(world: ConceptWorld, cfg: BaseTrainingConfig, rng: np.random.Generator):
    u = rng.random()
    if u < cfg.neutral_fraction:
        return NEUTRAL
    if u < cfg.neutral_fraction + cfg.conjunction_fraction:
        k = int(rng.integers(2, min(cfg.max_conjunction, world.n_concepts) + 1))
        members = [int(c) for c in rng.choice(world.n_concepts, size=k, replace=False)]
        if rng.random() < cfg.neutral_in_conjunction:
            members[int(rng.integers(k))] = NEUTRAL
        return tuple(members)
    return int(rng.integers(world.n_concepts))


def train_base(world: ConceptWorld, cfg: BaseTrainingConfig | None = None, log=None) -> Denoiser:
    """Fit a fresh denoiser with condition dropout for guidance, then freeze it."""
    cfg = cfg or BaseTrainingConfig()
    rng = np.random.default_rng(cfg.seed)
    den = Denoiser.create(
        world.n_concepts, rng, clusters=world.clusters, cluster_mix=cfg.cluster_embedding_mix
    )
    sched = _schedule_for(den.T)
    names = sorted(den.params)
    opt = Adam(lr=cfg.learning_rate)
    for step in range(cfg.steps):
        tape = ad.Tape()
        leaves = {k: tape.watch(den.params[k]) for k in names}
        preds, targets = [], []
        for _ in range(cfg.groups_per_step):
            cond = _draw_condition(world, cfg, rng)
            x0 = world.sample(cond, cfg.group_size, rng)
            if rng.random() < cfg.cond_dropout:
                cond = None
            t = rng.integers(1, den.T + 1, size=cfg.group_size)
            eps = rng.standard_normal((2, cfg.group_size))
            preds.append(den.predict(cond, forward_noise(x0, t, eps, sched), t, params=leaves))
            targets.append(eps)
        loss = ad.mse(ad.hstack(preds), np.hstack(targets))
        grads = ad.gradient(loss, [leaves[k] for k in names])
        # cosine decay keeps late updates small
        opt.lr = cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        opt.step([den.params[k] for k in names], grads)
        if log is not None and step % 100 == 0:
            log(step, float(ad.value(loss)[0, 0]))
    return den.freeze()


def ddim_sample_batch(
    denoiser: Denoiser,
    condition,
    noise: np.ndarray,
    steps: int = 50,
    guidance_w: float = 3.0,
    predictor=None,
    clip_x0: float = 8.0,
) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from initial noise ``noise`` (2 x n).

    ``predictor(x_t, t, step_index)`` overrides the guided prediction; the
    default is plain guidance with no adapters.
    """
    sched = _schedule_for(denoiser.T)
    ts = ddim_timesteps(denoiser.T, steps)
    x = np.array(noise, dtype=np.float64)
    if predictor is None:

        def predictor(x_t, t, k):
            return denoiser.guided(condition, x_t, t, guidance_w)

    for k in range(steps):
        t, t_next = ts[k], ts[k + 1]
        eps = predictor(x, t, k)
        a, a_next = sched.alpha_bar[t], sched.alpha_bar[t_next]
        x0 = np.clip((x - math.sqrt(1 - a) * eps) / math.sqrt(a), -clip_x0, clip_x0)
        x = math.sqrt(a_next) * x0 + math.sqrt(1 - a_next) * eps
    return x


def initial_noise(seeds: Sequence[int]) -> np.ndarray:
    """Starting states, one column per seed, each from its own generator."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(2) for s in seeds], axis=1)


def ddim_sample(
    denoiser: Denoiser,
    condition,
    steps: int = 50,
    guidance_w: float = 3.0,
    adapters=None,
    seed: int = 0,
) -> np.ndarray:
    """One sample as a length-2 vector; ``adapters`` are applied statically."""

    def predictor(x_t, t, k):
        return denoiser.guided(condition, x_t, t, guidance_w, adapters)

    return ddim_sample_batch(denoiser, condition, initial_noise([seed]), steps, guidance_w, predictor)[:, 0]


def denoiser_to_bytes(denoiser: Denoiser) -> bytes:
    """``.npz`` archive of the weights plus the token count and horizon."""
    buf = io.BytesIO()
    meta = np.array([denoiser.n_concepts, denoiser.T, denoiser.n_freq], dtype=np.int64)
    np.savez(buf, __meta__=meta, **denoiser.params)
    return buf.getvalue()


def denoiser_from_bytes(data: bytes) -> Denoiser:
    with np.load(io.BytesIO(data)) as z:
        params = {k: np.array(z[k]) for k in z.files if k != "__meta__"}
        n, T, n_freq = (int(v) for v in z["__meta__"])
    return Denoiser(n, params, T, n_freq=n_freq).freeze()
