"""Single-head cross-attention with per-concept low-rank adapters."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, NotAdaptedError

PROJECTIONS = ("q", "k", "v", "o")
DEFAULT_ADAPTED = frozenset({"v", "o"})


@dataclass(frozen=True)
class AttentionWeights:
    """Frozen projections of one cross-attention layer.

    Shapes: ``w_q`` (d_e x d_z), ``w_k`` (d_e x d_x), ``w_v`` (d_v x d_x),
    ``w_o`` (d_out x d_v). Tokens ``X`` are d_x x m, queries ``Z`` are d_z x n.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        if self.w_q.shape[0] != self.w_k.shape[0]:
            raise DimensionError(
                f"w_q {self.w_q.shape} and w_k {self.w_k.shape} must share d_e rows"
            )
        if self.w_o.shape[1] != self.w_v.shape[0]:
            raise DimensionError(f"w_o {self.w_o.shape} cannot consume w_v {self.w_v.shape}")
        if self.w_k.shape[1] != self.w_v.shape[1]:
            raise DimensionError(f"w_k {self.w_k.shape} and w_v {self.w_v.shape} read different token widths")

    @property
    def d_e(self) -> int:
        return self.w_q.shape[0]

    def weight(self, proj: str) -> np.ndarray:
        return getattr(self, f"w_{proj}")

    @classmethod
    def random(cls, rng: np.random.Generator, d_x: int, d_z: int, d_e: int, d_v: int, d_out: int):
        def g(r, c):
            return rng.standard_normal((r, c)) / math.sqrt(c)

        return cls(g(d_e, d_z), g(d_e, d_x), g(d_v, d_x), g(d_out, d_v))


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * B @ A`` for each adapted projection.

    Factors may be plain arrays or taped :class:`~lora_erasure.autodiff.Var`
    nodes (see :meth:`on_tape`).
    """

    concept: int
    rank: int
    scale: float
    factors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("rank must be positive")
        for proj, (b, a) in self.factors.items():
            if proj not in PROJECTIONS:
                raise ContractError(f"unknown projection {proj!r}")
            if b.shape[1] != self.rank or a.shape[0] != self.rank:
                raise DimensionError(
                    f"{proj}: factors {b.shape} x {a.shape} do not have rank {self.rank}"
                )

    @property
    def adapted_set(self) -> frozenset:
        return frozenset(self.factors)

    @classmethod
    def init(
        cls,
        concept: int,
        base: AttentionWeights,
        rng: np.random.Generator,
        rank: int = 8,
        alpha: float | None = None,
        adapted: Iterable[str] = DEFAULT_ADAPTED,
        a_std: float = 1e-2,
    ) -> "LoraAdapter":
        """Gaussian ``A`` and zero ``B``, so the adapter starts as a no-op."""
        alpha = rank if alpha is None else alpha
        factors = {}
        for proj in PROJECTIONS:
            if proj not in adapted:
                continue
            out, inp = base.weight(proj).shape
            if rank > min(out, inp):
                raise ContractError(f"rank {rank} exceeds min{(out, inp)} for {proj}")
            factors[proj] = (np.zeros((out, rank)), a_std * rng.standard_normal((rank, inp)))
        return cls(concept, rank, alpha / rank, factors)

    def delta(self, proj: str):
        return delta_w(self, proj)

    def parameters(self) -> list:
        return [m for proj in PROJECTIONS if proj in self.factors for m in self.factors[proj]]

    def on_tape(self, tape: ad.Tape) -> "LoraAdapter":
        """Copy whose factors are leaves of ``tape``."""
        return LoraAdapter(
            self.concept,
            self.rank,
            self.scale,
            {p: (tape.watch(ad.value(b)), tape.watch(ad.value(a))) for p, (b, a) in self.factors.items()},
        )

    def detached(self) -> "LoraAdapter":
        return LoraAdapter(
            self.concept,
            self.rank,
            self.scale,
            {p: (np.array(ad.value(b)), np.array(ad.value(a))) for p, (b, a) in self.factors.items()},
        )

    def with_factors(self, params: list) -> "LoraAdapter":
        """Same layout with factors replaced, in :meth:`parameters` order."""
        it = iter(params)
        factors = {p: (next(it), next(it)) for p in PROJECTIONS if p in self.factors}
        return LoraAdapter(self.concept, self.rank, self.scale, factors)


def delta_w(adapter: LoraAdapter, proj: str):
    if proj not in adapter.factors:
        raise NotAdaptedError(f"projection {proj!r} is not adapted by concept {adapter.concept}")
    b, a = adapter.factors[proj]
    return ad.scale(ad.matmul(b, a), adapter.scale)


@dataclass(frozen=True)
class WeightDelta:
    """Dense per-projection weight changes (e.g. several adapters merged)."""

    deltas: dict

    @property
    def adapted_set(self) -> frozenset:
        return frozenset(self.deltas)

    def delta(self, proj: str):
        if proj not in self.deltas:
            raise NotAdaptedError(f"projection {proj!r} has no delta")
        return self.deltas[proj]


def effective_weight(base: AttentionWeights, adapters, proj: str):
    """Base weight plus the summed deltas of ``adapters`` touching ``proj``."""
    w = base.weight(proj)
    deltas = [a.delta(proj) for a in adapters if proj in a.adapted_set]
    for d in deltas:
        if ad.value(d).shape != w.shape:
            raise DimensionError(f"delta for {proj} has shape {ad.value(d).shape}, base {w.shape}")
    if not deltas:
        return w
    return ad.total([w, *deltas])


def attention_map(w_q, w_k, X, Z, d_e: int):
    """Column-wise softmax of key/query logits: m tokens x n queries."""
    logits = ad.matmul(ad.transpose(ad.matmul(w_k, X)), ad.matmul(w_q, Z))
    return ad.softmax_columns(ad.scale(logits, 1.0 / math.sqrt(d_e)))


def _check_inputs(base: AttentionWeights, X, Z):
    xs, zs = ad.value(X).shape, ad.value(Z).shape
    if xs[0] != base.w_k.shape[1]:
        raise DimensionError(f"tokens X {xs} do not match w_k {base.w_k.shape}")
    if zs[0] != base.w_q.shape[1]:
        raise DimensionError(f"queries Z {zs} do not match w_q {base.w_q.shape}")


def attention_output(base: AttentionWeights, adapter, X, Z):
    """``W_o W_v X softmax((W_k X)^T W_q Z / sqrt(d_e))`` with adapted weights.

    ``adapter`` may be ``None``, one adapter, or a sequence whose deltas are
    summed into the weights (used by static merging).
    """
    _check_inputs(base, X, Z)
    if adapter is None:
        adapters = ()
    elif isinstance(adapter, (LoraAdapter, WeightDelta)):
        adapters = (adapter,)
    else:
        adapters = tuple(adapter)
    w = {p: effective_weight(base, adapters, p) for p in PROJECTIONS}
    attn = attention_map(w["q"], w["k"], X, Z, base.d_e)
    return ad.matmul(ad.matmul(w["o"], ad.matmul(w["v"], X)), attn)


def induced_shift(base: AttentionWeights, adapter: LoraAdapter, X, Z):
    return ad.sub(attention_output(base, adapter, X, Z), attention_output(base, None, X, Z))


# Adapter file: magic, concept id, rank, scale, adapted-set bitmask, then
# (B, A) per adapted projection in q, k, v, o order.
_MAGIC = b"LORA"
_ADAPTER_HEADER = struct.Struct("<4sQQdB")


def adapter_to_bytes(adapter: LoraAdapter) -> bytes:
    mask = 0
    for bit, proj in enumerate(PROJECTIONS):
        if proj in adapter.factors:
            mask |= 1 << bit
    parts = [_ADAPTER_HEADER.pack(_MAGIC, adapter.concept, adapter.rank, adapter.scale, mask)]
    for proj in PROJECTIONS:
        if proj in adapter.factors:
            b, a = adapter.factors[proj]
            parts.append(ad.matrix_to_bytes(ad.value(b)))
            parts.append(ad.matrix_to_bytes(ad.value(a)))
    return b"".join(parts)


def adapter_from_bytes(buf: bytes) -> LoraAdapter:
    if len(buf) < _ADAPTER_HEADER.size:
        raise ContractError("truncated adapter header")
    magic, concept, rank, scale, mask = _ADAPTER_HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ContractError("not an adapter file")
    offset = _ADAPTER_HEADER.size
    factors = {}
    for bit, proj in enumerate(PROJECTIONS):
        if mask & (1 << bit):
            b, offset = ad.matrix_from_bytes(buf, offset)
            a, offset = ad.matrix_from_bytes(buf, offset)
            factors[proj] = (b, a)
    if offset != len(buf):
        raise ContractError("trailing bytes after adapter")
    return LoraAdapter(int(concept), int(rank), float(scale), factors)
