"""Orthogonality scores and penalties between concept adapters."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionWeights, LoraAdapter, attention_map, delta_w, effective_weight, induced_shift
from .errors import ContractError, DegenerateShiftError, DimensionError, OracleAssumptionError

EPS_NORM = 1e-12


def orthogonality_score(dO_i, dO_j):
    """``1 - cos`` between two shifts under the Frobenius inner product.

    Works on arrays (returns a float) and on taped values (returns a 1x1 node).
    """
    a, b = ad.value(dO_i), ad.value(dO_j)
    if a.shape != b.shape:
        raise DimensionError(f"shift shapes {a.shape} and {b.shape} differ")
    if np.linalg.norm(a) < EPS_NORM or np.linalg.norm(b) < EPS_NORM:
        raise DegenerateShiftError("shift norm below threshold")
    cos = ad.divide(
        ad.frobenius_inner(dO_i, dO_j),
        ad.matmul(ad.frobenius_norm(dO_i), ad.frobenius_norm(dO_j)),
    )
    os_ = ad.sub(np.ones((1, 1)), cos)
    if isinstance(os_, ad.Var):
        return os_
    # rounding can push |cos| a hair past 1
    return min(2.0, max(0.0, float(os_[0, 0])))


def sample_pairs(n: int, rng: np.random.Generator | None = None, count: int = 50, exhaustive_up_to: int = 12):
    """All unordered pairs for small scopes, else ``count`` random distinct pairs."""
    pairs = list(itertools.combinations(range(n), 2))
    if n <= exhaustive_up_to or len(pairs) <= count:
        return pairs
    if rng is None:
        raise ContractError("an rng is needed to subsample pairs")
    idx = rng.choice(len(pairs), size=count, replace=False)
    return [pairs[i] for i in sorted(idx)]


def _check_pairs(pairs, n):
    if not pairs:
        raise ContractError("pair list is empty")
    for i, j in pairs:
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise ContractError(f"invalid pair {(i, j)} for {n} adapters")


@dataclass
class AwareStats:
    evaluated: int = 0
    skipped: int = 0
    scores: list = field(default_factory=list)

    @property
    def mean_os(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")


def loss_input_aware(
    base: AttentionWeights,
    adapters: list[LoraAdapter],
    pairs,
    batch,
    stats: AwareStats | None = None,
    shifts=None,
):
    """Negated mean orthogonality score over pairs and batch items.

    Degenerate pairs contribute zero but still count in the denominator, and
    are tallied in ``stats.skipped``. ``shifts`` may carry precomputed
    ``shifts[item][adapter]`` values.
    """
    _check_pairs(pairs, len(adapters))
    if not batch:
        raise ContractError("batch is empty")
    stats = AwareStats() if stats is None else stats
    if shifts is None:
        shifts = [[induced_shift(base, a, X, Z) for a in adapters] for X, Z in batch]
    terms = []
    for item in shifts:
        for i, j in pairs:
            try:
                s = orthogonality_score(item[i], item[j])
            except DegenerateShiftError:
                stats.skipped += 1
                continue
            stats.evaluated += 1
            stats.scores.append(float(ad.value(s)[0, 0]) if isinstance(s, ad.Var) else s)
            terms.append(s if isinstance(s, ad.Var) else np.array([[s]]))
    n = len(pairs) * len(shifts)
    if not terms:
        return np.zeros((1, 1))
    return ad.scale(ad.total(terms), -1.0 / n)


def _zero_delta(base: AttentionWeights, proj: str):
    return np.zeros_like(base.weight(proj))


def build_M(base: AttentionWeights, adapter: LoraAdapter):
    """``W_o dW_v + dW_o W_v + dW_o dW_v``; projections not adapted count as zero."""
    dv = delta_w(adapter, "v") if "v" in adapter.factors else _zero_delta(base, "v")
    do = delta_w(adapter, "o") if "o" in adapter.factors else _zero_delta(base, "o")
    if ad.value(dv).shape != base.w_v.shape or ad.value(do).shape != base.w_o.shape:
        raise DimensionError("adapter v/o deltas do not match base shapes")
    return ad.total([ad.matmul(base.w_o, dv), ad.matmul(do, base.w_v), ad.matmul(do, dv)])


def skew_residual(M_i, M_j):
    """Symmetric part of ``M_i^T M_j``; zero iff that product is skew-symmetric."""
    a, b = ad.value(M_i), ad.value(M_j)
    if a.shape != b.shape:
        raise DimensionError(f"M shapes {a.shape} and {b.shape} differ")
    p = ad.matmul(ad.transpose(M_i), M_j)
    return ad.scale(ad.add(p, ad.transpose(p)), 0.5)


def loss_input_agnostic(base: AttentionWeights, adapters: list[LoraAdapter], pairs, Ms=None):
    """Mean squared Frobenius norm of the skew residual over pairs (a penalty, >= 0)."""
    _check_pairs(pairs, len(adapters))
    if Ms is None:
        Ms = [build_M(base, a) for a in adapters]
    terms = []
    for i, j in pairs:
        r = skew_residual(Ms[i], Ms[j])
        terms.append(ad.frobenius_inner(r, r))
    return ad.scale(ad.total(terms), 1.0 / len(pairs))


def pbo_loss(adapters: list[LoraAdapter], pairs):
    """Mean ``||B_i^T B_j||_F^2`` over pairs and adapted projections."""
    _check_pairs(pairs, len(adapters))
    ranks = {a.rank for a in adapters}
    sets = {a.adapted_set for a in adapters}
    if len(ranks) != 1 or len(sets) != 1:
        raise ContractError("pbo_loss needs adapters with one rank and one adapted set")
    projs = sorted(next(iter(sets)))
    terms = []
    for i, j in pairs:
        for p in projs:
            g = ad.matmul(ad.transpose(adapters[i].factors[p][0]), adapters[j].factors[p][0])
            terms.append(ad.frobenius_inner(g, g))
    return ad.scale(ad.total(terms), 1.0 / len(terms))


@dataclass
class OracleReport:
    max_cosine: float
    residual_norm: float
    trials: int
    degenerate: bool

    @property
    def holds(self) -> bool:
        """The orthogonality guarantee, checked where it applies."""
        if self.degenerate or self.residual_norm > 1e-10:
            return True
        return self.max_cosine <= 1e-8


def _require_vo(adapter: LoraAdapter):
    touched = adapter.adapted_set & {"q", "k"}
    if touched:
        raise OracleAssumptionError(
            f"adapter for concept {adapter.concept} adapts {sorted(touched)}; only v and o are allowed"
        )


def orthogonality_oracle(
    base: AttentionWeights,
    adapter_i: LoraAdapter,
    adapter_j: LoraAdapter,
    trials: int = 1000,
    seed: int = 0,
    max_tokens: int = 6,
    max_queries: int = 4,
) -> OracleReport:
    """Empirical check of output orthogonality over random token/query draws.

    Reports the worst normalised inner product between the two adapters'
    shifts next to the Frobenius norm of the skew residual of their M maps.
    """
    _require_vo(adapter_i)
    _require_vo(adapter_j)
    if trials < 1:
        raise ContractError("trials must be positive")
    residual = float(np.linalg.norm(skew_residual(build_M(base, adapter_i), build_M(base, adapter_j))))
    rng = np.random.default_rng(seed)
    worst = 0.0
    degenerate = False
    d_x, d_z = base.w_k.shape[1], base.w_q.shape[1]
    # v/o-only adapters leave q and k alone, so the attention map is shared
    # and each output is the full adapted value/output path applied to it.
    value_out = [
        ad.value(effective_weight(base, adapters, "o")) @ ad.value(effective_weight(base, adapters, "v"))
        for adapters in ((), (adapter_i,), (adapter_j,))
    ]
    for _ in range(trials):
        m = int(rng.integers(1, max_tokens + 1))
        n = int(rng.integers(1, max_queries + 1))
        X = rng.standard_normal((d_x, m)) * rng.uniform(0.1, 10.0)
        Z = rng.standard_normal((d_z, n)) * rng.uniform(0.1, 10.0)
        attn = ad.value(attention_map(base.w_q, base.w_k, X, Z, base.d_e))
        out_base, out_i, out_j = (w @ X @ attn for w in value_out)
        a, b = out_i - out_base, out_j - out_base
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < EPS_NORM or nb < EPS_NORM:
            degenerate = True
            continue
        worst = max(worst, abs(float(np.sum(a * b))) / (na * nb + EPS_NORM))
    return OracleReport(float(worst), residual, trials, degenerate)


def crosstalk_heatmap(base: AttentionWeights, adapters: list[LoraAdapter], batch) -> np.ndarray:
    """Mean pairwise cosine (``1 - OS``) of induced shifts over ``batch``.

    Entries with no non-degenerate batch item are NaN.
    """
    if len(adapters) < 2:
        raise ContractError("need at least two adapters")
    n = len(adapters)
    shifts = [[induced_shift(base, a, X, Z) for a in adapters] for X, Z in batch]
    out = np.full((n, n), np.nan)
    np.fill_diagonal(out, 1.0)
    for i, j in itertools.combinations(range(n), 2):
        vals = []
        for item in shifts:
            try:
                vals.append(1.0 - orthogonality_score(item[i], item[j]))
            except DegenerateShiftError:
                pass
        if vals:
            out[i, j] = out[j, i] = float(np.mean(vals))
    return out


def heatmap_to_csv(matrix: np.ndarray, concept_ids) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["concept", *concept_ids])
    for cid, row in zip(concept_ids, matrix):
        w.writerow([cid, *("" if np.isnan(v) else repr(float(v)) for v in row)])
    return buf.getvalue()


def vo_attention_map(base: AttentionWeights, X, Z):
    """The base attention map, which v/o-only adapters leave unchanged."""
    return attention_map(base.w_q, base.w_k, X, Z, base.d_e)


def _vo_adapter(concept: int, base: AttentionWeights, b_v, b_o, rng, rank: int) -> LoraAdapter:
    a_v = rng.standard_normal((rank, base.w_v.shape[1])) / np.sqrt(base.w_v.shape[1])
    a_o = rng.standard_normal((rank, base.w_o.shape[1])) / np.sqrt(base.w_o.shape[1])
    return LoraAdapter(concept, rank, 1.0, {"v": (b_v, a_v), "o": (b_o, a_o)})


def skew_pair(base: AttentionWeights, rng: np.random.Generator, rank: int = 4):
    """Two v-only adapters whose ``M_i^T M_j`` is skew-symmetric and nonzero.

    With orthonormal ``U``, ``V`` (d x rank) and skew ``K``, the adapters get
    ``dW_v = W_o^-1 U V^T`` and ``dW_v = W_o^-1 U K V^T``, so ``M_i = U V^T``,
    ``M_j = U K V^T`` and ``M_i^T M_j = V K V^T``. Their ``o`` factors are
    present but have zero ``B``.
    """
    d_out, d_v = base.w_o.shape
    d_x = base.w_v.shape[1]
    if d_out != d_v:
        raise ContractError("construction needs a square output projection")
    if rank > min(d_out, d_x):
        raise ContractError(f"rank {rank} exceeds the projection size")
    u, _ = np.linalg.qr(rng.standard_normal((d_out, rank)))
    v, _ = np.linalg.qr(rng.standard_normal((d_x, rank)))
    g = rng.standard_normal((rank, rank))
    k = g - g.T
    pull = np.linalg.solve(base.w_o, u)
    pair = []
    for concept, b_v in enumerate((pull, pull @ k)):
        a_o = rng.standard_normal((rank, d_v)) / np.sqrt(d_v)
        pair.append(LoraAdapter(concept, rank, 1.0, {"v": (b_v, v.T.copy()), "o": (np.zeros((d_out, rank)), a_o)}))
    return tuple(pair)


def random_vo_pair(base: AttentionWeights, rng: np.random.Generator, rank: int = 4):
    """Two v/o adapters with independent Gaussian factors."""
    d_out, d_v = base.w_o.shape
    return tuple(
        _vo_adapter(
            k, base, rng.standard_normal((d_v, rank)) / np.sqrt(rank),
            rng.standard_normal((d_out, rank)) / np.sqrt(rank), rng, rank,
        )
        for k in range(2)
    )
