import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora_erasure import autodiff as ad
from lora_erasure.attention import AttentionWeights, LoraAdapter, induced_shift
from lora_erasure.errors import (
    ContractError,
    DegenerateShiftError,
    DimensionError,
    OracleAssumptionError,
)
from lora_erasure.orthogonality import (
    AwareStats,
    build_M,
    crosstalk_heatmap,
    heatmap_to_csv,
    loss_input_agnostic,
    loss_input_aware,
    orthogonality_score,
    pbo_loss,
    random_vo_pair,
    sample_pairs,
    skew_pair,
    skew_residual,
    orthogonality_oracle,
)

D = 6


def make_base(seed=0):
    return AttentionWeights.random(np.random.default_rng(seed), D, D, D, D, D)


def batch(seed=0, items=3):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal((D, 3)), rng.standard_normal((D, 2))) for _ in range(items)]


def v_adapter(concept, b, a, scale=1.0):
    return LoraAdapter(concept, b.shape[1], scale, {"v": (b, a)})


def row_writer(base, row, rng):
    """v-only adapter whose shifts live in a single output row."""
    e = np.zeros((D, 1))
    e[row] = 1.0
    return v_adapter(row, np.linalg.solve(base.w_o, e), rng.standard_normal((1, D)))


# ------------------------------------------------------- orthogonality score


def test_score_aligned_anti_aligned_orthogonal():
    a = np.random.default_rng(0).standard_normal((3, 2))
    assert orthogonality_score(a, a) == pytest.approx(0.0, abs=1e-15)
    assert orthogonality_score(a, -a) == pytest.approx(2.0, abs=1e-15)
    assert orthogonality_score(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 1.0


def test_score_degenerate_and_shape_errors():
    with pytest.raises(DegenerateShiftError):
        orthogonality_score(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        orthogonality_score(np.ones((2, 2)), np.ones((2, 3)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_score_range_symmetry_and_scale_invariance(seed, s, t):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    os_ = orthogonality_score(a, b)
    assert 0.0 <= os_ <= 2.0
    assert orthogonality_score(b, a) == pytest.approx(os_, abs=1e-12)
    assert orthogonality_score(s * a, t * b) == pytest.approx(os_, abs=1e-12)


# ------------------------------------------------------- input-aware loss


def test_aware_loss_identical_adapters_is_zero():
    base = make_base()
    rng = np.random.default_rng(1)
    b, a = rng.standard_normal((D, 2)), rng.standard_normal((2, D))
    ads = [v_adapter(0, b, a), v_adapter(1, b.copy(), a.copy())]
    assert float(loss_input_aware(base, ads, [(0, 1)], batch())[0, 0]) == pytest.approx(0.0, abs=1e-12)


def test_aware_loss_orthogonal_output_rows_is_minus_one():
    base = make_base()
    rng = np.random.default_rng(2)
    ads = [row_writer(base, 0, rng), row_writer(base, 1, rng)]
    for X, Z in batch():
        assert orthogonality_score(induced_shift(base, ads[0], X, Z), induced_shift(base, ads[1], X, Z)) == pytest.approx(1.0, abs=1e-12)
    assert float(loss_input_aware(base, ads, [(0, 1)], batch())[0, 0]) == pytest.approx(-1.0, abs=1e-12)


def test_aware_loss_anti_aligned_is_minus_two():
    base = make_base()
    rng = np.random.default_rng(3)
    b, a = rng.standard_normal((D, 2)), rng.standard_normal((2, D))
    ads = [v_adapter(0, b, a), v_adapter(1, -b, a)]
    assert float(loss_input_aware(base, ads, [(0, 1)], batch())[0, 0]) == pytest.approx(-2.0, abs=1e-12)


def test_aware_loss_counts_degenerate_pairs():
    base = make_base()
    rng = np.random.default_rng(4)
    zero = LoraAdapter.init(0, base, rng, rank=2)
    live = v_adapter(1, rng.standard_normal((D, 2)), rng.standard_normal((2, D)))
    stats = AwareStats()
    loss = loss_input_aware(base, [zero, live], [(0, 1)], batch(), stats)
    assert float(ad.value(loss)[0, 0]) == 0.0
    assert stats.skipped == 3 and stats.evaluated == 0


def test_aware_loss_contract_errors():
    base = make_base()
    ads = [LoraAdapter.init(c, base, np.random.default_rng(c), rank=2) for c in range(2)]
    with pytest.raises(ContractError):
        loss_input_aware(base, ads, [], batch())
    with pytest.raises(ContractError):
        loss_input_aware(base, ads, [(0, 0)], batch())
    with pytest.raises(ContractError):
        loss_input_aware(base, ads, [(0, 1)], [])


# ------------------------------------------------------------------ build_M


def test_build_M_zero_adapter():
    base = make_base()
    a = LoraAdapter.init(0, base, np.random.default_rng(0), rank=2)
    np.testing.assert_array_equal(build_M(base, a), np.zeros((D, D)))


def test_build_M_without_output_delta():
    base = make_base()
    rng = np.random.default_rng(5)
    a = v_adapter(0, rng.standard_normal((D, 2)), rng.standard_normal((2, D)), 0.7)
    np.testing.assert_allclose(build_M(base, a), base.w_o @ (0.7 * a.factors["v"][0] @ a.factors["v"][1]), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_build_M_expansion_identity(seed):
    base = make_base(seed % 5)
    rng = np.random.default_rng(seed)
    f = {p: (rng.standard_normal((D, 2)), rng.standard_normal((2, D))) for p in "vo"}
    a = LoraAdapter(0, 2, 0.5, f)
    dv, do = 0.5 * f["v"][0] @ f["v"][1], 0.5 * f["o"][0] @ f["o"][1]
    expected = (base.w_o + do) @ (base.w_v + dv) - base.w_o @ base.w_v
    np.testing.assert_allclose(build_M(base, a), expected, atol=1e-12)


# ------------------------------------------------------------ skew residual


def test_skew_residual_examples():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((D, D))
    np.testing.assert_array_equal(skew_residual(m, np.zeros((D, D))), np.zeros((D, D)))
    np.testing.assert_allclose(skew_residual(m, m), m.T @ m, atol=1e-12)
    q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    g = rng.standard_normal((D, D))
    s = g - g.T
    np.testing.assert_allclose(skew_residual(q, q @ s), np.zeros((D, D)), atol=1e-12)
    with pytest.raises(DimensionError):
        skew_residual(m, np.ones((D, D + 1)))


# --------------------------------------------------------- input-agnostic loss


def test_agnostic_loss_examples():
    base = make_base()
    zeros = [LoraAdapter.init(c, base, np.random.default_rng(c), rank=2) for c in range(3)]
    assert float(loss_input_agnostic(base, zeros, [(0, 1), (1, 2)])[0, 0]) == 0.0
    pair = skew_pair(base, np.random.default_rng(7))
    assert float(loss_input_agnostic(base, list(pair), [(0, 1)])[0, 0]) <= 1e-24
    identity = [np.eye(D), np.eye(D)]
    assert float(loss_input_agnostic(base, zeros[:2], [(0, 1)], Ms=identity)[0, 0]) == pytest.approx(D)
    with pytest.raises(ContractError):
        loss_input_agnostic(base, zeros, [])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_agnostic_loss_zero_iff_skew(seed):
    base = make_base(seed % 3)
    rng = np.random.default_rng(seed)
    skew = list(skew_pair(base, rng, rank=3))
    rand = list(random_vo_pair(base, rng, rank=3))
    assert float(loss_input_agnostic(base, skew, [(0, 1)])[0, 0]) <= 1e-20
    assert float(loss_input_agnostic(base, rand, [(0, 1)])[0, 0]) > 1e-6


def test_skew_pair_product_is_nonzero_skew():
    base = make_base()
    a, b = skew_pair(base, np.random.default_rng(8), rank=4)
    p = ad.value(build_M(base, a)).T @ ad.value(build_M(base, b))
    assert np.linalg.norm(p) > 1e-3
    np.testing.assert_allclose(p, -p.T, atol=1e-12)


# ------------ orthogonality oracle


def test_orthogonality_oracle_on_skew_pair():
    base = make_base()
    a, b = skew_pair(base, np.random.default_rng(9))
    r = orthogonality_oracle(base, a, b, trials=1000, seed=1)
    assert r.residual_norm <= 1e-10
    assert r.max_cosine <= 1e-8
    assert r.holds and not r.degenerate


def test_orthogonality_oracle_flags_zero_adapter():
    base = make_base()
    a, _ = random_vo_pair(base, np.random.default_rng(10))
    zero = LoraAdapter.init(1, base, np.random.default_rng(0), rank=2)
    assert orthogonality_oracle(base, a, zero, trials=10).degenerate


def test_orthogonality_oracle_random_pairs_not_orthogonal():
    base = make_base()
    rng = np.random.default_rng(11)
    reports = [orthogonality_oracle(base, *random_vo_pair(base, rng), trials=200, seed=k) for k in range(10)]
    assert all(r.residual_norm > 0 for r in reports)
    assert np.median([r.max_cosine for r in reports]) > 1e-3


def test_orthogonality_oracle_rejects_query_key_adapters():
    base = make_base()
    a, _ = random_vo_pair(base, np.random.default_rng(12))
    qk = LoraAdapter.init(1, base, np.random.default_rng(0), rank=2, adapted="qv")
    with pytest.raises(OracleAssumptionError):
        orthogonality_oracle(base, a, qk)


# ------------------------------------------------------------------- PBO


def test_pbo_examples():
    rng = np.random.default_rng(13)
    b = rng.standard_normal((D, 2))
    a = rng.standard_normal((2, D))
    mk = lambda c, b_: v_adapter(c, b_, a)
    assert float(pbo_loss([mk(0, b), mk(1, np.zeros((D, 2)))], [(0, 1)])[0, 0]) == 0.0
    top, bottom = b.copy(), b.copy()
    top[3:], bottom[:3] = 0.0, 0.0
    assert float(pbo_loss([mk(0, top), mk(1, bottom)], [(0, 1)])[0, 0]) == 0.0
    q, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    assert float(pbo_loss([mk(0, q), mk(1, q.copy())], [(0, 1)])[0, 0]) == pytest.approx(2.0, abs=1e-12)


def test_pbo_rank_mismatch():
    rng = np.random.default_rng(14)
    a = v_adapter(0, rng.standard_normal((D, 2)), rng.standard_normal((2, D)))
    b = v_adapter(1, rng.standard_normal((D, 3)), rng.standard_normal((3, D)))
    with pytest.raises(ContractError):
        pbo_loss([a, b], [(0, 1)])


# -------------------------------------------------------------- heatmap


def test_heatmap_identical_and_orthogonal():
    base = make_base()
    rng = np.random.default_rng(15)
    b, a = rng.standard_normal((D, 2)), rng.standard_normal((2, D))
    same = crosstalk_heatmap(base, [v_adapter(0, b, a), v_adapter(1, b, a), v_adapter(2, b, a)], batch())
    np.testing.assert_allclose(same, np.ones((3, 3)), atol=1e-12)
    ortho = crosstalk_heatmap(base, [row_writer(base, 0, rng), row_writer(base, 1, rng)], batch())
    assert ortho[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert ortho[0, 0] == ortho[1, 1] == 1.0


def test_heatmap_degenerate_entries_missing():
    base = make_base()
    rng = np.random.default_rng(16)
    zero = LoraAdapter.init(0, base, rng, rank=2)
    live = v_adapter(1, rng.standard_normal((D, 2)), rng.standard_normal((2, D)))
    m = crosstalk_heatmap(base, [zero, live], batch())
    assert np.isnan(m[0, 1])
    csv_text = heatmap_to_csv(m, [4, 7])
    assert csv_text.splitlines() == ["concept,4,7", "4,1.0,", "7,,1.0"]
    with pytest.raises(ContractError):
        crosstalk_heatmap(base, [zero], batch())


# ----------------------------------------------------------- pair sampling


def test_sample_pairs_exhaustive_and_subsampled():
    assert sample_pairs(4) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    rng = np.random.default_rng(0)
    pairs = sample_pairs(20, rng)
    assert len(pairs) == 50 == len(set(pairs))
    assert all(i < j for i, j in pairs)
    with pytest.raises(ContractError):
        sample_pairs(20)
