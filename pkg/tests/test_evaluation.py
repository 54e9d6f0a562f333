import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from lora_erasure.attention import LoraAdapter
from lora_erasure.diffusion import NEUTRAL, ConceptWorld, make_world
from lora_erasure.errors import (
    ContractError,
    DuplicateConceptError,
    HierarchyViolationError,
    TaxonomyParseError,
)
from lora_erasure.evaluation import (
    REPORT_COLUMNS,
    ExperimentSpec,
    MethodSpec,
    MetricsReport,
    acc_ee,
    acc_up,
    classify,
    concept_scope,
    covers_prompt,
    distribution_distance,
    harmonic_accuracy,
    load_taxonomy,
    make_conjunction_targets,
    reports_to_csv,
    run_experiment,
    synthetic_taxonomy,
    tertile_buckets,
    tertile_split,
    top1,
)

TOY_CSV = """brand,series,character
Acme,Rockets,Wile
Acme,Rockets,Runner
Acme,Hunters,Elmer
Acme,Hunters,Bugs
Bolt,Sparks,Zap
Bolt,Sparks,Volt
"""


def w2_oracle(a, b):
    """Gaussian 2-Wasserstein distance through a general matrix square root."""
    ma, mb = a.mean(axis=1), b.mean(axis=1)
    sa, sb = np.cov(a), np.cov(b)
    root = sqrtm(sa)
    cross = np.real(sqrtm(root @ sb @ root))
    return math.sqrt(max(np.sum((ma - mb) ** 2) + np.trace(sa + sb - 2 * cross), 0.0))


# ------------------------------------------------------------- classifier


def test_classify_mode_centers_and_origin():
    w = make_world()
    for c in range(8):
        assert classify(w, w.centers[c])[0][0] == c
    assert classify(w, [0.0, 0.0])[0][0] == NEUTRAL
    ranked = classify(w, [0.1, 0.2])
    assert len(ranked) == 9
    assert [s for _, s in ranked] == sorted((s for _, s in ranked), reverse=True)


def test_classify_tie_goes_to_lower_id():
    centers = np.array([[10.0, 0.0], [0.0, 10.0], [-1.0, 0.0], [0.0, -10.0], [-10.0, 0.0], [1.0, 0.0]])
    w = ConceptWorld(centers, np.full(6, 0.3), np.array([0.0, 9.0]), 0.5)
    assert classify(w, [0.0, 0.0])[0][0] == 2
    assert top1(w, np.zeros((2, 1)))[0] == 2


# ---------------------------------------------------------------- metrics


def test_acc_ee_examples():
    assert acc_ee([8] * 5, [{0, 1}] * 5) == 0.0
    assert acc_ee([0, 1, 1], [{0, 1}] * 3) == 1.0
    assert acc_ee([0, 0, 0] + [8] * 7, [{0}] * 10) == pytest.approx(0.3)
    with pytest.raises(ContractError):
        acc_ee([0], [])


def test_acc_up_examples():
    assert acc_up([[1], [8], [8], [3]], [[1], [2], [2], [2]]) == 0.25
    assert acc_up([[8]] * 4, [[1], [2], [3], [4]]) == 0.0


def test_covers_prompt_counts_and_ties():
    assert covers_prompt([1, 1, 2, 3, 2], [1, 2])
    assert not covers_prompt([1, 1, 1, 2, 3, 3], [1, 2])
    assert covers_prompt([2, 1], [1])
    assert not covers_prompt([2, 1], [2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=30), st.randoms())
def test_metrics_invariant_to_sample_order(pairs, rnd):
    labels = [a for a, _ in pairs]
    sets = [{b} for _, b in pairs]
    images = [[a] for a, _ in pairs]
    prompts = [[b] for _, b in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert acc_ee(labels, sets) == acc_ee([labels[i] for i in order], [sets[i] for i in order])
    assert acc_up(images, prompts) == acc_up([images[i] for i in order], [prompts[i] for i in order])


def test_harmonic_examples():
    assert harmonic_accuracy(0.02, 0.705) == pytest.approx(0.8201, abs=1e-4)
    assert harmonic_accuracy(0.075, 0.6713) == pytest.approx(0.7780, abs=1e-4)
    assert harmonic_accuracy(0.0, 1.0) == 1.0
    assert harmonic_accuracy(1.0, 0.5) == 0.0
    assert harmonic_accuracy(0.5, 0.0) == 0.0
    with pytest.raises(ContractError):
        harmonic_accuracy(1.2, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.999), st.floats(0.001, 1))
def test_harmonic_lies_between_its_parts(ee, up):
    h = harmonic_accuracy(ee, up)
    assert min(1 - ee, up) - 1e-12 <= h <= max(1 - ee, up) + 1e-12


def test_report_harmonic_consistency():
    r = MetricsReport("m", "p", 5, 1, 0.1, 0.8, harmonic_accuracy(0.1, 0.8), 0.0, 0)
    assert abs(r.acc_harmonic - 2 / (1 / 0.9 + 1 / 0.8)) <= 1e-12
    text = reports_to_csv([r])
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)


# ------------------------------------------------------------ W2 distance


def test_w2_identical_sets_is_zero():
    x = np.random.default_rng(0).standard_normal((2, 50))
    assert distribution_distance(x, x.copy()) == 0.0


def test_w2_mean_offset():
    x = np.random.default_rng(1).standard_normal((2, 400))
    assert distribution_distance(x, x + np.array([[3.0], [4.0]])) == pytest.approx(5.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_w2_matches_sqrtm_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2)) @ rng.standard_normal((2, 40)) + rng.standard_normal((2, 1))
    b = rng.standard_normal((2, 2)) @ rng.standard_normal((2, 30))
    d = distribution_distance(a, b)
    assert abs(d - w2_oracle(a, b)) <= 1e-8
    assert abs(d - distribution_distance(b, a)) <= 1e-12


def test_w2_needs_two_points():
    with pytest.raises(ContractError):
        distribution_distance(np.zeros((2, 1)), np.zeros((2, 5)))


# --------------------------------------------------------------- taxonomy


def test_toy_taxonomy_scopes():
    tax = load_taxonomy(TOY_CSV)
    assert tax.brands == ["Acme", "Bolt"]
    assert tax.series == ["Rockets", "Hunters", "Sparks"]
    assert concept_scope(tax, "Acme") == 4 and concept_scope(tax, "Bolt") == 2
    assert concept_scope(tax, "Hunters") == 2 and concept_scope(tax, "Zap") == 1
    assert tax.members("Sparks") == [4, 5]
    assert concept_scope(tax, "Acme") == sum(concept_scope(tax, s) for s in ("Rockets", "Hunters"))
    assert load_taxonomy(tax.to_csv()) == tax
    with pytest.raises(KeyError):
        concept_scope(tax, "Nobody")


@pytest.mark.parametrize(
    "text, error, line",
    [
        ("", TaxonomyParseError, 1),
        ("brand,series\nA,S\n", TaxonomyParseError, 1),
        ("brand,series,character\nA,S\n", TaxonomyParseError, 2),
        ("brand,series,character\nA,S,x\nA,,y\n", TaxonomyParseError, 3),
        ("brand,series,character\n", TaxonomyParseError, 2),
        ("brand,series,character\nA,S,x\nA,S,x\n", DuplicateConceptError, None),
        ("brand,series,character\nA,S,x\nA,T,x\n", HierarchyViolationError, None),
        ("brand,series,character\nA,S,x\nB,S,y\n", HierarchyViolationError, None),
    ],
)
def test_malformed_taxonomies(text, error, line):
    with pytest.raises(error) as err:
        load_taxonomy(text)
    if line is not None:
        assert err.value.line == line


def test_synthetic_taxonomy_shape():
    tax = synthetic_taxonomy(27, 73, 300, seed=0)
    assert (len(tax.brands), len(tax.series), len(tax.characters)) == (27, 73, 300)
    assert load_taxonomy(tax.to_csv()) == tax
    sizes = [len(v) for v in tertile_buckets(tax, "series").values()]
    assert sizes == [25, 24, 24]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 5), st.integers(0, 20), st.integers(0, 1000))
def test_synthetic_taxonomy_round_trip(b, extra_s, extra_c, seed):
    tax = synthetic_taxonomy(b, b + extra_s, b + extra_s + extra_c, seed)
    assert load_taxonomy(tax.to_csv()) == tax


# -------------------------------------------------------- protocol helpers


def test_conjunction_targets():
    assert make_conjunction_targets(range(10), 2) == [{0, 1}, {5, 6}]
    assert make_conjunction_targets(range(12), 5) == [{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}]
    for bad in (1, 6):
        with pytest.raises(ContractError):
            make_conjunction_targets(range(10), bad)
    with pytest.raises(ContractError):
        make_conjunction_targets(range(4), 2)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(), min_size=5, max_size=40, unique=True), st.integers(2, 5), st.integers(2, 5))
def test_conjunction_targets_nest(classes, a, b):
    small, large = sorted((a, b))
    for s, l in zip(make_conjunction_targets(classes, small), make_conjunction_targets(classes, large)):
        assert s <= l
    assert len(make_conjunction_targets(classes, a)) == len(classes) // 5


def test_tertile_examples():
    assert tertile_split([1, 2, 3]) == [[0], [1], [2]]
    assert tertile_split([4, 4, 4, 4]) == [[0, 1], [2], [3]]
    assert [len(p) for p in tertile_split(list(range(73)))] == [25, 24, 24]
    with pytest.raises(ContractError):
        tertile_split([1, 2])
    with pytest.raises(ContractError):
        tertile_buckets(load_taxonomy(TOY_CSV), "brand")


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=3, max_size=60))
def test_tertiles_order_stable(scopes):
    parts = tertile_split(scopes)
    flat = [i for p in parts for i in p]
    assert sorted(flat) == list(range(len(scopes)))
    assert flat == sorted(range(len(scopes)), key=lambda i: (scopes[i], i))
    assert max(map(len, parts)) - min(map(len, parts)) <= 1
    assert tertile_split(list(scopes)) == parts


# ------------------------------------------------------------ experiments


def test_experiment_spec_validation(small_denoiser):
    w = make_world(4)
    with pytest.raises(ContractError):
        run_experiment(w, small_denoiser, ExperimentSpec("scope-scaling", []))
    with pytest.raises(ContractError):
        run_experiment(w, small_denoiser, ExperimentSpec("teleport", [MethodSpec("m", {})]))
    with pytest.raises(ContractError):
        run_experiment(w, small_denoiser, ExperimentSpec("hierarchy", [MethodSpec("m", {})]))


def test_failing_cell_is_recorded_and_others_continue(small_denoiser):
    """Concept 1 has no adapter, so its cell fails while the rest still run."""
    w = make_world(4)
    ads = {c: LoraAdapter.init(c, small_denoiser.attention(), np.random.default_rng(c), rank=2) for c in (0, 2, 3)}
    spec = ExperimentSpec("scope-scaling", [MethodSpec("m", ads)], scope_sizes=(4,), samples=4, steps=3)
    reports = run_experiment(w, small_denoiser, spec)
    assert [r.target for r in reports] == ["0", "1", "2", "3"]
    assert reports[1].error and "ContractError" in reports[1].error
    assert all(r.error is None for i, r in enumerate(reports) if i != 1)
    assert math.isnan(reports[1].acc_ee)


def test_conjunction_and_hierarchy_rows(small_denoiser):
    w = make_world(5)
    den = small_denoiser.__class__.create(5, np.random.default_rng(0), T=20, hidden=8).freeze()
    ads = {c: LoraAdapter.init(c, den.attention(), np.random.default_rng(c), rank=2) for c in range(5)}
    conj = run_experiment(w, den, ExperimentSpec("conjunction", [MethodSpec("m", ads)], samples=3, steps=2))
    assert [(r.subset_size, r.target) for r in conj] == [(2, "0+1"), (3, "0+1+2"), (4, "0+1+2+3"), (5, "0+1+2+3+4")]
    assert conj[-1].error is not None
    tax = synthetic_taxonomy(3, 3, 5, seed=1)
    hier = run_experiment(w, den, ExperimentSpec("hierarchy", [MethodSpec("m", ads)], samples=3, steps=2, taxonomy=tax))
    protocols = [r.protocol for r in hier]
    for level in ("series", "brand"):
        assert [f"hierarchy-{level}-{b}" for b in ("small", "medium", "large")] == [
            p for p in dict.fromkeys(protocols) if p.startswith(f"hierarchy-{level}-")
        ]
