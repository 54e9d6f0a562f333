"""Metrics, taxonomy handling and the erasure evaluation protocols."""

from __future__ import annotations

import csv
import io
import math
import traceback
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attention import LoraAdapter
from .composition import ErasureRequest, erase_sample_batch, merge_adapters
from .diffusion import NEUTRAL, ConceptWorld, Denoiser, ddim_sample_batch, initial_noise
from .errors import (
    ContractError,
    DuplicateConceptError,
    HierarchyViolationError,
    TaxonomyParseError,
)
from .seeding import derive_seed, generator

# ---------------------------------------------------------------- classifier


def log_likelihoods(world: ConceptWorld, points: np.ndarray) -> np.ndarray:
    """Isotropic Gaussian log-density of each point (columns) under each mode.

    Rows are concepts ``0..n-1`` followed by the neutral mode at row ``n``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    centers = np.vstack([world.centers, world.neutral_center])
    sigmas = np.append(world.sigmas, world.neutral_sigma)
    sq = ((pts[None, :, :] - centers[:, :, None]) ** 2).sum(axis=1)
    return -sq / (2 * sigmas[:, None] ** 2) - 2 * np.log(sigmas)[:, None] - math.log(2 * math.pi)


def top1(world: ConceptWorld, points: np.ndarray) -> np.ndarray:
    """Top-1 label per point; the neutral mode is label ``n``. Ties go to the lower id."""
    return np.argmax(log_likelihoods(world, points), axis=0)


def classify(world: ConceptWorld, sample) -> list:
    """All modes ranked by descending log-likelihood of one 2-D sample."""
    ll = log_likelihoods(world, np.asarray(sample, dtype=np.float64).reshape(2))[:, 0]
    n = world.n_concepts
    order = sorted(range(n + 1), key=lambda i: (-ll[i], i))
    return [(NEUTRAL if i == n else i, float(ll[i])) for i in order]


# ---------------------------------------------------------------- metrics


def acc_ee(top1_labels: Sequence, target_sets: Sequence) -> float:
    """Share of samples whose top-1 label lies in that sample's target set."""
    if len(top1_labels) != len(target_sets):
        raise ContractError("one target set per sample is required")
    if not len(top1_labels):
        raise ContractError("no samples")
    hits = sum(int(lab) in set(ts) for lab, ts in zip(top1_labels, target_sets))
    return hits / len(top1_labels)


def covers_prompt(labels: Sequence, prompted: Sequence) -> bool:
    """Whether the ``N`` most frequent labels of an image include all ``N`` prompted concepts.

    Count ties are broken towards the lower label, matching :func:`classify`.
    """
    want = set(int(p) for p in prompted)
    counts: dict = {}
    for lab in labels:
        counts[int(lab)] = counts.get(int(lab), 0) + 1
    ranked = sorted(counts, key=lambda k: (-counts[k], k))[: len(want)]
    return want <= set(ranked)


def acc_up(images: Sequence, prompted: Sequence) -> float:
    """Share of non-target images that keep every prompted concept.

    Each image is a list of top-1 labels; with one-point images and single
    prompts this is plain top-1 agreement.
    """
    if len(images) != len(prompted):
        raise ContractError("one prompt per image is required")
    if not len(images):
        raise ContractError("no images")
    return sum(covers_prompt(im, p) for im, p in zip(images, prompted)) / len(images)


def harmonic_accuracy(acc_ee: float, acc_up: float) -> float:
    """``2 / (1/(1 - EE) + 1/UP)``; 0 when either side is fully degenerate."""
    for name, v in (("acc_ee", acc_ee), ("acc_up", acc_up)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"{name}={v} is outside [0, 1]")
    if acc_ee >= 1.0 or acc_up <= 0.0:
        return 0.0
    return 2.0 / (1.0 / (1.0 - acc_ee) + 1.0 / acc_up)


def gaussian_fit(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != 2:
        raise ContractError(f"expected 2 x n samples, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ContractError("need at least two samples to fit a covariance")
    return x.mean(axis=1), np.cov(x)


def distribution_distance(samples_a, samples_b) -> float:
    """2-Wasserstein distance between Gaussian fits of two 2-D point sets.

    For 2x2 PSD ``P``, ``tr sqrt(P) = sqrt(tr P + 2 sqrt(det P))``; with
    ``P = S_a^1/2 S_b S_a^1/2`` this needs only ``tr(S_a S_b)`` and the
    determinants, so no matrix square root is taken.
    """
    ma, sa = gaussian_fit(samples_a)
    mb, sb = gaussian_fit(samples_b)
    if np.array_equal(ma, mb) and np.array_equal(sa, sb):
        return 0.0
    det = max(np.linalg.det(sa), 0.0) * max(np.linalg.det(sb), 0.0)
    cross = math.sqrt(max(np.trace(sa @ sb) + 2.0 * math.sqrt(det), 0.0))
    w2sq = float(np.sum((ma - mb) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * cross)
    return math.sqrt(max(w2sq, 0.0))


# ---------------------------------------------------------------- taxonomy

LEVELS = ("character", "series", "brand")
_HEADER = ["brand", "series", "character"]


@dataclass
class Taxonomy:
    """brand -> series -> character tree; characters are unit concepts with ids in file order."""

    characters: list = field(default_factory=list)
    series_of: dict = field(default_factory=dict)
    brand_of: dict = field(default_factory=dict)

    @property
    def series(self) -> list:
        return list(dict.fromkeys(self.series_of[c] for c in self.characters))

    @property
    def brands(self) -> list:
        return list(dict.fromkeys(self.brand_of[s] for s in self.series))

    def concept_id(self, character: str) -> int:
        return self.characters.index(character)

    def nodes(self, level: str) -> list:
        if level == "character":
            return list(self.characters)
        if level == "series":
            return self.series
        if level == "brand":
            return self.brands
        raise ContractError(f"unknown level {level!r}")

    def members(self, node, level: str | None = None) -> list[int]:
        """Concept ids of the characters beneath ``node``."""
        level = level or self.level_of(node)
        if level == "character":
            return [self.concept_id(node)]
        if level == "series":
            return [i for i, c in enumerate(self.characters) if self.series_of[c] == node]
        return [i for i, c in enumerate(self.characters) if self.brand_of[self.series_of[c]] == node]

    def level_of(self, node) -> str:
        for level in LEVELS:
            if node in self.nodes(level):
                return level
        raise KeyError(f"unknown taxonomy node {node!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_HEADER)
        for c in self.characters:
            s = self.series_of[c]
            w.writerow([self.brand_of[s], s, c])
        return buf.getvalue()


def load_taxonomy(csv_text: str) -> Taxonomy:
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows or not any(f.strip() for f in rows[0]):
        raise TaxonomyParseError("empty taxonomy file", 1)
    if [f.strip().lower() for f in rows[0]] != _HEADER:
        raise TaxonomyParseError(f"header must be {','.join(_HEADER)}", 1)
    tax = Taxonomy()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != 3 or any(not f.strip() for f in row):
            raise TaxonomyParseError("expected non-empty brand, series and character", lineno)
        brand, series, char = (f.strip() for f in row)
        if char in tax.series_of:
            if tax.series_of[char] != series:
                raise HierarchyViolationError(
                    f"line {lineno}: character {char!r} is under both {tax.series_of[char]!r} and {series!r}"
                )
            raise DuplicateConceptError(f"line {lineno}: character {char!r} is listed twice")
        if tax.brand_of.get(series, brand) != brand:
            raise HierarchyViolationError(
                f"line {lineno}: series {series!r} is under both {tax.brand_of[series]!r} and {brand!r}"
            )
        tax.characters.append(char)
        tax.series_of[char] = series
        tax.brand_of[series] = brand
    if not tax.characters:
        raise TaxonomyParseError("taxonomy has no characters", 2)
    return tax


def synthetic_taxonomy(n_brands: int, n_series: int, n_characters: int, seed: int = 0) -> Taxonomy:
    """Random tree with every brand owning a series and every series a character."""
    if not 1 <= n_brands <= n_series <= n_characters:
        raise ContractError("need 1 <= brands <= series <= characters")
    rng = generator(seed, "taxonomy")

    def assign(n_children, n_parents):
        owner = np.concatenate([np.arange(n_parents), rng.integers(0, n_parents, n_children - n_parents)])
        return np.sort(owner)

    brand_of_series = assign(n_series, n_brands)
    series_of_char = assign(n_characters, n_series)
    tax = Taxonomy()
    for s in range(n_series):
        tax.brand_of[f"series_{s}"] = f"brand_{brand_of_series[s]}"
    for c in range(n_characters):
        tax.characters.append(f"char_{c}")
        tax.series_of[f"char_{c}"] = f"series_{series_of_char[c]}"
    return tax


def concept_scope(tax: Taxonomy, node) -> int:
    """Number of unit concepts beneath ``node`` (1 for a character)."""
    return len(tax.members(node))


def make_conjunction_targets(classes: Sequence, n: int) -> list[frozenset]:
    """First ``n`` classes of each complete contiguous 5-tuple."""
    if not 2 <= n <= 5:
        raise ContractError(f"conjunction size {n} is outside 2..5")
    classes = list(classes)
    if len(classes) < 5:
        raise ContractError("need at least five classes")
    return [frozenset(classes[i : i + n]) for i in range(0, len(classes) - 4, 5)]


def tertile_split(scopes: Sequence[int]) -> list[list[int]]:
    """Indices split into small/medium/large thirds after a stable sort by scope."""
    n = len(scopes)
    if n < 3:
        raise ContractError("need at least three nodes to form tertiles")
    order = sorted(range(n), key=lambda i: (scopes[i], i))
    sizes = [n // 3 + (1 if k < n % 3 else 0) for k in range(3)]
    cuts = np.cumsum([0, *sizes])
    return [order[cuts[k] : cuts[k + 1]] for k in range(3)]


def tertile_buckets(tax: Taxonomy, level: str) -> dict:
    if level not in ("series", "brand"):
        raise ContractError("tertiles are defined for series or brand")
    nodes = tax.nodes(level)
    parts = tertile_split([concept_scope(tax, nd) for nd in nodes])
    return {name: [nodes[i] for i in part] for name, part in zip(("small", "medium", "large"), parts)}


# ---------------------------------------------------------------- experiments

REPORT_COLUMNS = (
    "method",
    "protocol",
    "scope_size",
    "subset_size",
    "acc_ee",
    "acc_up",
    "acc_harmonic",
    "w2",
    "seed",
    "target",
)


@dataclass
class MetricsReport:
    method: str
    protocol: str
    scope_size: int
    subset_size: int
    acc_ee: float
    acc_up: float
    acc_harmonic: float
    w2: float
    seed: int
    target: str = ""
    n_ee: int = 0
    n_up: int = 0
    per_concept: dict = field(default_factory=dict)
    error: str | None = None

    def row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()


@dataclass(frozen=True)
class MethodSpec:
    """``dynamic`` switches on only the prompt's subset adapters; ``static``
    merges every scope adapter into the weights for all prompts."""

    name: str
    adapters: Mapping[int, LoraAdapter]
    kind: str = "dynamic"


@dataclass
class ExperimentSpec:
    protocol: str
    methods: Sequence[MethodSpec]
    scope_sizes: Sequence[int] = (5, 8)
    subset_sizes: Sequence[int] = (2, 3, 4, 5)
    samples: int = 200
    points_per_concept: int = 4
    seed: int = 0
    guidance: float = 3.0
    steps: int = 50
    strategy: str = "composite"
    taxonomy: Taxonomy | None = None
    levels: Sequence[str] = ("series", "brand")

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.protocol!r}")
        if not self.methods:
            raise ContractError("experiment has no methods")
        if self.samples < 2:
            raise ContractError("need at least two samples per cell")
        if self.protocol == "hierarchy" and self.taxonomy is None:
            raise ContractError("hierarchy protocol needs a taxonomy")


class _Sampler:
    """Generates (and memoises) point sets for one method."""

    def __init__(self, den: Denoiser, spec: ExperimentSpec, method: MethodSpec | None, scope):
        self.den, self.spec, self.method = den, spec, method
        self.scope = sorted(scope)
        self.cache: dict = {}
        self.static = None
        if method is not None and method.kind == "static":
            self.static = merge_adapters([method.adapters[c] for c in self.scope], den.attention())

    def __call__(self, condition, subset, seeds) -> np.ndarray:
        key = (condition, frozenset(subset), tuple(seeds))
        if key not in self.cache:
            self.cache[key] = self._draw(condition, subset, seeds)
        return self.cache[key]

    def _draw(self, condition, subset, seeds):
        den, spec, m = self.den, self.spec, self.method
        if m is None:
            return ddim_sample_batch(den, condition, initial_noise(seeds), spec.steps, spec.guidance)
        if m.kind == "static":
            merged = self.static

            def predictor(x, t, k):
                return den.guided(condition, x, t, spec.guidance, merged)

            return ddim_sample_batch(den, condition, initial_noise(seeds), spec.steps, spec.guidance, predictor)
        if m.kind != "dynamic":
            raise ContractError(f"unknown method kind {m.kind!r}")
        request = ErasureRequest(self.scope, subset)
        return erase_sample_batch(
            den, request, condition, m.adapters, seeds, spec.strategy, spec.guidance, spec.steps
        )


def _seeds(spec: ExperimentSpec, *path, count: int) -> list[int]:
    return [derive_seed(spec.seed, *path, i) for i in range(count)]


def _score_single(world, den, spec, sampler, base, subset, targets, target_set, up_pool, match):
    """Metrics for one-point images.

    ``targets``: concepts prompted for erasure; ``target_set``: labels that
    count as a leak; ``up_pool``: non-target concepts; ``match(prompt, label)``
    decides preservation.
    """
    labels, sets, method_pts, base_pts = [], [], [], []
    per_concept = {}
    per = max(1, spec.samples // len(targets))
    for c in targets:
        seeds = _seeds(spec, "ee", c, count=per)
        pts = sampler(c, subset, seeds)
        lab = top1(world, pts)
        per_concept[c] = float(np.mean(np.isin(lab, list(target_set))))
        labels.extend(lab)
        sets.extend([target_set] * len(lab))
        method_pts.append(pts)
        base_pts.append(base(c, frozenset(), seeds))
    ee = acc_ee(labels, sets)
    rng = generator(spec.seed, "up", tuple(sorted(subset)))
    prompts = [int(p) for p in rng.choice(up_pool, size=spec.samples)]
    kept = 0
    for c in sorted(set(prompts)):
        idx = [i for i, p in enumerate(prompts) if p == c]
        seeds = _seeds(spec, "up", c, count=len(idx))
        pts = sampler(c, subset, seeds)
        kept += sum(match(c, int(lab)) for lab in top1(world, pts))
        method_pts.append(pts)
        base_pts.append(base(c, frozenset(), seeds))
    up = kept / len(prompts)
    w2 = distribution_distance(np.hstack(method_pts), np.hstack(base_pts))
    return ee, up, w2, len(labels), len(prompts), per_concept


def _score_conjunction(world, spec, sampler, base, targets: frozenset, universe):
    n = len(targets)
    k = spec.points_per_concept * n
    prompt = tuple(sorted(targets))
    seeds = _seeds(spec, "conj-ee", prompt, count=spec.samples * k)
    pts = sampler(prompt, targets, seeds)
    labels = top1(world, pts).reshape(spec.samples, k)
    leaked = [bool(set(row.tolist()) & targets) for row in labels]
    ee = float(np.mean(leaked))
    rng = generator(spec.seed, "conj-up", prompt)
    pool = [c for c in universe if c not in targets]
    images, prompted, method_pts, base_pts = [], [], [pts], [base(prompt, frozenset(), seeds)]
    for i in range(spec.samples):
        others = tuple(sorted(int(c) for c in rng.choice(pool, size=min(n, len(pool)), replace=False)))
        s = _seeds(spec, "conj-up", prompt, i, count=k)
        p = sampler(others, targets, s)
        images.append(top1(world, p).tolist())
        prompted.append(others)
        method_pts.append(p)
        base_pts.append(base(others, frozenset(), s))
    up = acc_up(images, prompted)
    w2 = distribution_distance(np.hstack(method_pts), np.hstack(base_pts))
    return ee, up, w2, spec.samples, spec.samples


def _report(method, protocol, scope_size, subset_size, seed, target, fn) -> MetricsReport:
    try:
        ee, up, w2, n_ee, n_up, per = fn()
        return MetricsReport(
            method, protocol, scope_size, subset_size, ee, up, harmonic_accuracy(ee, up), w2,
            seed, target, n_ee, n_up, per,
        )
    except Exception as exc:  # a failing cell must not stop the others
        nan = float("nan")
        return MetricsReport(
            method, protocol, scope_size, subset_size, nan, nan, nan, nan, seed, target,
            error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}",
        )


def run_experiment(world: ConceptWorld, den: Denoiser, spec: ExperimentSpec) -> list[MetricsReport]:
    """Run every cell of one protocol; reports come back in cell order."""
    spec.validate()
    universe = list(range(world.n_concepts))
    reports = []
    if spec.protocol == "scope-scaling":
        for m in spec.methods:
            for s in spec.scope_sizes:
                scope = universe[:s]
                sampler, base = _Sampler(den, spec, m, scope), _Sampler(den, spec, None, scope)
                for c in scope:
                    pool = [u for u in universe if u != c]

                    def cell(c=c, pool=pool, sampler=sampler, base=base):
                        return _score_single(
                            world, den, spec, sampler, base, {c}, [c], {c}, pool,
                            lambda p, lab: lab == p,
                        )

                    reports.append(_report(m.name, spec.protocol, s, 1, spec.seed, str(c), cell))
    elif spec.protocol == "conjunction":
        tuples = make_conjunction_targets(universe, 5)
        for m in spec.methods:
            for tup in tuples:
                scope = sorted(tup)
                sampler, base = _Sampler(den, spec, m, scope), _Sampler(den, spec, None, scope)
                for n in spec.subset_sizes:
                    targets = frozenset(scope[:n])

                    def cell(targets=targets, sampler=sampler, base=base):
                        return (*_score_conjunction(world, spec, sampler, base, targets, universe), {})

                    label = "+".join(map(str, sorted(targets)))
                    reports.append(_report(m.name, spec.protocol, len(scope), n, spec.seed, label, cell))
    else:
        tax = spec.taxonomy
        if len(tax.characters) != world.n_concepts:
            raise ContractError("taxonomy size must equal the number of world concepts")
        for m in spec.methods:
            sampler, base = _Sampler(den, spec, m, universe), _Sampler(den, spec, None, universe)
            for level in spec.levels:
                node_of = {i: nd for nd in tax.nodes(level) for i in tax.members(nd, level)}
                for bucket, nodes in tertile_buckets(tax, level).items():

                    def cell(level=level, nodes=nodes, node_of=node_of):
                        out = []
                        for nd in nodes:
                            members = tax.members(nd, level)
                            pool = [u for u in universe if u not in members]
                            if not pool:
                                continue
                            out.append(
                                _score_single(
                                    world, den, spec, sampler, base, set(members), members, set(members),
                                    pool, lambda p, lab: node_of.get(lab) == node_of[p],
                                )
                            )
                        if not out:
                            raise ContractError("bucket has no node with non-targets")
                        n_ee = sum(o[3] for o in out)
                        n_up = sum(o[4] for o in out)
                        ee = sum(o[0] * o[3] for o in out) / n_ee
                        up = sum(o[1] * o[4] for o in out) / n_up
                        w2 = float(np.mean([o[2] for o in out]))
                        return ee, up, w2, n_ee, n_up, {}

                    reports.append(
                        _report(m.name, f"hierarchy-{level}-{bucket}", len(universe), 1, spec.seed, bucket, cell)
                    )
    return reports


PROTOCOLS = ("scope-scaling", "conjunction", "hierarchy")
