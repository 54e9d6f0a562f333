"""Self-checks run by ``lora-erasure verify`` and by the acceptance tests."""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionWeights, LoraAdapter
from .diffusion import Denoiser, forward_noise, _schedule_for
from .evaluation import harmonic_accuracy, load_taxonomy, tertile_buckets
from .orthogonality import (
    loss_input_agnostic,
    loss_input_aware,
    skew_pair,
    pbo_loss,
    random_vo_pair,
    orthogonality_oracle,
)
from .seeding import generator
from .training import probe_batch, reconstruction_loss


@dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "skip"
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"


# ------------------------------------------------------------ orthogonality


@dataclass
class OrthogonalitySuiteResult:
    constructed_max_cosine: float
    constructed_max_residual: float
    random_median_cosine: float
    failing_pairs: list
    seconds: float


def orthogonality_suite(
    n_pairs: int = 20,
    trials: int = 1000,
    seed: int = 0,
    pairs=None,
    d: int = 16,
) -> OrthogonalitySuiteResult:
    """Oracle over constructed pairs (which must be orthogonal) and random ones.

    ``pairs`` replaces the constructed pairs, e.g. to inject a faulty one.
    """
    start = time.perf_counter()
    base = AttentionWeights.random(generator(seed, "oracle", "base"), d, d, d, d, d)
    rng = generator(seed, "oracle", "pairs")
    if pairs is None:
        pairs = [skew_pair(base, rng) for _ in range(n_pairs)]
    reports = [orthogonality_oracle(base, a, b, trials=trials, seed=k) for k, (a, b) in enumerate(pairs)]
    failing = [
        k for k, r in enumerate(reports) if r.residual_norm > 1e-10 or r.max_cosine > 1e-8 or r.degenerate
    ]
    rand = [orthogonality_oracle(base, a, b, trials=trials, seed=10_000 + k)
            for k, (a, b) in enumerate(random_vo_pair(base, rng) for _ in range(n_pairs))]
    return OrthogonalitySuiteResult(
        max(r.max_cosine for r in reports),
        max(r.residual_norm for r in reports),
        statistics.median(r.max_cosine for r in rand),
        failing,
        time.perf_counter() - start,
    )


# ------------------------------------------------------------ gradients


def _probe_setup(seed: int, n: int = 3):
    rng = generator(seed, "gradcheck")
    den = Denoiser.create(n, rng).freeze()
    adapters = []
    for c in range(n):
        a = LoraAdapter.init(c, den.attention(), rng)
        factors = {p: (0.1 * rng.standard_normal(b.shape), a_) for p, (b, a_) in a.factors.items()}
        adapters.append(LoraAdapter(c, a.rank, a.scale, factors))
    sched = _schedule_for(den.T)
    batch = {}
    for c in range(n):
        x0 = rng.standard_normal((2, 6)) * 3
        t = rng.integers(1, den.T + 1, size=6)
        batch[c] = (forward_noise(x0, t, rng.standard_normal((2, 6)), sched), t)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return den, adapters, batch, pairs, probe_batch(den, range(n), seed)


def loss_functions(seed: int = 0) -> tuple[dict, list]:
    """Named loss closures over a list of adapters, plus the adapters to probe."""
    den, adapters, batch, pairs, items = _probe_setup(seed)
    base = den.attention()
    fns = {
        "reconstruction": lambda ads: reconstruction_loss(den, {a.concept: a for a in ads}, batch),
        "input_aware": lambda ads: loss_input_aware(base, ads, pairs, items),
        "input_agnostic": lambda ads: loss_input_agnostic(base, ads, pairs),
        "pbo": lambda ads: pbo_loss(ads, pairs),
    }
    return fns, adapters


def gradient_check(loss_of, adapters: list, points: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    Probed entries are drawn at random from all adapter factors.
    """
    tape = ad.Tape()
    taped = [a.on_tape(tape) for a in adapters]
    leaves = [p for a in taped for p in a.parameters()]
    grads = ad.gradient(loss_of(taped), leaves)
    params = [np.array(ad.value(p)) for p in leaves]
    layout = [a.detached() for a in adapters]

    def evaluate(ps):
        it = iter(ps)
        rebuilt = [a.with_factors([next(it) for _ in a.parameters()]) for a in layout]
        return float(ad.value(loss_of(rebuilt))[0, 0])

    rng = generator(seed, "gradcheck", "points")
    worst = 0.0
    for _ in range(points):
        k = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[k].shape)
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[k][idx] += h
        minus[k][idx] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
        analytic = grads[k][idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def gradient_suite(points: int = 20, seed: int = 0) -> dict:
    fns, adapters = loss_functions(seed)
    return {name: gradient_check(fn, adapters, points, seed=seed) for name, fn in fns.items()}


# ------------------------------------------------------------ metric formula

# (protocol, method, cell, acc_ee %, acc_up %, acc_harmonic %)
REFERENCE_TRIPLES = (
    ('conjunction', 'mace', 'N=2', 12.00, 27.50, 41.90),
    ('conjunction', 'mace', 'N=3', 17.00, 20.50, 32.88),
    ('conjunction', 'mace', 'N=4', 17.50, 15.50, 26.10),
    ('conjunction', 'mace', 'N=5', 14.50, 11.50, 20.27),
    ('conjunction', 'spm', 'N=2', 32.50, 60.50, 63.81),
    ('conjunction', 'spm', 'N=3', 36.00, 33.00, 43.55),
    ('conjunction', 'spm', 'N=4', 60.00, 21.50, 27.97),
    ('conjunction', 'spm', 'N=5', 53.00, 22.00, 29.97),
    ('conjunction', 'salun', 'N=2', 5.50, 41.00, 57.19),
    ('conjunction', 'salun', 'N=3', 11.50, 42.50, 57.42),
    ('conjunction', 'salun', 'N=4', 15.00, 8.00, 14.62),
    ('conjunction', 'salun', 'N=5', 12.50, 9.00, 16.32),
    ('conjunction', 'dynamic-no-ortho', 'N=2', 40.00, 70.50, 64.83),
    ('conjunction', 'dynamic-no-ortho', 'N=3', 47.00, 64.00, 57.98),
    ('conjunction', 'dynamic-no-ortho', 'N=4', 67.00, 37.50, 35.11),
    ('conjunction', 'dynamic-no-ortho', 'N=5', 58.50, 25.50, 31.59),
    ('conjunction', 'dynamic', 'N=2', 2.00, 70.50, 82.01),
    ('conjunction', 'dynamic', 'N=3', 4.00, 64.00, 76.80),
    ('conjunction', 'dynamic', 'N=4', 7.00, 37.50, 53.45),
    ('conjunction', 'dynamic', 'N=5', 6.00, 25.50, 40.12),
    ('scope', 'esd', '5/beaver', 7.50, 67.13, 77.80),
    ('scope', 'esd', '5/dolphin', 23.00, 67.13, 71.73),
    ('scope', 'esd', '5/otter', 21.50, 67.13, 72.37),
    ('scope', 'esd', '5/seal', 4.50, 67.13, 78.84),
    ('scope', 'esd', '5/whale', 11.50, 67.13, 76.35),
    ('scope', 'esd', '10/beaver', 4.00, 35.47, 51.80),
    ('scope', 'esd', '10/dolphin', 10.50, 35.47, 50.81),
    ('scope', 'esd', '10/otter', 7.50, 35.47, 51.28),
    ('scope', 'esd', '10/seal', 3.50, 35.47, 51.87),
    ('scope', 'esd', '10/whale', 4.00, 35.47, 51.80),
    ('scope', 'esd', '15/beaver', 2.50, 10.83, 19.49),
    ('scope', 'esd', '15/dolphin', 1.50, 10.83, 19.51),
    ('scope', 'esd', '15/otter', 2.00, 10.83, 19.50),
    ('scope', 'esd', '15/seal', 2.50, 10.83, 19.49),
    ('scope', 'esd', '15/whale', 4.00, 10.83, 19.46),
    ('scope', 'esd', '20/beaver', 0.00, 5.22, 9.92),
    ('scope', 'esd', '20/dolphin', 0.00, 5.22, 9.92),
    ('scope', 'esd', '20/otter', 2.00, 5.22, 9.91),
    ('scope', 'esd', '20/seal', 1.00, 5.22, 9.92),
    ('scope', 'esd', '20/whale', 1.00, 5.22, 9.92),
    ('scope', 'ac', '5/beaver', 87.50, 88.19, 21.90),
    ('scope', 'ac', '5/dolphin', 89.00, 88.19, 19.56),
    ('scope', 'ac', '5/otter', 80.00, 88.19, 32.61),
    ('scope', 'ac', '5/seal', 88.50, 88.19, 20.35),
    ('scope', 'ac', '5/whale', 95.50, 88.19, 8.56),
    ('scope', 'ac', '10/beaver', 94.50, 82.76, 10.31),
    ('scope', 'ac', '10/dolphin', 92.00, 82.76, 14.59),
    ('scope', 'ac', '10/otter', 87.50, 82.76, 21.72),
    ('scope', 'ac', '10/seal', 90.00, 82.76, 17.84),
    ('scope', 'ac', '10/whale', 94.00, 82.76, 11.19),
    ('scope', 'ac', '15/beaver', 92.00, 87.11, 14.65),
    ('scope', 'ac', '15/dolphin', 88.50, 87.11, 20.32),
    ('scope', 'ac', '15/otter', 83.50, 87.11, 27.74),
    ('scope', 'ac', '15/seal', 93.50, 87.11, 12.10),
    ('scope', 'ac', '15/whale', 92.00, 87.11, 14.65),
    ('scope', 'ac', '20/beaver', 91.00, 83.88, 16.25),
    ('scope', 'ac', '20/dolphin', 91.50, 83.88, 15.43),
    ('scope', 'ac', '20/otter', 90.00, 83.88, 17.87),
    ('scope', 'ac', '20/seal', 96.00, 83.88, 7.64),
    ('scope', 'ac', '20/whale', 94.50, 83.88, 10.32),
    ('scope', 'fmn', '5/beaver', 76.00, 86.45, 37.57),
    ('scope', 'fmn', '5/dolphin', 63.00, 86.45, 51.82),
    ('scope', 'fmn', '5/otter', 83.00, 86.45, 28.41),
    ('scope', 'fmn', '5/seal', 55.00, 86.45, 59.19),
    ('scope', 'fmn', '5/whale', 78.00, 86.45, 35.07),
    ('scope', 'fmn', '10/beaver', 80.50, 79.85, 32.00),
    ('scope', 'fmn', '10/dolphin', 67.00, 79.85, 46.72),
    ('scope', 'fmn', '10/otter', 87.00, 79.85, 22.36),
    ('scope', 'fmn', '10/seal', 59.00, 79.85, 54.20),
    ('scope', 'fmn', '10/whale', 82.00, 79.85, 29.38),
    ('scope', 'fmn', '15/beaver', 81.00, 76.01, 30.40),
    ('scope', 'fmn', '15/dolphin', 68.00, 76.01, 45.04),
    ('scope', 'fmn', '15/otter', 88.50, 76.01, 20.73),
    ('scope', 'fmn', '15/seal', 60.50, 76.01, 52.42),
    ('scope', 'fmn', '15/whale', 83.00, 76.01, 27.79),
    ('scope', 'fmn', '20/beaver', 79.50, 80.00, 33.27),
    ('scope', 'fmn', '20/dolphin', 66.00, 80.00, 47.72),
    ('scope', 'fmn', '20/otter', 86.00, 80.00, 23.83),
    ('scope', 'fmn', '20/seal', 58.00, 80.00, 55.08),
    ('scope', 'fmn', '20/whale', 81.50, 80.00, 30.71),
    ('scope', 'spm', '5/beaver', 11.00, 87.30, 88.14),
    ('scope', 'spm', '5/dolphin', 17.00, 87.30, 85.10),
    ('scope', 'spm', '5/otter', 15.00, 87.30, 86.13),
    ('scope', 'spm', '5/seal', 14.00, 87.30, 86.65),
    ('scope', 'spm', '5/whale', 16.50, 87.30, 85.36),
    ('scope', 'spm', '10/beaver', 17.00, 88.07, 85.46),
    ('scope', 'spm', '10/dolphin', 21.50, 88.07, 83.01),
    ('scope', 'spm', '10/otter', 14.00, 88.07, 91.86),
    ('scope', 'spm', '10/seal', 10.50, 88.07, 88.78),
    ('scope', 'spm', '10/whale', 10.00, 88.07, 89.02),
    ('scope', 'spm', '15/beaver', 10.50, 84.90, 87.14),
    ('scope', 'spm', '15/dolphin', 25.00, 84.90, 79.64),
    ('scope', 'spm', '15/otter', 37.50, 84.90, 72.00),
    ('scope', 'spm', '15/seal', 16.00, 84.90, 84.45),
    ('scope', 'spm', '15/whale', 22.00, 84.90, 81.30),
    ('scope', 'spm', '20/beaver', 38.50, 90.12, 73.11),
    ('scope', 'spm', '20/dolphin', 50.00, 90.12, 64.32),
    ('scope', 'spm', '20/otter', 67.50, 90.12, 47.77),
    ('scope', 'spm', '20/seal', 34.50, 90.12, 75.86),
    ('scope', 'spm', '20/whale', 47.50, 90.12, 66.35),
    ('scope', 'salun', '5/beaver', 8.00, 74.14, 82.11),
    ('scope', 'salun', '5/dolphin', 2.50, 74.14, 84.23),
    ('scope', 'salun', '5/otter', 5.00, 74.14, 83.28),
    ('scope', 'salun', '5/seal', 27.00, 74.14, 73.57),
    ('scope', 'salun', '5/whale', 20.50, 74.14, 76.73),
    ('scope', 'salun', '10/beaver', 3.00, 40.68, 57.32),
    ('scope', 'salun', '10/dolphin', 4.00, 40.68, 57.14),
    ('scope', 'salun', '10/otter', 0.00, 40.68, 57.83),
    ('scope', 'salun', '10/seal', 6.00, 40.68, 56.79),
    ('scope', 'salun', '10/whale', 17.00, 40.68, 54.60),
    ('scope', 'salun', '15/beaver', 1.50, 17.61, 29.88),
    ('scope', 'salun', '15/dolphin', 6.00, 17.61, 29.66),
    ('scope', 'salun', '15/otter', 0.50, 17.61, 29.92),
    ('scope', 'salun', '15/seal', 4.00, 17.61, 29.76),
    ('scope', 'salun', '15/whale', 12.00, 17.61, 29.35),
    ('scope', 'salun', '20/beaver', 0.00, 11.52, 20.66),
    ('scope', 'salun', '20/dolphin', 3.00, 11.52, 20.59),
    ('scope', 'salun', '20/otter', 3.50, 11.52, 20.58),
    ('scope', 'salun', '20/seal', 5.50, 11.52, 20.54),
    ('scope', 'salun', '20/whale', 4.00, 11.52, 20.57),
    ('scope', 'mace', '5/beaver', 1.00, 78.29, 87.44),
    ('scope', 'mace', '5/dolphin', 12.00, 78.29, 82.86),
    ('scope', 'mace', '5/otter', 0.00, 78.29, 87.82),
    ('scope', 'mace', '5/seal', 5.00, 78.29, 85.84),
    ('scope', 'mace', '5/whale', 22.00, 78.29, 78.14),
    ('scope', 'mace', '10/beaver', 1.00, 46.63, 63.40),
    ('scope', 'mace', '10/dolphin', 14.00, 46.63, 60.47),
    ('scope', 'mace', '10/otter', 4.50, 46.63, 62.66),
    ('scope', 'mace', '10/seal', 7.50, 46.63, 62.00),
    ('scope', 'mace', '10/whale', 17.00, 46.63, 59.71),
    ('scope', 'mace', '15/beaver', 1.50, 38.20, 55.05),
    ('scope', 'mace', '15/dolphin', 16.00, 38.20, 52.52),
    ('scope', 'mace', '15/otter', 8.50, 38.20, 53.90),
    ('scope', 'mace', '15/seal', 4.50, 38.20, 54.57),
    ('scope', 'mace', '15/whale', 12.00, 38.20, 53.27),
    ('scope', 'mace', '20/beaver', 1.00, 14.66, 25.54),
    ('scope', 'mace', '20/dolphin', 5.50, 14.66, 25.19),
    ('scope', 'mace', '20/otter', 4.00, 14.66, 25.44),
    ('scope', 'mace', '20/seal', 3.00, 14.66, 25.47),
    ('scope', 'mace', '20/whale', 2.00, 14.66, 25.50),
    ('scope', 'dynamic', 'any/beaver', 1.00, 90.52, 94.57),
    ('scope', 'dynamic', 'any/dolphin', 13.00, 90.52, 88.72),
    ('scope', 'dynamic', 'any/otter', 0.50, 90.52, 94.80),
    ('scope', 'dynamic', 'any/seal', 6.00, 90.52, 92.22),
    ('scope', 'dynamic', 'any/whale', 22.00, 90.52, 83.79),
)


def triple_errors(triples=None) -> list[tuple]:
    """``(triple, recomputed %, |difference| as a fraction)`` per reference triple."""
    out = []
    for t in triples or REFERENCE_TRIPLES:
        h = harmonic_accuracy(t[3] / 100.0, t[4] / 100.0)
        out.append((t, 100.0 * h, abs(h - t[5] / 100.0)))
    return out


# ------------------------------------------------------------ orchestration


def run_checks(taxonomy_path: str | None = None, quick: bool = False) -> list[CheckResult]:
    results = []
    suite = orthogonality_suite(trials=200 if quick else 1000)
    if suite.failing_pairs or suite.random_median_cosine <= 1e-3:
        detail = f"failing constructed pairs {suite.failing_pairs}; random median cosine {suite.random_median_cosine:.3g}"
        results.append(CheckResult("orthogonality oracle", "fail", detail))
    else:
        results.append(CheckResult(
            "orthogonality oracle", "pass",
            f"max cosine {suite.constructed_max_cosine:.2e}, random median {suite.random_median_cosine:.3f}",
        ))
    for name, err in gradient_suite().items():
        results.append(CheckResult(f"gradient {name}", "pass" if err <= 1e-4 else "fail", f"max rel err {err:.2e}"))
    bad = [(t, h, e) for t, h, e in triple_errors() if e > 0.01]
    results.append(CheckResult(
        "harmonic formula on reference triples",
        "fail" if bad else "pass",
        "; ".join(f"{t[1]} {t[2]}: {t[5]:.2f} vs {h:.2f}" for t, h, _ in bad) or f"{len(REFERENCE_TRIPLES)} triples",
    ))
    if taxonomy_path is None or not os.path.exists(taxonomy_path):
        results.append(CheckResult("taxonomy", "skip", "no taxonomy file supplied"))
    else:
        with open(taxonomy_path, encoding="utf-8") as fh:
            tax = load_taxonomy(fh.read())
        counts = (len(tax.brands), len(tax.series), len(tax.characters))
        sizes = tuple(len(v) for v in tertile_buckets(tax, "series").values())
        results.append(CheckResult("taxonomy", "pass", f"brands/series/characters {counts}; series tertiles {sizes}"))
    return results
