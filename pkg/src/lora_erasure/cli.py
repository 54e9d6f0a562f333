"""Command-line entry point: ``lora-erasure {train,eval,verify,heatmap}``.

Exit codes: 0 on success, 1 for invalid input (config, request, taxonomy or
artifacts), 2 when a verification check fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .artifacts import write_atomic, find_runs, train_run, world_for
from .config import config_to_toml, expand_sweep, parse_config
from .errors import (
    ArtifactError,
    ConfigValidationError,
    ContractError,
    RequestValidationError,
    TaxonomyError,
)
from .evaluation import ExperimentSpec, MethodSpec, load_taxonomy, reports_to_csv, run_experiment
from .orthogonality import crosstalk_heatmap, heatmap_to_csv
from .training import probe_batch
from .verification import run_checks

log = logging.getLogger("lora_erasure")

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 1, 2


def _load_config(path: str | None, seed: int | None):
    text = Path(path).read_text(encoding="utf-8") if path else ""
    cfg, sweep = parse_config(text)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg, sweep, text


def cmd_train(args) -> int:
    cfg, sweep, text = _load_config(args.config, args.seed)
    out = Path(args.out)
    runs = expand_sweep(cfg, sweep)
    if sweep:
        write_atomic(out / "sweep.toml", text)
        write_atomic(out / "config.toml", config_to_toml(cfg))
    for name, run_cfg in runs:
        path = out / name if name else out
        log.info("training %s", path)
        train_run(path, run_cfg, out, lambda step, loss: log.info("base step %d loss %.4f", step, loss))
    print(f"trained {len(runs)} run(s) under {out}")
    return EXIT_OK


def _heatmap_csv(run) -> str:
    concepts = sorted(run.adapters)
    batch = probe_batch(run.denoiser, concepts, run.config.seed)
    matrix = crosstalk_heatmap(run.denoiser.attention(), [run.adapters[c] for c in concepts], batch)
    return heatmap_to_csv(matrix, concepts)


def cmd_eval(args) -> int:
    runs = find_runs(Path(args.artifacts))
    out = Path(args.out) if args.out else Path(args.artifacts)
    first = runs[0].config
    taxonomy = None
    if args.protocol == "hierarchy":
        if not args.taxonomy:
            raise ContractError("the hierarchy protocol needs --taxonomy")
        taxonomy = load_taxonomy(Path(args.taxonomy).read_text(encoding="utf-8"))
    methods = []
    for run in runs:
        label = run.name or "dynamic"
        methods.append(MethodSpec(label, run.adapters, "dynamic"))
        methods.append(MethodSpec(f"{label}-static-merge", run.adapters, "static"))
    spec = ExperimentSpec(
        protocol=args.protocol,
        methods=methods,
        scope_sizes=first.scope_sizes,
        subset_sizes=first.subset_sizes,
        samples=first.samples,
        points_per_concept=first.points_per_concept,
        seed=first.seed if args.seed is None else args.seed,
        guidance=first.guidance,
        steps=first.sampling_steps,
        strategy=args.strategy or first.strategy,
        taxonomy=taxonomy,
    )
    reports = run_experiment(world_for(first), runs[0].denoiser, spec)
    write_atomic(out / f"report_{args.protocol}.csv", reports_to_csv(reports))
    for run in runs:
        write_atomic(out / f"heatmap{'_' + run.name if run.name else ''}.csv", _heatmap_csv(run))
    failed = [r for r in reports if r.error]
    for r in failed:
        log.error("cell %s/%s/%s failed: %s", r.method, r.protocol, r.target, r.error)
    print(f"wrote {len(reports)} rows ({len(failed)} failed) to {out / f'report_{args.protocol}.csv'}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    runs = find_runs(Path(args.artifacts))
    out = Path(args.out) if args.out else Path(args.artifacts)
    for run in runs:
        write_atomic(out / f"heatmap{'_' + run.name if run.name else ''}.csv", _heatmap_csv(run))
    print(f"wrote {len(runs)} heatmap(s) to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.taxonomy)
    for r in results:
        print(f"[{r.status.upper():4}] {r.name}: {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lora-erasure", description="Concept-erasure adapters on a toy diffusion model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the base model (if needed) and the concept adapters")
    t.add_argument("--config", help="flat TOML config; defaults apply when omitted")
    t.add_argument("--out", required=True, help="run or sweep directory to write")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation protocol on trained artifacts")
    e.add_argument("artifacts", help="run directory or sweep directory")
    e.add_argument("--protocol", choices=("scope-scaling", "conjunction", "hierarchy"), required=True)
    e.add_argument("--out", help="directory for the report and heatmap CSVs (default: artifacts)")
    e.add_argument("--taxonomy", help="brand,series,character CSV (hierarchy protocol)")
    e.add_argument("--strategy", choices=("composite", "merge", "switch"))
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="oracle, gradient and metric-formula self-checks")
    v.add_argument("--taxonomy", help="optional taxonomy CSV to validate")
    v.set_defaults(func=cmd_verify)

    h = sub.add_parser("heatmap", help="crosstalk heatmap of trained adapters")
    h.add_argument("artifacts")
    h.add_argument("--out")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigValidationError, RequestValidationError, TaxonomyError, ArtifactError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
