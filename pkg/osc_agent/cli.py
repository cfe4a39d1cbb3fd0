#!/usr/bin/env python3
"""
OSC Agent CLI: validate molecules, train surrogates, run the design loop and
evaluate generated sets.

Exit codes: 0 success, 1 domain error (one ``Kind: reason`` line on stderr),
2 usage error.
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import OscAgentError

logger = logging.getLogger(__name__)


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _config(args):
    from .config import reload_config

    return reload_config(Path(args.config) if getattr(args, "config", None) else None)


# ─────────────────────── Chemistry commands ──────────────────────────


def cmd_validate(args) -> int:
    """Parse, check connectivity and print the canonical form."""
    from .smiles import canonicalize, check_connected, parse_smiles

    mol = parse_smiles(args.smiles)
    check_connected(mol)
    print(f"✅ {canonicalize(mol)}")
    return 0


def cmd_fingerprint(args) -> int:
    from .fingerprints import fingerprint
    from .smiles import parse_smiles

    fp = fingerprint(parse_smiles(args.smiles), args.kind, args.radius, args.bits)
    _print_json(fp.to_dict())
    return 0


def cmd_ingest(args) -> int:
    """Standardize a reference CSV."""
    from .database import ingest_reference, write_reference

    result = ingest_reference(Path(args.csv), standardize=not args.no_standardize)
    if args.out:
        write_reference(result.records, Path(args.out))
    summary = result.summary()
    summary["rejected_rows"] = [{"row": row, "reason": reason} for row, reason in result.rejected]
    _print_json(summary)
    return 0


def cmd_sa(args) -> int:
    from .sascore import build_fallback_table, load_sa_table, sa_score, write_sa_table
    from .smiles import parse_smiles

    if args.table:
        table = load_sa_table(Path(args.table))
    elif args.corpus:
        from .database import ingest_reference

        records = ingest_reference(Path(args.corpus)).records
        table = build_fallback_table(parse_smiles(r.smiles) for r in records)
        if args.write_table:
            write_sa_table(table, Path(args.write_table))
    else:
        print("❌ Either --table or --corpus is required", file=sys.stderr)
        return 2

    results = [{"smiles": s, "sascore": sa_score(parse_smiles(s), table)} for s in args.smiles]
    _print_json({"approximate": table.approximate, "results": results})
    return 0


# ─────────────────────── Model commands ──────────────────────────────


def cmd_train(args) -> int:
    """Train one surrogate and report training and held-out errors."""
    from dataclasses import replace

    from .database import ingest_reference
    from .predictor import (
        dataset_from_records,
        predict_point,
        regression_metrics,
        split_holdout,
        train,
    )

    config = _config(args)
    cfg = config.train
    if args.epochs:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg = replace(cfg, uncertainty=args.target == "pce")

    records = ingest_reference(Path(args.data)).records
    dataset = dataset_from_records(records, args.target, config.feature_spec)
    train_part, holdout = split_holdout(dataset, args.holdout, cfg.seed)
    model = train(train_part, cfg, target=args.target)

    report = {
        "target": args.target,
        "samples": len(train_part),
        "final_loss": model.metadata["final_loss"],
        "train_mae": model.metadata["train_mae"],
    }
    if holdout:
        predictions = [predict_point(model, x) for x, _ in holdout]
        report["holdout"] = regression_metrics([y for _, y in holdout], predictions)
        model.metadata["holdout"] = report["holdout"]
    model.save(Path(args.out))
    _print_json(report)
    print(f"✅ Saved {args.target} model to {args.out}", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    """Predict and score one molecule without touching any database."""
    from .predictor import SurrogateSuite
    from .retrieval import MoleculeRecord, composite_score
    from .smiles import canonicalize, check_connected, parse_smiles

    config = _config(args)
    models = SurrogateSuite.load(Path(args.models))
    mol = parse_smiles(args.smiles)
    check_connected(mol)
    est = models.evaluate(mol)
    record = MoleculeRecord(canonicalize(mol), est.pce_mu, est.sascore, est.homo, est.lumo)
    cand = composite_score(record, config.policy, est.pce_sigma)
    _print_json(cand.to_dict())
    return 0


def cmd_retrieve(args) -> int:
    from dataclasses import replace

    from .database import ingest_reference
    from .retrieval import kcenter_select

    config = _config(args)
    reference = Path(args.reference) if args.reference else config.path("reference")
    records = ingest_reference(reference).records
    cfg = replace(config.retrieval, seed=args.seed if args.seed is not None else config.seed)
    for rec in kcenter_select(records, cfg, k=args.k or cfg.k_reference):
        print(rec.example_line())
    return 0


# ─────────────────────── Loop commands ───────────────────────────────


async def _run_loop(config, loop_cfg, references, models, db, log):
    from .agents import run_loop
    from .backends import create_backend

    backend = create_backend(config.backend_kind, **config.backend_options())
    try:
        return await run_loop(backend, loop_cfg, references, models, db, log)
    finally:
        await backend.close()


def cmd_run(args) -> int:
    """Run the closed design loop."""
    from dataclasses import replace

    from .backends import JsonLinesLog
    from .database import CandidateDatabase, atomic_write_text, ingest_reference
    from .predictor import SurrogateSuite

    config = _config(args)
    loop_cfg = config.loop
    if args.iterations:
        loop_cfg = replace(loop_cfg, iterations=args.iterations)
    if args.seed is not None:
        loop_cfg = replace(loop_cfg, seed=args.seed)

    references = ingest_reference(config.path("reference")).records
    models = SurrogateSuite.load(config.path("models_dir"))

    db_path = config.path("candidate_db")
    if args.resume:
        db = CandidateDatabase.load(db_path)
    else:
        db = CandidateDatabase(db_path)
        db.save()
    log = JsonLinesLog(config.path("run_log"))
    if not args.resume:
        log.reset()

    summary = asyncio.run(_run_loop(config, loop_cfg, references, models, db, log))
    atomic_write_text(config.path("summary"), json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")

    marker = "✅" if summary.status == "completed" else "ℹ️ "
    print(f"{marker} Run {summary.status}: {summary.iterations_completed}/{summary.iterations_requested} iterations")
    print(f"   Candidates: {len(db)} in {db_path}")
    if summary.top_candidates:
        best = summary.top_candidates[0]
        print(f"   Best:       {best['smiles']} (score {best['score']:.2f})")
    print(f"   Summary:    {config.path('summary')}")
    return 0


def _read_generated(path: Path):
    """SMILES per line, or a CSV with a smiles column (and optional pce, sascore)."""
    import pandas as pd

    from .metrics import Prediction

    text = path.read_text(encoding="utf-8")
    first = text.splitlines()[0] if text.strip() else ""
    if "smiles" not in first.lower().split(","):
        return [line.strip() for line in text.splitlines() if line.strip()], None

    frame = pd.read_csv(path, dtype={"smiles": str})
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    smiles = [str(s).strip() for s in frame["smiles"]]
    if "pce" not in frame.columns or "sascore" not in frame.columns:
        return smiles, None
    predictions = [
        None if pd.isna(p) or pd.isna(s) else Prediction(float(p), float(s)) for p, s in zip(frame["pce"], frame["sascore"])
    ]
    return smiles, predictions


def cmd_eval(args) -> int:
    """All generation metrics for a generated set against a reference CSV."""
    from .database import ingest_reference
    from .errors import PersistenceError
    from .fingerprints import fingerprint
    from .metrics import GenerationSet, evaluate_generation
    from .retrieval import high_performance
    from .smiles import parse_smiles

    config = _config(args)
    try:
        smiles, predictions = _read_generated(Path(args.generated))
    except OSError as e:
        raise PersistenceError(f"cannot read generated file {args.generated}: {e}") from e
    g = GenerationSet.from_smiles(smiles, predictions)
    if predictions is None:
        logger.warning("no pce/sascore columns in %s; validity and avg_pce count every molecule as invalid", args.generated)

    records = ingest_reference(Path(args.reference)).records
    target = high_performance(records) if args.high_performance else records
    kind = args.fingerprint or config.fingerprint_kind
    radius, bits = config.metrics_radius, config.metrics_bits
    gen_fps = [fingerprint(m.graph, kind, radius, bits) for m in g.molecules if m.parsed]
    ref_fps = [fingerprint(parse_smiles(r.smiles), kind, radius, bits) for r in target]

    thresholds = config.thresholds
    result = evaluate_generation(
        g,
        [r.smiles for r in records],
        gen_fps,
        ref_fps,
        config.sinkhorn,
        thresholds.pce_min,
        thresholds.sa_max,
    )
    result["fingerprint"] = kind
    _print_json(result)
    return 0


def cmd_report(args) -> int:
    from .database import CandidateDatabase

    db = CandidateDatabase.load(Path(args.db))
    top = db.top_k(args.top, risk_adjusted=args.risk_adjusted) if len(db) else []
    _print_json([c.to_dict() for c in top])
    return 0


def cmd_config(args) -> int:
    """Show current configuration."""
    import yaml

    from .config import get_config_paths

    print("📝 Configuration:")
    print()

    print("   Config file search paths:")
    for path in get_config_paths():
        exists = "✓" if path.exists() else " "
        print(f"   [{exists}] {path}")
    print()

    config = _config(args)
    print(f"   Base directory: {config.base_dir}")
    print("   Current settings:")
    for line in yaml.safe_dump(config.to_dict(), sort_keys=True).splitlines():
        print(f"     {line}")
    return 0


# ─────────────────────── Entry point ─────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osc-agent",
        description="Closed-loop discovery of organic solar cell acceptor molecules",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  osc-agent validate "c1ccccc1"                         # Canonical form
  osc-agent fingerprint "CCO" --kind ecfp6              # Bit vector as JSON
  osc-agent ingest-reference data.csv --out clean.csv   # Standardize references
  osc-agent train --target pce --data clean.csv --out models/pce.json
  osc-agent sa "CCO" --corpus clean.csv                 # Approximate SAscore
  osc-agent run --config demo/osc-agent.yaml            # Design loop
  osc-agent eval --generated gen.csv --reference clean.csv
  osc-agent report --db candidates.jsonl --top 5
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    def add(name: str, func, help_text: str, config: bool = False) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        if config:
            sub.add_argument("--config", "-c", help="YAML config file")
        sub.set_defaults(func=func)
        return sub

    # validate
    p = add("validate", cmd_validate, "Validate a SMILES string")
    p.add_argument("smiles")

    # fingerprint
    p = add("fingerprint", cmd_fingerprint, "Compute a fingerprint")
    p.add_argument("smiles")
    p.add_argument("--kind", choices=["morgan", "ecfp6", "path"], default="morgan")
    p.add_argument("--radius", type=int, default=2, help="Morgan radius or maximum path length (default: 2)")
    p.add_argument("--bits", type=int, default=2048, help="Vector width (default: 2048)")

    # ingest-reference
    p = add("ingest-reference", cmd_ingest, "Load and standardize a reference CSV")
    p.add_argument("csv")
    p.add_argument("--out", help="Write the standardized CSV here")
    p.add_argument("--no-standardize", action="store_true", help="Keep SMILES as written, no deduplication")

    # train
    p = add("train", cmd_train, "Train a surrogate model", config=True)
    p.add_argument("--target", choices=["pce", "homo", "lumo"], required=True)
    p.add_argument("--data", required=True, help="Reference CSV")
    p.add_argument("--out", required=True, help="Model JSON file")
    p.add_argument("--holdout", type=float, default=0.0, help="Held-out fraction (default: 0)")
    p.add_argument("--epochs", type=int, help="Override predictor.epochs")
    p.add_argument("--seed", type=int, help="Override predictor.seed")

    # sa
    p = add("sa", cmd_sa, "Synthetic accessibility score")
    p.add_argument("smiles", nargs="+")
    p.add_argument("--table", help="fragment_id<TAB>score file")
    p.add_argument("--corpus", help="Reference CSV for an approximate table")
    p.add_argument("--write-table", help="Save the approximate table here")

    # score
    p = add("score", cmd_score, "Predict properties and score a molecule", config=True)
    p.add_argument("smiles")
    p.add_argument("--models", required=True, help="Directory with pce/homo/lumo models")

    # retrieve
    p = add("retrieve", cmd_retrieve, "Select diverse reference examples", config=True)
    p.add_argument("--reference", help="Reference CSV (default: paths.reference)")
    p.add_argument("--k", type=int, help="Number of examples (default: retrieval.k_reference)")
    p.add_argument("--seed", type=int, help="First-center seed (default: run.seed)")

    # run
    p = add("run", cmd_run, "Run the design loop", config=True)
    p.add_argument("--iterations", type=int, help="Override run.iterations")
    p.add_argument("--seed", type=int, help="Override run.seed")
    p.add_argument("--resume", action="store_true", help="Keep the existing candidate database and run log")

    # eval
    p = add("eval", cmd_eval, "Evaluate a generated set", config=True)
    p.add_argument("--generated", required=True, help="SMILES per line, or CSV with smiles[,pce,sascore]")
    p.add_argument("--reference", required=True, help="Reference CSV")
    p.add_argument("--fingerprint", choices=["morgan", "ecfp6", "path"], help="Default: metrics.fingerprint")
    p.add_argument("--high-performance", action="store_true", help="Compare against PCE > 10, SAscore < 8 references only")

    # report
    p = add("report", cmd_report, "Show the best candidates")
    p.add_argument("--db", required=True, help="Candidate database (JSON lines)")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--risk-adjusted", action="store_true", help="Rank by score - sigma")

    # config
    add("config", cmd_config, "Show configuration", config=True)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if not args.command:
        parser.print_help()
        return 0

    try:
        return args.func(args)
    except OscAgentError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
