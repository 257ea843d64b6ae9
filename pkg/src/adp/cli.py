"""Command-line entry points wiring the pipeline end to end.

Subcommands: synth, pretrain, project, score, eval, match-refs.  Every run
prints its resolved configuration; failures exit nonzero with a single
``error: ...`` line on stderr.  ADP_THREADS caps BLAS worker threads (set it
before numpy loads, e.g. in the parent shell, for full effect).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("ADP_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

from . import pipeline, pretrain, refmatch, store, synthetic  # noqa: E402


def _print_config(pairs: dict) -> None:
    print("resolved config:")
    for key, value in pairs.items():
        print(f"  {key}={value}")


def _add_seed(parser, default=None) -> None:
    parser.add_argument("--seed", type=int, default=default,
                        help="seed override (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adp",
        description="Anomaly-representation pretraining on patch features.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic feature dataset",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True, help="key=value synthetic spec file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("pretrain", help="train the feature projectors",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_seed(p)

    p = sub.add_parser("project", help="materialize projected features",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--refs", required=True, help="manifest providing reference records")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("score", help="score a test split", formatter_class=fmt)
    p.add_argument("--method", required=True,
                   choices=pipeline.SCORING_METHODS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--refs", required=True, help="manifest providing reference records")
    p.add_argument("--test", required=True, help="manifest with the test split")
    p.add_argument("--out", required=True, help="JSONL scores output path")
    p.add_argument("--map-dir", default=None, help="directory for per-image score maps")
    p.add_argument("--agg", default="max", choices=("max", "topk_mean"),
                   help="image-level aggregation over the fused map")
    p.add_argument("--top-k", type=int, default=10, help="k for topk_mean aggregation")
    p.add_argument("--coreset-fraction", type=float, default=0.1,
                   help="patchcore coreset fraction")

    p = sub.add_parser("eval", help="evaluate a scores file", formatter_class=fmt)
    p.add_argument("--scores", required=True)
    p.add_argument("--masks-manifest", required=True)
    p.add_argument("--out", required=True, help="JSON report output path")
    p.add_argument("--fpr-limit", type=float, default=0.3,
                   help="FPR integration limit for PRO")
    p.add_argument("--thresholds", type=int, default=200,
                   help="threshold count for the PRO sweep")

    p = sub.add_parser("match-refs", help="semantic-aligned reference retrieval",
                       formatter_class=fmt)
    p.add_argument("--pool", required=True, help="manifest of candidate normal records")
    p.add_argument("--query", required=True, help="query ADFR record")
    p.add_argument("--k", type=int, default=pretrain.SCORING_REFERENCE_COUNT,
                   help="number of references to retrieve")
    p.add_argument("--level", type=int, default=0, help="alignment feature level")
    p.add_argument("--grid-size", type=int, default=pretrain.ALIGN_GRID_SIZE,
                   help="spatial grid cells per side")
    p.add_argument("--centers", type=int, default=pretrain.ALIGN_CENTERS_PER_CELL,
                   help="k-means centers per cell")
    p.add_argument("--out", default=None,
                   help="write a manifest whose reference split is the selection")
    _add_seed(p, default=42)

    return parser


def _cmd_synth(args) -> int:
    spec = synthetic.parse_synthetic_spec(Path(args.spec).read_text())
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _print_config({k: getattr(spec, k) for k in
                   ("classes", "train_per_class", "reference_per_class", "test_per_class",
                    "abnormal_fraction", "level_dims", "anomaly_offset_sigma", "seed")})
    manifest_path = synthetic.generate_synthetic(spec, args.out_dir)
    print(f"wrote {manifest_path}")
    return 0


def _cmd_pretrain(args) -> int:
    config = pretrain.parse_config(Path(args.config).read_text())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    _print_config(pretrain.resolved_config(config))
    manifest = store.load_manifest(args.manifest)
    state, history = pretrain.pretrain(manifest, config, out_path=args.out,
                                       resume_from=args.resume)
    history_path = Path(args.out).with_suffix(".history.json")
    pretrain.save_history(history, history_path)
    if history:
        print(f"steps: {state.steps_done}  final loss: {history[-1]['total']:.6f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_project(args) -> int:
    state = pretrain.load_checkpoint(args.ckpt)
    _print_config(pretrain.resolved_config(state.config))
    out = pipeline.write_projected(state, store.load_manifest(args.manifest),
                                   store.load_manifest(args.refs), args.out_dir)
    print(f"wrote {out}")
    return 0


def _cmd_score(args) -> int:
    state = pretrain.load_checkpoint(args.ckpt)
    _print_config({"method": args.method, "agg": args.agg, "top_k": args.top_k,
                   "coreset_fraction": args.coreset_fraction,
                   **pretrain.resolved_config(state.config)})
    out = pipeline.score_manifest(state, store.load_manifest(args.refs),
                                  store.load_manifest(args.test), args.method,
                                  args.out, map_dir=args.map_dir, aggregation=args.agg,
                                  top_k=args.top_k, coreset_fraction=args.coreset_fraction)
    print(f"wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    _print_config({"scores": args.scores, "fpr_limit": args.fpr_limit,
                   "thresholds": args.thresholds})
    report = pipeline.evaluate_scores(args.scores, store.load_manifest(args.masks_manifest),
                                      fpr_limit=args.fpr_limit, thresholds=args.thresholds)
    Path(args.out).write_text(report.to_json())
    print(report.summary_line())
    print(f"wrote {args.out}")
    return 0


def _cmd_match_refs(args) -> int:
    _print_config({"k": args.k, "level": args.level, "grid_size": args.grid_size,
                   "centers": args.centers, "seed": args.seed})
    pool = store.load_manifest(args.pool)
    query = store.read_record(args.query)
    result = refmatch.match_references(query, pool, k=args.k, level=args.level,
                                       grid_size=args.grid_size,
                                       centers_per_cell=args.centers, seed=args.seed)
    for rank, (idx, entry) in enumerate(zip(result.selected, result.selected_entries)):
        print(f"{rank}\t{entry.record_path}\t{result.degrees[idx]:.6f}")
    if args.out:
        selected = {e.record_path for e in result.selected_entries}
        entries = []
        for e in pool.entries:
            if e.record_path in selected:
                entries.append(replace(e, split="reference"))
            elif e.split == "reference":
                entries.append(replace(e, split="train"))
            else:
                entries.append(e)
        store.save_manifest(store.Manifest(entries, base_dir=pool.base_dir), args.out)
        print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "project": _cmd_project,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "match-refs": _cmd_match_refs,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, store.FormatError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
