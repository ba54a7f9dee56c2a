"""Command-line entry point.

Subcommands:
  ingest    load the input dataset and write the stage-0 snapshot
  run       execute the cascade (--stage 1|2|3|all), with --resume/--dry-run
  stats     print the statistics table for an enriched JSONL file
  export    re-export the latest completed stage snapshot to the output path
  validate  check every record in an enriched JSONL file

Exit codes: 0 success, 1 data error (machine-readable JSON on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import FullannoError
from .ingestion import read_enriched
from .pipeline import (
    PipelineConfig,
    PipelineRunner,
    compute_stats,
    render_stats,
    run_all,
    stats_json,
)
from .model import validate
from .tokenizers import get_tokenizer


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fullanno",
        description="Re-annotate detection datasets through the three-stage cascade.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="pipeline config JSON file")
        p.add_argument("--workers", type=int, default=None,
                       help="override worker_count from the config")

    p = sub.add_parser("ingest", help="load inputs and write the stage-0 snapshot")
    add_config(p)

    p = sub.add_parser("run", help="run the annotation cascade")
    add_config(p)
    p.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    p.add_argument("--resume", action="store_true",
                   help="continue from an existing checkpoint")
    p.add_argument("--dry-run", action="store_true",
                   help="stub endpoints only; refuse any network access")

    p = sub.add_parser("stats", help="statistics for an enriched JSONL file")
    p.add_argument("path", help="enriched JSONL file")
    p.add_argument("--tokenizer", default="whitespace")
    p.add_argument("--json", action="store_true", dest="as_json")

    p = sub.add_parser("export", help="re-export the final snapshot to the output path")
    add_config(p)

    p = sub.add_parser("validate", help="validate every record in an enriched JSONL file")
    p.add_argument("path", help="enriched JSONL file")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config)
    if getattr(args, "workers", None):
        cfg.worker_count = args.workers
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            cfg = _load_config(args)
            runner = PipelineRunner(cfg)
            handle = runner.ingest()
            print(f"ingested {len(handle.images)} images into {cfg.work_dir}")
        elif args.command == "run":
            cfg = _load_config(args)
            kwargs = dict(resume=args.resume, dry_run=args.dry_run)
            if args.stage == "all":
                manifest = run_all(cfg, **kwargs)
            else:
                manifest = run_all(cfg, only_stage=int(args.stage), **kwargs)
            print(f"wrote {manifest['line_count']} records to {cfg.output_path}")
            if manifest["failures"]:
                print(f"{len(manifest['failures'])} per-image failures; see manifest",
                      file=sys.stderr)
        elif args.command == "stats":
            handle = read_enriched(args.path)
            tokenizer = get_tokenizer(args.tokenizer)
            report = compute_stats(handle, tokenizer)
            if args.as_json:
                print(json.dumps(stats_json(report), indent=2))
            else:
                print(render_stats(report, handle))
        elif args.command == "export":
            cfg = _load_config(args)
            runner = PipelineRunner(cfg, resume=True)
            done = [s for s in (3, 2, 1, 0) if s in runner.ckpt.stages_done]
            if not done:
                raise FullannoError("no completed stage snapshot to export")
            handle = read_enriched(runner._stage_path(done[0]), name=cfg.dataset_name)
            manifest = runner.export(handle)
            print(f"wrote {manifest['line_count']} records to {cfg.output_path}")
        elif args.command == "validate":
            handle = read_enriched(args.path)
            bad = 0
            for record in handle.images:
                for violation in validate(record):
                    bad += 1
                    print(f"image {record.image_id}: {violation}")
            if bad:
                raise FullannoError(f"{bad} invariant violations")
            print(f"{len(handle.images)} records valid")
    except FullannoError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": "IoError", "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
