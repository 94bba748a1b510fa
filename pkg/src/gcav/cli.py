"""Command-line entry point: ``gcav run | stage <name> | score | attack | report``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from .attack import AttackSpec, evaluate_attack
from .config import AttackConfig, ConfigError, load_config
from .pipeline import (Context, StageError, exit_code, run_all, run_stage, worker_count,
                       write_report)
from .store import ArtifactStore, MissingArtifactError

log = logging.getLogger("gcav")

EXIT_USAGE = 2
EXIT_MISSING = 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("gcav_out"), help="output directory")
    p.add_argument("--resume", action="store_true", help="skip stages already completed")
    p.add_argument("--stable-names", action="store_true",
                   help="use 'stable' instead of a timestamp in report file names")
    p.add_argument("--no-svg", action="store_true", help="do not render SVG charts")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="gcav", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run every stage and write the report")
    st = sub.add_parser("stage", parents=[common], help="run a single stage")
    st.add_argument("name", choices=["gen", "target", "cavs", "ae", "align", "fuse"])
    sub.add_parser("score", parents=[common], help="compute TGCAV scores")
    at = sub.add_parser("attack", parents=[common], help="targeted attack audit")
    at.add_argument("--layer", help="attacked layer, or 'auto' (overrides config)")
    rp = sub.add_parser("report", parents=[common], help="export the comparison report")
    rp.add_argument("--format", default=None,
                    help="comma-separated subset of csv,json,svg (default: all)")
    return parser


def _formats(args) -> List[str]:
    fmts = [f.strip() for f in (getattr(args, "format", None) or "csv,json,svg").split(",") if f.strip()]
    if args.no_svg:
        fmts = [f for f in fmts if f != "svg"]
    return fmts


def _context(args) -> Context:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.effective.json").write_text(cfg.to_json())
    return Context(cfg, ArtifactStore(args.out / "artifacts"), worker_count())


def _report(ctx: Context, args) -> None:
    for p in write_report(ctx, args.out, _formats(args), args.stable_names):
        print(p)


def _attack(ctx: Context, args) -> None:
    a = ctx.cfg.attack or AttackConfig()
    if args.layer:
        a = dataclasses.replace(a, layer=args.layer)
    if a.layer != "auto" and a.layer not in ctx.cfg.model.instrumented:
        raise ConfigError(f"attack layer {a.layer!r} is not instrumented")
    spec = AttackSpec.from_config(a)
    try:
        out = evaluate_attack(ctx, spec)
    except MissingArtifactError:
        raise
    except Exception as e:  # noqa: BLE001 - reported with the attack stage's exit code
        raise StageError("attack", f"{type(e).__name__}: {e}") from e
    layer = out.spec.layer
    path = args.out / f"attack_{layer}.csv"
    path.write_text(out.to_csv())
    summary = {"class": out.cls, "source": spec.source_concept, "target": spec.target_concept,
               "layer": layer, "epsilon": spec.epsilon, "shift_success": out.shift_success,
               "max_abs_delta": out.max_abs_delta}
    (args.out / f"attack_{layer}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(path)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        ctx = _context(args)
        t0 = time.perf_counter()
        if args.command == "run":
            run_all(ctx, resume=args.resume)
            _report(ctx, args)
        elif args.command == "stage":
            run_stage(ctx, args.name)
        elif args.command == "score":
            run_stage(ctx, "score")
        elif args.command == "attack":
            _attack(ctx, args)
        elif args.command == "report":
            _report(ctx, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e.stage)
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
