"""Command-line entry point: ``gentickets <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, GenTicketsError, UsageError

RUN_KINDS = ("imp", "earlybird", "transfer", "baselines")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser():
    p = _Parser(prog="gentickets", description="Lottery tickets for desk-scale generative models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in RUN_KINDS:
        s = sub.add_parser(kind, help=f"run an experiment of kind {kind!r} from a config file")
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--seed-override", type=str, default=None, help="comma-separated seeds")
        s.add_argument("--jobs", type=int, default=None, help="parallel seed workers (default: one per seed)")
    e = sub.add_parser("eval", help="recompute metrics from a saved checkpoint")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--config", type=Path, default=None, help="experiment config (dataset and eval settings)")
    e.add_argument("--samples", type=int, default=None)
    pl = sub.add_parser("plot", help="re-render SVG curves from a results CSV")
    pl.add_argument("--csv", required=True, type=Path)
    pl.add_argument("--out", required=True, type=Path, help="output directory")
    pl.add_argument("--metric", default=None)
    r = sub.add_parser("report", help="method comparison table from an earlybird results CSV")
    r.add_argument("--csv", required=True, type=Path)
    r.add_argument("--out", type=Path, default=None)
    return p


def _seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as e:
        raise UsageError(f"--seed-override must be comma-separated integers: {e}") from e
    if not seeds:
        raise UsageError("--seed-override is empty")
    return seeds


def _cmd_run(args):
    from .harness import run_experiment

    cfg = load_config(args.config)
    if cfg.kind != args.command:
        raise UsageError(f"config kind is {cfg.kind!r} but the subcommand is {args.command!r}")
    if args.seed_override:
        try:
            cfg = cfg.with_seeds(_seeds(args.seed_override))
        except ConfigError as e:
            raise UsageError(str(e)) from e
    res = run_experiment(cfg, out=args.out, jobs=args.jobs)
    print(f"wrote {len(res.rows)} rows to {args.out / 'results.csv'}")
    for seed, err in sorted(res.failures.items()):
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    return 0


def _cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .config import DatasetSpec, EvalSpec
    from .metrics import Evaluator, train_feature_extractor
    from .models import ModelConfig, build_model
    from .pruning import Mask, apply_mask

    ck = load_checkpoint(args.checkpoint)
    if ck.config is None:
        raise UsageError("checkpoint carries no model config")
    model = ModelConfig(**ck.config)
    if args.config is not None:
        cfg = load_config(args.config)
        ds_spec, ev_spec = cfg.dataset, cfg.eval
    else:
        ds_spec = DatasetSpec(**ck.meta["dataset"]) if "dataset" in ck.meta else DatasetSpec()
        ev_spec = EvalSpec()
    net = build_model(model, 0)
    net.load_state_dict(ck.params, strict=False)
    if ck.mask:
        apply_mask(net, Mask(ck.mask, ck.meta.get("mask_scope", "both_components")))
    ds = ds_spec.build()
    ext = train_feature_extractor(ds, seed=ev_spec.extractor_seed, epochs=ev_spec.extractor_epochs,
                                  accuracy_floor=ev_spec.accuracy_floor)
    rep = Evaluator(ds, ext, args.samples or ev_spec.samples, seed=ds_spec.seed)(net)
    print(json.dumps({**rep.as_dict(), "extractor": rep.extractor}, indent=2, sort_keys=True))
    return 0


def _cmd_plot(args):
    from .harness import emit_svg_curves, read_csv

    rows = read_csv(args.csv)
    metrics = [args.metric] if args.metric else sorted({r.metric for r in rows})
    if args.metric and args.metric not in {r.metric for r in rows}:
        raise UsageError(f"metric {args.metric!r} not in {args.csv}")
    args.out.mkdir(parents=True, exist_ok=True)
    for m in metrics:
        path = emit_svg_curves([r for r in rows if r.metric == m], m, args.out / f"{m}.svg")
        print(path)
    return 0


def _cmd_report(args):
    from .harness import read_csv, report_table

    text = report_table(read_csv(args.csv))
    if args.out:
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"eval": _cmd_eval, "plot": _cmd_plot, "report": _cmd_report}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        handler = COMMANDS.get(args.command, _cmd_run)
        return handler(args)
    except (UsageError, ConfigError) as e:
        print(f"gentickets {args.command}: {e}", file=sys.stderr)
        return 1
    except (GenTicketsError, OSError, ValueError, ArithmeticError) as e:
        print(f"gentickets {args.command}: failed: {e}", file=sys.stderr)
        return 2


__all__ = ["main", "ExperimentConfig"]
