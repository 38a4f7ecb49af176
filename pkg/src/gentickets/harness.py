"""Experiment orchestration: per-seed runs, aggregation, CSV and SVG output.

Each seed runs independently (optionally in a process pool) and returns a
list of :class:`Record` values.  Aggregation sorts by seed before reducing,
so completion order never changes a byte of the CSV.
"""

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint, save_ticket
from .earlybird import run_earlybird
from .errors import ContractError, GenTicketsError
from .images import emit_image_grid
from .metrics import Evaluator, train_feature_extractor
from .models import build_model, generate, reconstruct
from .pruning import (one_shot_prune, pruned_at_init_ticket, random_ticket, run_imp, train_dense,
                      train_ticket, transfer_ticket)

log = logging.getLogger(__name__)

CSV_HEADER = ("run", "round", "sparsity", "metric", "mean", "std", "n", "flops", "seconds")
RAW_HEADER = ("run", "round", "seed", "sparsity", "metric", "value", "flops", "seconds")
LEDGER_HEADER = ("run", "round", "seed", "flops_fwd", "flops_bwd", "flops_pruning", "bytes_moved")


@dataclass(frozen=True)
class Record:
    """One metric value from one seed."""

    run: str
    round: int
    seed: int
    sparsity: float
    metric: str
    value: float
    flops: int = 0
    seconds: float = 0.0
    ledger: tuple = (0, 0, 0, 0)


@dataclass(frozen=True)
class ResultRow:
    run: str
    round: int
    sparsity: float
    metric: str
    mean: float
    std: float
    n: int
    flops: float
    seconds: float


# ---------------------------------------------------------------- aggregation

def mean_std(values):
    """Mean and sample standard deviation (divisor n-1; 0 for one value)."""
    v = [float(x) for x in values]
    if not v:
        raise ContractError("mean_std of nothing")
    m = math.fsum(v) / len(v)
    if len(v) == 1:
        return m, 0.0
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in v) / (len(v) - 1))


def aggregate(records):
    """Reduce per-seed records into rows, one per ``(run, round, metric)``."""
    groups = {}
    for r in sorted(records, key=lambda r: (r.run, r.round, r.metric, r.seed)):
        groups.setdefault((r.run, r.round, r.metric), []).append(r)
    rows = []
    for (run, rnd, metric), rs in groups.items():
        mean, std = mean_std(r.value for r in rs)
        if not (math.isfinite(mean) and math.isfinite(std)):
            raise ContractError(f"non-finite aggregate for {run}/{rnd}/{metric}")
        rows.append(ResultRow(run, rnd, mean_std(r.sparsity for r in rs)[0], metric, mean, std, len(rs),
                              mean_std(r.flops for r in rs)[0], mean_std(r.seconds for r in rs)[0]))
    return rows


# ---------------------------------------------------------------- CSV / SVG

def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def emit_csv(rows, path=None):
    """Write rows under the fixed header; returns the CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.run, r.round, _fmt(r.sparsity), r.metric, _fmt(r.mean), _fmt(r.std), r.n,
                    _fmt(r.flops), _fmt(r.seconds)])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_csv(path_or_text):
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != CSV_HEADER:
        raise ContractError(f"unexpected CSV header {header}")
    return [ResultRow(run, int(rnd), float(sp), metric, float(mean), float(std), int(n), float(fl), float(sec))
            for run, rnd, sp, metric, mean, std, n, fl, sec in reader]


def _write_table(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _n(x):
    return f"{x:.2f}"


def emit_svg_curves(rows, metric=None, path=None, title=None):
    """Line chart of ``metric`` against sparsity (percent), one series per
    run, with a shaded +/- one-std band.  Returns the SVG text."""
    metrics = {r.metric for r in rows}
    if metric is None:
        if len(metrics) > 1:
            raise ContractError(f"rows mix metrics {sorted(metrics)}; pass metric=")
        metric = next(iter(metrics), "")
    rows = [r for r in rows if r.metric == metric] if len(metrics) > 1 else list(rows)
    if metrics - {metric} and not rows:
        raise ContractError(f"no rows for metric {metric!r}")
    W, H, L, R, T, B = 640, 420, 70, 150, 40, 50
    pw, ph = W - L - R, H - T - B
    series = {}
    for r in sorted(rows, key=lambda r: (r.run, r.sparsity, r.round)):
        series.setdefault(r.run, []).append(r)
    xs = [100 * r.sparsity for r in rows] or [0.0]
    ys = [v for r in rows for v in (r.mean - r.std, r.mean + r.std)] or [0.0]
    xt, yt = _nice_ticks(min(xs), max(xs)), _nice_ticks(min(ys), max(ys))
    x0, x1, y0, y1 = xt[0], xt[-1], yt[0], yt[-1]

    def sx(v):
        return L + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return T + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="13">{title or metric}</text>',
           f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in xt:
        out.append(f'<line x1="{_n(sx(t))}" y1="{T + ph}" x2="{_n(sx(t))}" y2="{T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_n(sx(t))}" y="{T + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in yt:
        out.append(f'<line x1="{L - 4}" y1="{_n(sy(t))}" x2="{L}" y2="{_n(sy(t))}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{_n(sy(t) + 4)}" text-anchor="end">{t:g}</text>')
    out.append(f'<text x="{L + pw / 2:.0f}" y="{H - 12}" text-anchor="middle">sparsity (%)</text>')
    out.append(f'<text x="16" y="{T + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {T + ph / 2:.0f})">{metric}</text>')
    for i, (run, rs) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        upper = [(sx(100 * r.sparsity), sy(r.mean + r.std)) for r in rs]
        lower = [(sx(100 * r.sparsity), sy(r.mean - r.std)) for r in reversed(rs)]
        if len(rs) > 1:
            pts = " ".join(f"{_n(x)},{_n(y)}" for x, y in upper + lower)
            out.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
            line = " ".join(f"{_n(sx(100 * r.sparsity))},{_n(sy(r.mean))}" for r in rs)
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in rs:
            out.append(f'<circle cx="{_n(sx(100 * r.sparsity))}" cy="{_n(sy(r.mean))}" r="3" fill="{color}"/>')
        ly = T + 14 + 18 * i
        out.append(f'<rect x="{L + pw + 12}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{L + pw + 30}" y="{ly + 1}">{run}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------- per-seed work

class _Ctx:
    """Everything a seed worker needs; picklable."""

    def __init__(self, config, dataset, extractor, out):
        self.config = config
        self.dataset = dataset
        self.extractor = extractor
        self.out = out
        self._evaluator = None

    @property
    def evaluator(self):
        if self._evaluator is None:
            self._evaluator = Evaluator(self.dataset, self.extractor, self.config.eval.samples,
                                        seed=self.config.dataset.seed)
        return self._evaluator

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_evaluator"] = None
        return d


def _wanted(config, metric):
    return not config.metrics or metric in config.metrics


def _ticket_records(ctx, run, ticket, seed, sparsity=None):
    cfg = ctx.config
    net = build_model(cfg.model, seed)
    sp = float(ticket.mask.full_sparsity(net)) if sparsity is None else float(sparsity)
    rep = ticket.report
    led = rep.ledger if rep is not None else None
    flops = led.total if led is not None else 0
    secs = rep.seconds if (rep is not None and cfg.wall_time) else 0.0
    ledger = (led.forward, led.backward, led.pruning, led.bytes_moved) if led is not None else (0, 0, 0, 0)
    out = []
    for metric, value in (ticket.metrics.as_dict() if ticket.metrics else {}).items():
        if _wanted(cfg, metric):
            out.append(Record(run, ticket.round, seed, sp, metric, float(value), flops, secs, ledger))
    return out


def _artifacts(ctx, run, ticket, seed, highlight=False):
    cfg = ctx.config
    if ctx.out is None:
        return
    if cfg.checkpoints:
        base = ctx.out / "checkpoints" / f"seed{seed}"
        save_ticket(base / f"{run}_round{ticket.round}.ticket", ticket)
        if ticket.final_weights is not None:
            save_checkpoint(base / f"{run}_round{ticket.round}.final", mask=ticket.mask, state=ticket.final_weights,
                            meta={"config": cfg.model.to_dict(), "dataset": cfg.dataset.__dict__,
                                  "round": ticket.round, "seed": seed, "run": run})
    if cfg.images and seed == cfg.seeds[0] and ticket.final_weights is not None:
        net = build_model(cfg.model, seed)
        net.load_state_dict(ticket.final_weights)
        n = cfg.grid_samples
        if cfg.model.kind == "ae":
            imgs = reconstruct(net, ctx.dataset.test_x[:n])
        else:
            imgs = generate(net, n, np.random.default_rng([seed, 0x6E1D]))
        emit_image_grid(imgs, int(math.ceil(math.sqrt(n))), ctx.out / "grids" / f"{run}_round{ticket.round}.pgm")


def _imp_seed(ctx, seed):
    cfg = ctx.config
    ev = ctx.evaluator
    ds = ctx.dataset
    recs = []
    dense, _, _ = train_dense(cfg, ds, seed, ev)
    tickets = run_imp(cfg, seed, ds, ev, dense=dense)
    for t in tickets:
        recs += _ticket_records(ctx, "winning", t, seed)
        _artifacts(ctx, "winning", t, seed)
    if "random_ticket" in cfg.baselines:
        for t in tickets[1:]:
            r, _ = train_ticket(cfg, random_ticket(t, seed + 100_000), ds, ev, seed)
            recs += _ticket_records(ctx, "random", r, seed)
            _artifacts(ctx, "random", r, seed)
    if "one_shot" in cfg.baselines:
        targets = cfg.one_shot_sparsities
        if targets == "auto":
            targets = (float(cfg.schedule.target_sparsity(cfg.schedule.rounds)),) if cfg.schedule.rounds else ()
        for k, s in enumerate(targets, 1):
            t = one_shot_prune(cfg, s, seed, ds, ev, dense=dense)
            # one-shot rows sit on the round whose IMP sparsity they match
            rnd = _matching_round(cfg.schedule, s)
            t = replace(t, round=rnd if rnd is not None else k)
            recs += _ticket_records(ctx, "one_shot", t, seed)
    if "rewind_init" in cfg.baselines:
        c0 = replace(cfg, schedule=replace(cfg.schedule, rewind_iteration=0))
        for t in run_imp(c0, seed, ds, ev)[1:]:
            recs += _ticket_records(ctx, "rewind_init", t, seed)
    for method in ("snip", "grasp"):
        if method in cfg.baselines:
            for k in range(1, cfg.schedule.rounds + 1):
                s = cfg.schedule.target_sparsity(k)
                t = pruned_at_init_ticket(cfg, method, s, seed, ds, ev)
                recs += _ticket_records(ctx, method, replace(t, round=k), seed)
    return recs


def _matching_round(schedule, s):
    for k in range(schedule.rounds + 1):
        if abs(float(schedule.target_sparsity(k)) - s) < 1e-9:
            return k
    return None


def _eb_seed(ctx, seed):
    cfg = ctx.config
    ev = ctx.evaluator
    ds = ctx.dataset
    recs = []
    dense, _, dense_net = train_dense(cfg, ds, seed, ev, rewind_iteration=0)
    recs += _ticket_records(ctx, "dense", dense, seed, sparsity=0.0)
    recs.append(Record("dense", 0, seed, 0.0, "weights", float(dense_net.num_prunable()), dense.report.ledger.total))
    eb = run_earlybird(cfg, seed, ds, ev)
    sp = float(eb.weight_sparsity)
    led = eb.ledger
    ledger = (led.forward, led.backward, led.pruning, led.bytes_moved)
    secs = eb.seconds if cfg.wall_time else 0.0
    for metric, value in eb.metrics.as_dict().items():
        if _wanted(cfg, metric):
            recs.append(Record("eb_ticket", 0, seed, sp, metric, float(value), led.total, secs, ledger))
    recs.append(Record("eb_ticket", 0, seed, sp, "weights", float(eb.weights), led.total, secs, ledger))
    recs.append(Record("eb_ticket", 0, seed, sp, "detection_epoch",
                       float(eb.detection_epoch if eb.found else -1), led.total, secs, ledger))
    recs.append(Record("eb_ticket", 0, seed, sp, "flop_savings", eb.flop_savings, led.total, secs, ledger))
    if ctx.out is not None and cfg.checkpoints:
        save_checkpoint(ctx.out / "checkpoints" / f"seed{seed}" / "eb_ticket.final", net=eb.net,
                        meta={"dataset": cfg.dataset.__dict__, "seed": seed, "run": "eb_ticket",
                              "detection_epoch": eb.detection_epoch})
    target = sp if cfg.pai_sparsity == "matched" else cfg.pai_sparsity
    for method in ("snip", "grasp"):
        if method in cfg.baselines:
            t = pruned_at_init_ticket(cfg, method, target, seed, ds, ev)
            recs += _ticket_records(ctx, method, replace(t, round=0), seed)
            recs.append(Record(method, 0, seed, float(t.mask.full_sparsity(dense_net)), "weights",
                               float(t.mask.kept() + dense_net.num_prunable() - t.mask.total()),
                               t.report.ledger.total))
    return recs


def _transfer_seed(ctx, seed):
    cfg = ctx.config
    tf = cfg.transfer
    ev = ctx.evaluator
    ds = ctx.dataset
    src_model = replace(cfg.model, family=tf.source_family, beta=None, wgan_clip=None, critic_steps=None)
    src_scope = {"a": "component_a_only", "b": "component_b_only"}[tf.source_component]
    # the source trains at the target's learning rate unless told otherwise
    src_lr = tf.source_lr if tf.source_lr is not None else cfg.train.resolved(cfg.model.kind)[0]
    src_train = replace(cfg.train, lr=src_lr, lr_b=None, betas=None)
    src_cfg = replace(cfg, model=src_model, scope=src_scope, train=src_train,
                      epochs=tf.source_epochs or cfg.epochs,
                      schedule=replace(cfg.schedule, rounds=tf.source_rounds), eval=replace(cfg.eval, stop_curve=None))
    src = run_imp(src_cfg, seed, ds, None)
    recs = []
    target_net = build_model(cfg.model, seed)
    for s in src[1:]:
        t = transfer_ticket(s, tf.source_component, cfg.model, tf.target_component, seed, mask_only=tf.mask_only)
        trained, _ = train_ticket(cfg, t, ds, ev, seed)
        recs += _ticket_records(ctx, "transfer", trained, seed)
        _artifacts(ctx, "transfer", trained, seed)
        if "random_ticket" in cfg.baselines:
            r, _ = train_ticket(cfg, random_ticket(t, seed + 100_000), ds, ev, seed)
            recs += _ticket_records(ctx, "random", r, seed)
        log.debug("transfer round %d full sparsity %.4f", s.round, float(t.mask.full_sparsity(target_net)))
    if "native" in cfg.baselines:
        native_cfg = replace(cfg, scope={"a": "component_a_only", "b": "component_b_only"}[tf.target_component],
                             schedule=replace(cfg.schedule, rounds=tf.source_rounds))
        for t in run_imp(native_cfg, seed, ds, ev)[1:]:
            recs += _ticket_records(ctx, "native", t, seed)
    return recs


def _baselines_seed(ctx, seed):
    cfg = ctx.config
    ev = ctx.evaluator
    recs = []
    levels = cfg.pai_sparsities or tuple(float(cfg.schedule.target_sparsity(k))
                                         for k in range(1, cfg.schedule.rounds + 1))
    for k, s in enumerate(levels, 1):
        for method in ("snip", "grasp"):
            if method in cfg.baselines:
                t = pruned_at_init_ticket(cfg, method, s, seed, ctx.dataset, ev)
                recs += _ticket_records(ctx, method, replace(t, round=k), seed)
    return recs


RUNNERS = {"imp": _imp_seed, "earlybird": _eb_seed, "transfer": _transfer_seed, "baselines": _baselines_seed}


def _run_seed(ctx, seed):
    t0 = time.perf_counter()
    try:
        recs = RUNNERS[ctx.config.kind](ctx, seed)
        return seed, recs, None, time.perf_counter() - t0
    except GenTicketsError as e:
        log.error("seed %d failed: %s", seed, e)
        return seed, [], f"{type(e).__name__}: {e}", time.perf_counter() - t0
    except Exception as e:  # noqa: BLE001 - recorded per seed, re-raised if all seeds fail
        log.error("seed %d crashed:\n%s", seed, traceback.format_exc())
        return seed, [], f"{type(e).__name__}: {e}", time.perf_counter() - t0


# ---------------------------------------------------------------- driver

@dataclass
class ExperimentResult:
    rows: list
    records: list
    failures: dict
    out: Path | None
    extractor: str


def prepare(config):
    dataset = config.dataset.build()
    ext = train_feature_extractor(dataset, seed=config.eval.extractor_seed, epochs=config.eval.extractor_epochs,
                                  accuracy_floor=config.eval.accuracy_floor)
    return dataset, ext


def run_experiment(config, out=None, jobs=None, dataset=None, extractor=None):
    """Run every seed, aggregate, and (with ``out``) write all artifacts."""
    out = Path(out) if out is not None else None
    if dataset is None or extractor is None:
        dataset, extractor = prepare(config)
    ctx = _Ctx(config, dataset, extractor, out)
    jobs = len(config.seeds) if jobs is None else max(1, int(jobs))
    results = []
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(config.seeds))) as pool:
            futures = [pool.submit(_run_seed, ctx, s) for s in config.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_run_seed(ctx, s) for s in config.seeds]
    results.sort(key=lambda r: r[0])
    failures = {s: err for s, _, err, _ in results if err}
    if len(failures) == len(config.seeds):
        raise GenTicketsError(f"all seeds failed: {failures}")
    records = [r for _, recs, _, _ in results for r in recs]
    rows = aggregate(records)
    result = ExperimentResult(rows, records, failures, out, extractor.fingerprint())
    if out is not None:
        write_outputs(config, result, timings={s: t for s, _, _, t in results})
    return result


def write_outputs(config, result, timings=None):
    out = result.out
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(result.rows, out / "results.csv")
    recs = sorted(result.records, key=lambda r: (r.run, r.round, r.metric, r.seed))
    _write_table(out / "raw.csv", RAW_HEADER,
                 [[r.run, r.round, r.seed, _fmt(r.sparsity), r.metric, _fmt(r.value), _fmt(r.flops), _fmt(r.seconds)]
                  for r in recs])
    seen, ledger_rows = set(), []
    for r in recs:
        key = (r.run, r.round, r.seed)
        if key not in seen:
            seen.add(key)
            ledger_rows.append([r.run, r.round, r.seed, *r.ledger])
    _write_table(out / "ledger.csv", LEDGER_HEADER, ledger_rows)
    for metric in sorted({r.metric for r in result.rows}):
        emit_svg_curves([r for r in result.rows if r.metric == metric], metric, out / f"{metric}.svg",
                        title=f"{config.name}: {metric}")
    meta = {"name": config.name, "kind": config.kind, "seeds": list(config.seeds), "extractor": result.extractor,
            "failures": {str(k): v for k, v in result.failures.items()},
            "highlight_round": max((r.round for r in result.rows), default=0),
            "early_stop_rule": {"patience": config.eval.patience, "min_delta": config.eval.min_delta,
                                "curve": config.eval.stop_curve}}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if timings is not None:
        _write_table(out / "timings.csv", ("seed", "seconds"), [[s, f"{t:.3f}"] for s, t in sorted(timings.items())])
    if config.kind == "earlybird":
        (out / "report.md").write_text(report_table(result.rows))


# ---------------------------------------------------------------- report

METHOD_ORDER = ("dense", "eb_ticket", "snip", "grasp")


def report_table(rows):
    """Markdown comparison of methods: FID, remaining weights, FLOPs, time."""
    by = {}
    for r in rows:
        by.setdefault(r.run, {})[r.metric] = r
    methods = [m for m in METHOD_ORDER if m in by] + sorted(m for m in by if m not in METHOD_ORDER)
    lines = ["| Method | FID | Weights | Sparsity | FLOPs | Training Time (s) |",
             "|---|---|---|---|---|---|"]
    for m in methods:
        d = by[m]
        fid = d.get("fid")
        w = d.get("weights")
        any_row = next(iter(d.values()))
        lines.append("| {} | {} | {} | {:.2%} | {:.3e} | {:.1f} |".format(
            m, f"{fid.mean:.2f} ± {fid.std:.2f}" if fid else "n/a", f"{w.mean:.0f}" if w else "n/a",
            any_row.sparsity, any_row.flops, any_row.seconds))
    return "\n".join(lines) + "\n"


def default_jobs(config):
    return min(len(config.seeds), os.cpu_count() or 1)
