"""Command line entry point.

Every subcommand prints tab-delimited ``key<TAB>value`` lines on stdout.
Exit status: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import adversarial, curvature, pacbayes
from ..autodiff import Batch
from ..errors import (
    CheckpointError,
    ConfigError,
    ConsistencyError,
    ContractError,
    DomainError,
    FormatError,
    NumericError,
    SizeError,
    SpecError,
)
from ..metrics import read_metrics_csv
from ..models import build
from ..training import eval_subset, load_checkpoint
from .config import load_config
from .experiment import apply_overrides, decay_epoch, execute, sweep
from .experiment import load_data as _load_data
from .stats import correlate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _emit(pairs) -> None:
    for k, v in pairs:
        if isinstance(v, float):
            v = "%.17g" % v
        print(f"{k}\t{'' if v is None else v}")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="run configuration file (INI sections)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="WCI threshold (switches the scheduler to wci-dynamic)")
    p.add_argument("--scheduler", choices=("piecewise", "cosine", "cyclic", "piecewisezoom", "wci-dynamic"))


def _resolve(args):
    cfg = load_config(args.config)
    return apply_overrides(cfg, {"epochs": args.epochs, "seed": args.seed, "threshold": args.threshold, "scheduler": args.scheduler})


def _model(cfg, checkpoint):
    model = build(cfg.model)
    if checkpoint:
        state = load_checkpoint(checkpoint, cfg.model)
        model = model.with_params(state.params)
    return model


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / cfg.name
    outcome = execute(cfg, out, png=not args.no_png)
    s = outcome.summary
    ra = s["robust_accuracy"]
    c = s["correlation"]["wci_vs_loss_gap_post_decay"]
    _emit([
        ("run_dir", str(outcome.run_dir)),
        ("epochs", s["epochs_completed"]),
        ("final_robust_acc", ra["final"]),
        ("best_robust_acc", ra["best"]),
        ("diff", ra["diff"]),
        ("best_epoch", ra["best_epoch"]),
        ("spearman_wci_loss_gap", c["spearman"]),
        ("pearson_wci_loss_gap", c["pearson"]),
        ("training_error", s["training_error"]),
    ])
    return EXIT_NUMERIC if s["training_error"] else EXIT_OK


def cmd_attack(args) -> int:
    cfg = _resolve(args)
    _, test = _load_data(cfg)
    model = _model(cfg, args.checkpoint)
    att = cfg.train.attack
    if args.method == "fgsm":
        adv = adversarial.fgsm(model, Batch(test.inputs, test.labels), att).apply(test.inputs)
        risk = adversarial._risk(model, adv, test.labels)
    else:
        risk = adversarial.adversarial_risk(model, test, att, chunk=cfg.train.eval_chunk)
    clean = adversarial.clean_risk(model, test)
    _emit([
        ("method", args.method), ("epsilon", att.epsilon), ("step_size", att.step_size), ("iters", att.iters),
        ("clean_loss", clean.loss), ("clean_err", clean.error_rate),
        ("robust_loss", risk.loss), ("robust_err", risk.error_rate),
    ])
    return EXIT_OK


def _curvature(cfg, model, train):
    ev = cfg.train.wci_eval
    batch = eval_subset(train, ev.batch_size, cfg.seed)
    frozen = adversarial.attack_batch(model, batch, cfg.train.attack)
    policy = curvature.CurvaturePolicy(ev.exact_threshold, ev.probes, ev.seed)
    return frozen, curvature.curvature_report(model, frozen, policy)


def cmd_wci(args) -> int:
    cfg = _resolve(args)
    train, _ = _load_data(cfg)
    model = _model(cfg, args.checkpoint)
    _, report = _curvature(cfg, model, train)
    w = pacbayes.wci(model, report)
    rows = [("eval_batch_id", report.eval_batch_id)]
    for t, term, wsq in zip(report.layers, w.per_layer_terms, w.weight_sq):
        rows += [
            (f"w_sq_{t.layer}", wsq), (f"trace_raw_{t.layer}", t.trace_raw),
            (f"trace_{t.layer}", t.trace_clamped), (f"trace_stderr_{t.layer}", t.stderr),
            (f"estimator_{t.layer}", t.estimator), (f"term_{t.layer}", term),
        ]
    rows += [("wci", w.wci), ("cs_bound", w.cs_bound), ("clamp_count", w.clamp_count)]
    _emit(rows)
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _resolve(args)
    train, _ = _load_data(cfg)
    model = _model(cfg, args.checkpoint)
    frozen, report = _curvature(cfg, model, train)
    lam = args.lam if args.lam is not None else (cfg.train.bound_lambda or float(len(train)))
    bcfg = pacbayes.BoundConfig(lam, cfg.train.bound_alpha, pacbayes.empirical_loss_bound(model, frozen), len(train))
    spec = pacbayes.optimal_sigmas(model, report, lam)
    b = pacbayes.bound_report(model, report, bcfg, spec)
    _emit([
        ("lambda", b.lam), ("kl_term", b.kl), ("variability_bound", b.variability),
        ("combined_bound", b.combined), ("wci", b.wci), ("wci_bound", b.wci_bound),
        ("catoni_const", b.catoni), ("capped_layers", " ".join(map(str, b.capped_layers))),
    ])
    if args.sweep:
        for r in pacbayes.lambda_sweep(model, report, bcfg):
            _emit([(f"sweep_lambda_{r.lam:.6g}", r.combined + r.catoni)])
    return EXIT_OK


def cmd_correlate(args) -> int:
    if args.metrics:
        path = Path(args.metrics)
        start = args.from_epoch or 0
    else:
        cfg = _resolve(args)
        path = Path(cfg.out_dir) / cfg.name / "metrics.csv"
        start = args.from_epoch if args.from_epoch is not None else decay_epoch(cfg)
    rows = [r for r in read_metrics_csv(path) if r.epoch >= start]
    pts = [(getattr(r, args.a), getattr(r, args.b)) for r in rows]
    pts = [(x, y) for x, y in pts if x is not None and y is not None]
    if len(pts) < 3:
        raise DomainError(f"only {len(pts)} usable rows in {path} from epoch {start}")
    c = correlate(*zip(*pts))
    _emit([("a", args.a), ("b", args.b), ("n", c.n), ("pearson", c.pearson), ("spearman", c.spearman), ("undefined", int(c.undefined))])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    thresholds = None
    if args.thresholds:
        thresholds = [float(t) for t in args.thresholds.replace(",", " ").split()]
    out = Path(args.out) if args.out else Path(cfg.out_dir) / f"{cfg.name}-sweep"
    dirs = sweep(cfg, out, thresholds, jobs=args.jobs, png=not args.no_png)
    _emit([("sweep_dir", str(out)), ("runs", len(dirs))] + [(f"run_{i}", str(d)) for i, d in enumerate(dirs)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wcilab", description="WCI / adversarial training experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run and write its run directory")
    _common(p)
    p.add_argument("--out", help="run directory (default: <out_dir>/<name>)")
    p.add_argument("--no-png", action="store_true", help="write SVG charts only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="clean and adversarial risk on the test split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("pgd", "fgsm"), default="pgd")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("wci", help="per-layer traces and WCI on the curvature batch")
    _common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_wci)

    p = sub.add_parser("bound", help="PAC-Bayes bound terms at the optimal layer variances")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--lam", type=float, help="lambda (default: config value or training-set size)")
    p.add_argument("--sweep", action="store_true", help="also print the bound on a log lambda grid")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("correlate", help="Pearson/Spearman between two metrics columns")
    _common(p, config_required=False)
    p.add_argument("--metrics", help="metrics CSV (instead of the run named by --config)")
    p.add_argument("--a", default="wci")
    p.add_argument("--b", default="loss_gap")
    p.add_argument("--from-epoch", type=int)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("sweep", help="one wci-dynamic run per threshold")
    _common(p)
    p.add_argument("--thresholds", help="list, default 10 20 ... 100 or run.thresholds")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "correlate" and not args.metrics and not args.config:
        ap.error("correlate needs --metrics or --config")
    try:
        return args.func(args)
    except (ConfigError, SpecError, DomainError, ContractError, SizeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, FormatError, ConsistencyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
