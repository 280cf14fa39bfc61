"""Run directories: train, persist metrics, checkpoints, plots and a summary.

Layout of one run directory::

    config.ini          resolved configuration (re-parseable)
    metrics.csv         one row per epoch, schema ``wci-metrics/1``
    plots/              <chart>.svg and <chart>.png per learning curve
    checkpoints/        best.ckpt (highest test robust accuracy), final.ckpt
    summary.json        correlations, final/best/diff robust accuracy,
                        per-phase wall-clock totals, stage errors
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError, DomainError, NumericError
from ..metrics import MetricsRow, emit_metrics_csv
from ..models import build
from ..training import TrainResult, adv_train, save_checkpoint
from .config import RunConfig, dump_config, load_config, parse_config
from .data import Dataset, gen_split, read_idx
from .plots import emit_plots
from .stats import correlate

log = logging.getLogger(__name__)

ARTIFACTS = ("config.ini", "metrics.csv", "plots", "checkpoints", "summary.json")


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.idx_train_images:
        train = read_idx(d.idx_train_images, d.idx_train_labels, "train")
        test = read_idx(d.idx_test_images, d.idx_test_labels, "test")
        if train.dim != cfg.model.widths[0]:
            raise ConfigError(f"model input width {cfg.model.widths[0]} != IDX input size {train.dim}")
        return train, test
    return gen_split(
        d.kind, d.n_train, d.n_test, d.d, d.margin, cfg.seed,
        classes=d.classes, noise=d.noise, label_noise=d.label_noise,
    )


def decay_epoch(cfg: RunConfig) -> int:
    """First epoch run at a decayed rate (where robust overfitting is expected)."""
    s = cfg.train.scheduler
    if s.kind == "wci-dynamic":
        return s.wci.warm_epochs
    if s.kind == "piecewise" and s.milestones:
        return min(s.milestones)
    return cfg.train.epochs // 2


def _corr(rows: list[MetricsRow], a: str, b: str, start: int = 0) -> dict:
    pts = [(getattr(r, a), getattr(r, b)) for r in rows if r.epoch >= start]
    pts = [(x, y) for x, y in pts if x is not None and y is not None]
    if len(pts) < 3:
        return {"pearson": None, "spearman": None, "n": len(pts), "undefined": True, "reason": "fewer than 3 points"}
    xs, ys = zip(*pts)
    return correlate(xs, ys).as_dict()


def summarize(rows: list[MetricsRow], cfg: RunConfig, result: TrainResult | None = None) -> dict:
    start = decay_epoch(cfg)
    accs = [r.test_robust_acc for r in rows]
    best_i = max(range(len(rows)), key=lambda i: (accs[i], -rows[i].epoch))
    final, best = accs[-1], accs[best_i]
    phases = {}
    for r in rows:
        for k, v in r.times.items():
            phases[k] = phases.get(k, 0.0) + v
    return {
        "epochs_completed": len(rows),
        "decay_epoch": start,
        "robust_accuracy": {
            "final": 100.0 * final,
            "best": 100.0 * best,
            "diff": 100.0 * (best - final),
            "best_epoch": rows[best_i].epoch,
        },
        "clean_accuracy_final": 100.0 * rows[-1].test_clean_acc,
        "correlation": {
            "wci_vs_loss_gap_post_decay": _corr(rows, "wci", "loss_gap", start),
            "wci_vs_loss_gap_all": _corr(rows, "wci", "loss_gap"),
            "wci_vs_err_gap_post_decay": _corr(rows, "wci", "err_gap", start),
        },
        "wall_clock_s": phases,
        "training_error": result.error if result is not None else None,
    }


@dataclass
class RunOutcome:
    run_dir: Path
    summary: dict
    result: TrainResult | None


def execute(cfg: RunConfig, run_dir, *, png: bool = True) -> RunOutcome:
    """Run one configuration into ``run_dir``; failures are recorded by stage."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    summary: dict = {"name": cfg.name, "seed": cfg.seed, "scheduler": cfg.train.scheduler.kind, "errors": []}
    result = None
    stage = "data"
    t0 = time.perf_counter()
    try:
        train, test = load_data(cfg)
        summary["data"] = {"train": train.provenance, "test": test.provenance, "n_train": len(train), "n_test": len(test)}
        stage = "train"
        model = build(cfg.model)
        result = adv_train(model, train, test, cfg.train)
        if not result.metrics:
            raise NumericError(f"no epoch completed: {result.error}")
        stage = "metrics"
        emit_metrics_csv(result.metrics, run_dir / "metrics.csv")
        stage = "checkpoints"
        ck = run_dir / "checkpoints"
        ck.mkdir(exist_ok=True)
        save_checkpoint(result.best, ck / "best.ckpt", cfg.model)
        save_checkpoint(result.final, ck / "final.ckpt", cfg.model)
        stage = "plots"
        emit_plots(result.metrics, run_dir / "plots", png=png)
        stage = "summary"
        summary.update(summarize(result.metrics, cfg, result))
        if result.error:
            summary["errors"].append({"stage": "train", "message": result.error})
    except Exception as exc:  # recorded, then re-raised for the caller
        summary["errors"].append({"stage": stage, "type": type(exc).__name__, "message": str(exc)})
        summary["traceback"] = traceback.format_exc(limit=5)
        _write_summary(run_dir, summary, time.perf_counter() - t0)
        raise
    _write_summary(run_dir, summary, time.perf_counter() - t0)
    return RunOutcome(run_dir, summary, result)


def _write_summary(run_dir: Path, summary: dict, elapsed: float) -> None:
    summary["elapsed_s"] = elapsed
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(config_file, *, out_dir=None, overrides=None, env=None) -> Path:
    cfg = load_config(config_file, env=env)
    cfg = apply_overrides(cfg, overrides or {})
    base = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    return execute(cfg, base / cfg.name).run_dir


def apply_overrides(cfg: RunConfig, ov: dict) -> RunConfig:
    if ov.get("epochs") is not None:
        cfg = cfg.with_epochs(int(ov["epochs"]))
    if ov.get("seed") is not None:
        cfg = cfg.with_seed(int(ov["seed"]))
    if ov.get("scheduler") is not None:
        cfg = cfg.with_scheduler(ov["scheduler"])
    if ov.get("threshold") is not None:
        cfg = cfg.with_threshold(float(ov["threshold"]))
    cfg.validate()
    return cfg


DEFAULT_THRESHOLDS = tuple(float(t) for t in range(10, 101, 10))


def _sweep_one(args):
    text, threshold, run_dir, png = args
    cfg = parse_config(text, env={}).with_threshold(threshold)
    return str(execute(cfg, run_dir, png=png).run_dir)


def sweep(cfg: RunConfig, out_dir, thresholds=None, *, jobs: int = 1, png: bool = True) -> list[Path]:
    """One wci-dynamic sub-run per threshold, each in its own directory."""
    ts = tuple(thresholds if thresholds is not None else (cfg.thresholds or DEFAULT_THRESHOLDS))
    if not ts:
        raise DomainError("sweep needs at least one threshold")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    tasks = [(text, t, out / f"threshold_{t:g}", png) for t in ts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dirs = list(pool.map(_sweep_one, tasks))
    else:
        dirs = [_sweep_one(t) for t in tasks]
    index = [{"threshold": t, "run_dir": d} for (_, t, _, _), d in zip(tasks, dirs)]
    (out / "sweep.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return [Path(d) for d in dirs]
