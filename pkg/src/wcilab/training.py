"""Adversarial training: SGD with momentum, LR schedules, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adversarial, curvature, pacbayes
from . import autodiff as ad
from .adversarial import AttackConfig
from .autodiff import Batch, ParamVector
from .curvature import CurvaturePolicy
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .metrics import MetricsRow
from .models import Model, ModelSpec, layer_bias_sq, layer_frobenius_sq

log = logging.getLogger(__name__)

SCHEDULERS = ("piecewise", "cosine", "cyclic", "piecewisezoom", "wci-dynamic")
WCI_MODES = ("rebased", "literal-compound")


@dataclass(frozen=True)
class WciSchedule:
    warm_epochs: int = 30
    post_decay_lr: float = 0.01
    threshold: float = 100.0
    mode: str = "rebased"


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = "piecewise"
    base_lr: float = 0.1
    horizon: int = 60
    milestones: tuple[int, ...] = (30, 45)
    factor: float = 0.1
    period: int | None = None
    cyclic_peak: float = 0.4
    zoom: tuple[tuple[float, float], ...] = ((0.5, 0.1), (0.75, 0.01))
    wci: WciSchedule = field(default_factory=WciSchedule)

    def validate(self) -> None:
        if self.kind not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.kind!r}")
        if not self.base_lr > 0:
            raise ConfigError("base learning rate must be > 0")
        if self.kind == "wci-dynamic":
            w = self.wci
            if not w.threshold > 0:
                raise ConfigError("WCI threshold must be > 0")
            if w.mode not in WCI_MODES:
                raise ConfigError(f"unknown WCI schedule mode {w.mode!r}")
            if not w.warm_epochs < self.horizon:
                raise ConfigError("warm_epochs must be smaller than the number of epochs")
            if not w.post_decay_lr > 0:
                raise ConfigError("post-decay learning rate must be > 0")
        if self.kind == "cyclic" and not 0 < self.cyclic_peak < 1:
            raise ConfigError("cyclic_peak must lie in (0, 1)")

    @property
    def span(self) -> int:
        return self.period or self.horizon

    @classmethod
    def image_piecewise(cls) -> "SchedulerConfig":
        return cls("piecewise", 0.1, 200, (100, 150), 0.1)

    @classmethod
    def image_wci(cls, threshold: float = 100.0) -> "SchedulerConfig":
        return cls("wci-dynamic", 0.1, 200, wci=WciSchedule(100, 0.01, threshold))


@dataclass(frozen=True)
class WciEvalConfig:
    every: int = 1
    start_epoch: int = 0
    probes: int = 30
    batch_size: int = 256
    exact_threshold: int = curvature.EXACT_THRESHOLD
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: AttackConfig | None = field(default_factory=AttackConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seed: int = 0
    wci_eval: WciEvalConfig | None = field(default_factory=WciEvalConfig)
    bound_lambda: float | None = None
    bound_alpha: float = 0.05
    eval_chunk: int = 1000

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.wci_eval is not None and self.wci_eval.every < 1:
            raise ConfigError("WCI evaluation cadence must be >= 1")
        self.scheduler.validate()
        if self.scheduler.kind == "wci-dynamic" and self.wci_eval is None:
            raise ConfigError("the wci-dynamic scheduler needs WCI evaluation enabled")

    @property
    def base_lr(self) -> float:
        return self.scheduler.base_lr


@dataclass
class TrainState:
    epoch: int
    params: ParamVector
    momentum: ParamVector
    lr: float
    rng_state: dict = field(default_factory=dict)
    last_wci: float | None = None

    def __post_init__(self):
        self.params.check_layout(self.momentum)

    def __eq__(self, other):
        if not isinstance(other, TrainState):
            return NotImplemented
        same_wci = self.last_wci == other.last_wci or (
            self.last_wci is not None and other.last_wci is not None
            and math.isnan(self.last_wci) and math.isnan(other.last_wci)
        )
        return (
            self.epoch == other.epoch
            and self.params == other.params
            and self.momentum == other.momentum
            and self.lr == other.lr
            and self.rng_state == other.rng_state
            and same_wci
        )

    @classmethod
    def initial(cls, model: Model, cfg: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(cfg.seed)
        return cls(0, model.params, model.params.zeros_like(), cfg.base_lr, rng.bit_generator.state)


def sgd_step(state: TrainState, grads: ParamVector, cfg: TrainConfig) -> TrainState:
    """v <- m v + (g + wd w);  w <- w - lr v.  Returns a new state."""
    state.params.check_layout(grads)
    if not np.all(np.isfinite(grads.flat)):
        raise NumericError("non-finite gradient passed to sgd_step")
    w = state.params.flat
    g = grads.flat + cfg.weight_decay * w
    v = cfg.momentum * state.momentum.flat + g
    new_w = w - state.lr * v
    return replace(state, params=state.params.with_flat(new_w), momentum=state.momentum.with_flat(v))


def scheduler_next(sched: SchedulerConfig, epoch: int, wci: float | None = None, prev_lr: float | None = None) -> float:
    """Learning rate for ``epoch`` (0-based).

    For ``wci-dynamic``: ``base_lr`` before ``warm_epochs``, then
    ``post_decay_lr``. From the epoch after the decay on, ``wci`` (the index
    measured at the end of the previous epoch) is required; at the decay
    epoch itself it is optional and applied to ``post_decay_lr``. When it exceeds
    the threshold, literal-compound mode returns ``prev_lr / wci`` and
    rebased mode returns ``min(prev_lr, post_decay_lr / wci)``. Otherwise the
    previous rate is kept.
    """
    kind = sched.kind
    base = sched.base_lr
    if kind == "piecewise":
        return base * sched.factor ** sum(1 for m in sched.milestones if epoch >= m)
    if kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / sched.span))
    if kind == "cyclic":
        P = sched.span
        t = (epoch % P) + 0.5
        up = sched.cyclic_peak * P
        return base * (t / up if t <= up else (P - t) / (P - up))
    if kind == "piecewisezoom":
        mult = 1.0
        for frac, m in sched.zoom:
            if epoch >= frac * sched.horizon:
                mult = m
        return base * mult
    if kind == "wci-dynamic":
        w = sched.wci
        if epoch < w.warm_epochs:
            return base
        if epoch == w.warm_epochs:
            if wci is None:
                return w.post_decay_lr
            prev_lr = w.post_decay_lr
        if wci is None:
            raise ContractError(f"wci-dynamic schedule needs a WCI value at epoch {epoch}")
        prev = w.post_decay_lr if prev_lr is None else prev_lr
        if wci > w.threshold:
            if w.mode == "literal-compound":
                return prev / wci
            return min(prev, w.post_decay_lr / wci)
        return prev
    raise ConfigError(f"unknown scheduler {kind!r}")


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    final: TrainState
    best: TrainState
    best_epoch: int
    model: Model
    error: str | None = None

    @property
    def best_row(self) -> MetricsRow:
        return next(r for r in self.metrics if r.epoch == self.best_epoch)

    @property
    def final_row(self) -> MetricsRow:
        return self.metrics[-1]


def best_epoch(rows: list[MetricsRow]) -> int:
    """Epoch with the highest test robust accuracy (earliest on ties)."""
    best = max(rows, key=lambda r: (r.test_robust_acc, -r.epoch))
    return best.epoch


def _wci_due(cfg: TrainConfig, epoch: int) -> bool:
    ev = cfg.wci_eval
    if ev is None:
        return False
    if epoch >= ev.start_epoch and (epoch - ev.start_epoch) % ev.every == 0:
        return True
    sched = cfg.scheduler
    if sched.kind == "wci-dynamic":
        warm = sched.wci.warm_epochs
        return epoch >= warm and (epoch - warm) % ev.every == 0
    return False


def eval_subset(train_set, size: int, seed: int) -> Batch:
    """Fixed, seeded subsample of the training set used for curvature."""
    n = len(train_set.labels)
    idx = np.random.default_rng([seed, 0xC0FFEE]).permutation(n)[: min(size, n)]
    idx.sort()
    return Batch(np.asarray(train_set.inputs)[idx], np.asarray(train_set.labels)[idx])


def assess_curvature(model: Model, eval_batch: Batch, cfg: TrainConfig, sample_count: int):
    """Freeze adversarial inputs, trace every layer, and assemble WCI and bound terms."""
    ev = cfg.wci_eval or WciEvalConfig()
    frozen = adversarial.attack_batch(model, eval_batch, cfg.attack)
    policy = CurvaturePolicy(ev.exact_threshold, ev.probes, ev.seed)
    report = curvature.curvature_report(model, frozen, policy)
    wrep = pacbayes.wci(model, report)
    lam = cfg.bound_lambda if cfg.bound_lambda is not None else float(sample_count)
    bcfg = pacbayes.BoundConfig(lam, cfg.bound_alpha, pacbayes.empirical_loss_bound(model, frozen), sample_count)
    spec = pacbayes.optimal_sigmas(model, report, lam)
    bound = pacbayes.bound_report(model, report, bcfg, spec)
    return report, wrep, bound


def _fill_rows(model: Model, epoch: int, lr: float, gap, clean, report, wrep, bound) -> MetricsRow:
    K = model.num_layers
    row = MetricsRow(
        epoch=epoch,
        lr=lr,
        train_robust_loss=gap.train.loss,
        train_robust_err=gap.train.error_rate,
        test_robust_loss=gap.test.loss,
        test_robust_err=gap.test.error_rate,
        loss_gap=gap.loss_gap,
        err_gap=gap.error_gap,
        test_clean_loss=clean.loss,
        test_clean_err=clean.error_rate,
        w_sq=tuple(layer_frobenius_sq(model, k) for k in range(1, K + 1)),
        bias_sq=tuple(layer_bias_sq(model, k) for k in range(1, K + 1)),
    )
    if report is not None:
        row.trace_raw = tuple(report.raw)
        row.trace = tuple(report.clamped)
        row.trace_stderr = tuple(t.stderr for t in report.layers)
        row.wci = wrep.wci
        row.cs_weight_sum = wrep.cs_weight_sum
        row.cs_trace_sum = wrep.cs_trace_sum
        row.cs_bound = wrep.cs_bound
        row.kl_term = bound.kl
        row.variability_bound = bound.variability
        row.combined_bound = bound.combined
        row.wci_bound = bound.wci_bound
        row.catoni_const = bound.catoni
        row.clamp_count = wrep.clamp_count
    return row


def train_epoch(model: Model, state: TrainState, train_set, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    x = np.asarray(train_set.inputs, dtype=np.float64)
    y = np.asarray(train_set.labels)
    order = rng.permutation(len(y))
    for b, start in enumerate(range(0, len(y), cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        batch = Batch(x[idx], y[idx])
        current = model.with_params(state.params)
        attack = cfg.attack
        if attack is not None and attack.random_start:
            attack = replace(attack, seed=int(np.random.SeedSequence([attack.seed, state.epoch, b]).generate_state(1)[0]))
        batch = adversarial.attack_batch(current, batch, attack)
        tape = ad.evaluate(model.program, batch, state.params)
        state = sgd_step(state, ad.gradient(tape), cfg)
    state.rng_state = rng.bit_generator.state
    return state


def adv_train(model: Model, train_set, test_set, cfg: TrainConfig, *, on_epoch=None) -> TrainResult:
    """Adversarial training with per-epoch robust evaluation and WCI tracking.

    Every epoch: set the learning rate, train on PGD examples regenerated per
    batch, evaluate robust train/test risk, and (on the WCI cadence) build the
    curvature, WCI and bound terms on a fixed training subsample. Numeric
    failures stop training; the result keeps the last good state and records
    the error.
    """
    cfg.validate()
    if len(train_set.labels) == 0 or len(test_set.labels) == 0:
        raise ConfigError("training and test sets must be non-empty")
    state = TrainState.initial(model, cfg)
    ev = cfg.wci_eval or WciEvalConfig()
    eval_batch = eval_subset(train_set, ev.batch_size, cfg.seed)
    sample_count = len(train_set.labels)
    attack = cfg.attack if cfg.attack is not None else AttackConfig(epsilon=0.0, iters=0)
    rows: list[MetricsRow] = []
    best_state, best_key, best_ep = state, None, 0
    error = None
    for epoch in range(cfg.epochs):
        try:
            sched = cfg.scheduler
            need_wci = sched.kind == "wci-dynamic" and epoch > sched.wci.warm_epochs
            lr = scheduler_next(sched, epoch, state.last_wci if need_wci else None, state.lr)
            state = replace(state, epoch=epoch, lr=lr)
            t0 = time.perf_counter()
            new_state = train_epoch(model, state, train_set, cfg)
            t1 = time.perf_counter()
            current = model.with_params(new_state.params)
            gap = adversarial.robust_gap(current, train_set, test_set, attack, chunk=cfg.eval_chunk)
            clean = adversarial.clean_risk(current, test_set)
            t2 = time.perf_counter()
            report = wrep = bound = None
            if _wci_due(cfg, epoch):
                report, wrep, bound = assess_curvature(current, eval_batch, cfg, sample_count)
                new_state.last_wci = wrep.wci
            t3 = time.perf_counter()
        except NumericError as exc:
            log.warning("numeric failure at epoch %d: %s", epoch, exc)
            error = f"epoch {epoch}: {exc}"
            break
        state = new_state
        row = _fill_rows(current, epoch, lr, gap, clean, report, wrep, bound)
        row.times = {"train": t1 - t0, "eval": t2 - t1, "curvature": t3 - t2}
        rows.append(row)
        key = (row.test_robust_acc, -epoch)
        if best_key is None or key > best_key:
            best_key, best_state, best_ep = key, replace(state), epoch
        log.debug("epoch %d lr=%.3g train_err=%.3f test_err=%.3f wci=%s", epoch, lr, row.train_robust_err, row.test_robust_err, row.wci)
        if on_epoch is not None:
            on_epoch(row)
    if not rows:
        raise NumericError(error or "training produced no epochs")
    return TrainResult(rows, state, best_state, best_ep, model.with_params(state.params), error)


# ---------------------------------------------------------------------------
# Checkpoints: little-endian; magic, u16 version, 8-byte spec hash, u32 epoch,
# f64 lr, f64 last WCI (NaN if absent), u64 count, params, momentum,
# u32 length + JSON RNG state.

MAGIC = b"WCI1"
VERSION = 1
_HEADER = struct.Struct("<4sH8sIddQ")


def save_checkpoint(state: TrainState, path, spec: ModelSpec) -> Path:
    path = Path(path)
    n = state.params.size
    rng_blob = json.dumps(state.rng_state, sort_keys=True).encode()
    last = math.nan if state.last_wci is None else state.last_wci
    payload = b"".join(
        (
            _HEADER.pack(MAGIC, VERSION, spec.digest(), state.epoch, state.lr, last, n),
            state.params.flat.astype("<f8").tobytes(),
            state.momentum.flat.astype("<f8").tobytes(),
            struct.pack("<I", len(rng_blob)),
            rng_blob,
        )
    )
    path.write_bytes(payload)
    return path


def load_checkpoint(path, spec: ModelSpec) -> TrainState:
    from .models import build

    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, digest, epoch, lr, last, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if digest != spec.digest():
        raise CheckpointError(f"{path}: spec hash mismatch")
    layout = build(spec).params.layout
    if n != sum(b.size for b in layout):
        raise CheckpointError(f"{path}: parameter count {n} does not match the spec")
    off = _HEADER.size
    need = off + 16 * n + 4
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated parameter data")
    params = np.frombuffer(data, "<f8", n, off).astype(np.float64)
    mom = np.frombuffer(data, "<f8", n, off + 8 * n).astype(np.float64)
    (blob_len,) = struct.unpack_from("<I", data, off + 16 * n)
    if len(data) != need + blob_len:
        raise CheckpointError(f"{path}: truncated or oversized RNG state")
    try:
        rng_state = json.loads(data[need:].decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt RNG state") from exc
    return TrainState(
        epoch=epoch,
        params=ParamVector(params, layout),
        momentum=ParamVector(mom, layout),
        lr=lr,
        rng_state=rng_state,
        last_wci=None if math.isnan(last) else last,
    )
