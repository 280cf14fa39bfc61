"""Run configuration: INI-style sections of ``key = value`` lines.

Grammar (parsed by :mod:`configparser`, ``#`` and ``;`` start comments)::

    [run]        name, out_dir, seed, thresholds (sweep list, space or comma separated)
    [data]       kind, n_train, n_test, d, margin, noise, label_noise, classes,
                 idx_train_images, idx_train_labels, idx_test_images, idx_test_labels
    [model]      widths (e.g. "2 64 64 2"), loss, use_bias, init_seed
    [attack]     epsilon, step_size, iters, random_start
    [train]      epochs, batch_size, momentum, weight_decay, eval_chunk
    [scheduler]  kind, base_lr, milestones, factor, period, cyclic_peak,
                 warm_epochs, post_decay_lr, threshold, mode
    [wci]        every, start_epoch, probes, batch_size, exact_threshold, seed
    [bound]      lambda (empty = training-set size), alpha

Every key is optional. ``RUN_SEED`` in the environment, when set, replaces
``run.seed``; no other environment variable is read.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, replace

from ..adversarial import AttackConfig
from ..errors import ConfigError
from ..models import ModelSpec
from ..training import SchedulerConfig, TrainConfig, WciEvalConfig, WciSchedule


@dataclass(frozen=True)
class DataConfig:
    kind: str = "gaussian-blobs"
    n_train: int = 1000
    n_test: int = 1000
    d: int = 2
    margin: float = 0.4
    noise: float = 0.1
    label_noise: float = 0.0
    classes: int = 2
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    thresholds: tuple[float, ...] = ()
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec((2, 32, 32, 2)))
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        t = self.train
        t = replace(t, seed=seed, attack=replace(t.attack, seed=seed), wci_eval=replace(t.wci_eval, seed=seed))
        return replace(self, seed=seed, model=replace(self.model, seed=seed), train=t)

    def with_threshold(self, threshold: float) -> "RunConfig":
        s = self.train.scheduler
        s = replace(s, kind="wci-dynamic", wci=replace(s.wci, threshold=float(threshold)))
        return replace(self, train=replace(self.train, scheduler=s))

    def with_scheduler(self, kind: str) -> "RunConfig":
        s = replace(self.train.scheduler, kind=kind)
        return replace(self, train=replace(self.train, scheduler=s))

    def with_epochs(self, epochs: int) -> "RunConfig":
        s = replace(self.train.scheduler, horizon=epochs)
        return replace(self, train=replace(self.train, epochs=epochs, scheduler=s))

    def validate(self) -> None:
        try:
            self.model.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from exc
        self.train.validate()
        d = self.data
        if d.n_train < 1 or d.n_test < 1:
            raise ConfigError("data sizes must be >= 1")
        if not d.idx_train_images and self.model.widths[0] != d.d:
            raise ConfigError(f"model input width {self.model.widths[0]} != data dimension {d.d}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class _Section:
    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.name = name
        self.sec = cp[name] if cp.has_section(name) else {}
        self.used: set[str] = set()

    def get(self, key, conv, default):
        if key not in self.sec:
            return default
        self.used.add(key)
        raw = self.sec[key].strip()
        try:
            if conv is bool:
                return _BOOL[raw.lower()]
            return conv(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from exc

    def leftover(self):
        return sorted(set(self.sec) - self.used)


SECTIONS = ("run", "data", "model", "attack", "train", "scheduler", "wci", "bound")


def parse_config(text: str, *, env: dict | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    secs = {n: _Section(cp, n) for n in SECTIONS}
    run, data, mdl, att, trn, sch, wci, bnd = (secs[n] for n in SECTIONS)
    D = DataConfig()
    dcfg = DataConfig(
        kind=data.get("kind", str, D.kind),
        n_train=data.get("n_train", int, D.n_train),
        n_test=data.get("n_test", int, D.n_test),
        d=data.get("d", int, D.d),
        margin=data.get("margin", float, D.margin),
        noise=data.get("noise", float, D.noise),
        label_noise=data.get("label_noise", float, D.label_noise),
        classes=data.get("classes", int, D.classes),
        idx_train_images=data.get("idx_train_images", str, ""),
        idx_train_labels=data.get("idx_train_labels", str, ""),
        idx_test_images=data.get("idx_test_images", str, ""),
        idx_test_labels=data.get("idx_test_labels", str, ""),
    )
    seed = run.get("seed", int, 0)
    env = os.environ if env is None else env
    if env.get("RUN_SEED", "") != "":
        try:
            seed = int(env["RUN_SEED"])
        except ValueError as exc:
            raise ConfigError(f"RUN_SEED={env['RUN_SEED']!r} is not an integer") from exc
    widths = mdl.get("widths", _ints, (dcfg.d, 32, 32, dcfg.classes))
    spec = ModelSpec(
        widths,
        loss=mdl.get("loss", str, "cross_entropy"),
        use_bias=mdl.get("use_bias", bool, True),
        seed=mdl.get("init_seed", int, seed),
    )
    A = AttackConfig()
    try:
        attack = AttackConfig(
            epsilon=att.get("epsilon", float, A.epsilon),
            step_size=att.get("step_size", float, A.step_size),
            iters=att.get("iters", int, A.iters),
            random_start=att.get("random_start", bool, False),
            seed=seed,
        )
    except ConfigError as exc:
        raise ConfigError(f"[attack] {exc}") from exc
    epochs = trn.get("epochs", int, 60)
    S, W = SchedulerConfig(), WciSchedule()
    default_ms = tuple(int(round(epochs * f)) for f in (0.5, 0.75))
    period = sch.get("period", int, 0)
    sched = SchedulerConfig(
        kind=sch.get("kind", str, S.kind),
        base_lr=sch.get("base_lr", float, S.base_lr),
        horizon=epochs,
        milestones=sch.get("milestones", _ints, default_ms),
        factor=sch.get("factor", float, S.factor),
        period=period or None,
        cyclic_peak=sch.get("cyclic_peak", float, S.cyclic_peak),
        wci=WciSchedule(
            warm_epochs=sch.get("warm_epochs", int, default_ms[0]),
            post_decay_lr=sch.get("post_decay_lr", float, W.post_decay_lr),
            threshold=sch.get("threshold", float, W.threshold),
            mode=sch.get("mode", str, W.mode),
        ),
    )
    E = WciEvalConfig()
    ev = WciEvalConfig(
        every=wci.get("every", int, E.every),
        start_epoch=wci.get("start_epoch", int, E.start_epoch),
        probes=wci.get("probes", int, E.probes),
        batch_size=wci.get("batch_size", int, E.batch_size),
        exact_threshold=wci.get("exact_threshold", int, E.exact_threshold),
        seed=wci.get("seed", int, seed),
    )
    lam_text = bnd.get("lambda", str, "")
    try:
        lam = float(lam_text) if lam_text else None
    except ValueError as exc:
        raise ConfigError(f"[bound] lambda = {lam_text!r}") from exc
    T = TrainConfig()
    tcfg = TrainConfig(
        epochs=epochs,
        batch_size=trn.get("batch_size", int, T.batch_size),
        momentum=trn.get("momentum", float, T.momentum),
        weight_decay=trn.get("weight_decay", float, T.weight_decay),
        attack=attack,
        scheduler=sched,
        seed=seed,
        wci_eval=ev,
        bound_lambda=lam,
        bound_alpha=bnd.get("alpha", float, T.bound_alpha),
        eval_chunk=trn.get("eval_chunk", int, T.eval_chunk),
    )
    cfg = RunConfig(
        name=run.get("name", str, "run"),
        out_dir=run.get("out_dir", str, "runs"),
        seed=seed,
        thresholds=run.get("thresholds", _floats, ()),
        data=dcfg,
        model=spec,
        train=tcfg,
    )
    stray = {n: s.leftover() for n, s in secs.items() if s.leftover()}
    if stray:
        raise ConfigError(f"unknown config keys: {stray}")
    cfg.validate()
    return cfg


def load_config(path, *, env: dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError:
        raise
    return parse_config(text, env=env)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Resolved config in the same grammar; ``parse_config`` reads it back."""
    t, s, a, e = cfg.train, cfg.train.scheduler, cfg.train.attack, cfg.train.wci_eval
    sections = {
        "run": {"name": cfg.name, "out_dir": cfg.out_dir, "seed": cfg.seed, "thresholds": cfg.thresholds},
        "data": asdict(cfg.data),
        "model": {"widths": cfg.model.widths, "loss": cfg.model.loss, "use_bias": cfg.model.use_bias, "init_seed": cfg.model.seed},
        "attack": {"epsilon": a.epsilon, "step_size": a.step_size, "iters": a.iters, "random_start": a.random_start},
        "train": {"epochs": t.epochs, "batch_size": t.batch_size, "momentum": t.momentum, "weight_decay": t.weight_decay, "eval_chunk": t.eval_chunk},
        "scheduler": {
            "kind": s.kind, "base_lr": s.base_lr, "milestones": s.milestones, "factor": s.factor,
            "period": s.period or 0, "cyclic_peak": s.cyclic_peak, "warm_epochs": s.wci.warm_epochs,
            "post_decay_lr": s.wci.post_decay_lr, "threshold": s.wci.threshold, "mode": s.wci.mode,
        },
        "wci": {"every": e.every, "start_epoch": e.start_epoch, "probes": e.probes, "batch_size": e.batch_size, "exact_threshold": e.exact_threshold, "seed": e.seed},
        "bound": {"lambda": t.bound_lambda, "alpha": t.bound_alpha},
    }
    buf = io.StringIO()
    for name, kv in sections.items():
        buf.write(f"[{name}]\n")
        for k, v in kv.items():
            buf.write(f"{k} = {_fmt(v)}\n")
        buf.write("\n")
    return buf.getvalue()
