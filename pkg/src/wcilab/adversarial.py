"""l-infinity attacks (FGSM, PGD) and empirical adversarial risk."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Batch
from .errors import ConfigError, DomainError, NumericError


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.025
    iters: int = 10
    box: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if self.iters > 0 and self.epsilon > 0 and not self.step_size > 0:
            raise ConfigError("step_size must be > 0 when iters > 0 and epsilon > 0")
        lo, hi = self.box
        if not lo < hi:
            raise ConfigError(f"input box needs lo < hi, got {self.box}")

    @classmethod
    def image_preset(cls, svhn: bool = False) -> "AttackConfig":
        """Image-scale PGD-10 setting: eps 8/255, step 2/255 (1/255 for SVHN)."""
        return cls(epsilon=8 / 255, step_size=(1 if svhn else 2) / 255, iters=10)


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        return inputs + self.delta


@dataclass(frozen=True)
class Risk:
    loss: float
    error_rate: float


@dataclass(frozen=True)
class Gap:
    loss_gap: float
    error_gap: float
    train: Risk
    test: Risk


def project(inputs: np.ndarray, delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Project ``delta`` onto the eps-ball and the input box.

    Guarantees in floating point that ``|delta| <= eps`` and that
    ``inputs + delta`` lies in the box, element-wise.
    """
    lo, hi = cfg.box
    eps = cfg.epsilon
    d = np.clip(delta, -eps, eps)
    d = np.minimum(np.maximum(d, lo - inputs), hi - inputs)
    # Rounding in x + d can still step past the box by an ulp.
    for _ in range(8):
        xa = inputs + d
        over = xa > hi
        under = xa < lo
        if not (over.any() or under.any()):
            break
        d = np.where(over, np.nextafter(d, -np.inf), d)
        d = np.where(under, np.nextafter(d, np.inf), d)
    return d


def _input_grad(model, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    tape = ad.evaluate(model.program, Batch(inputs, labels), model.params, input_grad=True, param_grad=False)
    g = ad.input_gradient(tape)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite input gradient during attack")
    return g


def fgsm(model, batch: Batch, cfg: AttackConfig) -> Perturbation:
    x = np.asarray(batch.inputs, dtype=np.float64)
    if cfg.epsilon == 0:
        return Perturbation(np.zeros_like(x))
    g = _input_grad(model, x, batch.labels)
    return Perturbation(project(x, cfg.epsilon * np.sign(g), cfg))


def pgd(model, batch: Batch, cfg: AttackConfig) -> Perturbation:
    """Iterated signed-gradient ascent, projected after every step."""
    x = np.asarray(batch.inputs, dtype=np.float64)
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        delta = project(x, rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), cfg)
    else:
        delta = np.zeros_like(x)
    if cfg.epsilon == 0:
        return Perturbation(delta)
    for _ in range(cfg.iters):
        g = _input_grad(model, x + delta, batch.labels)
        delta = project(x, delta + cfg.step_size * np.sign(g), cfg)
    return Perturbation(delta)


def attack_batch(model, batch: Batch, cfg: AttackConfig | None) -> Batch:
    """Return the batch with inputs replaced by their PGD adversarial versions."""
    if cfg is None or cfg.epsilon == 0:
        return batch
    return Batch(pgd(model, batch, cfg).apply(np.asarray(batch.inputs, dtype=np.float64)), batch.labels)


def clean_risk(model, data) -> Risk:
    return _risk(model, np.asarray(data.inputs, dtype=np.float64), data.labels)


def _risk(model, inputs, labels) -> Risk:
    loss = model.loss(Batch(inputs, labels))
    err = float(np.mean(model.predict(inputs) != np.asarray(labels)))
    return Risk(loss, err)


def adversarial_risk(model, data, cfg: AttackConfig, chunk: int | None = None) -> Risk:
    """Mean loss and error on PGD-perturbed inputs.

    With ``chunk`` set, the data is attacked in fixed-size slices; losses are
    combined as a count-weighted mean in slice order.
    """
    x = np.asarray(data.inputs, dtype=np.float64)
    y = np.asarray(data.labels)
    n = x.shape[0] if x.ndim else 0
    if n == 0:
        raise DomainError("adversarial risk of an empty dataset is undefined")
    if chunk is None or chunk >= n:
        adv = attack_batch(model, Batch(x, y), cfg)
        return _risk(model, adv.inputs, y)
    total_loss, wrong = 0.0, 0
    for s in range(0, n, chunk):
        adv = attack_batch(model, Batch(x[s : s + chunk], y[s : s + chunk]), cfg)
        m = adv.inputs.shape[0]
        total_loss += model.loss(adv) * m
        wrong += int(np.sum(model.predict(adv.inputs) != adv.labels))
    return Risk(total_loss / n, wrong / n)


def robust_gap(model, train_set, test_set, cfg: AttackConfig, chunk: int | None = None) -> Gap:
    train = adversarial_risk(model, train_set, cfg, chunk)
    test = adversarial_risk(model, test_set, cfg, chunk)
    return Gap(test.loss - train.loss, test.error_rate - train.error_rate, train, test)
