"""Closed-form PAC-Bayes quantities built from weight norms and Hessian traces.

All quantities drop the additive constants of the Gaussian KL divergence, so
the identity ``kl + variability == sqrt(2/lambda) * WCI`` at the optimal layer
variances can be checked to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Batch, ParamVector
from .curvature import CurvatureReport
from .errors import ConfigError, NumericError

SIGMA_CAP = 1.0
TIGHT_TOL = 1e-9


@dataclass(frozen=True)
class BoundConfig:
    lam: float
    alpha: float = 0.05
    loss_bound: float = 1.0
    sample_count: int = 1

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.loss_bound > 0:
            raise ConfigError(f"loss bound C must be > 0, got {self.loss_bound}")
        if int(self.sample_count) < 1:
            raise ConfigError(f"sample count must be >= 1, got {self.sample_count}")


@dataclass(frozen=True)
class PosteriorSpec:
    """Gaussian posterior N(mean, sigma_k^2 I) per weight layer.

    The prior is zero-mean with the same per-layer variances. ``capped``
    marks layers whose variance fell back to the cap.
    """

    mean: ParamVector
    variances: tuple[float, ...]
    capped: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variances", tuple(float(v) for v in self.variances))
        if not self.capped:
            object.__setattr__(self, "capped", (False,) * len(self.variances))
        if any(not v > 0 for v in self.variances):
            raise ConfigError("posterior variances must be positive")
        if len(self.capped) != len(self.variances):
            raise ConfigError("one cap flag per layer is required")

    def scaled(self, factor: float) -> "PosteriorSpec":
        return PosteriorSpec(self.mean, tuple(v * factor for v in self.variances), self.capped)


@dataclass(frozen=True)
class WciReport:
    per_layer_terms: tuple[float, ...]
    weight_sq: tuple[float, ...]
    traces: tuple[float, ...]
    wci: float
    cs_weight_sum: float
    cs_trace_sum: float
    cs_bound: float
    clamp_count: int


@dataclass(frozen=True)
class CsCheck:
    lhs: float
    rhs: float
    tight: bool


@dataclass(frozen=True)
class BoundReport:
    kl: float
    variability: float
    combined: float
    wci: float
    wci_bound: float
    catoni: float
    lam: float
    capped_layers: tuple[int, ...]

    @property
    def slack(self) -> float:
        """combined - sqrt(2/lambda) * WCI; non-negative by AM-GM."""
        return self.combined - self.wci_bound

    @property
    def equality_applicable(self) -> bool:
        return not self.capped_layers


def _weight_layers(model) -> list[int]:
    return [b.layer for b in model.params.layout if b.kind == "weight"]


def weight_norms_sq(model) -> list[float]:
    out = []
    for k in _weight_layers(model):
        w = model.params.block(k, "weight")
        out.append(float(np.sum(w * w)))
    return out


def _check_layers(n: int, spec: PosteriorSpec) -> None:
    if len(spec.variances) != n:
        raise ConfigError(f"posterior has {len(spec.variances)} variances for {n} layers")


def kl_term(model, spec: PosteriorSpec, lam: float) -> float:
    """sum_k ||W_k||_F^2 / (2 lambda sigma_k^2), constants dropped."""
    if not lam > 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    norms = weight_norms_sq(model)
    _check_layers(len(norms), spec)
    return float(sum(w / (2.0 * lam * s2) for w, s2 in zip(norms, spec.variances)))


def variability_bound(report: CurvatureReport, spec: PosteriorSpec) -> float:
    """sum_k Tr(H_k)^+ sigma_k^2."""
    _check_layers(len(report.layers), spec)
    return float(sum(t * s2 for t, s2 in zip(report.clamped, spec.variances)))


def variability_mc(model, batch: Batch, spec: PosteriorSpec, samples: int, seed: int, *, antithetic: bool = True) -> tuple[float, float]:
    """Monte-Carlo estimate of E[L(theta + dtheta)] - L(theta).

    ``dtheta`` is Gaussian on the weight blocks with per-layer variance
    sigma_k^2; biases are left unperturbed. With ``antithetic`` the samples
    are drawn in +/- pairs, which removes the first-order term exactly and
    leaves the expectation unchanged. Returns ``(mean, stderr)``.
    """
    if samples < 2:
        raise ConfigError("variability_mc needs at least two samples")
    layers = _weight_layers(model)
    _check_layers(len(layers), spec)
    theta = spec.mean
    base = ad.loss_value(model.program, batch, theta)
    rng = np.random.default_rng(seed)
    scales = np.zeros(theta.size)
    for k, s2 in zip(layers, spec.variances):
        scales[theta.block_info(k, "weight").slice] = math.sqrt(s2)
    weight_mask = scales > 0

    def perturbed(step: np.ndarray, i: int) -> float:
        value = ad.loss_value(model.program, batch, theta.with_flat(theta.flat + step))
        if not math.isfinite(value):
            raise NumericError(f"non-finite perturbed loss at sample {i}", sample_index=i)
        return value

    draws = samples // 2 if antithetic else samples
    diffs = np.empty(draws)
    for i in range(draws):
        step = np.zeros(theta.size)
        step[weight_mask] = rng.standard_normal(int(weight_mask.sum())) * scales[weight_mask]
        if antithetic:
            diffs[i] = 0.5 * (perturbed(step, 2 * i) + perturbed(-step, 2 * i + 1)) - base
        else:
            diffs[i] = perturbed(step, i) - base
    mean = float(np.mean(diffs))
    stderr = float(np.std(diffs, ddof=1) / math.sqrt(draws)) if draws > 1 else float("inf")
    return mean, stderr


def optimal_sigmas(model, report: CurvatureReport, lam: float, sigma_cap: float = SIGMA_CAP) -> PosteriorSpec:
    """sigma_k^2 = sqrt(||W_k||^2 / (2 lambda Tr(H_k)^+)) per layer.

    Layers with a zero clamped trace or a zero weight norm get ``sigma_cap``
    and are flagged in ``capped``.
    """
    if not lam > 0:
        raise ConfigError(f"lambda must be > 0, got {lam}")
    norms = weight_norms_sq(model)
    traces = report.clamped
    if len(traces) != len(norms):
        raise ConfigError("curvature report does not cover every layer")
    variances, capped = [], []
    for w, t in zip(norms, traces):
        if t > 0 and w > 0:
            variances.append(math.sqrt(w / (2.0 * lam * t)))
            capped.append(False)
        else:
            variances.append(sigma_cap)
            capped.append(True)
    return PosteriorSpec(model.params, tuple(variances), tuple(capped))


def wci(model, report: CurvatureReport) -> WciReport:
    norms = weight_norms_sq(model)
    traces = report.clamped
    if len(traces) != len(norms):
        raise ConfigError("curvature report does not cover every layer")
    # sqrt(w) * sqrt(t) (not sqrt(w * t)) so a single layer matches the
    # Cauchy-Schwarz bound bit for bit.
    terms = tuple(math.sqrt(w) * math.sqrt(t) for w, t in zip(norms, traces))
    wsum, tsum = float(sum(norms)), float(sum(traces))
    return WciReport(
        per_layer_terms=terms,
        weight_sq=tuple(norms),
        traces=tuple(traces),
        wci=float(sum(terms)),
        cs_weight_sum=wsum,
        cs_trace_sum=tsum,
        cs_bound=math.sqrt(wsum) * math.sqrt(tsum),
        clamp_count=report.clamp_count,
    )


def wci_cs_bound(report: WciReport, tol: float = TIGHT_TOL) -> CsCheck:
    """WCI against sqrt(sum ||W_k||^2) * sqrt(sum Tr_k).

    ``tight`` holds when ||W_k||^2 / Tr_k is the same for every layer, tested
    as parallelism of the vectors (sqrt ||W_k||^2) and (sqrt Tr_k).
    """
    W, T = report.cs_weight_sum, report.cs_trace_sum
    scale = math.sqrt(W) * math.sqrt(T)
    if scale == 0:
        tight = True
    else:
        tight = all(
            abs(math.sqrt(w) * math.sqrt(T) - math.sqrt(t) * math.sqrt(W)) <= tol * scale
            for w, t in zip(report.weight_sq, report.traces)
        )
    return CsCheck(report.wci, report.cs_bound, tight)


def catoni_terms(cfg: BoundConfig) -> float:
    """lambda C^2 / (8 |S|) - ln(alpha) / lambda."""
    return cfg.lam * cfg.loss_bound**2 / (8.0 * cfg.sample_count) - math.log(cfg.alpha) / cfg.lam


def catoni_lambda_star(kl: float, cfg: BoundConfig) -> float:
    """Minimiser over lambda of lambda C^2/(8|S|) + (KL - ln alpha)/lambda."""
    return math.sqrt(8.0 * cfg.sample_count * (kl - math.log(cfg.alpha))) / cfg.loss_bound


def bound_report(model, report: CurvatureReport, cfg: BoundConfig, spec: PosteriorSpec) -> BoundReport:
    kl = kl_term(model, spec, cfg.lam)
    var = variability_bound(report, spec)
    w = wci(model, report).wci
    capped = tuple(k for k, c in zip(_weight_layers(model), spec.capped) if c)
    return BoundReport(
        kl=kl,
        variability=var,
        combined=kl + var,
        wci=w,
        wci_bound=math.sqrt(2.0 / cfg.lam) * w,
        catoni=catoni_terms(cfg),
        lam=cfg.lam,
        capped_layers=capped,
    )


def lambda_sweep(model, report: CurvatureReport, cfg: BoundConfig, grid=None) -> list[BoundReport]:
    """Bound at the optimal variances for each lambda on a log grid."""
    if grid is None:
        grid = np.logspace(-2, 4, 25)
    out = []
    for lam in grid:
        c = BoundConfig(float(lam), cfg.alpha, cfg.loss_bound, cfg.sample_count)
        out.append(bound_report(model, report, c, optimal_sigmas(model, report, c.lam)))
    return out


def empirical_loss_bound(model, batch: Batch) -> float:
    """Largest per-example loss on ``batch``; stands in for C with unbounded losses."""
    z = model.logits(batch.inputs)
    y = np.asarray(batch.labels)
    if model.spec.loss == "squared":
        if z.shape[1] == 1:
            per = (z[:, 0] - y.astype(np.float64)) ** 2
        else:
            per = np.sum((z - np.eye(z.shape[1])[y.astype(np.int64)]) ** 2, axis=1)
    else:
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        per = lse - z[np.arange(z.shape[0]), y.astype(np.int64)]
    return float(max(np.max(per), np.finfo(float).tiny))
