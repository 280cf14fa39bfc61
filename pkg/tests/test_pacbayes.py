import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcilab import autodiff as ad
from wcilab.autodiff import Batch, ParamVector
from wcilab.curvature import CurvatureReport, LayerTrace, curvature_report
from wcilab.errors import ConfigError, NumericError
from wcilab.models import Model, ModelSpec, build, rescale_layers
from wcilab.pacbayes import (
    SIGMA_CAP,
    BoundConfig,
    PosteriorSpec,
    bound_report,
    catoni_lambda_star,
    catoni_terms,
    empirical_loss_bound,
    kl_term,
    lambda_sweep,
    optimal_sigmas,
    variability_bound,
    variability_mc,
    wci,
    wci_cs_bound,
)

from oracles import numpy_forward, random_batch, random_mlp


def model_with_norms(norms, width=3):
    """Chain of width x width layers whose squared Frobenius norms are ``norms``."""
    blocks = []
    for k, n in enumerate(norms, start=1):
        W = np.zeros((width, width))
        W[0, 0] = math.sqrt(n)
        blocks.append((k, "weight", W))
    return Model(ModelSpec((width,) * (len(norms) + 1), use_bias=False), ParamVector.from_blocks(blocks))


def report_with(traces):
    return CurvatureReport(tuple(LayerTrace(k, t, max(t, 0.0), "exact", 1, 0.0) for k, t in enumerate(traces, start=1)))


def spec_for(model, variances):
    return PosteriorSpec(model.params, tuple(variances))


# -- kl / variability -------------------------------------------------------


def test_kl_hand_values():
    m = model_with_norms([4.0])
    assert kl_term(m, spec_for(m, [1.0]), 2.0) == 1.0
    z = model_with_norms([0.0])
    assert kl_term(z, spec_for(z, [1.0]), 2.0) == 0.0
    two = model_with_norms([4.0, 9.0])
    assert kl_term(two, spec_for(two, [1.0, 0.5]), 1.0) == 11.0


def test_kl_rejects_bad_lambda_and_layer_count():
    m = model_with_norms([4.0])
    with pytest.raises(ConfigError):
        kl_term(m, spec_for(m, [1.0]), 0.0)
    with pytest.raises(ConfigError):
        kl_term(m, spec_for(m, [1.0, 1.0]), 1.0)
    with pytest.raises(ConfigError):
        PosteriorSpec(m.params, (0.0,))


@settings(max_examples=50, deadline=None)
@given(norms=st.lists(st.floats(0.01, 100), min_size=1, max_size=4), data=st.data())
def test_kl_monotone_decreasing_in_each_variance(norms, data):
    m = model_with_norms(norms)
    v = [data.draw(st.floats(1e-3, 10)) for _ in norms]
    k = data.draw(st.integers(0, len(norms) - 1))
    bigger = list(v)
    bigger[k] *= 1.5
    assert kl_term(m, spec_for(m, bigger), 1.0) < kl_term(m, spec_for(m, v), 1.0)


def test_variability_bound_hand_values():
    m = model_with_norms([1.0, 1.0])
    assert variability_bound(report_with([2.0, 4.0]), spec_for(m, [0.5, 0.25])) == 2.0
    assert variability_bound(report_with([2.0, 4.0]), spec_for(m, [1e-300, 1e-300])) == pytest.approx(0.0, abs=1e-290)
    with pytest.raises(ConfigError):
        variability_bound(report_with([2.0]), spec_for(m, [0.5, 0.25]))


def test_variability_bound_matches_dot_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        t = rng.uniform(0, 10, n)
        s = rng.uniform(1e-4, 1, n)
        m = model_with_norms([1.0] * n)
        assert variability_bound(report_with(t), spec_for(m, s)) == pytest.approx(float(np.dot(t, s)), rel=1e-14)


def test_variability_bound_uses_clamped_traces():
    m = model_with_norms([1.0, 1.0])
    assert variability_bound(report_with([-3.0, 2.0]), spec_for(m, [1.0, 1.0])) == 2.0


# -- variability_mc ---------------------------------------------------------


@dataclass(frozen=True)
class QuadLayers:
    """Sum over layers of (1/2) w_k^T diag(h_k) w_k."""

    params: ParamVector
    diags: tuple

    @property
    def program(self):
        diags = [ad.Tape.constant(np.asarray(h, dtype=float)) for h in self.diags]

        def prog(x, labels, p):
            total = None
            for k, h in enumerate(diags, start=1):
                w = p[k, "weight"]
                term = ad.mul(ad.reduce_sum(ad.mul(ad.mul(w, w), h)), 0.5)
                total = term if total is None else ad.add(total, term)
            return total

        return prog


def quad_layers(diags, seed=0):
    rng = np.random.default_rng(seed)
    blocks = [(k, "weight", rng.standard_normal((1, len(h)))) for k, h in enumerate(diags, start=1)]
    return QuadLayers(ParamVector.from_blocks(blocks), tuple(np.asarray(h, dtype=float).reshape(1, -1) for h in diags))


DUMMY = Batch(np.zeros((1, 1)), np.zeros(1))


def test_variability_mc_zero_sigma_is_zero():
    rng = np.random.default_rng(0)
    m = random_mlp(rng, [3, 4, 2])
    spec = PosteriorSpec(m.params, (1e-300, 1e-300))
    mean, _ = variability_mc(m, random_batch(rng, m), spec, 10, 0)
    assert abs(mean) < 1e-12


def test_variability_mc_quadratic_hand_value():
    q = quad_layers([[1.0, 1.0], [2.0, 2.0]])  # traces (2, 4)
    spec = PosteriorSpec(q.params, (0.01, 0.01))
    mean, se = variability_mc(q, DUMMY, spec, 20000, 1)
    assert abs(mean - 0.03) <= 3 * se
    assert se < 0.003


@pytest.mark.parametrize("antithetic", [True, False])
def test_variability_mc_needs_two_samples_and_is_seeded(antithetic):
    q = quad_layers([[1.0, 3.0]])
    spec = PosteriorSpec(q.params, (0.1,))
    with pytest.raises(ConfigError):
        variability_mc(q, DUMMY, spec, 1, 0, antithetic=antithetic)
    assert variability_mc(q, DUMMY, spec, 40, 5, antithetic=antithetic) == variability_mc(q, DUMMY, spec, 40, 5, antithetic=antithetic)


def test_variability_mc_non_finite_reports_sample_index():
    m = build(ModelSpec((2, 2), loss="squared", use_bias=False))
    spec = PosteriorSpec(m.params, (1e308,))
    with pytest.raises(NumericError) as info:
        variability_mc(m, Batch(np.ones((1, 2)) * 1e10, np.array([0])), spec, 4, 0)
    assert info.value.sample_index == 0


def test_variability_mc_tiny_mlp_matches_half_trace():
    rng = np.random.default_rng(7)
    m = random_mlp(rng, [2, 3, 2], seed=7)
    batch = random_batch(rng, m, n=8)
    rep = curvature_report(m, batch)
    assert all(t > 0 for t in rep.raw)
    spec = PosteriorSpec(m.params, (1e-4, 1e-4))
    mean, se = variability_mc(m, batch, spec, 100_000, 3)
    assert abs(mean - 0.5 * variability_bound(rep, spec)) <= 3 * se
    assert mean <= variability_bound(rep, spec)


# -- optimal sigmas / equality ----------------------------------------------


def test_optimal_sigma_hand_values():
    m = model_with_norms([2.0])
    assert optimal_sigmas(m, report_with([4.0]), 1.0).variances[0] == 0.5
    assert optimal_sigmas(m, report_with([8.0]), 1.0).variances[0] == pytest.approx(0.353553, abs=1e-6)


def test_degenerate_layers_get_the_cap():
    m = model_with_norms([2.0, 0.0, 3.0])
    s = optimal_sigmas(m, report_with([0.0, 5.0, -1.0]), 1.0)
    assert s.variances == (SIGMA_CAP, SIGMA_CAP, SIGMA_CAP)
    assert s.capped == (True, True, True)
    b = bound_report(m, report_with([0.0, 5.0, -1.0]), BoundConfig(1.0), s)
    assert b.capped_layers == (1, 2, 3) and not b.equality_applicable
    with pytest.raises(ConfigError):
        optimal_sigmas(m, report_with([1.0]), 1.0)
    with pytest.raises(ConfigError):
        optimal_sigmas(m, report_with([1.0, 1.0, 1.0]), -1.0)


def test_hand_computed_bound():
    m = model_with_norms([2.0])
    b = bound_report(m, report_with([4.0]), BoundConfig(1.0), spec_for(m, [0.5]))
    assert (b.kl, b.variability, b.combined) == pytest.approx((2.0, 2.0, 4.0), rel=1e-15)
    assert b.wci_bound == pytest.approx(math.sqrt(2) * math.sqrt(8), rel=1e-15)
    assert abs(b.slack) < 1e-14


@settings(max_examples=100, deadline=None)
@given(
    norms=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=5),
    data=st.data(),
    lam=st.floats(1e-2, 1e4),
)
def test_amgm_equality_at_optimum_and_strict_elsewhere(norms, data, lam):
    traces = [data.draw(st.floats(1e-3, 1e3)) for _ in norms]
    m, rep = model_with_norms(norms), report_with(traces)
    cfg = BoundConfig(lam)
    opt = optimal_sigmas(m, rep, lam)
    b = bound_report(m, rep, cfg, opt)
    assert abs(b.combined - b.wci_bound) <= 1e-10 * max(1.0, b.wci_bound)
    factor = data.draw(st.sampled_from([0.5, 2.0, 3.0]))
    worse = bound_report(m, rep, cfg, opt.scaled(factor))
    assert worse.combined > b.wci_bound
    assert worse.slack >= -1e-10


def test_doubling_sigma_is_strictly_worse():
    m = model_with_norms([2.0, 5.0])
    rep = report_with([4.0, 1.5])
    opt = optimal_sigmas(m, rep, 3.0)
    assert bound_report(m, rep, BoundConfig(3.0), opt.scaled(2.0)).combined > bound_report(m, rep, BoundConfig(3.0), opt).wci_bound


# -- wci / Cauchy-Schwarz ---------------------------------------------------


def test_wci_hand_values():
    assert wci(model_with_norms([4.0]), report_with([9.0])).wci == 6.0
    assert wci(model_with_norms([0.0]), report_with([9.0])).wci == 0.0
    r = wci(model_with_norms([4.0, 1.0]), report_with([9.0, 16.0]))
    assert r.per_layer_terms == (6.0, 4.0) and r.wci == 10.0


def test_cs_bound_hand_values():
    c = wci_cs_bound(wci(model_with_norms([4.0, 1.0]), report_with([9.0, 16.0])))
    assert c.rhs == pytest.approx(math.sqrt(5) * 5, rel=1e-15) and c.lhs == 10.0 and not c.tight
    p = wci_cs_bound(wci(model_with_norms([4.0, 1.0]), report_with([8.0, 2.0])))
    assert p.tight
    assert p.lhs == pytest.approx(5 * math.sqrt(2), abs=1e-9) and abs(p.lhs - p.rhs) <= 1e-9
    s = wci_cs_bound(wci(model_with_norms([3.7]), report_with([2.9])))
    assert s.lhs == s.rhs and s.tight


@settings(max_examples=200, deadline=None)
@given(norms=st.lists(st.floats(0, 1e4), min_size=1, max_size=6), data=st.data())
def test_cs_inequality_and_additivity(norms, data):
    traces = [data.draw(st.floats(-10, 1e4)) for _ in norms]
    r = wci(model_with_norms(norms), report_with(traces))
    assert r.wci >= 0
    assert r.wci == pytest.approx(sum(r.per_layer_terms), rel=1e-15)
    assert r.wci <= r.cs_bound * (1 + 1e-15) + 1e-300
    assert r.clamp_count == sum(t < 0 for t in traces)


def test_wci_rescaling_invariance_on_bias_free_net():
    rng = np.random.default_rng(3)
    m = build(ModelSpec((3, 5, 4, 2), use_bias=False, seed=3))
    batch = Batch(rng.uniform(size=(20, 3)), rng.integers(0, 2, 20))
    base = wci(m, curvature_report(m, batch))
    for alpha in (0.5, 2.0, 10.0):
        r = rescale_layers(m, 2, alpha)
        w = wci(r, curvature_report(r, batch))
        assert w.wci == pytest.approx(base.wci, rel=1e-5)
        for a, b in zip(w.per_layer_terms, base.per_layer_terms):
            assert a == pytest.approx(b, rel=1e-5)


# -- catoni -----------------------------------------------------------------


def test_catoni_hand_values():
    assert catoni_terms(BoundConfig(4.0, math.exp(-1), 2.0, 100)) == pytest.approx(0.27, abs=1e-15)
    near_one = catoni_terms(BoundConfig(4.0, 1 - 1e-12, 2.0, 100))
    assert near_one == pytest.approx(16 / 800, abs=1e-11)


def test_bound_config_validation():
    for kw in ({"lam": 0}, {"lam": 1, "alpha": 1.0}, {"lam": 1, "alpha": 0.0}, {"lam": 1, "loss_bound": 0}, {"lam": 1, "sample_count": 0}):
        with pytest.raises(ConfigError):
            BoundConfig(**kw)


@pytest.mark.parametrize("kl", [0.5, 3.0, 20.0])
def test_grid_minimiser_matches_closed_form(kl):
    cfg = BoundConfig(1.0, 0.05, 2.0, 50)
    grid = np.arange(1, 101)
    vals = [lam * cfg.loss_bound**2 / (8 * cfg.sample_count) + (kl - math.log(cfg.alpha)) / lam for lam in grid]
    assert abs(grid[int(np.argmin(vals))] - catoni_lambda_star(kl, cfg)) <= 1.0


def test_lambda_sweep_holds_equality_everywhere():
    m = model_with_norms([2.0, 3.0])
    rows = lambda_sweep(m, report_with([1.0, 4.0]), BoundConfig(1.0))
    assert len(rows) == 25
    assert all(abs(r.slack) <= 1e-10 * max(1.0, r.wci_bound) for r in rows)


def test_empirical_loss_bound_is_max_example_loss():
    rng = np.random.default_rng(2)
    m = random_mlp(rng, [3, 4, 3])
    batch = random_batch(rng, m, n=9)
    z = numpy_forward(m, batch.inputs)
    per = np.log(np.sum(np.exp(z), axis=1)) - z[np.arange(9), batch.labels]
    assert empirical_loss_bound(m, batch) == pytest.approx(float(per.max()), rel=1e-12)
    sq = Model(ModelSpec((2, 1), loss="squared", use_bias=False), ParamVector.from_blocks([(1, "weight", np.array([[1.0], [0.0]]))]))
    assert empirical_loss_bound(sq, Batch(np.array([[3.0, 0.0], [1.0, 0.0]]), np.array([1, 1]))) == 4.0
