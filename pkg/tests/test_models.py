import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcilab.autodiff import Batch, ParamVector
from wcilab.curvature import exact_layer_trace
from wcilab.errors import DomainError, LayoutError, SpecError
from wcilab.models import Model, ModelSpec, build, layer_bias_sq, layer_frobenius_sq, rescale_layers

from oracles import numpy_forward


def test_build_is_deterministic_for_fixed_seed():
    a = build(ModelSpec((2, 1), seed=7))
    b = build(ModelSpec((2, 1), seed=7))
    assert a.params.flat.tobytes() == b.params.flat.tobytes()
    c = build(ModelSpec((2, 1), seed=8))
    assert not np.array_equal(a.params.flat, c.params.flat)


def test_layout_of_2_3_2_with_bias():
    m = build(ModelSpec((2, 3, 2)))
    kinds = [(b.layer, b.kind, b.shape) for b in m.params.layout]
    assert kinds == [(1, "weight", (2, 3)), (1, "bias", (3,)), (2, "weight", (3, 2)), (2, "bias", (2,))]
    assert m.num_layers == 2
    nb = build(ModelSpec((2, 3, 2), use_bias=False))
    assert [b.kind for b in nb.params.layout] == ["weight", "weight"]


@pytest.mark.parametrize("widths", [(2, 3, 2), (50, 7, 1), (400, 3)])
def test_uniform_fan_in_bounds(widths):
    m = build(ModelSpec(widths, seed=3))
    for k in range(1, m.num_layers + 1):
        bound = 1 / np.sqrt(widths[k - 1])
        assert np.all(np.abs(m.weight(k)) <= bound)
        assert np.all(np.abs(m.params.block(k, "bias")) <= bound)
        # not degenerate: the scan should reach a good fraction of the bound
        assert np.max(np.abs(m.weight(k))) > 0.3 * bound


@pytest.mark.parametrize("widths", [(3,), (), (2, 0, 1)])
def test_invalid_widths_are_spec_errors(widths):
    with pytest.raises(SpecError):
        build(ModelSpec(widths))


def test_unknown_loss_or_init_is_spec_error():
    with pytest.raises(SpecError):
        build(ModelSpec((2, 2), loss="hinge"))
    with pytest.raises(SpecError):
        build(ModelSpec((2, 2), init="orthogonal"))


def test_layout_must_match_spec():
    params = ParamVector.from_blocks([(1, "weight", np.zeros((2, 2)))])
    with pytest.raises(LayoutError):
        Model(ModelSpec((2, 2)), params)


def _with_weight(W):
    W = np.asarray(W, dtype=float)
    return Model(ModelSpec(W.shape, use_bias=False), ParamVector.from_blocks([(1, "weight", W)]))


def test_frobenius_hand_values():
    assert layer_frobenius_sq(_with_weight([[1, 1], [1, 1]]), 1) == 4.0
    assert layer_frobenius_sq(_with_weight(np.zeros((3, 2))), 1) == 0.0


def test_frobenius_matches_brute_force_and_excludes_bias():
    m = build(ModelSpec((5, 4, 2), seed=1))
    W = m.weight(1)
    brute = 0.0
    for i in range(5):
        for j in range(4):
            brute += W[i, j] * W[i, j]
    assert abs(layer_frobenius_sq(m, 1) - brute) <= 1e-14 * brute
    b = m.params.block(1, "bias")
    assert layer_bias_sq(m, 1) == pytest.approx(float(np.sum(b**2)), rel=1e-15)
    assert layer_bias_sq(build(ModelSpec((5, 4), use_bias=False)), 1) == 0.0


def test_layer_index_out_of_range():
    m = build(ModelSpec((2, 3, 2)))
    for k in (0, 3):
        with pytest.raises(IndexError):
            layer_frobenius_sq(m, k)


def test_logits_match_numpy_recomputation():
    m = build(ModelSpec((4, 6, 5, 3), seed=9))
    x = np.random.default_rng(0).uniform(size=(10, 4))
    assert np.allclose(m.logits(x), numpy_forward(m, x), rtol=0, atol=1e-14)


def test_predict_single_output_thresholds_at_half():
    m = _with_weight([[1.0], [0.0]])
    assert m.predict(np.array([[0.2, 0], [0.7, 0], [0.5, 0]])).tolist() == [0, 1, 1]


# -- rescaling --------------------------------------------------------------


def test_rescale_alpha_one_is_bit_identical():
    m = build(ModelSpec((2, 3, 2), seed=4))
    r = rescale_layers(m, 1, 1.0)
    assert r.params.flat.tobytes() == m.params.flat.tobytes()


def test_rescale_preserves_function_bias_free():
    m = build(ModelSpec((2, 3, 2), use_bias=False, seed=4))
    before = m.params.flat.copy()
    x = np.array([[0.3, 0.9]])
    r = rescale_layers(m, 1, 2.0)
    assert np.max(np.abs(r.logits(x) - m.logits(x))) <= 1e-12
    assert np.array_equal(m.params.flat, before)


@pytest.mark.parametrize("alpha", [0.5, 10.0])
def test_rescale_preserves_per_layer_weight_curvature_product(alpha):
    m = build(ModelSpec((2, 3, 2), use_bias=False, seed=5))
    rng = np.random.default_rng(5)
    batch = Batch(rng.uniform(size=(16, 2)), rng.integers(0, 2, 16))
    r = rescale_layers(m, 1, alpha)
    for k in (1, 2):
        p0 = layer_frobenius_sq(m, k) * exact_layer_trace(m, batch, k)
        p1 = layer_frobenius_sq(r, k) * exact_layer_trace(r, batch, k)
        assert abs(p1 - p0) <= 1e-5 * abs(p0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.05, 20.0), bias=st.booleans())
def test_rescale_function_preservation_property(seed, alpha, bias):
    m = build(ModelSpec((3, 8, 6, 2), use_bias=bias, seed=seed))
    x = np.random.default_rng(seed).uniform(-1, 1, size=(100, 3))
    for k in (1, 2):
        r = rescale_layers(m, k, alpha)
        assert np.max(np.abs(r.logits(x) - m.logits(x))) <= 1e-10


def test_rescale_errors():
    m = build(ModelSpec((2, 3, 2)))
    with pytest.raises(DomainError):
        rescale_layers(m, 1, 0.0)
    with pytest.raises(DomainError):
        rescale_layers(m, 1, -2.0)
    with pytest.raises(IndexError):
        rescale_layers(m, 2, 2.0)


def test_digest_tracks_architecture():
    assert ModelSpec((2, 3)).digest() == ModelSpec((2, 3)).digest()
    assert ModelSpec((2, 3)).digest() != ModelSpec((2, 4)).digest()
    assert len(ModelSpec((2, 3)).digest()) == 8
