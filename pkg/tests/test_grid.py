import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshcal.errors import AllMassZero, MissingRange
from meshcal.grid import (
    GridBelief,
    GridSpec,
    HypothesisSet,
    PgpParams,
    TrackSmoother,
    estimate_position,
    histogram_filter_a1,
    init_anchor2_grid,
    likelihood_hypotheses,
    likelihood_parametric,
    predict,
    predict_histogram,
    propagate_mass,
    ring_field,
    sample_hypotheses,
    smooth_ema,
    top_cells,
    update,
)
from meshcal.types import Position2D

from oracles import cell_centers, gaussian_field, ring_likelihood


def point_mass(spec, xy):
    w = np.zeros(spec.m_total)
    w[spec.index_of(*xy)] = 1.0
    return GridBelief(spec, w)


# -- grid spec and belief --------------------------------------------------------

def test_grid_spec_geometry_and_indexing():
    spec = GridSpec(0, 2, 0, 1, 0.5)
    assert spec.shape == (2, 4) and spec.m_total == 8
    expected = cell_centers(0, 0, 4, 2, 0.5)
    np.testing.assert_allclose(spec.centers(), expected)
    assert spec.index_of(1.6, 0.7) == 1 * 4 + 3
    np.testing.assert_allclose(spec.center(5), expected[5])


@pytest.mark.parametrize("bad", [dict(cell_size=0), dict(x_max=-1), dict(y_min=5)])
def test_grid_spec_validation(bad):
    kw = dict(x_min=0, x_max=1, y_min=0, y_max=1, cell_size=0.1) | bad
    with pytest.raises(ValueError):
        GridSpec(**kw)


def test_grid_belief_invariants():
    spec = GridSpec(0, 1, 0, 1, 0.5)
    with pytest.raises(ValueError):
        GridBelief(spec, np.full(4, 0.3))
    with pytest.raises(ValueError):
        GridBelief(spec, [1.5, -0.5, 0, 0])
    with pytest.raises(AllMassZero):
        GridBelief.from_weights(spec, np.zeros(4))
    assert GridBelief.uniform(spec).flat.sum() == pytest.approx(1.0)


# -- parameters ------------------------------------------------------------------

def test_pgp_params_defaults_and_validation():
    p = PgpParams(d_max=40)
    assert p.h_bins == 801
    for bad in (dict(sigma_r=0), dict(sigma_v=-1), dict(r_est=0), dict(h_bins=1), dict(tau_percent=0),
                dict(alpha=0), dict(mode="particles"), dict(outlier_floor=1.0)):
        with pytest.raises(ValueError):
            PgpParams(**bad)


# -- axis histogram --------------------------------------------------------------

def test_histogram_filter_mode_and_estimate():
    p = PgpParams(sigma_r=0.1, d_max=40)
    res = histogram_filter_a1(5.0, p)
    assert res.centers[np.argmax(res.bins)] == pytest.approx(5.0)
    assert res.estimate == pytest.approx(5.0, abs=1e-6)
    assert not res.clamped


def test_histogram_filter_bin_ratio():
    p = PgpParams(sigma_r=0.1, d_max=40)
    res = histogram_filter_a1(5.0, p)
    i = int(round(5.0 / 0.05))
    assert res.bins[i + 1] / res.bins[i] == pytest.approx(math.exp(-(0.05**2) / (2 * 0.1**2)), rel=1e-12)
    assert res.bins[i + 1] / res.bins[i] == pytest.approx(0.8825, abs=5e-5)


def test_histogram_filter_flat_limit_and_errors():
    p = PgpParams(sigma_r=10 * 40, d_max=40)
    bins = histogram_filter_a1(5.0, p).bins
    assert bins.max() / bins.min() < 1.01
    with pytest.raises(MissingRange):
        histogram_filter_a1(None, p)
    assert histogram_filter_a1(55.0, p).clamped


def test_histogram_recursion_narrows_and_predict_blurs():
    p = PgpParams(sigma_r=0.3, d_max=40, sigma_v=0.1)
    first = histogram_filter_a1(12.0, p)
    second = histogram_filter_a1(12.0, p, predict_histogram(first.bins, p))
    var = lambda r: float(r.bins @ (r.centers - r.estimate) ** 2)
    assert var(second) < var(first)
    blurred = predict_histogram(first.bins, p)
    assert blurred.sum() == pytest.approx(1.0)
    assert float(blurred @ (first.centers - 12.0) ** 2) > var(first)


# -- anchor-2 grid ---------------------------------------------------------------

def test_init_anchor2_grid_peak_and_mass():
    spec = GridSpec(-2, 12, -2, 8, 0.1)
    b = init_anchor2_grid(Position2D(0, 0), Position2D(10, 0), math.sqrt(50), math.sqrt(50), spec, PgpParams())
    cx, cy = spec.center(b.argmax())
    assert math.hypot(cx - 5, cy - 5) <= 0.1 * math.sqrt(2)
    assert b.flat.sum() == pytest.approx(1.0, abs=1e-9)
    assert b.flat[spec.centers()[:, 1] < 0].sum() == 0.0


def test_init_anchor2_grid_errors():
    below = GridSpec(-2, 12, -10, -1, 0.5)
    with pytest.raises(AllMassZero):
        init_anchor2_grid(Position2D(0, 0), Position2D(10, 0), 7.0, 7.0, below, PgpParams())
    with pytest.raises(MissingRange):
        init_anchor2_grid(Position2D(0, 0), Position2D(10, 0), None, 7.0, below, PgpParams())


# -- prediction ------------------------------------------------------------------

def test_predict_delta_kernel_limit():
    spec = GridSpec(0, 5, 0, 5, 0.5)
    rng = np.random.default_rng(0)
    prior = GridBelief.from_weights(spec, rng.random(spec.m_total))
    params = PgpParams(sigma_v=1e-9, k_top=10)
    out = predict(prior, params)
    keep = top_cells(prior, 10)
    expected = np.zeros(spec.m_total)
    expected[keep] = prior.flat[keep]
    np.testing.assert_allclose(out.flat, expected / expected.sum(), atol=1e-12)


def test_predict_point_mass_gives_centred_bump():
    spec = GridSpec(0, 10, 0, 10, 0.25)
    prior = point_mass(spec, (5.1, 5.1))
    out = predict(prior, PgpParams(sigma_v=0.5))
    assert out.argmax() == prior.argmax()
    c = spec.center(prior.argmax())
    d = np.hypot(*(spec.centers() - c).T)
    expected = np.exp(-(d**2) / (2 * 0.5**2))
    expected[d > 8 * 0.5 + 1e-9] = 0
    ring = (d > 0) & (d < 4)
    np.testing.assert_allclose(out.flat[ring] / out.flat.max(), expected[ring], rtol=1e-9, atol=1e-12)


def test_predict_uniform_prior_stays_uniform_inside():
    spec = GridSpec(0, 10, 0, 10, 0.25)
    params = PgpParams(sigma_v=0.2, k_top=spec.m_total)
    out = predict(GridBelief.uniform(spec), params)
    reach = int(math.ceil(8 * 0.2 / 0.25))
    inner = out.mass[reach:-reach, reach:-reach]
    assert np.ptp(inner) / inner.mean() < 1e-6


def test_prediction_leakage_only_at_boundary():
    spec = GridSpec(0, 10, 0, 10, 0.25)
    params = PgpParams(sigma_v=0.5)
    interior = point_mass(spec, (5, 5))
    assert 1 - propagate_mass(interior, params).sum() < 1e-6
    edge = point_mass(spec, (0.1, 5))
    assert propagate_mass(edge, params).sum() < 0.9


def test_top_cells_ties_prefer_lower_index():
    spec = GridSpec(0, 2, 0, 1, 0.5)
    b = GridBelief(spec, [0.2, 0.2, 0.1, 0.2, 0.1, 0.1, 0.05, 0.05])
    assert list(top_cells(b, 2)) == [0, 1]
    assert list(top_cells(b, 3)) == [0, 1, 3]


# -- hypotheses ------------------------------------------------------------------

def test_sample_hypotheses_full_mass():
    spec = GridSpec(0, 2, 0, 1, 0.5)
    b = GridBelief(spec, [0.5, 0.0, 0.3, 0.2, 0, 0, 0, 0])
    h = sample_hypotheses(b, 1.0)
    assert len(h) == 3
    np.testing.assert_allclose(sorted(h.weights), [0.2, 0.3, 0.5])


def test_sample_hypotheses_prefix_example():
    spec = GridSpec(0, 3, 0, 1, 1.0)
    b = GridBelief(spec, [0.2, 0.5, 0.3])
    h = sample_hypotheses(b, 0.7)
    np.testing.assert_allclose(h.weights, [0.625, 0.375])
    np.testing.assert_allclose(h.points, [spec.center(1), spec.center(2)])


def test_sample_hypotheses_single_cell():
    spec = GridSpec(0, 3, 0, 1, 1.0)
    h = sample_hypotheses(GridBelief(spec, [0, 1, 0]), 0.3)
    assert len(h) == 1 and h.weights[0] == 1.0


def test_sample_hypotheses_equal_mass_tie_break():
    spec = GridSpec(0, 4, 0, 1, 1.0)
    h = sample_hypotheses(GridBelief(spec, [0.25] * 4), 0.5)
    np.testing.assert_allclose(h.points, [spec.center(0), spec.center(1)])


def test_hypothesis_set_validation():
    with pytest.raises(ValueError):
        HypothesisSet(np.zeros((2, 2)), [0.5, 0.6])
    with pytest.raises(ValueError):
        HypothesisSet(np.zeros((0, 2)), [])


# -- likelihoods -----------------------------------------------------------------

def test_two_hypotheses_hand_evaluation():
    spec = GridSpec(0.5, 1.5, -0.5, 0.5, 1.0)  # one cell centred at (1, 0)
    h = HypothesisSet([[0, 0], [2, 0]], [0.5, 0.5])
    assert likelihood_hypotheses(spec, [(h, 1.0)], 0.3).item() == pytest.approx(1.0, abs=1e-15)


def test_likelihood_hypotheses_matches_loop_oracle():
    spec = GridSpec(0, 5, 0, 4, 0.5)
    rng = np.random.default_rng(1)
    refs = []
    for _ in range(2):
        pts = rng.uniform(0, 5, (4, 2))
        w = rng.random(4)
        refs.append((HypothesisSet(pts, w / w.sum()), float(rng.uniform(1, 4))))
    field = likelihood_hypotheses(spec, refs, 0.4).ravel()
    cells = cell_centers(0, 0, spec.cols, spec.rows, 0.5)
    for k, cell in enumerate(cells):
        expected = 1.0
        for hyps, z in refs:
            expected *= ring_likelihood(cell, list(zip(map(tuple, hyps.points), hyps.weights)), z, 0.4)
        assert field[k] == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_weight_scaling_keeps_argmax():
    spec = GridSpec(0, 6, 0, 6, 0.25)
    h = HypothesisSet([[1, 1], [4, 2]], [0.7, 0.3])
    base = likelihood_hypotheses(spec, [(h, 2.0)], 0.3)
    scaled = ring_field(spec.centers(), h.points, h.weights * 3.0, 2.0, 0.3)
    assert np.argmax(base) == np.argmax(scaled)


def test_parametric_uses_inflated_sigma():
    spec = GridSpec(0, 6, 0, 6, 0.5)
    field = likelihood_parametric(spec, [(Position2D(1, 1), 0.3, 2.0)], 0.2).ravel()
    expected = gaussian_field(cell_centers(0, 0, 12, 12, 0.5), (1, 1), 0.5, 2.0)
    np.testing.assert_allclose(field, expected, rtol=1e-12)


def test_parametric_off_circle_values_grow_with_sigma():
    spec = GridSpec(0, 6, 0, 6, 0.5)
    k = spec.index_of(5.2, 5.2)
    values = [likelihood_parametric(spec, [(Position2D(1, 1), s, 2.0)], 0.2).ravel()[k] for s in (0, 0.2, 0.5, 1.0)]
    assert all(a < b for a, b in zip(values, values[1:]))


# -- update ----------------------------------------------------------------------

def test_update_flat_likelihood_and_flat_prior():
    spec = GridSpec(0, 3, 0, 3, 1.0)
    rng = np.random.default_rng(2)
    prior = GridBelief.from_weights(spec, rng.random(9))
    np.testing.assert_allclose(update(prior, np.full(9, 0.3)).flat, prior.flat, atol=1e-9)
    like = rng.random(9)
    np.testing.assert_allclose(update(GridBelief.uniform(spec), like).flat, like / like.sum(), atol=1e-12)


def test_update_small_case_against_direct_product():
    spec = GridSpec(0, 3, 0, 3, 1.0)
    prior = [0.05, 0.1, 0.15, 0.2, 0.1, 0.05, 0.1, 0.15, 0.1]
    like = [0.3, 0.0, 1.0, 0.2, 0.9, 0.4, 0.7, 0.1, 0.5]
    prod = [p * l for p, l in zip(prior, like)]
    expected = [v / sum(prod) for v in prod]
    np.testing.assert_allclose(update(GridBelief(spec, prior), like).flat, expected, rtol=0, atol=1e-12)


@given(st.floats(1e-6, 1e6))
def test_update_invariant_to_likelihood_scale(c):
    spec = GridSpec(0, 3, 0, 3, 1.0)
    rng = np.random.default_rng(4)
    prior = GridBelief.from_weights(spec, rng.random(9))
    like = rng.random(9)
    np.testing.assert_allclose(update(prior, c * like).flat, update(prior, like).flat, rtol=1e-12, atol=1e-15)


def test_update_with_subnormal_posterior_mass():
    spec = GridSpec(0, 2, 0, 1, 1.0)
    post = update(GridBelief(spec, [0.5, 0.5]), [1e-320, 3e-320])
    np.testing.assert_allclose(post.flat, [0.25, 0.75], atol=0.01)


def test_update_all_mass_zero():
    spec = GridSpec(0, 2, 0, 1, 1.0)
    with pytest.raises(AllMassZero):
        update(GridBelief(spec, [1.0, 0.0]), [0.0, 1.0])
    with pytest.raises(ValueError):
        update(GridBelief(spec, [1.0, 0.0]), [-1.0, 1.0])


# -- estimate --------------------------------------------------------------------

def test_estimate_single_cell_and_weighted_example():
    spec = GridSpec(-0.5, 1.5, -0.5, 0.5, 1.0)  # centres (0,0) and (1,0)
    assert estimate_position(GridBelief(spec, [0, 1]), 0.5) == Position2D(1.0, 0.0)
    est = estimate_position(GridBelief(spec, [0.6, 0.4]), 1.5)
    assert (est.x, est.y) == pytest.approx((0.4, 0.0), abs=1e-12)


def test_estimate_symmetric_bump():
    spec = GridSpec(0, 10, 0, 10, 0.25)
    d2 = ((spec.centers() - [5.0, 5.0]) ** 2).sum(axis=1)
    b = GridBelief.from_weights(spec, np.exp(-d2 / 2))
    est = estimate_position(b, 3.0)
    assert abs(est.x - 5) <= 0.125 and abs(est.y - 5) <= 0.125


# -- smoothing -------------------------------------------------------------------

def test_smooth_ema_examples():
    p, c = Position2D(0, 0), Position2D(2, 4)
    assert smooth_ema(p, c, 1.0) == c
    assert smooth_ema(p, c, 0.5) == Position2D(1, 2)
    assert smooth_ema(None, c, 0.3) == c
    with pytest.raises(ValueError):
        smooth_ema(p, c, 0.0)


def test_track_smoother_median_window():
    s = TrackSmoother(alpha=1.0, median_window=3)
    outs = [s(Position2D(x, 0)) for x in (1, 2, 100, 3)]
    assert [o.x for o in outs] == [1, 1.5, 2, 3]


# -- normalisation property ------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.05, 1.0),
    st.floats(0.0, 0.6),
    st.integers(1, 200),
    st.floats(0.05, 1.0),
)
def test_operations_emit_normalised_beliefs(seed, sigma_r, sigma_v, k_top, tau):
    rng = np.random.default_rng(seed)
    spec = GridSpec(0, 8, 0, 6, 0.5)
    params = PgpParams(sigma_r=sigma_r, sigma_v=sigma_v, k_top=k_top, tau_percent=tau)
    belief = GridBelief.from_weights(spec, rng.random(spec.m_total) ** 8)
    for _ in range(3):
        belief = predict(belief, params)
        h = sample_hypotheses(belief, tau)
        assert h.weights.sum() == pytest.approx(1.0, abs=1e-9)
        ref = HypothesisSet(rng.uniform(0, 8, (3, 2)), [0.2, 0.3, 0.5])
        field = likelihood_hypotheses(spec, [(ref, float(rng.uniform(0, 6)))], sigma_r)
        try:
            belief = update(belief, field)
        except AllMassZero:
            pass
        assert not np.isnan(belief.flat).any()
        assert abs(belief.flat.sum() - 1.0) <= 1e-9
