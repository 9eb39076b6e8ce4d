import math

import numpy as np
import pytest
from scipy.special import entr

from conftest import draw_record, draw_state, draw_weights
from groundfail_svi.bound import (
    CellBatch,
    PosteriorState,
    PosteriorTable,
    location_bound,
    posterior_logit_T,
    total_bound,
    weight_gradient,
)
from groundfail_svi.errors import DomainError
from groundfail_svi.model_core import HyperParams, LocationRecord, NodeKind, WeightSet
from groundfail_svi.oracle import finite_diff_gradient


def _entropy(q):
    return float(entr(q) + entr(1.0 - q))


def test_symmetric_location_bound_is_zero():
    h = HyperParams(sigma_xor=0.5, delta=1e-12)
    rec = LocationRecord((0, 0), math.exp(-1.0), 0.3, 0.6, has_building=True)
    q = PosteriorState(0.5, 0.5, 0.5)
    assert location_bound(rec, q, WeightSet(we_y=1.0), h) == pytest.approx(0.0, abs=1e-9)


def test_xor_summand_change():
    h = HyperParams(sigma_xor=0.2)
    w = WeightSet(we_y=1.0)
    rec = LocationRecord((0, 0), 0.4, 0.3, 0.6)
    half = location_bound(rec, PosteriorState(0.5, 0.5), w, h)
    tiny = location_bound(rec, PosteriorState(1e-7, 1e-7), w, h)
    # all other terms are symmetric in q for zero weights except the entropy
    entropy_change = 2 * (_entropy(1e-7) - _entropy(0.5))
    coupling = 1.0 / (2.0 * 0.2 ** 2)
    assert tiny - half - entropy_change == pytest.approx(coupling * (0.25 - 1e-14), rel=1e-9)


def test_total_bound_is_a_sum(rng, hyper):
    w = draw_weights(rng)
    rec = draw_record(rng, has_building=True)
    q = draw_state(rng, True)
    single = location_bound(rec, q, w, hyper)
    assert total_bound([], [], w, hyper) == 0.0
    assert total_bound([rec], [q], w, hyper) == pytest.approx(single, rel=1e-12)
    assert total_bound([rec, rec], [q, q], w, hyper) == pytest.approx(2.0 * single, rel=1e-12)


def test_bound_needs_bd_marginal_on_footprint(hyper):
    rec = LocationRecord((0, 0), 0.4, 0.3, 0.6, has_building=True)
    with pytest.raises(DomainError):
        location_bound(rec, PosteriorState(0.5, 0.5), WeightSet.initial(), hyper)


def test_posterior_state_range():
    with pytest.raises(DomainError):
        PosteriorState(0.0, 0.5)
    with pytest.raises(DomainError):
        PosteriorState(0.5, 1.0)
    assert PosteriorState.clamped(0.0, 1.0, 0.5).q_ls == pytest.approx(1e-7)


def test_logits_vanish_for_symmetric_model():
    h = HyperParams(sigma_xor=math.inf)
    rec = LocationRecord((0, 0), 0.3, 0.8, 0.1, has_building=True)
    q = PosteriorState(0.2, 0.7, 0.4)
    for node in (NodeKind.LS, NodeKind.LF, NodeKind.BD):
        assert posterior_logit_T(rec, node, q, WeightSet(we_y=1.0), h) == pytest.approx(0.0, abs=1e-12)


def test_logit_rejects_absent_or_observed_nodes(hyper):
    rec = LocationRecord((0, 0), 0.3, 0.8, 0.1)
    q = PosteriorState(0.2, 0.7)
    with pytest.raises(DomainError):
        posterior_logit_T(rec, NodeKind.BD, q, WeightSet.initial(), hyper)
    with pytest.raises(DomainError):
        posterior_logit_T(rec, NodeKind.Y, q, WeightSet.initial(), hyper)


def test_logit_matches_finite_difference(rng, hyper):
    step = 1e-6
    for _ in range(50):
        rec = draw_record(rng, has_building=True)
        q = draw_state(rng, True, 0.05, 0.95)
        w = draw_weights(rng)
        for node, attr in ((NodeKind.LS, "q_ls"), (NodeKind.LF, "q_lf"), (NodeKind.BD, "q_bd")):
            def entropy_free(value):
                moved = PosteriorState(**{**q.__dict__, attr: value})
                return location_bound(rec, moved, w, hyper) - _entropy(value)

            q_i = getattr(q, attr)
            fd = (entropy_free(q_i + step) - entropy_free(q_i - step)) / (2.0 * step)
            assert posterior_logit_T(rec, node, q, w, hyper) == pytest.approx(fd, abs=1e-6)


def test_landslide_logit_falls_with_liquefaction_belief(hyper):
    rec = LocationRecord((0, 0), 0.6, 0.7, 0.7)
    w = WeightSet.initial()
    logits = [posterior_logit_T(rec, NodeKind.LS, PosteriorState(0.5, q_lf), w, hyper) for q_lf in (0.6, 0.8, 0.95)]
    assert logits[0] > logits[1] > logits[2]


def test_gradient_of_bias_is_log_dpm():
    h = HyperParams(delta=1e-12)
    rec = LocationRecord((0, 0), 0.25, 0.3, 0.6, has_building=True)
    grad = weight_gradient([rec], [PosteriorState(0.5, 0.5, 0.5)], WeightSet(we_y=1.0), h)
    assert grad["w0_y"] == pytest.approx(math.log(0.25), rel=1e-9)


def test_gradient_is_linear_in_the_batch(rng, hyper):
    w = draw_weights(rng)
    rec = draw_record(rng, has_building=True)
    q = draw_state(rng, True)
    single = weight_gradient([rec], [q], w, hyper).values
    double = weight_gradient([rec, rec], [q, q], w, hyper).values
    np.testing.assert_allclose(double, 2.0 * single, rtol=1e-12, atol=1e-12)
    with pytest.raises(DomainError):
        weight_gradient([], [], w, hyper)


def test_gradient_matches_finite_difference(rng, hyper):
    records = [draw_record(rng, index=(0, i)) for i in range(6)]
    states = [draw_state(rng, r.has_building) for r in records]
    w = draw_weights(rng)
    analytic = weight_gradient(records, states, w, hyper).values
    numeric = finite_diff_gradient(lambda v: total_bound(records, states, v, hyper), w).values
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_array_and_record_paths_agree(rng, hyper):
    records = [draw_record(rng, index=(0, i)) for i in range(10)]
    states = [draw_state(rng, r.has_building) for r in records]
    w = draw_weights(rng)
    cells = CellBatch.from_records(records, hyper.delta)
    table = PosteriorTable.from_states(states)
    assert total_bound(cells, table, w, hyper) == pytest.approx(total_bound(records, states, w, hyper), rel=1e-12)
    assert total_bound(records, states, w, hyper) == pytest.approx(
        sum(location_bound(r, s, w, hyper) for r, s in zip(records, states)), rel=1e-12
    )
