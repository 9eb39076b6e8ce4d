import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from conftest import draw_weights
from groundfail_svi.errors import DomainError
from groundfail_svi.model_core import (
    HyperParams,
    LocationRecord,
    NodeKind,
    WeightSet,
    build_location_graph,
    dpm_log_density,
    latent_activation_prob,
    latent_logit,
    project_weights,
    xor_log_potential,
)


@pytest.mark.parametrize(
    "bias, noise_w, noise, parents, expected",
    [
        (0.0, 0.0, 0.0, [], 0.0),
        (0.0, 0.0, 0.0, [(2.0, 0.5)], 1.0),
        (-3.0, 1.0, 0.5, [(4.0, 1.0)], 1.5),
    ],
)
def test_latent_logit(bias, noise_w, noise, parents, expected):
    assert latent_logit(bias, noise_w, noise, parents) == pytest.approx(expected)


def test_activation_examples():
    assert latent_activation_prob(0.0, 1) == 0.5
    assert latent_activation_prob(1.0, 1) == pytest.approx(0.731059, abs=1e-6)
    assert latent_activation_prob(1.0, 0) == pytest.approx(0.268941, abs=1e-6)
    p = latent_activation_prob(50.0, 1)
    assert 1.0 - 1e-9 < p <= 1.0
    assert latent_activation_prob(-700.0, 1) >= 0.0


@given(st.floats(min_value=-700, max_value=700, allow_nan=False))
def test_activation_states_sum_to_one(logit):
    assert latent_activation_prob(logit, 1) + latent_activation_prob(logit, 0) == pytest.approx(1.0, abs=1e-15)


def test_dpm_log_density_examples():
    w = WeightSet(we_y=1.0)
    y = math.exp(-1.0)
    assert dpm_log_density(y, (0, 0, None), w, 1e-12, truncated=False) == pytest.approx(-0.418939, abs=1e-6)
    assert dpm_log_density(y, (0, 0, None), w, 1e-12, truncated=True) == pytest.approx(0.274208, abs=1e-6)
    assert dpm_log_density(1.0, (0, 0, None), w, 1e-4, truncated=False) == pytest.approx(-0.919039, abs=1e-6)


def test_dpm_log_density_rejects_out_of_support():
    w = WeightSet(we_y=1.0)
    with pytest.raises(DomainError):
        dpm_log_density(1.5, (0, 0, None), w, 1e-4)
    with pytest.raises(DomainError):
        dpm_log_density(1e-6, (0, 0, None), w, 1e-4)


def test_truncated_density_integrates_to_one(rng):
    delta = 1e-4
    for _ in range(100):
        w = draw_weights(rng, we_y_range=(0.3, 1.5))
        parents = tuple(int(v) for v in rng.integers(0, 2, size=3))

        def density(y):
            return math.exp(dpm_log_density(y, parents, w, delta, truncated=True))

        # substitute z = log(y + delta) so the quadrature sees a smooth integrand
        def in_z(z):
            return density(math.exp(z) - delta) * math.exp(z)

        lower = math.log(2.0 * delta)
        total, _ = quad(in_z, lower, math.log(1.0 + delta), limit=200)
        # the mass below y = delta is cut off by the support
        mean = w.w0_y + w.w_ls_y * parents[0] + w.w_lf_y * parents[1] + w.w_bd_y * parents[2]
        cut = norm.cdf((lower - mean) / w.we_y) / norm.cdf((math.log(1.0 + delta) - mean) / w.we_y)
        assert total + cut == pytest.approx(1.0, abs=1e-4)


def test_xor_potential_examples():
    assert xor_log_potential(0.0, 1, 0, 0.1) == pytest.approx(1.383647, abs=1e-6)
    assert xor_log_potential(0.0, 1, 1, 0.1) == pytest.approx(1.383647 - 50.0, abs=1e-6)
    assert xor_log_potential(0.0, 0, 0, 0.1) == pytest.approx(1.383647, abs=1e-6)
    with pytest.raises(DomainError):
        xor_log_potential(0.0, 1, 1, 0.0)


@pytest.mark.parametrize("x_ls, x_lf", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_xor_potential_normalised_over_u(x_ls, x_lf):
    total, _ = quad(
        lambda u: math.exp(xor_log_potential(u, x_ls, x_lf, 0.1)),
        -5.0,
        6.0,
        points=[0.0, 1.0],
        epsabs=1e-12,
        epsrel=1e-12,
        limit=200,
    )
    assert total == pytest.approx(1.0, abs=1e-9)


def test_xor_potential_prefers_exclusive_states():
    values = {(a, b): xor_log_potential(0.0, a, b, 0.2) for a in (0, 1) for b in (0, 1)}
    best = max(values.values())
    assert {k for k, v in values.items() if v == best} == {(0, 0), (0, 1), (1, 0)}


def test_location_graph_with_and_without_building():
    rec = LocationRecord((0, 0), 0.5, 0.2, 0.3, has_building=True)
    graph = build_location_graph(rec)
    assert len(graph.nodes) == 6
    assert graph.y_parents == (NodeKind.LS, NodeKind.LF, NodeKind.BD)
    assert (NodeKind.LS.value, NodeKind.BD.value) in graph.edges

    bare = build_location_graph(LocationRecord((0, 0), 0.5, 0.2, 0.3))
    assert len(bare.nodes) == 5
    assert NodeKind.BD not in bare.nodes
    assert bare.y_parents == (NodeKind.LS, NodeKind.LF)

    invalid = LocationRecord.from_raw((1, 1), None, 0.2, 0.3, False, 1e-4)
    with pytest.raises(DomainError):
        build_location_graph(invalid)


def test_record_from_raw_clamps_and_rejects():
    rec = LocationRecord.from_raw((0, 0), 0.0, 1.0 + 5e-7, -5e-7, True, 1e-4)
    assert rec.y == 1e-4
    assert rec.alpha_ls == 1.0 and rec.alpha_lf == 0.0
    assert not LocationRecord.from_raw((0, 0), float("nan"), 0.1, 0.1, False, 1e-4).valid
    with pytest.raises(DomainError):
        LocationRecord.from_raw((0, 0), 0.5, 1.01, 0.1, False, 1e-4)


def test_weight_constraints():
    with pytest.raises(DomainError):
        WeightSet(w0_y=0.1)
    with pytest.raises(DomainError):
        WeightSet(we_y=1e-4)
    with pytest.raises(DomainError):
        WeightSet(we_ls=-0.1)
    raw = WeightSet.initial().as_array()
    names = WeightSet.field_names()
    raw[names.index("w0_y")] = 3.0
    raw[names.index("we_y")] = -1.0
    raw[names.index("we_bd")] = -2.0
    projected = WeightSet.from_array(project_weights(raw))
    assert projected.w0_y == 0.0
    assert projected.we_y == 1e-3
    assert projected.we_bd == 0.0


def test_weight_mapping_round_trip():
    w = WeightSet.from_mapping({"w_ls_y": 1.5})
    assert w.w_ls_y == 1.5
    assert w.wa_ls == WeightSet.initial().wa_ls
    assert WeightSet.from_array(w.as_array()) == w
    with pytest.raises(DomainError):
        WeightSet.from_mapping({"w_unknown": 1.0})


@pytest.mark.parametrize(
    "kwargs",
    [
        {"sigma_xor": 0.0},
        {"sigma_xor": 1.5},
        {"delta": 0.0},
        {"delta": 0.5},
        {"rho": -1.0},
        {"batch_size": 0},
        {"e_tol": 0.0},
        {"conv_window": 1},
    ],
)
def test_hyperparams_invariants(kwargs):
    with pytest.raises(DomainError):
        HyperParams(**kwargs)


def test_hyperparams_allow_disabled_exclusivity():
    assert HyperParams(sigma_xor=math.inf).sigma_xor == math.inf
    assert HyperParams().effective_y_floor == HyperParams().delta
    assert HyperParams(y_floor=0.01).effective_y_floor == 0.01
    assert np.isfinite(HyperParams().rho)
