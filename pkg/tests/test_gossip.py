import math

import numpy as np
import pytest

from mgskip.errors import DomainError, ParameterError, ShapeError
from mgskip.gossip import (
    MultiGossipOperator,
    chebyshev_envelope,
    chebyshev_eta,
    chebyshev_polynomial,
    default_K,
    fast_goss,
    nominal_radius_bound,
    verify_gossip_bounds,
)
from mgskip.topology import build_random_connectivity, build_ring, complete_graph, metropolis_weights


def _operators():
    graphs = [build_ring(n) for n in (5, 8, 15, 30, 50)]
    graphs += [build_random_connectivity(20, iota, seed) for iota in (0.25, 0.5, 1.0) for seed in range(2)]
    return [MultiGossipOperator.build(metropolis_weights(g), eta_form="standard") for g in graphs]


@pytest.mark.parametrize(
    "rho, expected",
    [(0.9424, 0.4987), (0.5, 0.0718), (0.0, 0.0)],
)
def test_chebyshev_eta_standard(rho, expected):
    assert chebyshev_eta(rho, "standard") == pytest.approx(expected, abs=1e-3)


def test_chebyshev_eta_printed_form():
    assert chebyshev_eta(0.5, "printed") == pytest.approx((1 - math.sqrt(0.75)) / (1 + math.sqrt(1.25)))
    assert chebyshev_eta(0.5, "printed") < chebyshev_eta(0.5, "standard")


def test_chebyshev_eta_domain():
    with pytest.raises(DomainError):
        chebyshev_eta(1.0, "standard")
    with pytest.raises(DomainError):
        chebyshev_eta(-0.1, "standard")
    with pytest.raises(ParameterError):
        chebyshev_eta(0.5, "other")


def test_default_rounds(ring15):
    assert default_K(ring15.rho) == 4
    assert default_K(0.0) == 1
    assert default_K(0.75) == 2
    with pytest.raises(DomainError):
        default_K(1.0)


def test_operator_rejects_zero_rounds(ring15):
    with pytest.raises(ParameterError):
        MultiGossipOperator(mixing=ring15, rounds=0, eta=0.1)


def test_fast_goss_matches_dense_operator(rng):
    for op in _operators():
        dense = np.eye(op.n) - op.mbar
        for _ in range(100):
            z = rng.standard_normal((op.n, 3))
            np.testing.assert_allclose(op.fast_goss(z), dense @ z, atol=1e-10)


def test_fast_goss_annihilates_consensus(rng):
    for op in _operators():
        z = np.tile(rng.standard_normal(4), (op.n, 1))
        np.testing.assert_allclose(fast_goss(op, z), 0.0, atol=1e-12)


def test_fast_goss_shape_check(ring15_gossip):
    with pytest.raises(ShapeError):
        ring15_gossip.fast_goss(np.zeros((14, 2)))
    with pytest.raises(ShapeError):
        ring15_gossip.fast_goss(np.zeros(15))


def test_mbar_spectrum_is_polynomial_of_w():
    for op in _operators():
        predicted = np.sort(chebyshev_polynomial(op.eta, op.rounds, op.mixing.eigenvalues))
        actual = np.sort(np.linalg.eigvalsh(op.mbar))
        np.testing.assert_allclose(actual, predicted, atol=1e-10)


def test_mbar_is_symmetric_doubly_stochastic():
    for op in _operators():
        np.testing.assert_allclose(op.mbar, op.mbar.T, atol=1e-12)
        np.testing.assert_allclose(op.mbar.sum(axis=1), 1.0, atol=1e-10)


def test_ring15_gossip_report(ring15_gossip):
    report = verify_gossip_bounds(ring15_gossip)
    assert report.rounds == 4
    assert report.eta == pytest.approx(0.4987, abs=1e-3)
    assert report.sigma_min == pytest.approx(0.459, abs=5e-3)
    assert report.sigma_min_ok
    assert report.passed
    # the double root at λ = ρ keeps |m_K(ρ)| = r^K (1 + K(1 - r)) above the nominal bound
    r = math.sqrt(report.eta)
    assert report.radius == pytest.approx(r**4 * (1 + 4 * (1 - r)), rel=1e-6)
    assert report.radius > nominal_radius_bound(report.rho, 4)
    assert not report.radius_bound_ok


def test_envelope_holds_on_every_topology():
    for op in _operators():
        report = verify_gossip_bounds(op)
        assert report.envelope_ok, f"n={op.n} rho={op.mixing.rho:.4f}"
        assert report.symmetric and report.doubly_stochastic


def test_envelope_formula():
    assert chebyshev_envelope(0.25, 2) == pytest.approx(0.25 * (1 + 2 * 1.5))
    assert chebyshev_envelope(0.0, 3) == 0.0


def test_complete_graph_is_exact_average():
    op = MultiGossipOperator.build(metropolis_weights(complete_graph(7)), eta_form="standard")
    assert op.rounds == 1
    report = verify_gossip_bounds(op)
    assert report.radius == pytest.approx(0.0, abs=1e-12)
    assert report.sigma_min == pytest.approx(1.0)
    assert report.sigma_min_ok


def test_dual_factor(ring15_gossip):
    factor = ring15_gossip.dual_factor
    half = 0.5 * (np.eye(15) - ring15_gossip.mbar)
    np.testing.assert_allclose(factor.sqrt @ factor.sqrt, half, atol=1e-12)
    np.testing.assert_allclose(factor.projector @ np.ones(15), 0.0, atol=1e-12)
    np.testing.assert_allclose(factor.sqrt @ factor.pinv, factor.projector, atol=1e-10)


def test_explicit_rounds_override(ring15):
    op = MultiGossipOperator.build(ring15, rounds=1, eta_form="standard")
    assert op.rounds == 1
    assert verify_gossip_bounds(op).sigma_min_ok is None


def test_single_round_is_plain_mixing(ring15, rng):
    op = MultiGossipOperator.single_round(ring15)
    assert op.rounds == 1
    assert op.eta == 0.0
    np.testing.assert_allclose(op.mbar, ring15.w, atol=1e-15)
    z = rng.standard_normal((15, 3))
    np.testing.assert_allclose(op.fast_goss(z), z - ring15.w @ z, atol=1e-12)
