from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gbtomo import experiments, verify
from gbtomo.beam import BeamParameters, Coefficients, assemble_quasimode
from gbtomo.cli import default_config
from gbtomo.fermi import build_cover
from gbtomo.manifold import euclidean_disk, geodesic_trace

SWEEP_H = [2.0**-k for k in range(3, 7)]
FINE_H = [2.0**-k for k in range(6, 10)]


def _ones(x):
    return np.ones(np.asarray(x).shape[:-1])


@pytest.fixture(scope="module")
def builder():
    return experiments.beam_builder(default_config("verify"))


@pytest.fixture(scope="module")
def sweeps(builder):
    return verify.multi_sweep(builder, SWEEP_H, builder.coefficients)


@pytest.fixture(scope="module")
def broken_transport_sweep(builder):
    def broken(h, kind):
        return dataclasses.replace(builder(h, kind), transport_shift=lambda tau: 0.1 * tau)

    return verify.h_sweep(broken, FINE_H, "residual_adjoint", builder.coefficients, exclude_largest=False)


# ---------------------------------------------------------------------------
# slope fitting and sweep records
# ---------------------------------------------------------------------------


@given(st.floats(min_value=-3.0, max_value=3.0), st.floats(min_value=0.1, max_value=10.0))
def test_fit_slope_recovers_power_laws(p, c):
    h = [2.0**-k for k in range(2, 8)]
    slope, ci = verify.fit_slope(h, [c * x**p for x in h])
    assert slope == pytest.approx(p, abs=1e-9)
    assert ci < 1e-6


def test_fit_slope_drops_the_largest_h_as_pre_asymptotic():
    h = [1.0, 0.5, 0.25, 0.125]
    v = [100.0, 0.25, 0.0625, 0.015625]
    assert verify.fit_slope(h, v)[0] == pytest.approx(2.0)
    assert verify.fit_slope(h, v, exclude_largest=False)[0] > 3.0


def test_make_sweep_flags_non_monotone_values_and_widens_the_interval():
    h = [0.5, 0.25, 0.125, 0.0625]
    clean = verify.make_sweep(h, "l2_Q", [1.0, 1.1, 1.05, 1.2], exclude_largest=False)
    assert clean.flagged
    raw_ci = verify.fit_slope(h, [1.0, 1.1, 1.05, 1.2], exclude_largest=False)[1]
    assert clean.slope_ci == pytest.approx(2 * raw_ci)
    assert not verify.make_sweep(h, "l2_Q", [1.0, 0.5, 0.25, 0.1]).flagged


def test_sweep_result_validates_its_grid_and_values():
    with pytest.raises(ValueError):
        verify.SweepResult([0.1, 0.2], "l2_Q", [1.0, 1.0], 0.0, 0.0)
    with pytest.raises(ValueError):
        verify.SweepResult([0.2, 0.1], "l2_Q", [1.0, -1.0], 0.0, 0.0)
    with pytest.raises(ValueError):
        verify.SweepResult([0.2, 0.1], "l2_Q", [1.0, float("nan")], 0.0, 0.0)


def test_h_sweep_needs_four_values_over_two_octaves(builder):
    with pytest.raises(ValueError):
        verify.h_sweep(builder, [0.1, 0.05, 0.025], "l2_Q")
    with pytest.raises(ValueError):
        verify.h_sweep(builder, [0.1, 0.09, 0.08, 0.07], "l2_Q")


def test_quantity_and_kind_mismatches_are_rejected(builder):
    qm = builder(0.125, "v")
    with pytest.raises(ValueError):
        verify.evaluate_quantity(qm, "residual_forward")
    with pytest.raises(ValueError):
        verify.evaluate_quantity(qm, "no_such_quantity")
    with pytest.raises(ValueError):
        verify.conjugated_residual(qm, Coefficients(), params=BeamParameters(0.25))


def test_coarse_tube_grid_raises_resolution_error(builder):
    with pytest.raises(verify.ResolutionError):
        verify.tube_grid(builder(0.125, "v"), y_points_per_width=1.0)


def test_sweep_values_are_bitwise_reproducible(builder):
    a = verify.l2_norms(builder(0.125, "v"))
    b = verify.l2_norms(experiments.beam_builder(default_config("verify"))(0.125, "v"))
    assert a == b


# ---------------------------------------------------------------------------
# eikonal order
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def flat_beam():
    seg = geodesic_trace(euclidean_disk(), np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    cov = build_cover(seg, 4.0)
    return cov, assemble_quasimode(cov, BeamParameters(0.01), Coefficients(), "v")


def test_flat_eikonal_residual_is_the_quartic_remainder(flat_beam):
    # H = (tau - i)^-1 solves H' + H^2 = 0, so the y^2 terms cancel and
    # (1 - beta^2) H'^2 y^4 / 4 is all that is left
    cov, qm = flat_beam
    tau = np.linspace(*cov.charts[0].tau_interval, 31)
    for r in (0.3, 0.1, 0.01):
        res = verify.eikonal_residual(qm.phase, cov.charts[0], tau, np.full((tau.size, 1), r))
        dH = -1.0 / (tau - 1j) ** 2
        expected = (1 - 0.6**2) * 0.25 * dH**2 * r**4
        # relative agreement plus a rounding floor from subtracting 1 - beta^2
        assert np.max(np.abs(res - expected)) <= 1e-9 * np.max(np.abs(expected)) + 1e-14


def test_flat_eikonal_residual_vanishes_on_the_axis(flat_beam):
    cov, qm = flat_beam
    tau = np.linspace(*cov.charts[0].tau_interval, 31)
    assert np.max(np.abs(verify.eikonal_residual(qm.phase, cov.charts[0], tau, np.zeros((tau.size, 1))))) < 1e-12


def test_flat_eikonal_order_is_four(flat_beam):
    cov, qm = flat_beam
    assert verify.eikonal_residual_order(qm.phase, cov.charts[0]).fitted_slope == pytest.approx(4.0, abs=0.01)


@pytest.mark.xfail(strict=True, reason="a phase quadratic in y leaves a y^4 remainder even when F = 0")
def test_flat_eikonal_residual_below_roundoff_on_every_shell(flat_beam):
    cov, qm = flat_beam
    assert max(verify.eikonal_residual_order(qm.phase, cov.charts[0]).values) < 1e-12


@pytest.mark.parametrize("beta", [0.6, 0.7, 0.9])
def test_eikonal_residual_is_third_order_on_the_curved_disk(curved_cover, beta):
    qm = assemble_quasimode(curved_cover, BeamParameters(0.01, beta=beta), Coefficients(), "v")
    res = verify.eikonal_residual_order(qm.phase, curved_cover.charts[0])
    assert res.fitted_slope >= 2.7


def test_eikonal_order_is_independent_of_beta(curved_cover):
    slopes = []
    for beta in (0.6, 0.7, 0.9):
        qm = assemble_quasimode(curved_cover, BeamParameters(0.01, beta=beta), Coefficients(), "v")
        slopes.append(verify.eikonal_residual_order(qm.phase, curved_cover.charts[0]).fitted_slope)
    assert max(slopes) - min(slopes) <= 0.2


# ---------------------------------------------------------------------------
# h sweeps on the curved disk with compact damping
# ---------------------------------------------------------------------------


def test_l2_norm_is_order_one(sweeps):
    assert abs(sweeps["l2_Q"].fitted_slope) <= 0.15


def test_time_derivative_norm_grows_slower_than_h_to_minus_half(sweeps):
    # alpha margin 0.1 above the -1/2 bound
    assert sweeps["dt_l2_Q"].fitted_slope >= -0.5 + 0.1


@pytest.mark.parametrize("quantity", ["residual_adjoint", "residual_forward"])
def test_conjugated_residual_is_little_o_of_h(sweeps, quantity):
    s = sweeps[quantity]
    assert s.fitted_slope > 1.0
    assert all(b < a for a, b in zip(s.values, s.values[1:]))


def test_boundary_norm_is_order_one(builder):
    s = verify.h_sweep(builder, SWEEP_H, "boundary_l2")
    assert abs(s.fitted_slope) <= 0.2


def test_broken_transport_residual_drops_to_first_order(broken_transport_sweep):
    # a transport defect of size 0.1 leaves an O(h) residual: the o(h) check fails
    assert broken_transport_sweep.fitted_slope == pytest.approx(1.0, abs=0.15)
    assert broken_transport_sweep.fitted_slope <= 1.0 + 0.15


@pytest.mark.xfail(strict=True, reason="a transport defect leaves an O(h) residual, so the slope settles at 1, not below 1/2")
def test_broken_transport_residual_slope_below_one_half(broken_transport_sweep):
    assert broken_transport_sweep.fitted_slope <= 0.5


def test_quadrature_doubling_changes_norms_by_at_most_one_percent(builder):
    qm = builder(2.0**-5, "v")
    coarse = verify.tube_grid(qm)
    fine = verify.tube_grid(qm, y_points_per_width=24.0, tau_points=400)
    n0, n1 = verify.l2_norms(qm, grid=coarse), verify.l2_norms(qm, n_gl=24, grid=fine)
    for key in n0:
        assert n0[key] == pytest.approx(n1[key], rel=0.01)
    r0 = verify.conjugated_residual(qm, builder.coefficients, grid=coarse)
    r1 = verify.conjugated_residual(qm, builder.coefficients, n_gl=24, grid=fine)
    assert r0 == pytest.approx(r1, rel=0.01)
    assert verify.boundary_l2(qm) == pytest.approx(verify.boundary_l2(qm, points_per_width=48.0), rel=0.01)


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("beta", [0.6, 0.8])
def test_concentration_rhs_closed_forms(builder, beta):
    cov = builder.cover
    v = assemble_quasimode(cov, BeamParameters(2.0**-4, beta=beta), Coefficients(), "v")
    w = assemble_quasimode(cov, BeamParameters(2.0**-4, beta=beta), Coefficients(), "w")
    L = cov.length
    rhs = verify.concentration_rhs(v, w, _ones, (0.5, 0.5))
    assert rhs == pytest.approx(L * (1 - beta**2) ** 0.25, rel=1e-10)
    limit = verify.concentration_rhs(v, w, _ones, (0.5, 0.5), weight_exponent=-0.25)
    assert limit == pytest.approx(L * (1 - beta**2) ** -0.25, rel=1e-10)


def test_concentration_vanishes_away_from_the_geodesic(builder):
    def psi(x):
        y = np.asarray(x)[..., 1]
        return np.where(y > 0.4, (y - 0.4) ** 2, 0.0)

    h_grid = [2.0**-k for k in range(2, 6)]
    lhs = []
    for h in h_grid:
        total, _ = verify.concentration_pair(builder(h, "v"), builder(h, "w"), psi, (0.5, 0.5))
        lhs.append(abs(total))
    assert all(b < a for a, b in zip(lhs, lhs[1:]))
    assert verify.fit_slope(h_grid, lhs, exclude_largest=False)[0] >= 1.0
