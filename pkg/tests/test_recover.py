from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gbtomo import experiments, recover, xray
from gbtomo.cli import default_config

SMALL = recover.PipelineSettings(grid_n=16, n_points=32, n_dirs=32, n_t=17, n_x=17)


@pytest.fixture(scope="module")
def small_ctx():
    return recover.PipelineContext(SMALL)


@pytest.fixture(scope="module")
def small_inputs(small_ctx):
    return experiments.recover_inputs(default_config("recover"), small_ctx, 0)


@pytest.fixture(scope="module")
def full_ctx():
    return recover.PipelineContext(recover.PipelineSettings())


@pytest.fixture(scope="module")
def full_damping(full_ctx):
    cfg = default_config("recover")
    a1, a2, q1, q2, diff = experiments.recover_inputs(cfg, full_ctx, 0)
    return recover.pipeline(a1, a2, q1, q2, full_ctx.settings, ctx=full_ctx), diff


def _gaussian_line_setup(ctx):
    qg = ctx.q_grid
    P = ctx.points
    g = np.exp(-np.sum((P - 0.5) ** 2, axis=1) / (2 * 0.15**2)) * ctx.mask
    bump = np.exp(-((qg.t[:, None] - 0.5) ** 2 + (qg.x1[None, :] - 0.5) ** 2) / (2 * 0.08**2))
    coeff = bump[:, :, None] * g[None, None, :]
    coeff[np.abs(coeff) < 1e-14] = 0.0
    return coeff


# ---------------------------------------------------------------------------
# Fourier-line samples
# ---------------------------------------------------------------------------


def test_zero_coefficient_gives_zero_samples():
    t = np.linspace(0, 1, 9)
    s = recover.fourier_line_samples(np.zeros((9, 9, 4)), [0.8], [0.5, -0.5], t, t, np.zeros((4, 2)))
    assert np.all(s.f_values == 0)


@pytest.mark.parametrize("beta", [0.6, 0.8, 0.95])
def test_gaussian_samples_match_the_fourier_closed_form(beta):
    axis = np.linspace(-7.0, 7.0, 281)
    g = np.array([1.0, -0.5, 2.0])
    coeff = np.exp(-axis[:, None] ** 2 - axis[None, :] ** 2)[:, :, None] * g[None, None, :]
    lam = np.array([-1.6, -0.4, 0.4, 1.2])
    s = recover.fourier_line_samples(coeff, [beta], lam, axis, axis, np.zeros((3, 2)))
    expected = math.pi * np.exp(-(lam**2) * (beta**2 + 1) / 4)[None, :] * g[:, None]
    np.testing.assert_allclose(s.f_values[:, 0, :], expected, rtol=1e-6)


@given(st.integers(min_value=0, max_value=1000))
def test_samples_are_conjugate_symmetric_in_lambda(seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 11)
    coeff = rng.normal(size=(11, 11, 3))
    coeff[0] = coeff[-1] = 0.0
    coeff[:, 0] = coeff[:, -1] = 0.0
    lam = np.array([-1.2, -0.4, 0.4, 1.2])
    s = recover.fourier_line_samples(coeff, [0.7, 0.9], lam, t, t, np.zeros((3, 2)))
    assert np.max(np.abs(s.f_values[..., ::-1] - np.conj(s.f_values))) <= 1e-10 * max(1.0, np.max(np.abs(s.f_values)))


def test_support_on_the_boundary_of_q_is_rejected():
    t = np.linspace(0, 1, 9)
    coeff = np.zeros((9, 9, 2))
    coeff[0, 4, 0] = 1.0
    with pytest.raises(recover.BoundaryConditionError):
        recover.fourier_line_samples(coeff, [0.8], [0.5], t, t, np.zeros((2, 2)))


def test_line_grids_are_validated():
    with pytest.raises(ValueError):
        recover.FourierLineSamples(np.array([0.5]), np.array([0.5]), np.zeros((1, 1, 1)), np.zeros(2), np.zeros(2), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        recover.FourierLineSamples(np.array([0.8]), np.array([0.0]), np.zeros((1, 1, 1)), np.zeros(2), np.zeros(2), np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# attenuated line data
# ---------------------------------------------------------------------------


def _constant_samples(ctx, beta, lam, value=1.0):
    P = ctx.points.shape[0]
    f = np.full((P, 1, 1), value, dtype=complex)
    return recover.FourierLineSamples(np.array([beta]), np.array([lam]), f, ctx.q_grid.t, ctx.q_grid.x1, ctx.points)


@pytest.mark.parametrize("beta,lam", [(0.8, 0.5), (0.6, -0.4), (0.95, 1.6)])
def test_constant_line_data_matches_the_chord_formula(small_ctx, beta, lam):
    s = _constant_samples(small_ctx, beta, lam)
    geos = small_ctx.geodesics[:40]
    data = recover.attenuated_data(s, 0, 0, geos, SMALL.grid_n, small_ctx.box)
    k = math.sqrt(1 - beta**2) * lam
    expected = np.array([(1 - math.exp(-k * g.exit_time)) / k for g in geos])
    np.testing.assert_allclose(data.real, expected, rtol=1e-8)
    assert np.max(np.abs(data.imag)) < 1e-10


def test_line_data_is_linear(small_ctx):
    rng = np.random.default_rng(3)
    P = small_ctx.points.shape[0]
    f1 = rng.normal(size=(P, 1, 1)) + 1j * rng.normal(size=(P, 1, 1))
    f2 = rng.normal(size=(P, 1, 1))
    mk = lambda f: recover.FourierLineSamples(np.array([0.8]), np.array([0.5]), f, small_ctx.q_grid.t, small_ctx.q_grid.x1, small_ctx.points)  # noqa: E731
    nodes = small_ctx.nodes
    d1 = recover.attenuated_data(mk(f1), 0, 0, small_ctx.geodesics, SMALL.grid_n, small_ctx.box, nodes)
    d2 = recover.attenuated_data(mk(f2), 0, 0, small_ctx.geodesics, SMALL.grid_n, small_ctx.box, nodes)
    d3 = recover.attenuated_data(mk(2 * f1 - 3 * f2), 0, 0, small_ctx.geodesics, SMALL.grid_n, small_ctx.box, nodes)
    np.testing.assert_allclose(d3, 2 * d1 - 3 * d2, atol=1e-10 * np.max(np.abs(d3)))


def test_zero_lambda_limit_is_the_unattenuated_transform(small_ctx):
    assert recover.line_attenuation(0.8, 0.0) == 0.0
    s = _constant_samples(small_ctx, 0.8, 1e-10)
    geos = small_ctx.geodesics[:20]
    data = recover.attenuated_data(s, 0, 0, geos, SMALL.grid_n, small_ctx.box)
    plain = np.array([xray.forward(g.manifold, 0.0, lambda x: np.ones(np.asarray(x).shape[:-1]), g) for g in geos])
    np.testing.assert_allclose(data.real, plain, rtol=1e-8)


# ---------------------------------------------------------------------------
# per-line inversion
# ---------------------------------------------------------------------------


def test_zero_data_gives_zero_line(small_ctx):
    sys, fac = small_ctx.system(-0.3)
    est = recover.recover_line(np.zeros(len(small_ctx.geodesics)), sys, None, fac)
    assert np.all(est == 0)


def test_factorisation_must_match_the_system(small_ctx):
    sys_a, _ = small_ctx.system(-0.3)
    _, fac_b = small_ctx.system(0.3)
    with pytest.raises(ValueError):
        recover.recover_line(np.zeros(len(small_ctx.geodesics)), sys_a, None, fac_b)


@pytest.fixture(scope="module")
def gaussian_line_errors(full_ctx):
    coeff = _gaussian_line_setup(full_ctx)
    lam = [-0.8, -0.5, -0.4, 0.4, 0.5, 0.8]
    s = recover.fourier_line_samples(coeff, [0.8], lam, full_ctx.q_grid.t, full_ctx.q_grid.x1, full_ctx.points, check=False)
    out = {}
    for il, l in enumerate(lam):
        est = recover._solve_line(full_ctx, s, 0, il)
        truth = s.line(0, il)[full_ctx.mask]
        out[l] = float(np.linalg.norm(est - truth) / np.linalg.norm(truth))
    return out


def test_gaussian_phantom_line_recovery(gaussian_line_errors):
    assert gaussian_line_errors[0.5] <= 0.07


@pytest.mark.xfail(strict=True, reason="at fixed beta the per-line error falls slightly as |lambda| grows within the budget")
def test_line_error_grows_with_lambda(gaussian_line_errors):
    for sign in (1, -1):
        errs = [gaussian_line_errors[sign * l] for l in (0.4, 0.5, 0.8)]
        assert all(b >= a for a, b in zip(errs, errs[1:]))


# ---------------------------------------------------------------------------
# cone fit
# ---------------------------------------------------------------------------


def _series_setup(K=4, seed=1, n=33, P=12):
    ph = recover.bandlimited_phantom(K=K, seed=seed)
    axis = np.linspace(0.0, 1.0, n)
    xp = np.random.default_rng(seed).uniform(0.2, 0.8, size=(P, 2))
    return ph, axis, xp, ph.on_grid(axis, axis, xp)


def test_exact_cone_samples_recover_a_bandlimited_phantom():
    ph, axis, xp, truth = _series_setup()
    s = recover.fourier_line_samples(truth, (0.6, 0.7, 0.8, 0.9, 0.95), (-1.6, -1.2, -0.8, -0.4, 0.4, 0.8, 1.2, 1.6), axis, axis, xp)
    est, fit = recover.recover_coefficient(s, ph.box, 4)
    err = np.linalg.norm(est - truth) / np.linalg.norm(truth)
    assert err <= 0.02
    assert fit.singular_values.size == 16


def test_zero_cone_samples_give_zero_estimate():
    _, axis, xp, truth = _series_setup()
    s = recover.fourier_line_samples(np.zeros_like(truth), (0.6, 0.7, 0.8, 0.9), (-0.8, -0.4, 0.4, 0.8), axis, axis, xp)
    est, _ = recover.recover_coefficient(s, ((0.1, 0.9), (0.1, 0.9)), 4)
    assert np.all(est == 0)


def test_too_few_lines_raise_conditioning_error_with_singular_values():
    ph, axis, xp, truth = _series_setup()
    s = recover.fourier_line_samples(truth, (0.8,), (0.5,), axis, axis, xp)
    with pytest.raises(recover.ConditioningError) as info:
        recover.recover_coefficient(s, ph.box, 4)
    assert info.value.singular_values is not None


def test_cone_fit_reproduces_series_exactly_with_fixed_regularisation():
    ph, axis, xp, truth = _series_setup()
    s = recover.fourier_line_samples(truth, (0.6, 0.7, 0.8, 0.9, 0.95), (-1.6, -1.2, -0.8, -0.4, 0.4, 0.8, 1.2, 1.6), axis, axis, xp)
    est, fit = recover.recover_coefficient(s, ph.box, 4, reg=0.0)
    assert fit.mu == 0.0
    np.testing.assert_allclose(est, truth, atol=1e-6 * np.max(np.abs(truth)))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def test_identical_coefficients_give_zero(small_ctx, small_inputs):
    _, a2, _, q2, _ = small_inputs
    r = recover.pipeline(a2, a2, q2, q2, SMALL, ctx=small_ctx)
    assert r.stage == "identical"
    assert np.all(r.reconstruction == 0) and r.relative_error == 0.0


def test_damping_stage_runs_when_dampings_differ(small_ctx, small_inputs):
    a1, a2, q1, q2, _ = small_inputs
    r = recover.pipeline(a1, a2, q1, q2, SMALL, ctx=small_ctx)
    assert r.stage == "damping"
    assert all(e >= 0 for e in r.line_errors)
    assert len(r.lines) == len(r.line_errors) > 0


def test_potential_stage_runs_when_only_potentials_differ(small_ctx, small_inputs):
    _, a2, _, q2, diff = small_inputs
    r = recover.pipeline(a2, a2, q2 + diff, q2, SMALL, ctx=small_ctx)
    assert r.stage == "potential"


def test_scaling_equivariance(small_ctx, small_inputs):
    diff = small_inputs[4]
    r1 = recover.recover_difference(small_ctx, diff)
    r3 = recover.recover_difference(small_ctx, 3.0 * diff)
    scale = np.max(np.abs(3.0 * r1.reconstruction))
    assert np.max(np.abs(r3.reconstruction - 3.0 * r1.reconstruction)) <= 1e-8 * scale
    np.testing.assert_allclose(r3.line_errors, r1.line_errors, rtol=1e-8)


def test_conformal_factor_is_divided_out(small_ctx, small_inputs):
    a1, a2, q1, q2, diff = small_inputs
    P = small_ctx.points
    c = (1 + 0.3 * np.sin(np.pi * P[:, 0]) * np.sin(np.pi * P[:, 1]))[None, None, :] * np.ones_like(diff)
    plain = recover.pipeline(a1, a2, q1, q2, SMALL, ctx=small_ctx)
    conf = recover.pipeline(a1, a2, q1, q2, SMALL, conformal=c, ctx=small_ctx)
    m = small_ctx.mask
    err = np.linalg.norm((conf.reconstruction / c - diff)[..., m]) / np.linalg.norm(diff[..., m])
    assert abs(err - plain.relative_error) <= 0.01


def test_boundary_violation_in_pipeline(small_ctx, small_inputs):
    a1, a2, q1, q2, _ = small_inputs
    bad = a1.copy()
    bad[0] += 1.0
    with pytest.raises(recover.BoundaryConditionError):
        recover.pipeline(bad, a2, q1, q2, SMALL, ctx=small_ctx)


def test_report_is_reproducible_and_rejects_negative_errors(small_ctx, small_inputs):
    diff = small_inputs[4]
    a = recover.recover_difference(small_ctx, diff).as_dict()
    b = recover.recover_difference(small_ctx, diff).as_dict()
    a.pop("timings")
    b.pop("timings")
    assert a == b
    with pytest.raises(ValueError):
        recover.RecoveryReport([-0.1], None, None, {}, {})


def test_no_admissible_line_raises(small_ctx, small_inputs):
    ctx = recover.PipelineContext(recover.PipelineSettings(grid_n=16, n_points=32, n_dirs=32, n_t=17, n_x=17, attenuation_budget=0.01))
    with pytest.raises(recover.ConditioningError):
        recover.recover_difference(ctx, small_inputs[4])


def test_full_pipeline_lines_are_accurate(full_damping):
    report, _ = full_damping
    assert max(report.line_errors) <= 0.07


@pytest.mark.xfail(strict=True, reason="extrapolation from the admissible cone is ill-conditioned (condition ~5e8); see the decision ledger")
def test_full_pipeline_damping_error(full_damping):
    report, _ = full_damping
    assert report.relative_error <= 0.15


@pytest.mark.xfail(strict=True, reason="the potential path shares the ill-conditioned cone extrapolation")
def test_full_pipeline_potential_error(full_ctx):
    cfg = dict(default_config("recover"), case="potential")
    a1, a2, q1, q2, _ = experiments.recover_inputs(cfg, full_ctx, 0)
    report = recover.pipeline(a1, a2, q1, q2, full_ctx.settings, ctx=full_ctx)
    assert report.stage == "potential"
    assert report.relative_error <= 0.15


@pytest.mark.xfail(strict=True, reason="accurate lines do not imply an accurate cone extrapolation")
def test_stage_wise_consistency(full_damping):
    report, _ = full_damping
    assert max(report.line_errors) <= 0.07
    assert report.relative_error <= 0.15
