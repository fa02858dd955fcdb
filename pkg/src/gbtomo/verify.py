"""Numerical checks of the quasimode estimates and the concentration limit.

Integrals over ``Q = (0, T) x [x1_lo, x1_hi] x M0`` are computed in the
Fermi tube of the beam: Gauss-Legendre nodes in ``t`` and ``x1``, a
uniform grid in ``(tau, y)`` with spacing ``sqrt(h)/12`` across the beam
and ``L/200`` along it, weighted by the Riemannian volume and masked to
``M0``.  Derivatives of the quasimode use fourth-order central
differences of its factors, with the fast longitudinal oscillation
``exp(i s sqrt(1-beta^2) tau)`` handled analytically.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import RectBivariateSpline

from .beam import Coefficients, Quasimode, reduced_coefficients
from .fermi import ExtendedGeodesic, chart_map, chart_metric

QUANTITIES = ("l2_Q", "dt_l2_Q", "residual_adjoint", "residual_forward", "boundary_l2", "eikonal_order")

_W1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_W2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_OFF = np.arange(-2, 3)


class ResolutionError(ValueError):
    """Quadrature grid too coarse for the beam width."""


# ---------------------------------------------------------------------------
# slope fits and sweep results
# ---------------------------------------------------------------------------


def fit_slope(h: Sequence[float], values: Sequence[float], exclude_largest: bool = True):
    """OLS slope of ``log value`` against ``log h`` with a 95% half-width.

    The largest ``h`` is dropped as pre-asymptotic when ``exclude_largest``.
    """
    h = np.asarray(h, dtype=float)
    v = np.asarray(values, dtype=float)
    order = np.argsort(h)[::-1]
    h, v = h[order], v[order]
    if exclude_largest and h.size > 2:
        h, v = h[1:], v[1:]
    x, y = np.log(h), np.log(v)
    res = stats.linregress(x, y)
    dof = max(x.size - 2, 1)
    half = float(stats.t.ppf(0.975, dof) * res.stderr) if x.size > 2 else float("inf")
    return float(res.slope), half


@dataclass
class SweepResult:
    """Values of one quantity over a decreasing ``h`` grid and their slope."""

    h_grid: list
    quantity: str
    values: list
    fitted_slope: float
    slope_ci: float
    flagged: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.asarray(self.h_grid, dtype=float)
        if np.any(np.diff(h) >= 0):
            raise ValueError("h_grid must be strictly decreasing")
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("sweep values must be finite and nonnegative")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", self.quantity])
            for a, b in zip(self.h_grid, self.values):
                w.writerow([repr(float(a)), repr(float(b))])

    def summary(self) -> dict:
        return {"quantity": self.quantity, "slope": self.fitted_slope, "ci": self.slope_ci, "flagged": self.flagged}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def make_sweep(h_grid, quantity, values, exclude_largest=True, extra=None) -> SweepResult:
    """Build a :class:`SweepResult`, flagging non-monotone values."""
    h_grid = [float(x) for x in h_grid]
    values = [float(x) for x in values]
    slope, ci = fit_slope(h_grid, values, exclude_largest)
    d = np.diff(values)
    flagged = not (np.all(d >= 0) or np.all(d <= 0))
    if flagged:
        ci *= 2.0
    return SweepResult(h_grid, quantity, values, slope, ci, flagged, extra or {})


# ---------------------------------------------------------------------------
# tube geometry
# ---------------------------------------------------------------------------


class TubeGeometry:
    """Laplacian coefficients of ``g0`` in Fermi coordinates along a geodesic.

    The pulled-back metric is sampled on a coarse tensor grid and fitted
    with quintic tensor splines; the first-order coefficients
    ``b^c = |g|^{-1/2} d_a(|g|^{1/2} g^{ac})`` come from spline derivatives.
    """

    def __init__(self, geo: ExtendedGeodesic, y_max: float, spacing: float = 0.02):
        self.geo = geo
        self.y_max = y_max
        m = geo.manifold
        if m.dim != 2:
            raise NotImplementedError("tube geometry implemented for a two-dimensional M0")
        n_tau = max(int(math.ceil((geo.tau_hi - geo.tau_lo) / spacing)) + 1, 12)
        n_y = max(int(math.ceil(2 * y_max / spacing)) + 1, 12)
        self.tau_axis = np.linspace(geo.tau_lo, geo.tau_hi, n_tau)
        self.y_axis = np.linspace(-y_max, y_max, n_y)
        T, Y = np.meshgrid(self.tau_axis, self.y_axis, indexing="ij")
        g = chart_metric(geo, T.ravel(), Y.ravel()[:, None]).reshape(n_tau, n_y, 2, 2)
        ginv = np.linalg.inv(g)
        sq = np.sqrt(np.linalg.det(g))
        self.flat = m.flat
        fit = lambda z: RectBivariateSpline(self.tau_axis, self.y_axis, z, kx=5, ky=5)  # noqa: E731
        self._gtt_m1 = fit(ginv[..., 0, 0] - 1.0)
        self._gty = fit(ginv[..., 0, 1])
        self._gyy_m1 = fit(ginv[..., 1, 1] - 1.0)
        self._sq = fit(sq)
        self._A = [fit(sq * ginv[..., 0, 0]), fit(sq * ginv[..., 0, 1]), fit(sq * ginv[..., 1, 1])]

    def coefficients(self, tau: np.ndarray, y: np.ndarray) -> dict:
        """Coefficients on the tensor grid ``tau x y`` (1-D increasing arrays)."""
        tau = np.asarray(tau, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.flat:
            z = np.zeros((tau.size, y.size))
            return {"gtt_m1": z, "gty": z, "gyy_m1": z, "sqrtg": z + 1.0, "bt": z, "by": z}
        sq = self._sq(tau, y)
        Att, Aty, Ayy = self._A
        bt = (Att(tau, y, dx=1) + Aty(tau, y, dy=1)) / sq
        by = (Aty(tau, y, dx=1) + Ayy(tau, y, dy=1)) / sq
        return {
            "gtt_m1": self._gtt_m1(tau, y),
            "gty": self._gty(tau, y),
            "gyy_m1": self._gyy_m1(tau, y),
            "sqrtg": sq,
            "bt": bt,
            "by": by,
        }


def tube_geometry(qm: Quasimode) -> TubeGeometry:
    """Cached :class:`TubeGeometry` of the quasimode's cover."""
    cover = qm.cover
    geo = getattr(cover, "_tube_geometry", None)
    y_max = 0.5 * qm.delta_prime * 1.02 + 0.02
    if geo is None or geo.y_max < y_max:
        geo = TubeGeometry(cover.geodesic, y_max)
        cover._tube_geometry = geo
    return geo


@dataclass
class TubeGrid:
    """Quadrature grid over the beam tube intersected with ``M0``."""

    tau: np.ndarray
    y: np.ndarray
    d_tau: float
    d_y: float
    points: np.ndarray  # (n_tau, n_y, 2)
    mask: np.ndarray  # inside M0
    weight: np.ndarray  # volume weight sqrt(g) d_tau d_y, zero outside the mask


def beam_width(qm: Quasimode) -> float:
    """Transverse standard deviation of ``|u|^2`` at the widest point."""
    d = qm.imag_bound
    return math.sqrt(qm.params.h / (4.0 * max(d, 1e-12)))


def tube_grid(qm: Quasimode, y_points_per_width: float = 12.0, tau_points: int = 200, n_sigma: float = 10.0) -> TubeGrid:
    """Tensor grid in ``(tau, y)`` for tube integrals at the beam's ``h``."""
    h = qm.params.h
    L = qm.cover.length
    geo = qm.geodesic
    dy = math.sqrt(h) / y_points_per_width
    y_max = min(0.5 * qm.delta_prime, n_sigma * beam_width(qm))
    if dy > 2.0 * beam_width(qm) / 8.0:
        raise ResolutionError("fewer than 8 points per beam width")
    ny = int(math.ceil(y_max / dy))
    y = dy * np.arange(-ny, ny + 1)
    d_tau = L / tau_points
    lo, hi = geo.tau_lo, geo.tau_hi
    n_tau = int(math.floor((hi - lo) / d_tau))
    tau = lo + d_tau * (np.arange(n_tau) + 0.5)
    T, Y = np.meshgrid(tau, y, indexing="ij")
    pts = chart_map(geo, T.ravel(), Y.ravel()[:, None]).reshape(tau.size, y.size, -1)
    m = geo.manifold
    mask = m.boundary_fn(pts) <= 0.0
    tg = tube_geometry(qm)
    sq = tg.coefficients(tau, y)["sqrtg"]
    weight = np.where(mask, sq * d_tau * dy, 0.0)
    return TubeGrid(tau, y, d_tau, dy, pts, mask, weight)


def _gl_nodes(lo, hi, n):
    u, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (hi - lo) * u + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


# ---------------------------------------------------------------------------
# quasimode derivatives
# ---------------------------------------------------------------------------


def _transverse_derivatives(qm: Quasimode, tau, y, d_tau, d_y):
    """Slow transverse factor and its derivatives on the ``tau x y`` grid.

    Also folds in the chart partition weight (one on the covered range).
    """
    vals = np.empty((5, 5, tau.size, y.size), dtype=complex)
    for i, a in enumerate(_OFF):
        tt = tau + a * d_tau
        part = qm.cover.partition(tt).sum(axis=0)
        for j, b in enumerate(_OFF):
            vals[i, j] = qm.transverse_factor(tt[:, None], (y + b * d_y)[None, :], oscillation=False) * part[:, None]
    A = vals[2, 2]
    A_t = np.tensordot(_W1, vals[:, 2], axes=1) / d_tau
    A_tt = np.tensordot(_W2, vals[:, 2], axes=1) / d_tau**2
    A_y = np.tensordot(_W1, vals[2, :], axes=1) / d_y
    A_yy = np.tensordot(_W2, vals[2, :], axes=1) / d_y**2
    A_ty = np.einsum("i,j,ij...->...", _W1, _W1, vals) / (d_tau * d_y)
    return A, A_t, A_tt, A_y, A_yy, A_ty


def _longitudinal_derivatives(qm: Quasimode, t, x1, tau, step=1e-3):
    """``G = exp(Phi) eta`` and its derivatives in ``t``, ``x1`` and ``tau``."""

    def G(tt, xx, ta):
        return qm.longitudinal_factor(tt, xx, ta)

    ones = np.ones_like(tau)
    st = [G(t + a * step, x1, tau) for a in _OFF]
    sx = [G(t, x1 + a * step, tau) for a in _OFF]
    su = [G(t, x1, tau + a * step) for a in _OFF]
    g0 = st[2]
    d1 = lambda s: np.tensordot(_W1, np.array(s), axes=1) / step  # noqa: E731
    d2 = lambda s: np.tensordot(_W2, np.array(s), axes=1) / step**2  # noqa: E731
    return g0 * ones, d1(st), d2(st), d1(sx), d2(sx), d1(su), d2(su)


def _operator_coefficients(qm: Quasimode, coeffs: Coefficients):
    """Damping ``A_c`` and potential ``Q_c`` of the conjugated operator.

    For kind ``v`` the operator is the adjoint, with damping ``-conj(a)``
    and potential ``conj(q) - d_t conj(a)``; for kind ``w`` it is the
    forward operator with ``a`` and ``q``.
    """
    a_red, a_red_t, q_red = reduced_coefficients(coeffs, qm.geodesic.manifold)
    if qm.kind == "v":
        return (lambda t, x1, xp: -np.conj(a_red(t, x1, xp))), (
            lambda t, x1, xp: np.conj(q_red(t, x1, xp)) - np.conj(a_red_t(t, x1, xp))
        )
    return a_red, q_red


def _conjugated_residual_density(qm, coeffs, grid: TubeGrid, t, x1, trans, lapc, coef_fns):
    """``|h^2 e^{sign s(beta t + x1)} L e^{-sign ...} u|^2`` on the tube grid."""
    p = qm.params
    s, beta, h = p.s, p.beta, p.h
    kappa = s * p.gamma
    sgn = -1.0 if qm.kind == "v" else 1.0
    A, A_t, A_tt, A_y, A_yy, A_ty = trans
    G, G_t, G_tt, G_x, G_xx, G_u, G_uu = _longitudinal_derivatives(qm, t, x1, grid.tau)
    G, G_t, G_tt, G_x, G_xx, G_u, G_uu = (z[:, None] for z in (G, G_t, G_tt, G_x, G_xx, G_u, G_uu))
    V = A * G
    V_u = A_t * G + A * G_u
    V_uu = A_tt * G + 2 * A_t * G_u + A * G_uu
    V_y = A_y * G
    V_yy = A_yy * G
    V_uy = A_ty * G + A_y * G_u
    gtt_m1, gty, gyy_m1 = lapc["gtt_m1"], lapc["gty"], lapc["gyy_m1"]
    bt, by = lapc["bt"], lapc["by"]
    # Laplacian of e^{i kappa tau} V divided by e^{i kappa tau}, without the
    # -kappa^2 g^{tt} V term which is combined with the Euclidean s^2 terms
    lap = (
        (1.0 + gtt_m1) * (V_uu + 2j * kappa * V_u)
        + 2.0 * gty * (V_uy + 1j * kappa * V_y)
        + (1.0 + gyy_m1) * V_yy
        + bt * (V_u + 1j * kappa * V)
        + by * V_y
    )
    # (d_t + sgn s beta)^2 - (d_x + sgn s)^2 applied to V (V depends on t, x1 via G)
    euclid = (
        A * G_tt
        + 2 * sgn * s * beta * A * G_t
        - A * G_xx
        - 2 * sgn * s * A * G_x
    )
    s2_terms = s * s * (1.0 - beta**2) * gtt_m1 * V  # s^2 beta^2 - s^2 + kappa^2 g^tt
    a_fn, q_fn = coef_fns
    xp = grid.points
    a_val = a_fn(t, x1, xp)
    q_val = q_fn(t, x1, xp)
    damp = a_val * (A * G_t + sgn * s * beta * V)
    R = h * h * (euclid + s2_terms - lap + damp + q_val * V)
    return R


def _prepare(qm: Quasimode, grid: TubeGrid | None):
    grid = tube_grid(qm) if grid is None else grid
    d_tau_fd = min(grid.d_tau, 2e-3)
    d_y_fd = grid.d_y / 4.0
    trans = _transverse_derivatives(qm, grid.tau, grid.y, d_tau_fd, d_y_fd)
    lapc = tube_geometry(qm).coefficients(grid.tau, grid.y)
    return grid, trans, lapc


def conjugated_residual(
    qm: Quasimode,
    coeffs: Coefficients,
    params=None,
    n_gl: int = 12,
    grid: TubeGrid | None = None,
) -> float:
    """``L^2(Q)`` norm of the conjugated operator applied to the quasimode.

    Kind ``v``: ``e^{s(beta t + x1)} h^2 L^* e^{-s(beta t + x1)} v`` with
    the adjoint operator; kind ``w``: ``e^{-s(beta t + x1)} h^2 L
    e^{s(beta t + x1)} w``.  ``L`` is the conformally reduced operator
    ``d_t^2 - d_x1^2 - Lap_g0 + a d_t + q``.
    """
    if params is not None and params != qm.params:
        raise ValueError("params do not match the quasimode")
    grid, trans, lapc = _prepare(qm, grid)
    coef_fns = _operator_coefficients(qm, coeffs)
    T = qm.box.T
    x_lo, x_hi = qm.box.x1_range
    tn, tw = _gl_nodes(0.0, T, n_gl)
    xn, xw = _gl_nodes(x_lo, x_hi, n_gl)
    total = 0.0
    for t, wt in zip(tn, tw):
        for x1, wx in zip(xn, xw):
            R = _conjugated_residual_density(qm, coeffs, grid, t, x1, trans, lapc, coef_fns)
            total += wt * wx * float(np.sum(np.abs(R) ** 2 * grid.weight))
    return math.sqrt(total)


def l2_norms(qm: Quasimode, n_gl: int = 12, grid: TubeGrid | None = None) -> dict:
    """``||u||_{L^2(Q)}`` and ``||d_t u||_{L^2(Q)}``."""
    grid = tube_grid(qm) if grid is None else grid
    part = qm.cover.partition(grid.tau).sum(axis=0)
    A = qm.transverse_factor(grid.tau[:, None], grid.y[None, :], oscillation=False) * part[:, None]
    A2 = np.abs(A) ** 2 * grid.weight
    T = qm.box.T
    x_lo, x_hi = qm.box.x1_range
    tn, tw = _gl_nodes(0.0, T, n_gl)
    xn, xw = _gl_nodes(x_lo, x_hi, n_gl)
    n0 = n1 = 0.0
    step = 1e-4
    for t, wt in zip(tn, tw):
        for x1, wx in zip(xn, xw):
            G = qm.longitudinal_factor(t, x1, grid.tau)
            Gt = (
                -qm.longitudinal_factor(t + 2 * step, x1, grid.tau)
                + 8 * qm.longitudinal_factor(t + step, x1, grid.tau)
                - 8 * qm.longitudinal_factor(t - step, x1, grid.tau)
                + qm.longitudinal_factor(t - 2 * step, x1, grid.tau)
            ) / (12 * step)
            n0 += wt * wx * float(np.sum(A2 * np.abs(G[:, None]) ** 2))
            n1 += wt * wx * float(np.sum(A2 * np.abs(Gt[:, None]) ** 2))
    return {"l2_Q": math.sqrt(n0), "dt_l2_Q": math.sqrt(n1)}


def boundary_l2(qm: Quasimode, t: float = 0.5, x1: float = 0.5, points_per_width: float = 24.0) -> float:
    """``||u(t, x1, .)||_{L^2(dM0)}`` for a disk-shaped ``M0``.

    The boundary is parametrised by angle; the arclength element comes from
    the metric, and the glued quasimode is evaluated through the charts.
    """
    m = qm.geodesic.manifold
    if m.radius is None:
        raise NotImplementedError("boundary quadrature implemented for disk catalogs")
    # angular resolution: the beam footprint on the boundary has metric width
    # ~sqrt(h); the metric scale converts it into coordinate angle
    width = beam_width(qm)
    theta_step = width / points_per_width / (m.radius * m._max_scale())
    n = int(math.ceil(2 * math.pi / theta_step))
    theta = 2 * math.pi * (np.arange(n) + 0.5) / n
    pts = m.boundary_point(theta)
    tangent = np.stack([-np.sin(theta), np.cos(theta)], axis=-1) * m.radius
    ds = m.norm(pts, tangent) * (2 * math.pi / n)
    # only evaluate points that can lie in the tube
    axis = qm.geodesic.point(np.linspace(qm.geodesic.tau_lo, qm.geodesic.tau_hi, 400))
    dist = np.min(np.linalg.norm(pts[:, None, :] - axis[None, :, :], axis=-1), axis=1)
    near = dist < 0.5 * qm.delta_prime + 1e-9
    vals = np.zeros(n, dtype=complex)
    if np.any(near):
        vals[near] = qm(t, x1, pts[near])
    return math.sqrt(float(np.sum(np.abs(vals) ** 2 * ds)))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def evaluate_quantity(qm: Quasimode, quantity: str, coeffs: Coefficients | None = None, **kw) -> float:
    if quantity in ("l2_Q", "dt_l2_Q"):
        return l2_norms(qm, **kw)[quantity]
    if quantity in ("residual_adjoint", "residual_forward"):
        want = "v" if quantity == "residual_adjoint" else "w"
        if qm.kind != want:
            raise ValueError(f"{quantity} needs a quasimode of kind {want!r}")
        return conjugated_residual(qm, coeffs if coeffs is not None else Coefficients(), **kw)
    if quantity == "boundary_l2":
        return boundary_l2(qm, **kw)
    raise ValueError(f"unknown quantity {quantity!r}")


def h_sweep(
    builder: Callable,
    h_grid: Sequence[float],
    quantity: str,
    coeffs: Coefficients | None = None,
    exclude_largest: bool = True,
    **kw,
) -> SweepResult:
    """Build a quasimode per ``h`` with ``builder(h, kind)`` and fit the slope.

    Requires at least four values spanning two octaves.
    """
    h_grid = sorted((float(h) for h in h_grid), reverse=True)
    if len(h_grid) < 4 or h_grid[0] / h_grid[-1] < 4.0 - 1e-12:
        raise ValueError("an h sweep needs at least 4 values spanning 2 octaves")
    kind = "w" if quantity == "residual_forward" else "v"
    values = []
    for h in h_grid:
        qm = builder(h, kind)
        values.append(evaluate_quantity(qm, quantity, coeffs, **kw))
    return make_sweep(h_grid, quantity, values, exclude_largest)


def multi_sweep(builder: Callable, h_grid, coeffs: Coefficients, quantities=("l2_Q", "dt_l2_Q", "residual_adjoint", "residual_forward")) -> dict:
    """Several sweeps sharing one quasimode per ``(h, kind)``."""
    h_grid = sorted((float(h) for h in h_grid), reverse=True)
    vals = {q: [] for q in quantities}
    for h in h_grid:
        built = {}
        for q in quantities:
            kind = "w" if q == "residual_forward" else "v"
            if kind not in built:
                built[kind] = builder(h, kind)
            qm = built[kind]
            if q in ("l2_Q", "dt_l2_Q"):
                if "norms" not in built:
                    built["norms"] = l2_norms(qm)
                vals[q].append(built["norms"][q])
            else:
                vals[q].append(evaluate_quantity(qm, q, coeffs))
    return {q: make_sweep(h_grid, q, v) for q, v in vals.items()}


# ---------------------------------------------------------------------------
# eikonal order
# ---------------------------------------------------------------------------


def eikonal_residual(phase, chart, tau, y) -> np.ndarray:
    """``<grad Theta, grad Theta>_g0 - (1 - beta^2)`` at ``(tau, y)`` points."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    y = np.asarray(y, dtype=float).reshape(tau.size, -1)
    g = chart.metric(tau, y)
    ginv = np.linalg.inv(g)
    d_tau, d_y = phase.gradient(tau, y)
    grad = np.concatenate([d_tau[:, None], d_y], axis=1)
    return np.einsum("na,nab,nb->n", grad, ginv, grad) - (1.0 - phase.beta**2)


def eikonal_residual_order(phase, chart, shells=None, n_tau: int = 41) -> SweepResult:
    """Max eikonal residual over ``tau`` on shells ``|y| = r``; slope in ``r``.

    The fitted slope is the order of vanishing of the residual at the axis.
    """
    shells = np.logspace(-1, -3, 9) if shells is None else np.asarray(shells, dtype=float)
    a, b = chart.tau_interval
    taus = np.linspace(a, b, n_tau)
    values = []
    for r in shells:
        vals = []
        for sgn in (1.0, -1.0):
            res = eikonal_residual(phase, chart, taus, np.full((n_tau, 1), sgn * r))
            vals.append(np.abs(res))
        values.append(float(np.max(vals)))
    slope, ci = fit_slope(shells, values, exclude_largest=False)
    return SweepResult(list(map(float, shells)), "eikonal_order", values, slope, ci)


# ---------------------------------------------------------------------------
# concentration
# ---------------------------------------------------------------------------


@dataclass
class ConcentrationResult:
    """Output of :func:`concentration_check`."""

    h_grid: list
    lhs: list
    rhs: complex
    rel_errors: list
    rhs_limit: complex
    rel_errors_limit: list
    diagonal: list
    cross: list
    cross_slope: Optional[float] = None

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("rhs", "rhs_limit"):
            d[k] = [float(np.real(d[k])), float(np.imag(d[k]))]
        d["lhs"] = [[float(np.real(z)), float(np.imag(z))] for z in self.lhs]
        d["diagonal"] = [[float(np.real(z)), float(np.imag(z))] for z in self.diagonal]
        return d


def _other_sheet_values(qm: Quasimode, t, x1, pts, tau_self, min_sep):
    """Sum of the quasimode over sheets other than the one at ``tau_self``."""
    out = np.zeros(pts.shape[0], dtype=complex)
    found = [np.full(pts.shape[0], np.nan) for _ in qm.cover.charts]
    for ell, chart in enumerate(qm.cover.charts):
        tau, y, ok = chart.inverse(pts)
        ok = ok & (np.abs(y[:, 0]) < 0.5 * qm.delta_prime) & (np.abs(tau - tau_self) > min_sep)
        if not np.any(ok):
            continue
        # skip preimages already counted through an adjacent chart
        for prev in found[:ell]:
            ok &= ~(np.abs(prev - tau) < 1e-6)
        found[ell] = np.where(ok, tau, np.nan)
        if np.any(ok):
            part = qm.cover.partition(tau[ok]).sum(axis=0)
            out[ok] += part * qm.sheet(t, x1, tau[ok], y[ok, 0])
    return out


def concentration_pair(v: Quasimode, w: Quasimode, psi: Callable, tpoint, cross: bool = True, grid: TubeGrid | None = None):
    """``int_M0 conj(v) w psi dV`` at ``(t~', p') = tpoint``.

    Returns ``(total, diagonal)`` where ``diagonal`` pairs each sheet of
    ``v`` with the same sheet of ``w``; the difference is the cross-sheet
    contribution at self-intersections.
    """
    beta = v.params.beta
    tt, pp = tpoint
    t = beta * tt
    x1 = pp - tt
    grid = tube_grid(v) if grid is None else grid
    part = v.cover.partition(grid.tau).sum(axis=0)
    Tm = grid.tau[:, None] * np.ones_like(grid.y)[None, :]
    Ym = np.ones_like(grid.tau)[:, None] * grid.y[None, :]
    vs = v.sheet(t, x1, Tm, Ym) * part[:, None]
    ws = w.sheet(t, x1, Tm, Ym) * part[:, None]
    psi_v = np.asarray(psi(grid.points), dtype=complex)
    dens = np.conj(vs) * psi_v * grid.weight
    diag = complex(np.sum(dens * ws))
    total = diag
    if cross and v.cover.crossings:
        mag = np.abs(dens)
        sel = mag > 1e-14 * mag.max()
        idx = np.flatnonzero(sel.ravel())
        pts = grid.points.reshape(-1, grid.points.shape[-1])[idx]
        tau_self = Tm.ravel()[idx]
        other = _other_sheet_values(w, t, x1, pts, tau_self, min_sep=2.0 * w.delta_prime)
        total = diag + complex(np.sum(dens.ravel()[idx] * other))
    return total, diag


def concentration_rhs(v: Quasimode, w: Quasimode, psi: Callable, tpoint, n_dim: int = 3, weight_exponent: float | None = None, n_r: int = 2001):
    """Geodesic integral ``c_beta int_0^{L/g} e^{-2 g^2 lam r} e^{conj Phi1 + Phi2} eta psi(gamma) dr``.

    The constant is ``(1-beta^2)^{-weight_exponent}`` with the default
    exponent ``(n-6)/4``.
    """
    p = v.params
    g = p.gamma
    L = v.cover.length
    beta = p.beta
    tt, pp = tpoint
    r = np.linspace(0.0, L / g, n_r)
    tau = g * r
    phi1 = v.transport.phi_at(tt, pp, r)
    phi2 = w.transport.phi_at(tt, pp, r)
    eta = np.ones_like(r, dtype=complex) if w.eta is None else w.eta(np.full_like(r, tt), np.full_like(r, pp), r)
    pts = v.geodesic.point(tau)
    integrand = np.exp(-2.0 * g * g * p.lam * r) * np.exp(np.conj(phi1) + phi2) * eta * np.asarray(psi(pts))
    expo = (n_dim - 6) / 4.0 if weight_exponent is None else weight_exponent
    from scipy.integrate import simpson

    return (1.0 - beta**2) ** (-expo) * complex(simpson(integrand, x=r))


def concentration_check(
    builder: Callable,
    psi: Callable,
    tpoint,
    h_grid: Sequence[float],
    n_dim: int = 3,
) -> ConcentrationResult:
    """Compare ``int conj(v) w psi`` with the geodesic-integral limit.

    ``builder(h, kind)`` returns matched quasimodes.  Two limits are
    reported: the weight ``(1-beta^2)^{-(n-6)/4}`` (``rhs``) and the weight
    ``(1-beta^2)^{-(n-4)/4}`` obtained by integrating the Gaussian
    profile across the tube (``rhs_limit``).
    """
    h_grid = sorted((float(h) for h in h_grid), reverse=True)
    lhs, diag, cross = [], [], []
    rhs = rhs_limit = None
    for h in h_grid:
        v = builder(h, "v")
        w = builder(h, "w")
        total, dg = concentration_pair(v, w, psi, tpoint)
        lhs.append(total)
        diag.append(dg)
        cross.append(abs(total - dg))
        rhs = concentration_rhs(v, w, psi, tpoint, n_dim)
        rhs_limit = concentration_rhs(v, w, psi, tpoint, n_dim, weight_exponent=(n_dim - 4) / 4.0)
    rel = [abs(z - rhs) / abs(rhs) for z in lhs]
    rel_lim = [abs(z - rhs_limit) / abs(rhs_limit) for z in lhs]
    cross_slope = None
    if any(c > 0 for c in cross):
        positive = [(h, c) for h, c in zip(h_grid, cross) if c > 0]
        if len(positive) >= 3:
            hh, cc = zip(*positive)
            cross_slope = fit_slope(hh, cc)[0]
    return ConcentrationResult(h_grid, lhs, rhs, rel, rhs_limit, rel_lim, diag, cross, cross_slope)
