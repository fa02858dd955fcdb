"""Fermi coordinate charts along a non-tangential geodesic.

A chart is the map ``(tau, y) -> exp_{gamma(tau)}(y^a E_a(tau))`` where
``E_a`` is a parallel orthonormal frame normal to the geodesic.  Charts
share one extended geodesic and one frame, so overlapping charts agree
identically.  The cover splits the parameter interval at self-intersection
times so that every chart is injective.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from .manifold import (
    TANGENCY_TOL,
    GeodesicSegment,
    TransversalManifold,
    _augmented_rhs,
    _geodesic_accel,
    christoffel,
)


class ChartInjectivityError(ValueError):
    """Raised when the Fermi chart map fails to be injective.

    ``max_delta_prime`` holds the largest transverse radius that passed
    the numerical injectivity test.
    """

    def __init__(self, message: str, max_delta_prime: float):
        super().__init__(message)
        self.max_delta_prime = max_delta_prime


def bump(u: np.ndarray) -> np.ndarray:
    """Smooth bump ``exp(1 - 1/(1 - u^2))`` supported in ``|u| < 1``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return out


def cutoff(y_norm: np.ndarray) -> np.ndarray:
    """Radial cutoff equal to 1 for ``|y| <= 1/4`` and 0 for ``|y| >= 1/2``.

    Built from the smooth step ``s(t) = e(t) / (e(t) + e(1 - t))`` with
    ``e(t) = exp(-1/t)``.
    """
    r = np.abs(np.asarray(y_norm, dtype=float))
    t = np.clip((0.5 - r) / 0.25, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


# ---------------------------------------------------------------------------
# extended geodesic with a parallel frame
# ---------------------------------------------------------------------------


def _gram_schmidt_completion(m: TransversalManifold, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Orthonormal completion of the unit vector ``v`` against coordinate axes."""
    g = m.metric(x[None])[0]
    basis = [v / math.sqrt(v @ g @ v)]
    for axis in range(m.dim):
        if len(basis) == m.dim:
            break
        e = np.zeros(m.dim)
        e[axis] = 1.0
        for b in basis:
            e = e - (e @ g @ b) * b
        nrm = math.sqrt(max(e @ g @ e, 0.0))
        if nrm > 1e-3:
            basis.append(e / nrm)
    return np.array(basis[1:])


@dataclass
class ExtendedGeodesic:
    """Geodesic of a segment continued past both endpoints, with frame.

    The geodesic, its tangent and the parallel normal frame are available
    on ``[tau_lo, tau_hi]`` through dense ODE output.
    """

    manifold: TransversalManifold
    length: float
    tau_lo: float
    tau_hi: float
    split: float
    _fwd: object = field(repr=False)
    _bwd: object = field(repr=False)

    @classmethod
    def from_segment(cls, seg: GeodesicSegment, epsilon: float, frame_at: float | None = None) -> "ExtendedGeodesic":
        m = seg.manifold
        d = m.dim
        L = float(seg.exit_time)
        if not np.isfinite(L):
            raise ValueError("cannot extend a trapped geodesic")
        frame_at = -epsilon if frame_at is None else frame_at
        rhs0 = _augmented_rhs(m, 0)
        state0 = np.concatenate([seg.entry_point, seg.entry_tangent])
        if frame_at != 0.0:
            pre = solve_ivp(rhs0, (0.0, frame_at), state0, method="DOP853", rtol=1e-13, atol=1e-14)
            s_frame = pre.y[:, -1]
        else:
            s_frame = state0
        xf, vf = s_frame[:d], s_frame[d:]
        frame = _gram_schmidt_completion(m, xf, vf)
        aug0 = np.concatenate([xf, vf, frame.ravel()])
        rhs = _augmented_rhs(m, d - 1)
        lo, hi = -2.0 * epsilon, L + 2.0 * epsilon
        fwd = solve_ivp(rhs, (frame_at, hi), aug0, method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)
        bwd = solve_ivp(rhs, (frame_at, lo), aug0, method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)
        return cls(m, L, lo, hi, float(frame_at), fwd.sol, bwd.sol)

    def state(self, tau: np.ndarray) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        d = self.manifold.dim
        out = np.empty((tau.size, d * (d + 1)))
        f = tau >= self.split
        if np.any(f):
            out[f] = self._fwd(tau[f]).T
        if np.any(~f):
            out[~f] = self._bwd(tau[~f]).T
        return out

    def point(self, tau):
        return self.state(tau)[:, : self.manifold.dim]

    def tangent(self, tau):
        d = self.manifold.dim
        return self.state(tau)[:, d : 2 * d]

    def frame(self, tau):
        """Normal frame, shape ``(N, dim - 1, dim)``."""
        d = self.manifold.dim
        return self.state(tau)[:, 2 * d :].reshape(-1, d - 1, d)


def _accel_linearisation(m: TransversalManifold, x, v, dx, dv):
    """Directional derivative of the geodesic acceleration."""
    if m.flat:
        return np.zeros_like(dv)
    if m.log_conformal is not None:
        _, dphi, hphi = m.log_conformal(x)
        hdx = np.einsum("...ij,...j->...i", hphi, dx)
        a_phi_v = np.sum(dphi * v, axis=-1)
        vv = np.sum(v * v, axis=-1)
        d_x = 2.0 * np.sum(hdx * v, axis=-1)[..., None] * v - vv[..., None] * hdx
        d_v = (
            2.0 * np.sum(dphi * dv, axis=-1)[..., None] * v
            + 2.0 * a_phi_v[..., None] * dv
            - 2.0 * np.sum(v * dv, axis=-1)[..., None] * dphi
        )
        return -(d_x + d_v)
    step = 1e-6
    return (
        _geodesic_accel(m, x + step * dx, v + step * dv) - _geodesic_accel(m, x - step * dx, v - step * dv)
    ) / (2.0 * step)


def _exp_with_variations(m, x, v, dxs, dvs, n_steps):
    """RK4 for the geodesic ``s -> exp_x(s v)`` and its linearisations.

    ``dxs``/``dvs`` have shape ``(N, k, dim)`` (``k`` variation fields).
    Returns the endpoint, the endpoint velocity and the varied endpoints.
    """
    h = 1.0 / n_steps
    k = dxs.shape[1]

    def f(state):
        x_, v_, dx_, dv_ = state
        a = _geodesic_accel(m, x_, v_)
        xr = np.repeat(x_[:, None, :], k, axis=1)
        vr = np.repeat(v_[:, None, :], k, axis=1)
        da = _accel_linearisation(m, xr, vr, dx_, dv_)
        return v_, a, dv_, da

    state = (x.copy(), v.copy(), dxs.copy(), dvs.copy())
    for _ in range(n_steps):
        k1 = f(state)
        k2 = f(tuple(s + 0.5 * h * d for s, d in zip(state, k1)))
        k3 = f(tuple(s + 0.5 * h * d for s, d in zip(state, k2)))
        k4 = f(tuple(s + h * d for s, d in zip(state, k3)))
        state = tuple(s + h / 6.0 * (a + 2 * b + 2 * c + e) for s, a, b, c, e in zip(state, k1, k2, k3, k4))
    return state


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------


@dataclass
class FermiChart:
    """Fermi chart on ``tau_interval x {|y| < delta_prime}``.

    ``metric_taylor`` holds, on the grid ``tau``, the inverse metric on the
    axis ``ginv0``, its first ``y``-derivatives ``dginv`` and the matrix
    ``F`` with ``g^{tau tau}(tau, y) = 1 - F(tau) y.y + O(|y|^3)``.
    """

    tau_interval: tuple
    geodesic: ExtendedGeodesic
    delta_prime: float
    metric_taylor: dict
    n_steps: int = 16
    _F_spline: Optional[CubicSpline] = field(default=None, repr=False)

    @property
    def manifold(self) -> TransversalManifold:
        return self.geodesic.manifold

    @property
    def frame_fn(self):
        return self.geodesic.frame

    def F(self, tau) -> np.ndarray:
        """Curvature matrix ``F(tau)``, shape ``(N, d-1, d-1)``."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        if self._F_spline is None:
            self._F_spline = CubicSpline(self.metric_taylor["tau"], self.metric_taylor["F"], axis=0)
        return self._F_spline(tau)

    def map(self, tau, y, jacobian: bool = False):
        """Chart map ``F(tau, y)``; optionally with the Jacobian.

        ``tau`` has shape ``(N,)`` and ``y`` shape ``(N, d-1)``.  The
        Jacobian has columns ``(d/dtau, d/dy_1, ...)``.
        """
        return chart_map(self.geodesic, tau, y, jacobian=jacobian, n_steps=self.n_steps)

    def metric(self, tau, y) -> np.ndarray:
        """Pulled-back metric in ``(tau, y)`` coordinates, shape ``(N, d, d)``."""
        pts, jac = self.map(tau, y, jacobian=True)
        g = self.manifold.metric(pts)
        gf = np.einsum("nia,nij,njb->nab", jac, g, jac)
        return 0.5 * (gf + np.swapaxes(gf, 1, 2))

    def inverse(self, pts: np.ndarray, tol: float = 1e-13, max_iter: int = 30):
        """Invert the chart map by Newton's method.

        Returns ``(tau, y, ok)`` where ``ok`` flags points whose preimage
        lies inside the chart domain.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        geo = self.geodesic
        a, b = self.tau_interval
        grid = np.linspace(a, b, max(64, int(200 * (b - a)) + 1))
        base = geo.point(grid)
        tree = cKDTree(base)
        _, near = tree.query(pts)
        tau = grid[near]
        fr = geo.frame(tau)
        g0 = self.manifold.metric(base[near])
        y = np.einsum("ni,nij,naj->na", pts - base[near], g0, fr)
        for _ in range(max_iter):
            img, jac = self.map(tau, y, jacobian=True)
            res = pts - img
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            tau = tau + step[:, 0]
            y = y + step[:, 1:]
            if np.max(np.abs(step)) < tol:
                break
        inside = (tau >= a) & (tau <= b) & (np.linalg.norm(y, axis=1) < self.delta_prime)
        resid = np.linalg.norm(pts - self.map(tau, y), axis=1)
        ok = inside & (resid < 1e-9)
        return tau, y, ok


def chart_map(geo: ExtendedGeodesic, tau, y, jacobian: bool = False, n_steps: int = 16):
    """Evaluate ``exp_{gamma(tau)}(y.E(tau))`` (and its Jacobian)."""
    m = geo.manifold
    d = m.dim
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    y = np.asarray(y, dtype=float).reshape(tau.size, d - 1)
    st = geo.state(tau)
    x0 = st[:, :d]
    gdot = st[:, d : 2 * d]
    fr = st[:, 2 * d :].reshape(-1, d - 1, d)
    v0 = np.einsum("na,nai->ni", y, fr)
    if not jacobian:
        dxs = np.zeros((tau.size, 0, d))
        x1, _, _, _ = _exp_with_variations(m, x0, v0, dxs, dxs, n_steps)
        return x1
    # variation in tau: base moves along gamma, frame is parallel
    if m.flat:
        dfr = np.zeros_like(fr)
    else:
        gam = christoffel(m, x0, method="auto")
        dfr = -np.einsum("nkij,ni,naj->nak", gam, gdot, fr)
    dx_tau = gdot[:, None, :]
    dv_tau = np.einsum("na,nai->ni", y, dfr)[:, None, :]
    dx_y = np.zeros((tau.size, d - 1, d))
    dv_y = fr
    dxs = np.concatenate([dx_tau, dx_y], axis=1)
    dvs = np.concatenate([dv_tau, dv_y], axis=1)
    x1, _, dx1, _ = _exp_with_variations(m, x0, v0, dxs, dvs, n_steps)
    return x1, np.swapaxes(dx1, 1, 2)


def _fd_weights_second(k):
    return np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * k * k)


def _fd_weights_first(k):
    return np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * k)


def metric_taylor_data(geo: ExtendedGeodesic, tau: np.ndarray, delta_prime: float, n_steps: int = 16) -> dict:
    """Taylor data of the inverse Fermi metric at ``y = 0``.

    Derivatives in ``y`` use fourth-order central differences with step
    ``1e-3 * delta_prime``.
    """
    m = geo.manifold
    d = m.dim
    tau = np.asarray(tau, dtype=float)
    n = tau.size
    k = 1e-3 * delta_prime
    offsets = np.array([-2, -1, 0, 1, 2]) * k
    w1 = _fd_weights_first(k)
    w2 = _fd_weights_second(k)
    dginv = np.zeros((n, d - 1, d, d))
    F = np.zeros((n, d - 1, d - 1))
    ginv0 = None
    stencil = {}
    for a in range(d - 1):
        vals = []
        for off in offsets:
            y = np.zeros((n, d - 1))
            y[:, a] = off
            gf = chart_metric(geo, tau, y, n_steps)
            vals.append(np.linalg.inv(gf))
        vals = np.array(vals)
        stencil[a] = vals
        if ginv0 is None:
            ginv0 = vals[2]
        dginv[:, a] = np.einsum("s,snij->nij", w1, vals)
        F[:, a, a] = -0.5 * np.einsum("s,sn->n", w2, vals[:, :, 0, 0])
    for a in range(d - 1):
        for b in range(a + 1, d - 1):
            acc = np.zeros(n)
            for sa, sb, sign in ((1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)):
                y = np.zeros((n, d - 1))
                y[:, a] = sa * k
                y[:, b] = sb * k
                acc += sign * np.linalg.inv(chart_metric(geo, tau, y, n_steps))[:, 0, 0]
            F[:, a, b] = F[:, b, a] = -0.5 * acc / (4.0 * k * k)
    return {"tau": tau, "ginv0": ginv0, "dginv": dginv, "F": F}


def chart_metric(geo: ExtendedGeodesic, tau, y, n_steps: int = 16) -> np.ndarray:
    pts, jac = chart_map(geo, tau, y, jacobian=True, n_steps=n_steps)
    g = geo.manifold.metric(pts)
    gf = np.einsum("nia,nij,njb->nab", jac, g, jac)
    return 0.5 * (gf + np.swapaxes(gf, 1, 2))


def check_injectivity(geo: ExtendedGeodesic, tau_interval, delta_prime: float, n_tau: int = 240, n_y: int = 9) -> bool:
    """Numerical injectivity test of the chart map on a sample grid.

    The Jacobian determinant must keep one sign everywhere and no two
    samples that are far apart in ``(tau, y)`` may land close together.
    """
    m = geo.manifold
    d = m.dim
    a, b = tau_interval
    taus = np.linspace(a, b, n_tau)
    ys = np.linspace(-delta_prime, delta_prime, n_y)
    if d != 2:
        raise NotImplementedError("injectivity test implemented for dim 2")
    T, Y = np.meshgrid(taus, ys, indexing="ij")
    # oversized trial radii can send the exponential map off to infinity
    with np.errstate(over="ignore", invalid="ignore"):
        pts, jac = chart_map(geo, T.ravel(), Y.ravel()[:, None], jacobian=True)
        det = np.linalg.det(jac)
    if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(det)):
        return False
    if not (np.all(det > 0) or np.all(det < 0)):
        return False
    dtau = taus[1] - taus[0]
    dy = ys[1] - ys[0] if n_y > 1 else delta_prime
    spacing = min(dtau, dy)
    scale = np.sqrt(np.abs(det)).min()
    tree = cKDTree(pts)
    pairs = tree.query_pairs(0.25 * spacing * scale, output_type="ndarray")
    if pairs.size == 0:
        return True
    params = np.stack([T.ravel() / dtau, Y.ravel() / dy], axis=-1)
    sep = np.max(np.abs(params[pairs[:, 0]] - params[pairs[:, 1]]), axis=1)
    return bool(np.all(sep <= 2.0))


def _largest_admissible(geo, interval, delta_prime):
    trial = delta_prime
    for _ in range(30):
        trial *= 0.5
        if check_injectivity(geo, interval, trial):
            return trial
    return 0.0


def estimate_delta_prime(geo: ExtendedGeodesic, tau_interval, cap: float = 1.0) -> float:
    """Default transverse radius: 0.1 times an injectivity radius estimate."""
    trial = cap
    for _ in range(30):
        if check_injectivity(geo, tau_interval, trial):
            return 0.1 * trial
        trial *= 0.5
    return 0.0


def build_chart(
    seg: GeodesicSegment,
    tau_interval,
    delta_prime: float | None = None,
    epsilon: float | None = None,
    geodesic: ExtendedGeodesic | None = None,
    n_tau: int = 401,
    check: bool = True,
) -> FermiChart:
    """Build a Fermi chart along ``seg`` on ``tau_interval``.

    Raises
    ------
    ChartInjectivityError
        When the chart map is not injective for ``delta_prime``.
    """
    if not seg.non_tangential:
        raise ValueError("Fermi charts are built along non-tangential geodesics only")
    L = seg.exit_time
    eps = 0.05 * L if epsilon is None else epsilon
    geo = ExtendedGeodesic.from_segment(seg, eps) if geodesic is None else geodesic
    a, b = tau_interval
    if a < geo.tau_lo - 1e-12 or b > geo.tau_hi + 1e-12:
        raise ValueError("chart interval exceeds the extended geodesic")
    if delta_prime is None:
        delta_prime = estimate_delta_prime(geo, tau_interval)
    if check and not check_injectivity(geo, tau_interval, delta_prime):
        best = _largest_admissible(geo, tau_interval, delta_prime)
        raise ChartInjectivityError(
            f"chart map not injective for delta_prime={delta_prime:g}; largest admissible {best:g}", best
        )
    taus = np.linspace(a, b, n_tau)
    taylor = metric_taylor_data(geo, taus, delta_prime)
    return FermiChart((a, b), geo, float(delta_prime), taylor)


# ---------------------------------------------------------------------------
# self intersections and the chart cover
# ---------------------------------------------------------------------------


@dataclass
class SelfIntersection:
    """Crossing ``gamma(tau_a) ~ gamma(tau_b)`` with ``tau_a < tau_b``."""

    tau_a: float
    tau_b: float
    point: np.ndarray
    distance: float
    angle: float
    transversal: bool


def self_intersections(
    seg: GeodesicSegment,
    tol: float = 1e-3,
    geodesic: ExtendedGeodesic | None = None,
    tangency_tol: float = TANGENCY_TOL,
) -> list[SelfIntersection]:
    """Self-intersections of the geodesic segment on ``[0, L]``.

    Samples at spacing ``tol / 4`` are paired when closer than ``tol``
    but separated along the curve; pairs are clustered, each cluster is
    refined to the closest approach, and crossings that refine to the same
    pair of times are merged.  A crossing whose tangents meet at an angle
    below ``tangency_tol`` is flagged non-transversal with a warning.
    """
    m = seg.manifold
    L = seg.exit_time
    geo = ExtendedGeodesic.from_segment(seg, 0.05 * L) if geodesic is None else geodesic
    n = max(int(math.ceil(4.0 * L / tol)) + 1, 64)
    taus = np.linspace(0.0, L, n)
    pts = geo.point(taus)
    g = m.metric(pts)
    coord_speed = 1.0 / np.sqrt(np.linalg.eigvalsh(g).max(axis=1))
    min_sep = 4.0 * tol / coord_speed.min()
    tree = cKDTree(pts)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    if pairs.size == 0:
        return []
    ta, tb = taus[pairs[:, 0]], taus[pairs[:, 1]]
    far = np.abs(ta - tb) > min_sep
    pairs = pairs[far]
    if pairs.size == 0:
        return []
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    # cluster pairs that are adjacent in (tau_a, tau_b) index space
    keyed = np.stack([lo, hi], axis=1)
    ktree = cKDTree(keyed)
    link = ktree.query_pairs(max(2.0, min_sep / (taus[1] - taus[0]) / 4.0), output_type="ndarray")
    npair = keyed.shape[0]
    adj = coo_matrix((np.ones(len(link)), (link[:, 0], link[:, 1])), shape=(npair, npair)) if len(link) else coo_matrix((npair, npair))
    ncomp, labels = connected_components(adj, directed=False)
    found: list[SelfIntersection] = []
    for c in range(ncomp):
        members = keyed[labels == c]
        dists = np.linalg.norm(pts[members[:, 0]] - pts[members[:, 1]], axis=1)
        best = members[np.argmin(dists)]
        t0 = np.array([taus[best[0]], taus[best[1]]])

        def resid(t):
            p = geo.point(t)
            return p[0] - p[1]

        sol = least_squares(resid, t0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        t1, t2 = sorted(sol.x)
        if abs(t2 - t1) <= min_sep or t1 < 0 or t2 > L:
            continue
        p = geo.point(np.array([t1, t2]))
        v = geo.tangent(np.array([t1, t2]))
        gx = m.metric(p[:1])[0]
        cosang = float(v[0] @ gx @ v[1] / math.sqrt((v[0] @ gx @ v[0]) * (v[1] @ gx @ v[1])))
        angle = math.acos(max(-1.0, min(1.0, cosang)))
        transversal = tangency_tol < angle < math.pi - tangency_tol
        cand = SelfIntersection(t1, t2, p[0], float(np.linalg.norm(p[0] - p[1])), angle, transversal)
        if any(abs(f.tau_a - t1) < min_sep and abs(f.tau_b - t2) < min_sep for f in found):
            continue
        if not transversal:
            warnings.warn(f"near-tangential self crossing at tau=({t1:.6f}, {t2:.6f})", RuntimeWarning)
        found.append(cand)
    found.sort(key=lambda s: (s.tau_a, s.tau_b))
    return found


@dataclass
class ChartCover:
    """Charts along one geodesic with a subordinate smooth partition of unity."""

    charts: list
    self_intersection_times: list
    crossings: list
    intervals: list
    epsilon: float
    length: float
    geodesic: ExtendedGeodesic = field(repr=False)
    delta_prime: float = 0.1

    def partition(self, tau) -> np.ndarray:
        """Partition weights ``chi_l(tau)``, shape ``(n_charts, N)``."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        raw = []
        for a, b in self.intervals:
            c = 0.5 * (a + b)
            half = 0.5 * (b - a)
            raw.append(bump((tau - c) / half))
        raw = np.array(raw)
        total = raw.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(total > 0, raw / np.where(total > 0, total, 1.0), 0.0)
        return out

    @property
    def manifold(self):
        return self.geodesic.manifold


def build_cover(
    seg: GeodesicSegment,
    delta_prime: float,
    epsilon: float | None = None,
    tol: float = 1e-3,
    check: bool = True,
) -> ChartCover:
    """Chart cover of ``[-epsilon, L + epsilon]`` isolating self intersections.

    Every self-intersection time lies in exactly one interval, adjacent
    intervals overlap and non-adjacent intervals are disjoint.
    """
    if not seg.non_tangential:
        raise ValueError("chart covers are built along non-tangential geodesics only")
    L = seg.exit_time
    eps = 0.05 * L if epsilon is None else float(epsilon)
    geo = ExtendedGeodesic.from_segment(seg, eps)
    crossings = self_intersections(seg, tol=tol, geodesic=geo)
    times = sorted([c.tau_a for c in crossings] + [c.tau_b for c in crossings])
    lo, hi = -eps, L + eps
    pad = 0.5 * eps
    if not times:
        intervals = [(lo - pad, hi + pad)]
    else:
        gaps = np.diff(times) if len(times) > 1 else np.array([hi - lo])
        margin = 0.25 * float(np.min(gaps))
        mids = [0.5 * (times[i] + times[i + 1]) for i in range(len(times) - 1)]
        edges = [lo - pad] + mids + [hi + pad]
        intervals = []
        for i in range(len(edges) - 1):
            a = edges[i] - (margin if i > 0 else 0.0)
            b = edges[i + 1] + (margin if i < len(edges) - 2 else 0.0)
            intervals.append((max(a, geo.tau_lo), min(b, geo.tau_hi)))
    charts = [build_chart(seg, iv, delta_prime, epsilon=eps, geodesic=geo, check=check) for iv in intervals]
    return ChartCover(charts, times, crossings, intervals, eps, L, geo, float(delta_prime))


def chart_diagnostics_csv(chart: FermiChart, path) -> None:
    """Write per-tau chart diagnostics: axis point, frame, ``F`` and Fermi errors."""
    taylor = chart.metric_taylor
    tau = taylor["tau"]
    geo = chart.geodesic
    pts = geo.point(tau)
    fr = geo.frame(tau)
    d = chart.manifold.dim
    eye = np.eye(d)
    axis_err = np.max(np.abs(taylor["ginv0"] - eye), axis=(1, 2))
    deriv_err = np.max(np.abs(taylor["dginv"]), axis=(1, 2, 3))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["tau"] + [f"x{i + 1}" for i in range(d)]
        head += [f"E{a + 1}_{i + 1}" for a in range(d - 1) for i in range(d)]
        head += [f"F{a + 1}{b + 1}" for a in range(d - 1) for b in range(d - 1)]
        head += ["axis_metric_error", "axis_derivative_error"]
        w.writerow(head)
        for j in range(tau.size):
            row = [tau[j], *pts[j], *fr[j].ravel(), *taylor["F"][j].ravel(), axis_err[j], deriv_err[j]]
            w.writerow([repr(float(v)) for v in row])
