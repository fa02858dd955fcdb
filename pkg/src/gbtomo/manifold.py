"""Riemannian geometry kernel for the transversal manifold.

The transversal manifold is a compact domain ``{rho < 0}`` of the plane
carrying a Riemannian metric.  This module evaluates the metric and its
Christoffel symbols, traces unit-speed geodesics from the inflow boundary
to their exit point, transports vectors in parallel, evaluates the
exponential map and samples the inflow boundary.

All catalog metrics are conformally flat, ``g = exp(2 phi) * identity``,
and expose the log-conformal factor ``phi`` together with its gradient and
Hessian.  Those analytic derivatives are used when available; any other
metric falls back to central finite differences.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

H_FD = 1e-5
TANGENCY_TOL = 0.05
INTERIOR_TOL = 1e-6
ENTRY_TOL = 1e-6
ATOL = 1e-10
BISECTION_TOL = 1e-12


class DegenerateMetricError(ValueError):
    """Raised when the metric is not positive definite at a point."""


class TangentialEntryError(ValueError):
    """Raised when a geodesic is launched tangentially to the boundary."""


# ---------------------------------------------------------------------------
# manifold description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialProfile:
    """Radial conformal factor ``c(r)`` with its first two derivatives.

    The metric built from a profile is ``g = c(|x|) * identity``.
    """

    value: Callable[[np.ndarray], np.ndarray]
    d1: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)


def constant_profile(level: float = 1.0) -> RadialProfile:
    return RadialProfile(
        value=lambda r: np.full_like(np.asarray(r, dtype=float), level),
        d1=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
        d2=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
        name="constant",
        params={"level": level},
    )


def gaussian_lens_profile(amplitude: float = 3.0, width: float = 0.4) -> RadialProfile:
    """Lens profile ``c(r) = (1 + A exp(-r^2/w^2))^2``.

    A strong, narrow lens bends geodesics around its centre; with the
    default parameters some geodesics wind once around the lens and cross
    themselves.
    """
    a, w = float(amplitude), float(width)

    def n(r):
        return 1.0 + a * np.exp(-(r**2) / w**2)

    def n1(r):
        return -2.0 * a * r / w**2 * np.exp(-(r**2) / w**2)

    def n2(r):
        return a * np.exp(-(r**2) / w**2) * (4.0 * r**2 / w**4 - 2.0 / w**2)

    return RadialProfile(
        value=lambda r: n(r) ** 2,
        d1=lambda r: 2.0 * n(r) * n1(r),
        d2=lambda r: 2.0 * (n1(r) ** 2 + n(r) * n2(r)),
        name="gaussian_lens",
        params={"amplitude": a, "width": w},
    )


PROFILE_FAMILIES = {
    "constant": constant_profile,
    "gaussian_lens": gaussian_lens_profile,
}


@dataclass(frozen=True)
class TransversalManifold:
    """Domain ``{rho < 0}`` in the plane with a Riemannian metric.

    Attributes
    ----------
    dim : int
        Dimension of the transversal manifold (2 at desk scale).
    metric : callable
        ``metric(x)`` maps points of shape ``(..., dim)`` to symmetric
        matrices of shape ``(..., dim, dim)``.
    boundary_fn : callable
        Boundary defining function ``rho``; the boundary is ``rho = 0``
        and the interior ``rho < 0``.
    bounding_box : tuple
        ``((xmin, xmax), (ymin, ymax))`` containing the domain.
    catalog_id : str
        One of ``euclidean_disk``, ``constant_curvature_disk``,
        ``radial_conformal`` or ``custom``.
    params : dict
        Catalog parameters (echoed into configs and reports).
    log_conformal : callable, optional
        ``log_conformal(x) -> (phi, grad_phi, hess_phi)`` for conformally
        flat metrics ``exp(2 phi) * identity``.
    boundary_grad : callable, optional
        Analytic gradient of ``rho``.
    radius : float, optional
        Coordinate radius for the disk catalog (used for boundary
        parametrisation).
    """

    dim: int
    metric: Callable[[np.ndarray], np.ndarray]
    boundary_fn: Callable[[np.ndarray], np.ndarray]
    bounding_box: tuple
    catalog_id: str = "custom"
    params: dict = field(default_factory=dict)
    log_conformal: Optional[Callable] = None
    boundary_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    radius: Optional[float] = None
    flat: bool = False

    @property
    def diameter_bound(self) -> float:
        """Euclidean diameter of the bounding box."""
        lengths = [hi - lo for lo, hi in self.bounding_box]
        return float(math.sqrt(sum(l * l for l in lengths)))

    @property
    def tau_max(self) -> float:
        """Trapped-ray guard: geodesics longer than this are declared trapped."""
        # the arclength scale follows the largest conformal factor on the box
        return 100.0 * self.diameter_bound * self._max_scale()

    def _max_scale(self) -> float:
        (x0, x1), (y0, y1) = self.bounding_box[:2]
        gx, gy = np.meshgrid(np.linspace(x0, x1, 21), np.linspace(y0, y1, 21))
        pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        pts = pts[self.boundary_fn(pts) <= 0.0]
        if pts.size == 0:
            return 1.0
        eig = np.linalg.eigvalsh(self.metric(pts))
        return float(max(1.0, np.sqrt(eig.max())))

    def inner(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Metric inner product ``g_x(u, w)`` (vectorised over leading axes)."""
        g = self.metric(x)
        return np.einsum("...i,...ij,...j->...", u, g, w)

    def norm(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.sqrt(np.real(self.inner(x, u, u)))

    def rho_grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.boundary_grad is not None:
            return self.boundary_grad(x)
        grad = np.empty_like(x)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = H_FD
            grad[..., i] = (self.boundary_fn(x + e) - self.boundary_fn(x - e)) / (2 * H_FD)
        return grad

    def unit_normal(self, x: np.ndarray) -> np.ndarray:
        """Outward unit normal (metric sense) to the level set of ``rho``."""
        x = np.asarray(x, dtype=float)
        drho = self.rho_grad(x)
        ginv = np.linalg.inv(self.metric(x))
        nu = np.einsum("...ij,...j->...i", ginv, drho)
        scale = np.sqrt(np.einsum("...i,...i->...", drho, nu))
        return nu / scale[..., None]

    def boundary_point(self, theta: np.ndarray) -> np.ndarray:
        """Boundary parametrisation by polar angle (disk catalog only)."""
        if self.radius is None:
            raise NotImplementedError("boundary parametrisation is only available for disks")
        theta = np.asarray(theta, dtype=float)
        return self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _conformal_metric(log_conformal, dim):
    def metric(x):
        phi, _, _ = log_conformal(np.asarray(x, dtype=float))
        return np.exp(2.0 * phi)[..., None, None] * np.eye(dim)

    return metric


def _disk_rho(radius):
    def rho(x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1) - radius**2

    return rho


def _disk_rho_grad(x):
    return 2.0 * np.asarray(x, dtype=float)


def euclidean_disk(radius: float = 1.0) -> TransversalManifold:
    """Flat disk of the given radius; ``rho = |x|^2 - radius^2``."""

    def log_conformal(x):
        shape = x.shape[:-1]
        return np.zeros(shape), np.zeros(shape + (2,)), np.zeros(shape + (2, 2))

    r = float(radius)
    return TransversalManifold(
        dim=2,
        metric=_conformal_metric(log_conformal, 2),
        boundary_fn=_disk_rho(r),
        bounding_box=((-r, r), (-r, r)),
        catalog_id="euclidean_disk",
        params={"radius": r},
        log_conformal=log_conformal,
        boundary_grad=_disk_rho_grad,
        radius=r,
        flat=True,
    )


def constant_curvature_disk(kappa: float = -0.5, radius: float = 1.0) -> TransversalManifold:
    """Disk with the metric ``4 / (1 + kappa |x|^2)^2 * identity``.

    The metric has constant Gaussian curvature ``kappa``.  It requires
    ``1 + kappa radius^2 > 0``.
    """
    k, r = float(kappa), float(radius)
    if 1.0 + k * r * r <= 0.0:
        raise DegenerateMetricError("1 + kappa * radius^2 must be positive")

    def log_conformal(x):
        q = 1.0 + k * np.sum(x * x, axis=-1)
        phi = math.log(2.0) - np.log(q)
        grad = -2.0 * k * x / q[..., None]
        outer = np.einsum("...i,...j->...ij", x, x)
        hess = -2.0 * k * np.eye(2) / q[..., None, None] + 4.0 * k * k * outer / (q**2)[..., None, None]
        return phi, grad, hess

    return TransversalManifold(
        dim=2,
        metric=_conformal_metric(log_conformal, 2),
        boundary_fn=_disk_rho(r),
        bounding_box=((-r, r), (-r, r)),
        catalog_id="constant_curvature_disk",
        params={"kappa": k, "radius": r},
        log_conformal=log_conformal,
        boundary_grad=_disk_rho_grad,
        radius=r,
    )


def constant_curvature_diameter(kappa: float, radius: float = 1.0) -> float:
    """Metric length of the coordinate diameter of a constant-curvature disk."""
    k, r = float(kappa), float(radius)
    if k > 0:
        return 4.0 * math.atan(math.sqrt(k) * r) / math.sqrt(k)
    if k < 0:
        return 4.0 * math.atanh(math.sqrt(-k) * r) / math.sqrt(-k)
    return 4.0 * r


def radial_conformal(profile: RadialProfile | Callable | None = None, radius: float = 1.0) -> TransversalManifold:
    """Disk with a radially symmetric conformal metric ``c(|x|) * identity``."""
    if profile is None:
        profile = constant_profile(1.0)
    if not isinstance(profile, RadialProfile):
        profile = RadialProfile(value=profile)
    prof = profile
    r_disk = float(radius)

    def derivs(rr):
        c = prof.value(rr)
        if prof.d1 is not None and prof.d2 is not None:
            c1, c2 = prof.d1(rr), prof.d2(rr)
        else:
            hh = 1e-4
            c1 = (prof.value(rr + hh) - prof.value(np.abs(rr - hh))) / (2 * hh)
            c2 = (prof.value(rr + hh) - 2 * c + prof.value(np.abs(rr - hh))) / hh**2
        return c, c1, c2

    def log_conformal(x):
        rr = np.sqrt(np.sum(x * x, axis=-1))
        c, c1, c2 = derivs(rr)
        phi = 0.5 * np.log(c)
        p1 = c1 / (2.0 * c)
        p2 = (c2 * c - c1 * c1) / (2.0 * c * c)
        small = rr < 1e-12
        safe_r = np.where(small, 1.0, rr)
        unit = x / safe_r[..., None]
        p1_over_r = np.where(small, p2, p1 / safe_r)
        grad = p1[..., None] * unit
        outer = np.einsum("...i,...j->...ij", unit, unit)
        eye = np.eye(2)
        hess = p2[..., None, None] * outer + p1_over_r[..., None, None] * (eye - outer)
        hess = np.where(small[..., None, None], p2[..., None, None] * eye, hess)
        return phi, grad, hess

    return TransversalManifold(
        dim=2,
        metric=_conformal_metric(log_conformal, 2),
        boundary_fn=_disk_rho(r_disk),
        bounding_box=((-r_disk, r_disk), (-r_disk, r_disk)),
        catalog_id="radial_conformal",
        params={"radius": r_disk, "profile": {"family": prof.name, **prof.params}},
        log_conformal=log_conformal,
        boundary_grad=_disk_rho_grad,
        radius=r_disk,
        flat=prof.name == "constant" and prof.params.get("level", None) == 1.0,
    )


def manifold_from_config(cfg: dict) -> TransversalManifold:
    """Build a catalog manifold from a JSON-style dictionary."""
    cfg = dict(cfg)
    cid = cfg.pop("catalog_id")
    if cid == "euclidean_disk":
        return euclidean_disk(**cfg)
    if cid == "constant_curvature_disk":
        return constant_curvature_disk(**cfg)
    if cid == "radial_conformal":
        prof = cfg.pop("profile", {"family": "constant"})
        prof = dict(prof)
        family = prof.pop("family")
        if family not in PROFILE_FAMILIES:
            raise ValueError(f"unknown radial profile family {family!r}")
        return radial_conformal(PROFILE_FAMILIES[family](**prof), **cfg)
    raise ValueError(f"unknown catalog_id {cid!r}")


# ---------------------------------------------------------------------------
# Christoffel symbols
# ---------------------------------------------------------------------------


def _metric_checked(m: TransversalManifold, x: np.ndarray) -> np.ndarray:
    g = m.metric(x)
    eig = np.linalg.eigvalsh(0.5 * (g + np.swapaxes(g, -1, -2)))
    if not np.all(eig > 0):
        raise DegenerateMetricError("metric is not positive definite")
    return g


def christoffel(m: TransversalManifold, x: np.ndarray, method: str = "fd", h_fd: float = H_FD) -> np.ndarray:
    """Christoffel symbols ``Gamma[..., k, i, j]`` of the metric at ``x``.

    Parameters
    ----------
    m : TransversalManifold
    x : array_like, shape (..., dim)
    method : {"fd", "analytic", "auto"}
        ``fd`` differentiates the metric by central differences with step
        ``h_fd``.  ``analytic`` uses the log-conformal factor.  ``auto``
        prefers the analytic form when the manifold provides one.

    Returns
    -------
    ndarray, shape (..., dim, dim, dim)
        Symmetric in the last two indices.
    """
    x = np.asarray(x, dtype=float)
    d = m.dim
    if method == "auto":
        method = "analytic" if m.log_conformal is not None else "fd"
    g = _metric_checked(m, x)
    if method == "analytic":
        if m.log_conformal is None:
            raise ValueError("manifold has no analytic conformal factor")
        _, dphi, _ = m.log_conformal(x)
        eye = np.eye(d)
        gam = (
            np.einsum("ki,...j->...kij", eye, dphi)
            + np.einsum("kj,...i->...kij", eye, dphi)
            - np.einsum("ij,...k->...kij", eye, dphi)
        )
        return gam
    dg = np.empty(x.shape[:-1] + (d, d, d))
    for l in range(d):
        e = np.zeros(d)
        e[l] = h_fd
        dg[..., l, :, :] = (m.metric(x + e) - m.metric(x - e)) / (2.0 * h_fd)
    ginv = np.linalg.inv(g)
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij)
    term = (
        np.einsum("...ilj->...lij", dg)
        + np.einsum("...jli->...lij", dg)
        - dg
    )
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, term)


def _geodesic_accel(m: TransversalManifold, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Acceleration ``-Gamma(x)(v, v)`` of the geodesic equation."""
    if m.flat:
        return np.zeros_like(v)
    if m.log_conformal is not None:
        _, dphi, _ = m.log_conformal(x)
        dv = np.sum(dphi * v, axis=-1)
        vv = np.sum(v * v, axis=-1)
        return -(2.0 * dv[..., None] * v - vv[..., None] * dphi)
    gam = christoffel(m, x, method="fd")
    return -np.einsum("...kij,...i,...j->...k", gam, v, v)


def _transport_rate(m: TransversalManifold, x: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Rate ``-Gamma(x)(v, w)`` of the parallel transport equation."""
    if m.flat:
        return np.zeros_like(w)
    if m.log_conformal is not None:
        _, dphi, _ = m.log_conformal(x)
        dv = np.sum(dphi * v, axis=-1)
        dw = np.sum(dphi * w, axis=-1)
        vw = np.sum(v * w, axis=-1)
        return -(dw[..., None] * v + dv[..., None] * w - vw[..., None] * dphi)
    gam = christoffel(m, x, method="fd")
    return -np.einsum("...kij,...i,...j->...k", gam, v, w)


# ---------------------------------------------------------------------------
# geodesic tracing
# ---------------------------------------------------------------------------

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_step(m, x, v, dt):
    """One Dormand-Prince step for a batch; returns 5th-order state and error."""
    if m.flat:
        # straight lines: every Runge-Kutta stage is exact
        return x + dt[:, None] * v, v.copy(), np.zeros(x.shape[0])
    dt = dt[:, None]
    kx, kv = [], []
    for s in range(7):
        if s == 0:
            xs, vs = x, v
        else:
            xs = x + dt * sum(a * k for a, k in zip(_A[s], kx) if a != 0.0)
            vs = v + dt * sum(a * k for a, k in zip(_A[s], kv) if a != 0.0)
        kx.append(vs)
        kv.append(_geodesic_accel(m, xs, vs))
    x5 = x + dt * sum(b * k for b, k in zip(_B5, kx) if b != 0.0)
    v5 = v + dt * sum(b * k for b, k in zip(_B5, kv) if b != 0.0)
    ex = dt * sum((b5 - b4) * k for b5, b4, k in zip(_B5, _B4, kx) if b5 != b4)
    ev = dt * sum((b5 - b4) * k for b5, b4, k in zip(_B5, _B4, kv) if b5 != b4)
    scale_x = ATOL + ATOL * np.maximum(np.abs(x), np.abs(x5))
    scale_v = ATOL + ATOL * np.maximum(np.abs(v), np.abs(v5))
    err = np.maximum(np.max(np.abs(ex) / scale_x, axis=-1), np.max(np.abs(ev) / scale_v, axis=-1))
    return x5, v5, err


def _rk4_step(m, x, v, dt):
    if m.flat:
        return x + dt[:, None] * v, v.copy(), np.zeros(x.shape[0])
    dt = dt[:, None]
    k1x, k1v = v, _geodesic_accel(m, x, v)
    k2x = v + 0.5 * dt * k1v
    k2v = _geodesic_accel(m, x + 0.5 * dt * k1x, k2x)
    k3x = v + 0.5 * dt * k2v
    k3v = _geodesic_accel(m, x + 0.5 * dt * k2x, k3x)
    k4x = v + dt * k3v
    k4v = _geodesic_accel(m, x + dt * k3x, k4x)
    x1 = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v1 = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x1, v1, np.zeros(x.shape[0])


@dataclass
class GeodesicSegment:
    """A traced unit-speed geodesic from the inflow boundary to its exit.

    ``samples`` has columns ``(tau, x_1, ..., x_d, v_1, ..., v_d)``.
    ``exit_time`` is ``inf`` for trapped rays.
    """

    samples: np.ndarray
    exit_time: float
    entry_point: np.ndarray
    exit_point: np.ndarray
    non_tangential: bool
    manifold: TransversalManifold = field(repr=False)
    entry_tangent: np.ndarray = field(default=None)
    exit_tangent: np.ndarray = field(default=None)

    @property
    def tau(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def points(self) -> np.ndarray:
        d = self.manifold.dim
        return self.samples[:, 1 : 1 + d]

    @property
    def tangents(self) -> np.ndarray:
        d = self.manifold.dim
        return self.samples[:, 1 + d : 1 + 2 * d]

    @property
    def length(self) -> float:
        return self.exit_time

    def to_csv(self, path) -> None:
        """Write the samples as CSV with columns ``tau, x1, x2, v1, v2``."""
        d = self.manifold.dim
        header = ["tau"] + [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self.samples:
                writer.writerow([repr(float(val)) for val in row])


def _normalise_inward(m, x, xi):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    speed = m.norm(x, xi)
    if np.any(speed <= 0):
        raise ValueError("initial direction must be nonzero")
    xi = xi / speed[:, None]
    nu = m.unit_normal(x)
    cos_in = m.inner(x, xi, nu)
    return x, xi, cos_in


def trace_batch(
    m: TransversalManifold,
    x0: np.ndarray,
    xi0: np.ndarray,
    step: float = 0.05,
    method: str = "dopri",
    record: bool = True,
    tangency_tol: float = TANGENCY_TOL,
    interior_tol: float = INTERIOR_TOL,
    entry_tol: float = ENTRY_TOL,
    allow_tangential: bool = False,
) -> list[GeodesicSegment]:
    """Trace many geodesics at once from boundary points.

    The rays advance in lockstep with individual step sizes.  ``dopri``
    is the adaptive Dormand-Prince 5(4) pair with absolute tolerance
    ``1e-10`` and maximal step ``step``; ``rk4`` is the classical fixed
    step scheme, used for convergence studies.  A ray leaves the domain
    when ``rho`` turns positive; the exit time is then bracketed by
    bisection on the step length, re-integrating from the last interior
    state, until the bracket is below ``1e-12``.

    Parameters
    ----------
    m : TransversalManifold
    x0, xi0 : array_like, shape (N, dim)
        Boundary points and inward directions.  The directions are
        rescaled to unit metric length.
    step : float
        Maximal (``dopri``) or fixed (``rk4``) step in arclength.

    Returns
    -------
    list of GeodesicSegment, in input order.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    rho0 = m.boundary_fn(x0)
    if np.any(np.abs(rho0) > 1e-8):
        raise ValueError("starting points must lie on the boundary (rho = 0)")
    x0, xi, cos_in = _normalise_inward(m, x0, xi0)
    if np.any(cos_in > entry_tol):
        raise ValueError("initial directions must point into the domain")
    tangential = np.abs(cos_in) < entry_tol
    if np.any(tangential) and not allow_tangential:
        raise TangentialEntryError(
            f"tangential start: |<xi, nu>| = {np.abs(cos_in).min():.3e} < {entry_tol}"
        )

    stepper = _dopri_step if method == "dopri" else _rk4_step
    tau_max = m.tau_max
    d = m.dim
    x = x0.copy()
    v = xi.copy()
    tau = np.zeros(n)
    dt = np.full(n, step if method == "rk4" else min(step, 0.01))
    active = ~tangential
    exit_time = np.where(tangential, 0.0, np.nan)
    exit_x = np.where(tangential[:, None], x0, np.nan)
    exit_v = np.where(tangential[:, None], xi, np.nan)
    rec_idx = [np.arange(n)]
    rec_rows = [np.concatenate([np.zeros((n, 1)), x0, xi], axis=1)]

    while np.any(active):
        idx = np.nonzero(active)[0]
        xa, va, ta, ha = x[idx], v[idx], tau[idx], dt[idx]
        ha = np.minimum(ha, tau_max + 1.0 - ta)
        x5, v5, err = stepper(m, xa, va, ha)
        if method == "dopri":
            ok = err <= 1.0
            fac = np.where(err > 0, 0.9 * np.power(np.maximum(err, 1e-300), -0.2), 5.0)
            fac = np.clip(fac, 0.2, 5.0)
            new_h = np.minimum(ha * fac, step)
        else:
            ok = np.ones(idx.size, dtype=bool)
            new_h = ha
        dt[idx] = new_h
        acc = idx[ok]
        if acc.size == 0:
            continue
        xn, vn = x5[ok], v5[ok]
        hn = ha[ok]
        rho_n = m.boundary_fn(xn)
        crossed = rho_n > 0.0
        tn = tau[acc] + hn
        trapped = (~crossed) & (tn > tau_max)
        moving = (~crossed) & (~trapped)
        mv = acc[moving]
        x[mv], v[mv], tau[mv] = xn[moving], vn[moving], tn[moving]
        if record and mv.size:
            rec_idx.append(mv)
            rec_rows.append(np.concatenate([tau[mv, None], x[mv], v[mv]], axis=1))
        tr = acc[trapped]
        exit_time[tr] = np.inf
        active[tr] = False
        cr = acc[crossed]
        if cr.size:
            xs, vs, hs = x[cr], v[cr], hn[crossed]
            lo = np.zeros(cr.size)
            hi = np.ones(cr.size)
            while np.max((hi - lo) * hs) > BISECTION_TOL:
                mid = 0.5 * (lo + hi)
                xm, _, _ = stepper(m, xs, vs, mid * hs)
                out = m.boundary_fn(xm) > 0.0
                hi = np.where(out, mid, hi)
                lo = np.where(out, lo, mid)
            xe, ve, _ = stepper(m, xs, vs, hi * hs)
            exit_time[cr] = tau[cr] + hi * hs
            exit_x[cr] = xe
            exit_v[cr] = ve
            active[cr] = False

    finite = np.isfinite(exit_time)
    fin = np.nonzero(finite & ~tangential)[0]
    rec_idx.append(fin)
    rec_rows.append(np.concatenate([exit_time[fin, None], exit_x[fin], exit_v[fin]], axis=1))
    all_idx = np.concatenate(rec_idx)
    all_rows = np.concatenate(rec_rows, axis=0)
    order = np.argsort(all_idx, kind="stable")
    all_idx, all_rows = all_idx[order], all_rows[order]
    counts = np.bincount(all_idx, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    # vectorised non-tangency predicate
    rho_rows = m.boundary_fn(all_rows[:, 1 : 1 + d])
    first = starts
    last = starts + counts - 1
    rho_mask = rho_rows.copy()
    rho_mask[first] = -np.inf
    rho_mask[last] = -np.inf
    interior_max = np.maximum.reduceat(rho_mask, starts)
    ok_ends = np.zeros(n, dtype=bool)
    if fin.size:
        ends = np.concatenate([x0[fin], exit_x[fin]])
        tans = np.concatenate([xi[fin], exit_v[fin]])
        cosines = np.abs(m.inner(ends, tans, m.unit_normal(ends))).reshape(2, -1)
        ok_ends[fin] = np.all(cosines > tangency_tol, axis=0)
    nt_flags = finite & (exit_time > 0) & ok_ends & (interior_max < -interior_tol)

    segs = []
    for i in range(n):
        segs.append(
            GeodesicSegment(
                samples=all_rows[starts[i] : starts[i] + counts[i]],
                exit_time=float(exit_time[i]),
                entry_point=x0[i].copy(),
                exit_point=exit_x[i].copy(),
                non_tangential=bool(nt_flags[i]),
                manifold=m,
                entry_tangent=xi[i].copy(),
                exit_tangent=exit_v[i].copy(),
            )
        )
    return segs


def geodesic_trace(
    m: TransversalManifold,
    x: Sequence[float],
    xi: Sequence[float],
    step: float = 0.05,
    **kwargs,
) -> GeodesicSegment:
    """Trace one geodesic from the boundary point ``x`` in direction ``xi``.

    See :func:`trace_batch` for the keyword arguments.

    Examples
    --------
    >>> seg = geodesic_trace(euclidean_disk(), (-1.0, 0.0), (1.0, 0.0))
    >>> round(seg.exit_time, 12)
    2.0
    """
    return trace_batch(m, np.asarray(x, dtype=float)[None, :], np.asarray(xi, dtype=float)[None, :], step, **kwargs)[0]


def is_non_tangential(
    seg: GeodesicSegment,
    m: TransversalManifold | None = None,
    tangency_tol: float = TANGENCY_TOL,
    interior_tol: float = INTERIOR_TOL,
) -> bool:
    """True when the segment has finite length, meets the boundary
    transversally at both ends and stays strictly inside in between."""
    m = seg.manifold if m is None else m
    if not np.isfinite(seg.exit_time) or seg.exit_time <= 0.0:
        return False
    ends = np.stack([seg.entry_point, seg.exit_point])
    tangents = np.stack([seg.entry_tangent, seg.exit_tangent])
    nu = m.unit_normal(ends)
    cosines = np.abs(m.inner(ends, tangents, nu))
    if np.any(cosines <= tangency_tol):
        return False
    inner = seg.points[1:-1]
    if inner.size and np.any(m.boundary_fn(inner) >= -interior_tol):
        return False
    return True


# ---------------------------------------------------------------------------
# transport, exponential map, inflow sampling
# ---------------------------------------------------------------------------


def _augmented_rhs(m: TransversalManifold, n_vec: int):
    d = m.dim

    def rhs(_, state):
        x = state[:d]
        v = state[d : 2 * d]
        out = np.empty_like(state)
        out[:d] = v
        out[d : 2 * d] = _geodesic_accel(m, x[None], v[None])[0]
        for k in range(n_vec):
            w = state[2 * d + k * d : 2 * d + (k + 1) * d]
            out[2 * d + k * d : 2 * d + (k + 1) * d] = _transport_rate(m, x[None], v[None], w[None])[0]
        return out

    return rhs


def parallel_transport(seg: GeodesicSegment, w0: Sequence[float], rtol: float = 1e-12) -> np.ndarray:
    """Transport ``w0`` in parallel along the segment.

    Returns an array of shape ``(n_samples, dim)`` with the transported
    vector at every sample time of ``seg``.
    """
    m = seg.manifold
    d = m.dim
    state0 = np.concatenate([seg.entry_point, seg.entry_tangent, np.asarray(w0, dtype=float)])
    taus = seg.tau
    if taus[-1] <= 0:
        return np.asarray(w0, dtype=float)[None, :].copy()
    sol = solve_ivp(
        _augmented_rhs(m, 1), (0.0, float(taus[-1])), state0, method="DOP853",
        t_eval=taus, rtol=rtol, atol=1e-13,
    )
    return sol.y[2 * d :].T.copy()


def exp_map(m: TransversalManifold, x: np.ndarray, v: np.ndarray, n_steps: int = 32) -> np.ndarray:
    """Exponential map ``exp_x(v)`` by fixed-step RK4, vectorised.

    ``x`` and ``v`` have shape ``(..., dim)``; ``v`` is not normalised.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = np.broadcast_shapes(x.shape, v.shape)
    xs = np.broadcast_to(x, shape).reshape(-1, shape[-1]).copy()
    vs = np.broadcast_to(v, shape).reshape(-1, shape[-1]).copy()
    dt = np.full(xs.shape[0], 1.0 / n_steps)
    for _ in range(n_steps):
        xs, vs, _ = _rk4_step(m, xs, vs, dt)
    return xs.reshape(shape)


def sample_inflow_boundary(
    m: TransversalManifold, n_points: int, n_dirs: int, theta_min: float = TANGENCY_TOL, offset: float = math.pi
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Grid of inflow pairs ``(x, xi)`` on the boundary.

    Boundary points are equally spaced in polar angle (equal arclength on
    the rotationally symmetric catalog), starting at angle ``offset``.
    Incidence angles measured from the inward normal are the midpoints of
    ``n_dirs`` equal cells of ``(-pi/2 + theta_min, pi/2 - theta_min)``.
    Each ``xi`` has unit metric length.
    """
    if n_points < 1 or n_dirs < 1:
        raise ValueError("n_points and n_dirs must be positive")
    theta = offset + 2.0 * math.pi * np.arange(n_points) / n_points
    pts = m.boundary_point(theta)
    # snap to the level set exactly
    pts = pts * (m.radius / np.linalg.norm(pts, axis=-1))[:, None]
    nu = m.unit_normal(pts)
    g = m.metric(pts)
    # metric-unit tangent: rotate nu by 90 degrees in the orthonormal frame
    tang = np.stack([-nu[:, 1], nu[:, 0]], axis=-1)
    tang = tang - m.inner(pts, tang, nu)[:, None] * nu
    tang = tang / np.sqrt(np.einsum("ni,nij,nj->n", tang, g, tang))[:, None]
    half = 0.5 * math.pi - theta_min
    width = 2.0 * half / n_dirs
    angles = -half + width * (np.arange(n_dirs) + 0.5)
    pairs = []
    for i in range(n_points):
        for a in angles:
            xi = -math.cos(a) * nu[i] + math.sin(a) * tang[i]
            pairs.append((pts[i].copy(), xi))
    return pairs
