"""Numerical checks of Carleman inequalities for the damped wave operator.

Two checks are provided.

* The boundary estimate with the convexified weight
  ``phi = +-(beta t + x1)/h - t^2/(2 eps)`` on the cylinder
  ``(0, T) x [0, 1]^n`` with the Euclidean metric, evaluated with
  fourth-order finite differences and Simpson quadrature.
* The interior estimate ``h ||w|| <= C ||e^{-+psi/h} h^2 L e^{+-psi/h} w||_{H^{-1}_scl}``
  with ``psi = beta t + x1`` on a flat torus, evaluated spectrally.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.integrate import simpson

SLACK = 0.02
BETA_MIN = 1.0 / math.sqrt(3.0)


class GuardError(ValueError):
    """Parameters outside the range where the boundary estimate is claimed."""


class EmbeddingError(ValueError):
    """The test function reaches the margin of the torus."""


# ---------------------------------------------------------------------------
# domain and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CylinderDomain:
    """``(0, T) x [0, 1]^n`` sampled on a uniform grid.

    ``x1`` is the first spatial axis.  The boundary split uses
    ``d_nu x1``: it is ``-1`` on ``{x1 = 0}`` (part of ``dM_-``), ``+1`` on
    ``{x1 = 1}`` (part of ``dM_+``) and ``0`` on the remaining faces,
    which belong to both parts.
    """

    T: float = 0.5
    n: int = 2
    n_t: int = 41
    n_x: int = 41

    def __post_init__(self):
        if self.n < 1 or self.n_t < 5 or self.n_x < 5 or self.T <= 0:
            raise ValueError("invalid cylinder domain")

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_x)

    @property
    def dt(self) -> float:
        return self.T / (self.n_t - 1)

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_x - 1)

    @property
    def shape(self) -> tuple:
        return (self.n_t,) + (self.n_x,) * self.n

    def mesh(self):
        axes = [self.t] + [self.x] * self.n
        return np.meshgrid(*axes, indexing="ij")

    def normal_x1(self, face: str) -> float:
        """``<nu, e_1>`` on the faces ``x1=0``, ``x1=1`` or ``other``."""
        return {"x1=0": -1.0, "x1=1": 1.0, "other": 0.0}[face]

    def refined(self) -> "CylinderDomain":
        """Domain with both grid spacings halved."""
        return CylinderDomain(self.T, self.n, 2 * self.n_t - 1, 2 * self.n_x - 1)


@dataclass(frozen=True)
class CarlemanParams:
    """Semiclassical and convexification parameters with the sign of the weight."""

    h: float
    epsilon: float
    beta: float
    sign: int = 1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if not (0 < self.h < self.epsilon):
            raise GuardError("need 0 < h < epsilon")
        if not (BETA_MIN < self.beta < 1.0):
            raise GuardError("beta must lie in (1/sqrt(3), 1)")

    def weight(self, t, x1):
        """``phi = sign (beta t + x1)/h - t^2/(2 epsilon)``."""
        return self.sign * (self.beta * t + x1) / self.h - t**2 / (2.0 * self.epsilon)

    def violations(self, T: float, a_sup: float = 0.0, q_sup: float = 0.0) -> list:
        """Names of the violated parameter constraints (empty when admissible)."""
        h, eps, b = self.h, self.epsilon, self.beta
        out = []
        if not eps < 3 * T**2:
            out.append("epsilon < 3 T^2")
        bounds = {
            "1/h > 2T/(epsilon beta)": 2 * T / (eps * b),
            "1/h > 12 beta T/(epsilon (3 beta^2 - 1))": 12 * b * T / (eps * (3 * b * b - 1)),
            "1/h > 2 beta T/epsilon": 2 * b * T / eps,
            "1/h > 1/epsilon": 1.0 / eps,
        }
        for name, val in bounds.items():
            if not 1.0 / h > val:
                out.append(name)
        if not 1.0 / (2 * eps) >= 3 * a_sup**2:
            out.append("1/(2 epsilon) >= 3 |a|^2")
        if not (3 * b * b - 1) / (4 * eps) >= 3 * (b * b * a_sup**2 + q_sup**2):
            out.append("(3 beta^2 - 1)/(4 epsilon) >= 3 (beta^2 |a|^2 + |q|^2)")
        return out

    def check(self, T: float, a_sup: float = 0.0, q_sup: float = 0.0) -> None:
        bad = self.violations(T, a_sup, q_sup)
        if bad:
            raise GuardError("violated constraint: " + "; ".join(bad))


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


def random_test_function(dom: CylinderDomain, seed: int, n_modes: int = 4, max_mode: int = 3) -> np.ndarray:
    """``u = t^2 sum_k c_k (1 + d_k t) prod_j sin(pi m_kj x_j)`` on the grid.

    Vanishes on the lateral boundary and satisfies ``u = d_t u = 0`` at
    ``t = 0``.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be at least 1")
    rng = np.random.default_rng(seed)
    grids = dom.mesh()
    t = grids[0]
    u = np.zeros(dom.shape)
    for _ in range(n_modes):
        c = rng.normal()
        d = rng.uniform(-1.0, 1.0)
        modes = rng.integers(1, max_mode + 1, size=dom.n)
        term = c * (1.0 + d * t)
        for j in range(dom.n):
            term = term * np.sin(math.pi * modes[j] * grids[j + 1])
        u += term
    u *= t**2
    # exact zeros on the lateral faces
    for j in range(dom.n):
        sl = [slice(None)] * (dom.n + 1)
        sl[j + 1] = 0
        u[tuple(sl)] = 0.0
        sl[j + 1] = -1
        u[tuple(sl)] = 0.0
    return u


def mirrored(u: np.ndarray) -> np.ndarray:
    """``u(T - t, x)`` on the same grid."""
    return u[::-1].copy()


# ---------------------------------------------------------------------------
# boundary estimate
# ---------------------------------------------------------------------------


# fourth-order one-sided stencils for the first two and last two nodes
_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0])
_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0])


def _diff(f: np.ndarray, d: float, axis: int) -> np.ndarray:
    """Fourth-order finite-difference derivative along ``axis`` (at least 5 nodes)."""
    g = np.moveaxis(f, axis, 0)
    out = np.empty_like(g)
    out[2:-2] = g[:-4] - 8.0 * g[1:-3] + 8.0 * g[3:-1] - g[4:]
    head = g[:5].reshape(5, -1)
    tail = g[-5:][::-1].reshape(5, -1)
    out[0] = (_EDGE0 @ head).reshape(g.shape[1:])
    out[1] = (_EDGE1 @ head).reshape(g.shape[1:])
    out[-1] = -(_EDGE0 @ tail).reshape(g.shape[1:])
    out[-2] = -(_EDGE1 @ tail).reshape(g.shape[1:])
    return np.moveaxis(out / (12.0 * d), 0, axis)


def _integrate(vals: np.ndarray, spacings) -> float:
    out = vals
    for d in spacings:
        out = simpson(out, dx=d, axis=0)
    return float(np.real(out))


def _coefficient_grid(c, dom: CylinderDomain):
    if c is None:
        return 0.0
    if callable(c):
        g = dom.mesh()
        return np.asarray(c(g[0], *g[1:]))
    return c


@dataclass
class EstimateTerms:
    """Both sides of a Carleman inequality and their ratio ``rhs / lhs``."""

    lhs: float
    rhs: float
    ratio: float
    terms: dict = field(default_factory=dict)

    def holds(self, slack: float = SLACK) -> bool:
        return self.ratio <= 1.0 + slack


def boundary_estimate_check(u: np.ndarray, dom: CylinderDomain, params: CarlemanParams, a=None, q=None, check_guards: bool = True) -> EstimateTerms:
    """Evaluate the convexified-weight boundary Carleman inequality.

    For ``sign = +1`` the inequality reads::

        ||e^{-phi} h^2 L e^{phi} u||^2 + (4/beta - beta/2) h^3 ||grad u(T)||^2 + 3 beta h ||u(T)||^2
          >= (3 beta^2 - 1) h^2/(4 eps) ||u||^2 + beta h^3/4 ||d_t u(T)||^2
             + h^4/(2 eps) (||d_t u||^2 + ||grad u||^2) + h^3 int_Sigma nu_1 |d_nu u|^2

    and for ``sign = -1``::

        ||e^{-phi} h^2 L e^{phi} u||^2 + 2 (beta + 1) h^3 (||grad u(T)||^2 + ||d_t u(T)||^2)
          >= (3 beta^2 - 1) h^2/(4 eps) ||u||^2
             + h^4/(2 eps) (||d_t u||^2 + ||grad u||^2) - h^3 int_Sigma nu_1 |d_nu u|^2

    with ``L = d_t^2 - Lap + a d_t + q``.  ``lhs`` is the first line and
    ``rhs`` the second; the returned ratio is ``rhs / lhs`` (zero when
    both vanish).
    """
    h, eps, beta, sg = params.h, params.epsilon, params.beta, params.sign
    a_g = _coefficient_grid(a, dom)
    q_g = _coefficient_grid(q, dom)
    if check_guards:
        params.check(dom.T, float(np.max(np.abs(a_g))), float(np.max(np.abs(q_g))))
    dt, dx = dom.dt, dom.dx
    n = dom.n
    spac = [dt] + [dx] * n
    t = dom.t.reshape((-1,) + (1,) * n)
    u_t = _diff(u, dt, 0)
    u_tt = _diff(u_t, dt, 0)
    grads = [_diff(u, dx, j + 1) for j in range(n)]
    lap = sum(_diff(g, dx, j + 1) for j, g in enumerate(grads))
    phi_t = sg * beta / h - t / eps
    phi_tt = -1.0 / eps
    phi_x1 = sg / h
    conj = h * h * (
        u_tt
        + 2 * phi_t * u_t
        + (phi_tt + phi_t**2 - phi_x1**2) * u
        - lap
        - 2 * phi_x1 * grads[0]
        + a_g * (u_t + phi_t * u)
        + q_g * u
    )
    norm2 = lambda v: _integrate(np.abs(v) ** 2, spac)  # noqa: E731
    normT = lambda v: _integrate(np.abs(v[-1]) ** 2, spac[1:])  # noqa: E731
    conj2 = norm2(conj)
    u2 = norm2(u)
    ut2 = norm2(u_t)
    gu2 = sum(norm2(g) for g in grads)
    uT = normT(u)
    utT = normT(u_t)
    guT = sum(normT(g) for g in grads)
    # lateral flux through the faces x1 = 0 and x1 = 1 (nu_1 = -1 and +1)
    flux_spac = [dt] + [dx] * (n - 1)
    flux = _integrate(np.abs(grads[0][:, -1]) ** 2, flux_spac) - _integrate(np.abs(grads[0][:, 0]) ** 2, flux_spac)
    c_l2 = (3 * beta**2 - 1) * h * h / (4 * eps)
    c_grad = h**4 / (2 * eps)
    if sg == 1:
        lhs = conj2 + (4 / beta - beta / 2) * h**3 * guT + 3 * beta * h * uT
        rhs = c_l2 * u2 + beta * h**3 / 4 * utT + c_grad * (ut2 + gu2) + h**3 * flux
    else:
        lhs = conj2 + 2 * (beta + 1) * h**3 * (guT + utT)
        rhs = c_l2 * u2 + c_grad * (ut2 + gu2) - h**3 * flux
    ratio = 0.0 if lhs == 0 and rhs == 0 else (rhs / lhs if lhs > 0 else math.inf)
    terms = {
        "conjugated": conj2,
        "u_L2": u2,
        "dt_u_L2": ut2,
        "grad_u_L2": gu2,
        "u_T": uT,
        "dt_u_T": utT,
        "grad_u_T": guT,
        "flux": flux,
    }
    return EstimateTerms(float(lhs), float(rhs), float(ratio), terms)


@dataclass
class BoundarySweep:
    """Pass/fail of the boundary estimate over seeds and parameter cells."""

    cells: list
    n_pass: int
    n_total: int
    max_ratio: float

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {"n_pass": self.n_pass, "n_total": self.n_total, "max_ratio": self.max_ratio, "passed": self.n_pass == self.n_total},
                fh,
                indent=2,
                sort_keys=True,
            )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", "epsilon", "beta", "sign", "max_ratio"])
            for c in self.cells:
                w.writerow([repr(c["h"]), repr(c["epsilon"]), repr(c["beta"]), c["sign"], repr(c["max_ratio"])])


def boundary_sweep(dom: CylinderDomain, h_grid, eps_grid, beta_grid, seeds, a=None, q=None, signs=(1, -1), n_modes: int = 4) -> BoundarySweep:
    """Check every seeded test function on every admissible parameter cell."""
    funcs = [random_test_function(dom, s, n_modes) for s in seeds]
    cells = []
    n_pass = n_total = 0
    worst = 0.0
    for h in h_grid:
        for eps in eps_grid:
            for beta in beta_grid:
                for sg in signs:
                    p = CarlemanParams(h, eps, beta, sg)
                    ratios = [boundary_estimate_check(u, dom, p, a, q).ratio for u in funcs]
                    ok = sum(r <= 1.0 + SLACK for r in ratios)
                    n_pass += ok
                    n_total += len(ratios)
                    worst = max(worst, max(ratios))
                    cells.append({"h": h, "epsilon": eps, "beta": beta, "sign": sg, "max_ratio": max(ratios)})
    return BoundarySweep(cells, n_pass, n_total, worst)


# ---------------------------------------------------------------------------
# interior estimate on a torus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TorusGrid:
    """Flat torus ``[0, length)^(1+n)`` with ``points`` samples per axis; axis 0 is time."""

    n: int = 2
    points: int = 160
    length: float = 1.0

    @property
    def spacing(self) -> float:
        return self.length / self.points

    def mesh(self):
        ax = self.spacing * np.arange(self.points)
        return np.meshgrid(*([ax] * (self.n + 1)), indexing="ij")

    def frequencies(self):
        k = 2 * math.pi * sfft.fftfreq(self.points, d=self.spacing)
        return np.meshgrid(*([k] * (self.n + 1)), indexing="ij", sparse=True)


def gaussian_bump(torus: TorusGrid, center=None, width: float = 0.05) -> np.ndarray:
    """Non-oscillating Gaussian bump on the torus."""
    grids = torus.mesh()
    c = [0.5 * torus.length] * (torus.n + 1) if center is None else center
    r2 = sum((g - ci) ** 2 for g, ci in zip(grids, c))
    return np.exp(-r2 / (2 * width**2)).astype(complex)


def characteristic_covector(beta: float, n: int, xi_t: float = 1.0) -> np.ndarray:
    """A covector on which the principal symbol of the conjugated operator vanishes.

    ``xi_1 = beta xi_t`` and ``|xi'|^2 = (1 - beta^2)(1 + xi_t^2)``, the
    transverse part placed on the second spatial axis.
    """
    if n < 2:
        raise ValueError("the characteristic set needs at least two spatial axes")
    xi = np.zeros(n + 1)
    xi[0] = xi_t
    xi[1] = beta * xi_t
    xi[2] = math.sqrt((1 - beta**2) * (1 + xi_t**2))
    return xi


def wave_packet(torus: TorusGrid, h: float, beta: float, center=None, width: float = 0.05) -> np.ndarray:
    """Gaussian bump modulated by ``exp(i xi0 . z / h)`` on the characteristic set."""
    grids = torus.mesh()
    xi0 = characteristic_covector(beta, torus.n)
    phase = sum(k * g for k, g in zip(xi0, grids)) / h
    return gaussian_bump(torus, center, width) * np.exp(1j * phase)


def _check_embedding(w: np.ndarray, margin_frac: float = 0.1, tol: float = 1e-10) -> None:
    peak = float(np.max(np.abs(w)))
    if peak == 0:
        return
    n = w.shape[0]
    m = max(1, int(round(margin_frac * n)))
    band = np.zeros(w.shape, dtype=bool)
    for ax in range(w.ndim):
        sl = [slice(None)] * w.ndim
        sl[ax] = slice(0, m)
        band[tuple(sl)] = True
        sl[ax] = slice(n - m, n)
        band[tuple(sl)] = True
    if np.max(np.abs(w[band])) > tol * peak:
        raise EmbeddingError("test function reaches the torus margin")


def conjugated_operator_torus(w: np.ndarray, torus: TorusGrid, h: float, beta: float, sign: int = 1, a=None, q=None) -> np.ndarray:
    """``e^{-sign psi/h} h^2 L e^{sign psi/h} w`` with ``psi = beta t + x1``, spectrally."""
    W = sfft.fftn(w)
    k = torus.frequencies()
    kt, k1 = k[0], k[1]
    rest = sum(kk**2 for kk in k[2:])
    Dt = 1j * kt + sign * beta / h
    D1 = 1j * k1 + sign / h
    out = sfft.ifftn((Dt**2 - D1**2 + rest) * W)
    if a is not None:
        out = out + a * sfft.ifftn(Dt * W)
    if q is not None:
        out = out + q * w
    return h * h * out


def semiclassical_norm(v: np.ndarray, torus: TorusGrid, h: float, order: float = -1.0) -> float:
    """``||(1 + h^2 |xi|^2)^{order/2} v||_{L^2}`` on the torus."""
    V = sfft.fftn(v)
    k = torus.frequencies()
    xi2 = sum(kk**2 for kk in k)
    mult = (1.0 + h * h * xi2) ** (order / 2.0)
    # Parseval: sum |v|^2 dV = dV / N sum |V|^2
    dV = torus.spacing ** v.ndim
    return math.sqrt(float(np.sum(np.abs(mult * V) ** 2)) * dV / v.size)


def interior_estimate_check(w: np.ndarray, h: float, beta: float, torus: TorusGrid, sign: int = 1, a=None, q=None) -> EstimateTerms:
    """``lhs = h ||w||`` and ``rhs = ||e^{-+psi/h} h^2 L e^{+-psi/h} w||_{H^{-1}_scl}``.

    Raises
    ------
    EmbeddingError
        When ``w`` is not negligible near the edge of the torus.
    """
    _check_embedding(w)
    lhs = h * math.sqrt(float(np.sum(np.abs(w) ** 2)) * torus.spacing ** w.ndim)
    Pw = conjugated_operator_torus(w, torus, h, beta, sign, a, q)
    rhs = semiclassical_norm(Pw, torus, h, -1.0)
    ratio = 0.0 if lhs == 0 else rhs / lhs
    return EstimateTerms(float(lhs), float(rhs), float(ratio))


def interior_ratio_sweep(h_grid, beta: float, torus: TorusGrid, test: str = "wave_packet", a=None, q=None, sign: int = 1) -> list:
    """Ratios ``rhs / (h ||w||)`` over ``h`` for a fixed family of test functions."""
    out = []
    for h in h_grid:
        w = wave_packet(torus, h, beta) if test == "wave_packet" else gaussian_bump(torus)
        a_g = a(*torus.mesh()) if callable(a) else a
        q_g = q(*torus.mesh()) if callable(q) else q
        out.append(interior_estimate_check(w, h, beta, torus, sign, a_g, q_g).ratio)
    return out
