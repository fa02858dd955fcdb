"""Gaussian beam quasimodes along non-tangential geodesics.

The quasimode in a Fermi chart is

    u = h^{-1/4} exp(i s Theta(tau, y)) exp(Phi(t~, p, r) + f(tau)) eta cutoff(y / delta')

with ``s = 1/h + i lambda``, the quadratic phase ``Theta`` driven by the
Riccati solution ``H``, an amplitude profile ``f`` fixed by ``tr H`` and a
damping correction ``Phi`` obtained from a Cauchy-kernel convolution in the
variables ``(t~, p, r) = (t / beta, x1 + t / beta, tau / sqrt(1 - beta^2))``.

Two kinds are built: ``"v"`` for the adjoint operator (the damping enters
through its conjugate and the d-bar operator is used) and ``"w"`` for the
forward operator (d operator, conjugate kernel).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import fft as sfft
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.ndimage import convolve1d, map_coordinates

from .fermi import ChartCover, ExtendedGeodesic, cutoff, metric_taylor_data

BETA_MIN = 1.0 / math.sqrt(3.0)


class RiccatiPositivityError(RuntimeError):
    """Imaginary part of the Riccati solution lost positive definiteness."""


class PaddingError(ValueError):
    """Right-hand side of a d-bar solve touches the edge of its grid."""


# ---------------------------------------------------------------------------
# parameters and coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeamParameters:
    """Semiclassical parameters of a beam.

    Attributes
    ----------
    h : float
        Semiclassical parameter in ``(0, 1)``.
    lam : float
        Fixed imaginary part of ``s = 1/h + i lam``.
    beta : float
        Slope of the limiting weight, in ``(1/sqrt(3), 1)``.
    alpha_reg : float
        Regularisation exponent, ``zeta = h**alpha_reg``.
    """

    h: float
    lam: float = 0.0
    beta: float = 0.6
    alpha_reg: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise ValueError(f"h must lie in (0, 1), got {self.h}")
        if not BETA_MIN < self.beta < 1.0:
            raise ValueError(f"beta must lie in (1/sqrt(3), 1), got {self.beta}")
        if not 0.0 < self.alpha_reg < 0.5:
            raise ValueError(f"alpha_reg must lie in (0, 1/2), got {self.alpha_reg}")

    @property
    def s(self) -> complex:
        return complex(1.0 / self.h, self.lam)

    @property
    def zeta(self) -> float:
        return self.h**self.alpha_reg

    @property
    def gamma(self) -> float:
        """``sqrt(1 - beta^2)``, the longitudinal phase speed."""
        return math.sqrt(1.0 - self.beta**2)


@dataclass(frozen=True)
class SpacetimeBox:
    """The box ``(0, T) x [x1_lo, x1_hi]`` carrying the Euclidean variables."""

    T: float = 1.0
    x1_range: tuple = (0.0, 1.0)


def _zero(t, x1, xp):
    return np.zeros(np.broadcast(np.asarray(t), np.asarray(x1), np.asarray(xp)[..., 0]).shape, dtype=complex)


@dataclass
class Coefficients:
    """Damping ``a``, potential ``q`` and conformal factor ``c``.

    Each callable takes ``(t, x1, xp)`` with ``xp`` of shape ``(..., dim)``
    and broadcasts over leading axes.  ``support`` is a declared box
    ``((t_lo, t_hi), (x1_lo, x1_hi))`` outside which ``a`` vanishes; ``c``
    depends on ``(x1, xp)`` only.
    """

    a: Optional[Callable] = None
    q: Optional[Callable] = None
    c: Optional[Callable] = None
    a_t: Optional[Callable] = None
    support: Optional[tuple] = None

    def damping(self, t, x1, xp):
        return _zero(t, x1, xp) if self.a is None else np.asarray(self.a(t, x1, xp), dtype=complex)

    def potential(self, t, x1, xp):
        return _zero(t, x1, xp) if self.q is None else np.asarray(self.q(t, x1, xp), dtype=complex)

    def conformal(self, x1, xp):
        if self.c is None:
            return np.ones(np.broadcast(np.asarray(x1), np.asarray(xp)[..., 0]).shape)
        return np.asarray(self.c(x1, xp), dtype=float)

    def damping_t(self, t, x1, xp, step: float = 1e-5):
        if self.a is None:
            return _zero(t, x1, xp)
        if self.a_t is not None:
            return np.asarray(self.a_t(t, x1, xp), dtype=complex)
        t = np.asarray(t, dtype=float)
        return (
            -self.damping(t + 2 * step, x1, xp)
            + 8 * self.damping(t + step, x1, xp)
            - 8 * self.damping(t - step, x1, xp)
            + self.damping(t - 2 * step, x1, xp)
        ) / (12 * step)

    @property
    def is_zero_damping(self) -> bool:
        return self.a is None


def reduced_coefficients(coeffs: Coefficients, manifold, n: int = 3, step: float = 1e-4):
    """Coefficients of the conformally reduced operator.

    Returns callables ``(a_red, a_red_t, q_red)`` with ``a_red = c a`` and
    ``q_red = c (q - c^{(n-2)/4} Lap_g c^{-(n-2)/4})`` where ``g`` is
    ``c (dx1^2 + g0)`` and ``g0 = exp(2 phi) delta`` comes from the catalog.
    """
    if coeffs.c is None:
        return coeffs.damping, coeffs.damping_t, coeffs.potential

    k = (n - 2) / 4.0

    def a_red(t, x1, xp):
        return coeffs.conformal(x1, xp) * coeffs.damping(t, x1, xp)

    def a_red_t(t, x1, xp):
        return coeffs.conformal(x1, xp) * coeffs.damping_t(t, x1, xp)

    def lap_term(x1, xp):
        # Lap_g f for g = c (dx1^2 + e^{2 phi} dx'^2), by central differences
        x1 = np.asarray(x1, dtype=float)
        xp = np.asarray(xp, dtype=float)
        d = xp.shape[-1]

        def c_of(a, b):
            return coeffs.conformal(a, b)

        def e2phi(b):
            if manifold is None or manifold.flat:
                return np.ones(b.shape[:-1])
            return np.exp(2.0 * manifold.log_conformal(b)[0])

        def f(a, b):
            return c_of(a, b) ** (-k)

        def sqrtdet(a, b):
            return c_of(a, b) ** ((d + 1) / 2.0) * e2phi(b) ** (d / 2.0)

        total = np.zeros(np.broadcast(x1, xp[..., 0]).shape)
        # x1 direction: g^{11} = 1/c
        for sgn in (+1.0, -1.0):
            am = x1 + sgn * 0.5 * step
            flux = sqrtdet(am, xp) / c_of(am, xp) * (f(x1 + sgn * step, xp) - f(x1, xp)) / (sgn * step)
            total = total + sgn * flux / step
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            for sgn in (+1.0, -1.0):
                bm = xp + sgn * 0.5 * step * e
                coef = sqrtdet(x1, bm) / (c_of(x1, bm) * e2phi(bm))
                flux = coef * (f(x1, xp + sgn * step * e) - f(x1, xp)) / (sgn * step)
                total = total + sgn * flux / step
        return total / sqrtdet(x1, xp)

    def q_red(t, x1, xp):
        c = coeffs.conformal(x1, xp)
        return c * (coeffs.potential(t, x1, xp) - c**k * lap_term(x1, xp))

    return a_red, a_red_t, q_red


# ---------------------------------------------------------------------------
# regularisation
# ---------------------------------------------------------------------------


def _bump_nodes(n_nodes: int):
    u, w = np.polynomial.legendre.leggauss(n_nodes)
    psi = np.exp(1.0 - 1.0 / (1.0 - u**2))
    weights = w * psi
    return u, weights / weights.sum()


def regularize(a: Callable, zeta: float, dim: int, n_nodes: int = 8) -> Callable:
    """Mollify ``a`` (a function of ``dim`` coordinates) at width ``zeta``.

    ``a`` takes an array of shape ``(N, dim)``.  The kernel is a tensor
    product of normalised one-dimensional bumps ``exp(1 - 1/(1 - u^2))``
    discretised with Gauss-Legendre nodes; the discrete weights sum to one
    so the sup norm can only decrease.
    """
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    u, w = _bump_nodes(n_nodes)
    grids = np.meshgrid(*([u] * dim), indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=-1) * zeta
    wgrid = np.ones(offsets.shape[0])
    for g_axis in np.meshgrid(*([w] * dim), indexing="ij"):
        wgrid = wgrid * g_axis.ravel()

    def a_zeta(z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        pts = z[:, None, :] - offsets[None, :, :]
        vals = np.asarray(a(pts.reshape(-1, dim))).reshape(z.shape[0], -1)
        return vals @ wgrid

    return a_zeta


def _grid_kernel(zeta: float, spacing: float) -> np.ndarray:
    half = int(math.floor(zeta / spacing))
    if half < 1:
        return np.ones(1)
    u = np.arange(-half, half + 1) * spacing / zeta
    k = np.zeros_like(u)
    inside = np.abs(u) < 1
    k[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return k / k.sum()


def _mollify_axis0_fft(values: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Linear convolution along axis 0 with a centred kernel (zero outside)."""
    if kern.size == 1:
        return values
    n = values.shape[0]
    half = kern.size // 2
    n_fft = sfft.next_fast_len(n + kern.size - 1)
    vf = sfft.fft(values, n_fft, axis=0)
    kf = sfft.fft(kern, n_fft)
    full = sfft.ifft(vf * kf.reshape((-1,) + (1,) * (values.ndim - 1)), axis=0)
    out = full[half : half + n]
    return out if np.iscomplexobj(values) else out.real


def mollify_grid(values: np.ndarray, spacings, zeta: float) -> np.ndarray:
    """Separable bump mollification of gridded samples (zero outside)."""
    out = np.asarray(values)
    for axis, dx in enumerate(spacings):
        if dx is None:
            continue
        kern = _grid_kernel(zeta, dx)
        if kern.size == 1:
            continue
        if np.iscomplexobj(out):
            out = convolve1d(out.real, kern, axis=axis, mode="constant") + 1j * convolve1d(
                out.imag, kern, axis=axis, mode="constant"
            )
        else:
            out = convolve1d(out, kern, axis=axis, mode="constant")
    return out


# ---------------------------------------------------------------------------
# Riccati equation
# ---------------------------------------------------------------------------


@dataclass
class RiccatiSolution:
    """Solution of ``H' + H^2 = F`` with ``H(tau0) = H0``.

    The integral ``int_{tau0}^{tau} tr H`` is carried along as an extra
    state component.
    """

    tau_grid: np.ndarray
    H: np.ndarray
    H0: np.ndarray
    tau0: float
    tau_range: tuple
    F_of_tau: Callable = field(repr=False)
    _fwd: object = field(repr=False, default=None)
    _bwd: object = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.H0.shape[0]

    def _state(self, tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        k = self.size
        out = np.empty((tau.size, k * k + 1), dtype=complex)
        f = tau >= self.tau0
        if np.any(f):
            out[f] = self._fwd(tau[f]).T
        if np.any(~f):
            out[~f] = self._bwd(tau[~f]).T
        return out

    def at(self, tau) -> np.ndarray:
        """``H(tau)``, shape ``(N, k, k)``."""
        k = self.size
        return self._state(tau)[:, : k * k].reshape(-1, k, k)

    def derivative(self, tau) -> np.ndarray:
        """``H'(tau) = F(tau) - H(tau)^2``."""
        H = self.at(tau)
        F = np.asarray(self.F_of_tau(np.atleast_1d(tau)), dtype=float).reshape(H.shape)
        return F - H @ H

    def trace_integral(self, tau) -> np.ndarray:
        """``int_{tau0}^{tau} tr H``."""
        return self._state(tau)[:, -1]

    def min_imag_eig(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.H.imag)))

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.H - np.swapaxes(self.H, 1, 2))))

    def det_identity_error(self, tau=None) -> float:
        """Relative error of ``det Im H(tau) = det Im H0 exp(-2 int tr Re H)``."""
        tau = self.tau_grid if tau is None else np.atleast_1d(tau)
        H = self.at(tau)
        lhs = np.linalg.det(H.imag)
        rhs = np.linalg.det(self.H0.imag) * np.exp(-2.0 * self.trace_integral(tau).real)
        return float(np.max(np.abs(lhs - rhs) / np.abs(rhs)))


def _riccati_rhs(F_of_tau, k):
    def rhs(tau, state):
        H = state[: k * k].reshape(k, k)
        F = np.asarray(F_of_tau(np.atleast_1d(tau)), dtype=float).reshape(k, k)
        dH = F - H @ H
        out = np.empty_like(state)
        out[: k * k] = dH.ravel()
        out[-1] = np.trace(H)
        return out

    return rhs


def _check_steps(ys, k):
    H = ys[: k * k].T.reshape(-1, k, k)
    sym = np.max(np.abs(H - np.swapaxes(H, 1, 2))) if H.size else 0.0
    Him = 0.5 * (H.imag + np.swapaxes(H.imag, 1, 2))
    mine = np.min(np.linalg.eigvalsh(Him)) if H.size else 1.0
    return sym, mine


def solve_riccati(
    F_of_tau: Callable,
    H0,
    tau_range,
    tau0: float | None = None,
    rtol: float = 1e-12,
    atol: float = 1e-13,
    max_refinements: int = 3,
) -> RiccatiSolution:
    """Solve ``H' + H^2 = F`` on ``tau_range`` from ``H(tau0) = H0``.

    Symmetry and positivity of ``Im H`` are checked on every accepted step;
    a violation triggers a tighter re-solve and, if it persists,
    :class:`RiccatiPositivityError`.
    """
    H0 = np.atleast_2d(np.asarray(H0, dtype=complex))
    k = H0.shape[0]
    if np.max(np.abs(H0 - H0.T)) > 1e-12:
        raise ValueError("H0 must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (H0.imag + H0.imag.T))) <= 0:
        raise ValueError("Im H0 must be positive definite")
    lo, hi = float(tau_range[0]), float(tau_range[1])
    tau0 = lo if tau0 is None else float(tau0)
    y0 = np.concatenate([H0.ravel(), [0.0 + 0.0j]])
    rhs = _riccati_rhs(F_of_tau, k)
    max_step = np.inf
    for attempt in range(max_refinements + 1):
        sols = []
        ok = True
        for end in (hi, lo):
            if end == tau0:
                sols.append(None)
                continue
            sol = solve_ivp(rhs, (tau0, end), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True, max_step=max_step)
            if not sol.success:
                ok = False
                break
            sym, mine = _check_steps(sol.y, k)
            if sym > 1e-9 or mine <= 0:
                ok = False
                break
            sols.append(sol)
        if ok:
            break
        rtol *= 0.01
        max_step = (hi - lo) / (50.0 * (attempt + 1))
    else:
        raise RiccatiPositivityError("Im H lost positive definiteness or symmetry after refinement")

    def const(tt):
        return np.repeat(y0[:, None], np.size(tt), axis=1)

    fwd = sols[0].sol if sols[0] is not None else const
    bwd = sols[1].sol if sols[1] is not None else const
    tgrid = np.concatenate(
        [s.t[::-1] for s in sols[1:] if s is not None] + [s.t[1:] for s in sols[:1] if s is not None]
    ) if any(s is not None for s in sols) else np.array([tau0])
    tgrid = np.unique(np.concatenate([tgrid, np.linspace(lo, hi, 201)]))
    res = RiccatiSolution(tgrid, None, H0, tau0, (lo, hi), F_of_tau, fwd, bwd)
    res.H = res.at(tgrid)
    return res


# ---------------------------------------------------------------------------
# phase
# ---------------------------------------------------------------------------


@dataclass
class PhaseEvaluator:
    """``Theta(tau, y) = sqrt(1 - beta^2) (tau + H(tau) y.y / 2)``."""

    riccati: RiccatiSolution
    beta: float

    @property
    def speed(self) -> float:
        return math.sqrt(1.0 - self.beta**2)

    def __call__(self, tau, y) -> np.ndarray:
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        y = np.asarray(y, dtype=float).reshape(tau.size, -1)
        H = self.riccati.at(tau)
        return self.speed * (tau + 0.5 * np.einsum("ni,nij,nj->n", y, H, y))

    def gradient(self, tau, y):
        """Partial derivatives ``(d/dtau, d/dy)`` of the phase."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        y = np.asarray(y, dtype=float).reshape(tau.size, -1)
        H = self.riccati.at(tau)
        dH = self.riccati.derivative(tau)
        d_tau = self.speed * (1.0 + 0.5 * np.einsum("ni,nij,nj->n", y, dH, y))
        d_y = self.speed * np.einsum("nij,nj->ni", H, y)
        return d_tau, d_y

    def imag_lower_bound(self, tau_interval=None) -> float:
        """Constant ``d`` with ``Im Theta >= d |y|^2`` over the interval."""
        ric = self.riccati
        tau = ric.tau_grid
        if tau_interval is not None:
            a, b = tau_interval
            tau = np.concatenate([[a, b], tau[(tau > a) & (tau < b)]])
        lam = np.linalg.eigvalsh(ric.at(tau).imag).min()
        return 0.5 * self.speed * float(lam)


def phase(chart, ric: RiccatiSolution, beta: float) -> PhaseEvaluator:
    """Phase evaluator on ``chart`` (the chart only fixes the coordinates)."""
    a, b = chart.tau_interval
    lo, hi = ric.tau_range
    if a < lo - 1e-12 or b > hi + 1e-12:
        raise ValueError("Riccati solution does not cover the chart interval")
    return PhaseEvaluator(ric, beta)


# ---------------------------------------------------------------------------
# d-bar solver
# ---------------------------------------------------------------------------


class DbarSolver:
    """Convolution with ``1/(pi (t + i r))`` (or its conjugate) on a grid.

    Uses midpoint quadrature with the singular cell set to its cell
    average, which vanishes by odd symmetry.  The FFT of the kernel is
    computed once and reused for every right-hand side.
    """

    def __init__(self, shape, dt: float, dr: float, conjugate: bool = False, out_block=None):
        nt, nr = shape
        self.shape = (nt, nr)
        self.dt, self.dr = dt, dr
        self.conjugate = conjugate
        if out_block is None:
            out_block = ((0, nt), (0, nr))
        (o0t, o1t), (o0r, o1r) = out_block
        self.out_block = out_block
        # offsets i - k needed for outputs i in the block and inputs k in the grid
        mt = np.arange(o0t - nt + 1, o1t)
        mr = np.arange(o0r - nr + 1, o1r)
        # a circular length covering every needed offset once avoids aliasing
        self.fshape = (sfft.next_fast_len(mt.size), sfft.next_fast_len(mr.size))
        T, R = np.meshgrid(mt * dt, mr * dr, indexing="ij")
        z = T - 1j * R if conjugate else T + 1j * R
        with np.errstate(divide="ignore", invalid="ignore"):
            kern = 1.0 / (np.pi * z)
        kern[(mt == 0)[:, None] & (mr == 0)[None, :]] = 0.0
        kern *= dt * dr
        circ = np.zeros(self.fshape, dtype=complex)
        circ[np.ix_(mt % self.fshape[0], mr % self.fshape[1])] = kern
        self._kf = sfft.fft2(circ)

    def mollifier_multiplier(self, zeta: float) -> np.ndarray:
        """Fourier multiplier of the separable bump mollifier on this grid."""
        out = np.ones(self.fshape, dtype=complex)
        for axis, (n_fft, dx) in enumerate(zip(self.fshape, (self.dt, self.dr))):
            kern = _grid_kernel(zeta, dx)
            half = kern.size // 2
            circ = np.zeros(n_fft)
            circ[np.arange(-half, half + 1) % n_fft] = kern
            shape = [1, 1]
            shape[axis] = n_fft
            out = out * sfft.fft(circ).reshape(shape)
        return out

    def solve(self, rhs: np.ndarray, check_support: bool = True, zeta: float | None = None) -> np.ndarray:
        """Convolve ``rhs`` with the kernel, mollifying it first when ``zeta`` is given."""
        rhs = np.asarray(rhs, dtype=complex)
        nt, nr = self.shape
        if rhs.shape[-2:] != self.shape:
            raise ValueError("rhs shape does not match the solver grid")
        if check_support:
            edge = np.concatenate(
                [
                    np.abs(rhs[..., 0, :]).ravel(),
                    np.abs(rhs[..., -1, :]).ravel(),
                    np.abs(rhs[..., :, 0]).ravel(),
                    np.abs(rhs[..., :, -1]).ravel(),
                ]
            )
            scale = np.max(np.abs(rhs)) if rhs.size else 0.0
            if scale > 0 and edge.max() > 1e-10 * scale:
                raise PaddingError("right-hand side support touches the grid edge; enlarge the padding")
        rf = sfft.fft2(rhs, self.fshape, axes=(-2, -1))
        kf = self._kf
        if zeta is not None:
            kf = kf * self.mollifier_multiplier(zeta)
        full = sfft.ifft2(rf * kf, axes=(-2, -1))
        (o0t, o1t), (o0r, o1r) = self.out_block
        it = np.arange(o0t, o1t) % self.fshape[0]
        ir = np.arange(o0r, o1r) % self.fshape[1]
        return full[..., it[:, None], ir[None, :]]


def dbar_solve(rhs: np.ndarray, dt: float, dr: float, conjugate: bool = False, check_support: bool = True) -> np.ndarray:
    """Solve ``dbar Phi = rhs`` (``d Phi = rhs`` if ``conjugate``) on a grid.

    ``dbar = (d_t + i d_r)/2`` and ``d = (d_t - i d_r)/2`` with the grid
    axes ordered ``(t, r)``.  Trailing two axes are the grid; leading axes
    are batched.
    """
    rhs = np.asarray(rhs)
    return DbarSolver(rhs.shape[-2:], dt, dr, conjugate).solve(rhs, check_support=check_support)


def dbar_residual(phi: np.ndarray, rhs: np.ndarray, dt: float, dr: float, conjugate: bool = False) -> float:
    """Max-norm residual of the d-bar equation by central differences (interior)."""
    pt = (phi[2:, 1:-1] - phi[:-2, 1:-1]) / (2 * dt)
    pr = (phi[1:-1, 2:] - phi[1:-1, :-2]) / (2 * dr)
    sign = -1.0 if conjugate else 1.0
    op = 0.5 * (pt + sign * 1j * pr)
    return float(np.max(np.abs(op - rhs[1:-1, 1:-1])))


# ---------------------------------------------------------------------------
# change of variables
# ---------------------------------------------------------------------------


def to_beam_coordinates(t, x1, tau, beta: float):
    """``S^{-1}(t, x1, tau) = (t / beta, x1 + t / beta, tau / sqrt(1 - beta^2))``."""
    g = math.sqrt(1.0 - beta**2)
    t = np.asarray(t, dtype=float)
    return t / beta, np.asarray(x1, dtype=float) + t / beta, np.asarray(tau, dtype=float) / g


def from_beam_coordinates(tt, p, r, beta: float):
    """``S(t~, p, r) = (beta t~, p - t~, sqrt(1 - beta^2) r)``."""
    g = math.sqrt(1.0 - beta**2)
    tt = np.asarray(tt, dtype=float)
    return beta * tt, np.asarray(p, dtype=float) - tt, g * np.asarray(r, dtype=float)


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------


@dataclass
class TransportData:
    """Amplitude data: profile ``f(tau)`` and ``Phi`` on a ``(p, t~, r)`` grid."""

    kind: str
    beta: float
    f0: complex
    riccati: RiccatiSolution = field(repr=False)
    tt_axis: np.ndarray = field(default=None, repr=False)
    p_axis: np.ndarray = field(default=None, repr=False)
    r_axis: np.ndarray = field(default=None, repr=False)
    phi: Optional[np.ndarray] = field(default=None, repr=False)
    rhs: Optional[np.ndarray] = field(default=None, repr=False)

    def f(self, tau) -> np.ndarray:
        """Profile ``f(tau) = f(tau0) - int_{tau0}^{tau} tr H / 2``."""
        return self.f0 - 0.5 * self.riccati.trace_integral(tau)

    def f_of_r(self, r) -> np.ndarray:
        return self.f(math.sqrt(1.0 - self.beta**2) * np.asarray(r, dtype=float))

    def phi_at(self, tt, p, r) -> np.ndarray:
        """Interpolated ``Phi(t~, p, r)`` (zero when ``a`` vanishes)."""
        tt, p, r = np.broadcast_arrays(np.asarray(tt, float), np.asarray(p, float), np.asarray(r, float))
        if self.phi is None:
            return np.zeros(tt.shape, dtype=complex)
        coords = np.stack(
            [
                ((p - self.p_axis[0]) / (self.p_axis[1] - self.p_axis[0])).ravel(),
                ((tt - self.tt_axis[0]) / (self.tt_axis[1] - self.tt_axis[0])).ravel(),
                ((r - self.r_axis[0]) / (self.r_axis[1] - self.r_axis[0])).ravel(),
            ]
        )
        re = map_coordinates(self._re, coords, order=3, mode="nearest", prefilter=False)
        im = map_coordinates(self._im, coords, order=3, mode="nearest", prefilter=False)
        return (re + 1j * im).reshape(tt.shape)

    def __post_init__(self):
        if self.phi is not None:
            from scipy.ndimage import spline_filter

            self._re = spline_filter(self.phi.real, order=3, mode="nearest")
            self._im = spline_filter(self.phi.imag, order=3, mode="nearest")


def _axis(lo, hi, step):
    n = int(math.ceil((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


def transport_profiles(
    geodesic: ExtendedGeodesic,
    ric: RiccatiSolution,
    params: BeamParameters,
    coeffs: Coefficients,
    kind: str,
    box: SpacetimeBox = SpacetimeBox(),
    tau0: float = 0.0,
    spacing: float | None = None,
    p_spacing: float | None = None,
    pad: float = 0.05,
) -> TransportData:
    """Amplitude profile ``f`` and damping correction ``Phi`` for one beam.

    ``f`` is normalised at ``tau0`` so that
    ``exp(2 Re f) pi^{(n-2)/2} / sqrt(det Im H) = 1`` with ``Im f = 0``.
    ``Phi`` solves ``dbar Phi = (beta/4) conj(a')`` (kind ``v``) or
    ``d Phi = -(beta/4) a'`` (kind ``w``), where ``a'`` is the mollified
    restriction of the reduced damping to the geodesic in the
    ``(t~, p, r)`` variables.
    """
    if kind not in ("v", "w"):
        raise ValueError("kind must be 'v' or 'w'")
    k = ric.size
    H_r0 = ric.at(tau0)[0]
    f_shift = -0.5 * ric.trace_integral(tau0)[0]
    ref = 0.25 * math.log(np.linalg.det(H_r0.imag)) - 0.25 * k * math.log(math.pi)
    f0 = complex(ref) - f_shift
    data = TransportData(kind, params.beta, f0, ric)
    if coeffs.is_zero_damping:
        return data

    beta, zeta, g = params.beta, params.zeta, params.gamma
    spacing = min(zeta / 4.0, 0.01) if spacing is None else spacing
    p_spacing = min(zeta / 4.0, 0.05) if p_spacing is None else p_spacing
    T = box.T
    x_lo, x_hi = box.x1_range
    # output box in (t~, p, r) on a lattice of step ``spacing`` anchored at 0
    e_tt = (0.0, T / beta)
    e_p = (x_lo, x_hi + T / beta)
    e_r = (geodesic.tau_lo / g, geodesic.tau_hi / g)
    if coeffs.support is not None:
        (st0, st1), _ = coeffs.support
        s_tt = (st0 / beta, st1 / beta)
    else:
        s_tt = e_tt
    # the mollified right-hand side lives within one mollifier width of the
    # declared support; two widths plus a small pad keep it off the edges
    margin = 2.0 * zeta + 4.0 * spacing
    w_tt = s_tt[1] - s_tt[0]
    w_r = e_r[1] - e_r[0]
    cell = lambda v: int(math.floor(v / spacing))  # noqa: E731
    in_t = (cell(s_tt[0] - pad * w_tt - margin), cell(s_tt[1] + pad * w_tt + margin) + 1)
    in_r = (cell(e_r[0] - pad * w_r - margin), cell(e_r[1] + pad * w_r + margin) + 1)
    out_t = (cell(e_tt[0]) - 4, cell(e_tt[1]) + 5)
    out_r = (cell(e_r[0]) - 4, cell(e_r[1]) + 5)
    tt_in = spacing * np.arange(*in_t)
    r_in = spacing * np.arange(*in_r)
    p_axis = _axis(e_p[0] - 3 * p_spacing, e_p[1] + 3 * p_spacing, p_spacing)

    a_red, _, _ = reduced_coefficients(coeffs, geodesic.manifold)
    # geodesic points for each r; outside the extended range the damping
    # restriction is zero (its support lies inside M0)
    taus = g * r_in
    inside_r = (taus >= geodesic.tau_lo) & (taus <= geodesic.tau_hi)
    pts = np.full((r_in.size, geodesic.manifold.dim), 1e6)
    pts[inside_r] = geodesic.point(taus[inside_r])
    PP, TT = np.meshgrid(p_axis, tt_in, indexing="ij")
    a_vals = np.zeros((p_axis.size, tt_in.size, r_in.size), dtype=complex)
    cols = np.flatnonzero(inside_r)
    for j in cols:
        a_vals[:, :, j] = a_red(beta * TT, PP - TT, np.broadcast_to(pts[j], TT.shape + (pts.shape[1],)))
    # mollify along p here; the (t~, r) mollification is applied spectrally
    # together with the Cauchy kernel
    a_vals = _mollify_axis0_fft(a_vals, _grid_kernel(zeta, p_spacing))
    # crop the input to its numerical support plus one mollifier width
    nz = np.abs(a_vals) > 0
    kt = np.flatnonzero(nz.any(axis=(0, 2)))
    kr = np.flatnonzero(nz.any(axis=(0, 1)))
    tt_axis = spacing * np.arange(out_t[0], out_t[1])
    r_axis = spacing * np.arange(out_r[0], out_r[1])
    if kt.size == 0:
        return TransportData(kind, beta, f0, ric, tt_axis, p_axis, r_axis, None)
    wid = int(math.ceil(zeta / spacing)) + 2
    ct = (max(kt[0] - wid, 0), min(kt[-1] + wid + 1, tt_in.size))
    cr = (max(kr[0] - wid, 0), min(kr[-1] + wid + 1, r_in.size))
    a_vals = a_vals[:, ct[0] : ct[1], cr[0] : cr[1]]
    if kind == "v":
        rhs = 0.25 * beta * np.conj(a_vals)
    else:
        rhs = -0.25 * beta * a_vals
    origin_t = in_t[0] + ct[0]
    origin_r = in_r[0] + cr[0]
    block = ((out_t[0] - origin_t, out_t[1] - origin_t), (out_r[0] - origin_r, out_r[1] - origin_r))
    solver = DbarSolver(rhs.shape[1:], spacing, spacing, conjugate=(kind == "w"), out_block=block)
    phi = np.zeros((p_axis.size, tt_axis.size, r_axis.size), dtype=complex)
    active = np.flatnonzero(np.max(np.abs(rhs), axis=(1, 2)) > 0)
    chunk = 4
    for i in range(0, active.size, chunk):
        idx = active[i : i + chunk]
        phi[idx] = solver.solve(rhs[idx], zeta=zeta)
    return TransportData(kind, beta, f0, ric, tt_axis, p_axis, r_axis, phi)


# ---------------------------------------------------------------------------
# quasimode
# ---------------------------------------------------------------------------


@dataclass
class Quasimode:
    """Glued Gaussian beam on a chart cover.

    The single-sheet beam ``sheet(t, x1, tau, y)`` is defined on the whole
    tube of the extended geodesic; the glued beam sums
    ``chi_l(tau) * sheet`` over the charts whose domain contains a preimage
    of the evaluation point.
    """

    kind: str
    cover: ChartCover
    riccati: RiccatiSolution
    transport: TransportData
    params: BeamParameters
    box: SpacetimeBox = SpacetimeBox()
    eta: Optional[Callable] = None
    transport_shift: float | Callable = 0.0

    @property
    def delta_prime(self) -> float:
        return self.cover.delta_prime

    @property
    def phase(self) -> PhaseEvaluator:
        return PhaseEvaluator(self.riccati, self.params.beta)

    @property
    def geodesic(self) -> ExtendedGeodesic:
        return self.cover.geodesic

    @property
    def imag_bound(self) -> float:
        """Measured ``d`` in ``Im Theta >= d |y|^2`` over the cover."""
        return min(self.phase.imag_lower_bound(c.tau_interval) for c in self.cover.charts)

    def profile(self, tau) -> np.ndarray:
        shift = self.transport_shift
        return self.transport.f(tau) + (shift(np.asarray(tau, dtype=float)) if callable(shift) else shift)

    def transverse_factor(self, tau, y, oscillation: bool = True) -> np.ndarray:
        """``h^{-1/4} e^{i s Theta} e^{f} cutoff(y / delta')`` on a ``(tau, y)`` mesh.

        ``tau`` and ``y`` broadcast together (scalar transverse variable in
        dimension two).  With ``oscillation=False`` the factor
        ``exp(i s sqrt(1-beta^2) tau)`` is omitted.
        """
        tau = np.asarray(tau, dtype=float)
        y = np.asarray(y, dtype=float)
        tau_b, y_b = np.broadcast_arrays(tau, y)
        p = self.params
        k = self.riccati.size
        if k != 1:
            raise NotImplementedError("transverse factor implemented for a scalar transverse variable")
        tflat = tau_b.ravel()
        uniq, inv = np.unique(tflat, return_inverse=True)
        H = self.riccati.at(uniq)[:, 0, 0][inv].reshape(tau_b.shape)
        fv = self.profile(uniq)[inv].reshape(tau_b.shape)
        quad = 0.5 * p.gamma * H * y_b**2
        expo = 1j * p.s * quad + fv
        if oscillation:
            expo = expo + 1j * p.s * p.gamma * tau_b
        amp = p.h ** (-(k) / 4.0) * np.exp(expo)
        return amp * cutoff(y_b / self.delta_prime)

    def longitudinal_factor(self, t, x1, tau) -> np.ndarray:
        """``exp(Phi(t~, p, r)) eta(t~, p, r)``."""
        tt, pp, rr = to_beam_coordinates(t, x1, tau, self.params.beta)
        out = np.exp(self.transport.phi_at(tt, pp, rr))
        if self.eta is not None:
            out = out * self.eta(tt, pp, rr)
        return out

    def sheet(self, t, x1, tau, y) -> np.ndarray:
        """Single-sheet beam at Fermi coordinates ``(tau, y)``."""
        return self.transverse_factor(tau, y) * self.longitudinal_factor(t, x1, tau)

    def __call__(self, t, x1, xp) -> np.ndarray:
        """Glued quasimode at points ``xp`` of ``M0`` (shape ``(N, dim)``)."""
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), xp.shape[:1])
        x1 = np.broadcast_to(np.asarray(x1, dtype=float), xp.shape[:1])
        out = np.zeros(xp.shape[0], dtype=complex)
        for ell, chart in enumerate(self.cover.charts):
            tau, y, ok = chart.inverse(xp)
            ok = ok & (np.abs(y[:, 0]) < 0.5 * self.delta_prime)
            if not np.any(ok):
                continue
            w = self.cover.partition(tau[ok])[ell]
            out[ok] += w * self.sheet(t[ok], x1[ok], tau[ok], y[ok, 0])
        return out

    def field_slice_csv(self, path, t: float, x1: float, tau_grid, y_grid) -> None:
        """Write ``Re``, ``Im`` and ``|u|^2`` of the sheet on a ``(tau, y)`` grid."""
        T, Y = np.meshgrid(tau_grid, y_grid, indexing="ij")
        vals = self.sheet(t, x1, T, Y)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "y", "re", "im", "abs2"])
            for a, b, v in zip(T.ravel(), Y.ravel(), vals.ravel()):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(v.real)), repr(float(v.imag)), repr(float(abs(v) ** 2))])


def global_F(geodesic: ExtendedGeodesic, delta_prime: float, n_tau: int = 401) -> Callable:
    """Spline of ``F(tau)`` along the whole extended geodesic."""
    m = geodesic.manifold
    k = m.dim - 1
    if m.flat:
        return lambda tau: np.zeros((np.size(tau), k, k))
    taus = np.linspace(geodesic.tau_lo, geodesic.tau_hi, n_tau)
    data = metric_taylor_data(geodesic, taus, delta_prime)
    spline = CubicSpline(taus, data["F"], axis=0)

    def F(tau):
        return spline(np.atleast_1d(np.asarray(tau, dtype=float)))

    return F


def assemble_quasimode(
    cover: ChartCover,
    params: BeamParameters,
    coeffs: Coefficients,
    kind: str,
    box: SpacetimeBox = SpacetimeBox(),
    H0=None,
    tau0: float = 0.0,
    eta: Optional[Callable] = None,
    F_of_tau: Optional[Callable] = None,
    riccati: Optional[RiccatiSolution] = None,
    spacing: float | None = None,
    p_spacing: float | None = None,
) -> Quasimode:
    """Build a glued quasimode of kind ``"v"`` or ``"w"`` on ``cover``.

    All charts share the extended geodesic and its parallel frame, so one
    Riccati solution started at ``tau0`` serves every chart and the beams
    of adjacent charts coincide on overlaps.
    """
    if kind not in ("v", "w"):
        raise ValueError("kind must be 'v' or 'w'")
    geo = cover.geodesic
    k = geo.manifold.dim - 1
    if riccati is None:
        H0 = 1j * np.eye(k) if H0 is None else np.asarray(H0, dtype=complex)
        F = global_F(geo, cover.delta_prime) if F_of_tau is None else F_of_tau
        riccati = solve_riccati(F, H0, (geo.tau_lo, geo.tau_hi), tau0=tau0)
    transport = transport_profiles(geo, riccati, params, coeffs, kind, box, tau0=tau0, spacing=spacing, p_spacing=p_spacing)
    return Quasimode(kind, cover, riccati, transport, params, box, eta)
