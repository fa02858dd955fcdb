"""End-to-end recovery of a coefficient difference from attenuated ray data.

For a coefficient ``ca`` supported in ``Q = (0, T) x [0, 1] x M0`` the
Fourier-line samples

    f(x', beta, lam) = int int exp(i lam (beta t + x1)) (ca)(t, x1, x') dx1 dt

satisfy, for every non-tangential geodesic, an attenuated ray transform
identity with constant attenuation ``-sqrt(1 - beta^2) lam``.  The
pipeline synthesises those data, inverts one ray transform per line
``(beta, lam)`` and fits a truncated sine series in ``(t, x1)`` to the
recovered samples on the cone ``{xi = -lam (beta, 1)}``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RectBivariateSpline

from . import xray
from .manifold import TransversalManifold, manifold_from_config

ATTENUATION_BUDGET = 0.5
BETA_MIN = 1.0 / math.sqrt(3.0)


class BoundaryConditionError(ValueError):
    """The coefficient difference does not vanish on the boundary of ``Q``."""


class ConditioningError(ValueError):
    """Too few cone samples for the requested series size."""

    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class AttenuationBudgetError(ValueError):
    """A line's attenuation exceeds the configured budget."""


# ---------------------------------------------------------------------------
# grids and phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QGrid:
    """Tensor grid of ``Q``: ``t`` and ``x1`` axes times the pixel centres of ``M0``."""

    T: float = 1.0
    n_t: int = 33
    n_x: int = 33
    grid_n: int = 64

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t)

    @property
    def x1(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_x)


def sine_mode(j: int, axis: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """``sin(j pi (s - lo)/(hi - lo))`` on ``[lo, hi]`` and zero outside."""
    s = np.asarray(axis, dtype=float)
    inside = (s >= lo) & (s <= hi)
    return np.where(inside, np.sin(j * math.pi * (s - lo) / (hi - lo)), 0.0)


@dataclass
class SeriesPhantom:
    """``ca(t, x1, x') = sum_jk c_jk S_j(t) S_k(x1) g_jk(x')`` with Gaussian ``g_jk``.

    ``S_j`` are the sine modes of the support box, so the phantom is
    continuous and vanishes on the box boundary.
    """

    box: tuple
    coefficients: np.ndarray  # (K, K)
    centers: np.ndarray  # (K, K, 2)
    width: float = 0.25

    @property
    def K(self) -> int:
        return self.coefficients.shape[0]

    def profile(self, j: int, k: int, xp: np.ndarray) -> np.ndarray:
        d = np.asarray(xp) - self.centers[j, k]
        return np.exp(-np.sum(d * d, axis=-1) / (2 * self.width**2))

    def on_grid(self, t: np.ndarray, x1: np.ndarray, xp: np.ndarray) -> np.ndarray:
        """Values on ``t x x1 x xp`` with ``xp`` of shape ``(P, 2)``; shape ``(n_t, n_x, P)``."""
        (t0, t1), (x0, x1b) = self.box
        out = np.zeros((t.size, x1.size, xp.shape[0]))
        for j in range(self.K):
            St = sine_mode(j + 1, t, t0, t1)
            for k in range(self.K):
                c = self.coefficients[j, k]
                if c == 0:
                    continue
                Sx = sine_mode(k + 1, x1, x0, x1b)
                out += c * St[:, None, None] * Sx[None, :, None] * self.profile(j, k, xp)[None, None, :]
        return out

    def scaled(self, factor: float) -> "SeriesPhantom":
        return SeriesPhantom(self.box, factor * self.coefficients, self.centers, self.width)


def bandlimited_phantom(K: int = 4, seed: int = 0, box=((0.1, 0.9), (0.1, 0.9)), decay: float = 2.0, width: float = 0.25, spread: float = 0.2) -> SeriesPhantom:
    """Seeded ``K x K`` sine-series phantom with coefficients decaying like ``(j k)^-decay``."""
    rng = np.random.default_rng(seed)
    j = np.arange(1, K + 1)
    scale = 1.0 / np.outer(j, j) ** decay
    coef = scale * rng.uniform(0.5, 1.0, size=(K, K)) * rng.choice([-1.0, 1.0], size=(K, K))
    coef[0, 0] = 1.0
    centers = rng.uniform(-spread, spread, size=(K, K, 2))
    return SeriesPhantom(tuple(map(tuple, box)), coef, centers, width)


def check_boundary(coeff: np.ndarray, tol: float = 1e-8) -> None:
    """Raise when ``coeff`` (``(n_t, n_x, P)``) is not negligible on the ``t`` and ``x1`` faces."""
    peak = float(np.max(np.abs(coeff))) if coeff.size else 0.0
    if peak == 0.0:
        return
    faces = [coeff[0], coeff[-1], coeff[:, 0], coeff[:, -1]]
    edge = max(float(np.max(np.abs(f))) for f in faces)
    if edge > tol * peak:
        raise BoundaryConditionError(f"coefficient difference on the boundary of Q: {edge:.3e} > {tol:.1e} x peak")


# ---------------------------------------------------------------------------
# Fourier-line samples
# ---------------------------------------------------------------------------


@dataclass
class FourierLineSamples:
    """``f(x', beta, lam)`` on the pixel centres of ``M0``; ``f_values[p, b, l]``."""

    beta_grid: np.ndarray
    lambda_grid: np.ndarray
    f_values: np.ndarray
    t_axis: np.ndarray
    x_axis: np.ndarray
    points: np.ndarray  # (P, 2) pixel centres

    def __post_init__(self):
        b = np.asarray(self.beta_grid, dtype=float)
        lam = np.asarray(self.lambda_grid, dtype=float)
        if np.any(b <= BETA_MIN) or np.any(b >= 1.0):
            raise ValueError("beta grid must lie in (1/sqrt(3), 1)")
        if np.any(lam == 0.0):
            raise ValueError("lambda = 0 is excluded from the grid")
        self.beta_grid, self.lambda_grid = b, lam

    def line(self, ib: int, il: int) -> np.ndarray:
        return self.f_values[:, ib, il]


def _trap_weights(axis: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights of a (possibly nonuniform) axis."""
    d = np.diff(axis)
    w = np.zeros(axis.size)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def fourier_line_samples(coeff: np.ndarray, beta_grid, lambda_grid, t_axis, x_axis, points, check: bool = True, tol: float = 1e-8) -> FourierLineSamples:
    """Trapezoid quadrature of ``int int e^{i lam (beta t + x1)} coeff dx1 dt``.

    ``coeff`` has shape ``(n_t, n_x, P)``.
    """
    coeff = np.asarray(coeff)
    if check:
        check_boundary(coeff, tol)
    beta = np.asarray(beta_grid, dtype=float)
    lam = np.asarray(lambda_grid, dtype=float)
    wt, wx = _trap_weights(np.asarray(t_axis)), _trap_weights(np.asarray(x_axis))
    Et = np.exp(1j * lam[None, :, None] * beta[:, None, None] * t_axis[None, None, :]) * wt  # (B, L, n_t)
    Ex = np.exp(1j * lam[:, None] * x_axis[None, :]) * wx  # (L, n_x)
    inner = np.einsum("lx,txp->ltp", Ex, coeff)  # (L, n_t, P)
    f = np.einsum("blt,ltp->pbl", Et, inner)
    return FourierLineSamples(beta, lam, f, np.asarray(t_axis), np.asarray(x_axis), np.asarray(points))


def line_function(samples: FourierLineSamples, ib: int, il: int, grid_n: int, box) -> Callable:
    """Cubic-spline interpolant of one line of samples over the full pixel-centre grid."""
    (x0, x1), (y0, y1) = box
    dx, dy = (x1 - x0) / grid_n, (y1 - y0) / grid_n
    cx = x0 + dx * (np.arange(grid_n) + 0.5)
    cy = y0 + dy * (np.arange(grid_n) + 0.5)
    img = samples.line(ib, il).reshape(grid_n, grid_n)
    re = RectBivariateSpline(cx, cy, img.real, kx=3, ky=3)
    im = RectBivariateSpline(cx, cy, img.imag, kx=3, ky=3)

    def f(pts):
        pts = np.asarray(pts)
        return re.ev(pts[..., 0], pts[..., 1]) + 1j * im.ev(pts[..., 0], pts[..., 1])

    return f


def line_attenuation(beta: float, lam: float) -> float:
    """Constant attenuation ``-sqrt(1 - beta^2) lam`` of the line ``(beta, lam)``."""
    return -math.sqrt(1.0 - beta * beta) * lam


def attenuated_data(samples: FourierLineSamples, ib: int, il: int, geodesic_set, grid_n: int, box, nodes: Optional[xray.QuadratureNodes] = None) -> np.ndarray:
    """``int_0^L e^{-sqrt(1-beta^2) lam tau} f(gamma(tau), beta, lam) dtau`` per geodesic."""
    beta, lam = samples.beta_grid[ib], samples.lambda_grid[il]
    alpha = line_attenuation(beta, lam)
    f = line_function(samples, ib, il, grid_n, box)
    if nodes is None:
        return np.array([xray.forward(g.manifold, alpha, f, g) for g in geodesic_set])
    return xray.forward_many(nodes, alpha, f(nodes.points))


def recover_line(data: np.ndarray, sys: xray.RayTransformSystem, reg: Optional[float] = None, factor: Optional[xray.NormalFactorization] = None):
    """Invert one attenuated transform.

    Delegates to :func:`xray.invert` unless a factorisation of the same
    regularised normal matrix is supplied, in which case the solve is
    direct.  Returns the estimate on the masked pixels.
    """
    if factor is not None:
        if factor.system is not sys:
            raise ValueError("factorisation belongs to a different system")
        return factor.solve(data)
    return xray.invert(sys, data, reg)


# ---------------------------------------------------------------------------
# cone fit
# ---------------------------------------------------------------------------


def cone_design(beta_grid, lambda_grid, t_axis, x_axis, box, K: int, lines=None) -> np.ndarray:
    """Fourier-line samples of the sine modes ``S_j(t) S_k(x1)``; rows are lines.

    The same trapezoid rule as :func:`fourier_line_samples` is used so
    that exact samples of a series phantom are reproduced exactly.
    """
    (t0, t1), (x0, x1) = box
    wt, wx = _trap_weights(t_axis), _trap_weights(x_axis)
    St = np.stack([sine_mode(j, t_axis, t0, t1) for j in range(1, K + 1)])  # (K, n_t)
    Sx = np.stack([sine_mode(k, x_axis, x0, x1) for k in range(1, K + 1)])
    if lines is None:
        lines = [(b, l) for b in range(len(beta_grid)) for l in range(len(lambda_grid))]
    rows = []
    for ib, il in lines:
        b, lam = beta_grid[ib], lambda_grid[il]
        ft = St @ (np.exp(1j * lam * b * t_axis) * wt)
        fx = Sx @ (np.exp(1j * lam * x_axis) * wx)
        rows.append(np.outer(ft, fx).ravel())
    return np.array(rows)


def _gcv_choice(U, s, Y, mus):
    """Tikhonov weight minimising generalised cross validation over ``mus``."""
    UtY = U.T @ Y
    n = U.shape[0]
    resid_perp = float(np.sum(Y * Y) - np.sum(UtY * UtY))
    best = None
    for mu in mus:
        filt = s * s / (s * s + mu)
        r = float(np.sum(((1 - filt)[:, None] * UtY) ** 2)) + max(resid_perp, 0.0)
        denom = (n - float(np.sum(filt))) ** 2
        g = r / denom
        if best is None or g < best[0]:
            best = (g, mu)
    return best[1]


@dataclass
class ConeFit:
    coefficients: np.ndarray  # (K*K, P) real
    singular_values: np.ndarray
    mu: float


def fit_cone(values: np.ndarray, design: np.ndarray, reg="gcv") -> ConeFit:
    """Real Tikhonov least squares ``design c = values`` for every column of ``values``.

    ``values`` has shape ``(n_lines, P)`` (complex); the coefficients are
    real.  ``reg`` is a relative weight ``mu / s_max^2`` or ``"gcv"``.
    """
    A = np.vstack([design.real, design.imag])
    Y = np.vstack([values.real, values.imag])
    n_unknowns = A.shape[1]
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if A.shape[0] < n_unknowns or s[-1] <= 0:
        raise ConditioningError(f"{A.shape[0]} real equations for {n_unknowns} unknowns", s)
    if reg == "gcv":
        mus = s[0] ** 2 * np.logspace(-16, 0, 65)
        mu = _gcv_choice(U, s, Y, mus)
    else:
        mu = float(reg) * s[0] ** 2
    filt = s / (s * s + mu)
    C = Vt.T @ (filt[:, None] * (U.T @ Y))
    return ConeFit(C, s, float(mu))


def evaluate_series(coeffs: np.ndarray, t_axis, x_axis, box, K: int) -> np.ndarray:
    """``sum_jk c_jk(x') S_j(t) S_k(x1)`` on the grid; shape ``(n_t, n_x, P)``."""
    (t0, t1), (x0, x1) = box
    St = np.stack([sine_mode(j, t_axis, t0, t1) for j in range(1, K + 1)])
    Sx = np.stack([sine_mode(k, x_axis, x0, x1) for k in range(1, K + 1)])
    C = coeffs.reshape(K, K, -1)
    return np.einsum("jt,kx,jkp->txp", St, Sx, C)


@dataclass
class RecoveryReport:
    """Errors, timings and configuration of a recovery run."""

    line_errors: list
    reconstruction: Optional[np.ndarray]
    relative_error: Optional[float]
    timings: dict
    config: dict
    singular_values: list = field(default_factory=list)
    mu: Optional[float] = None
    stage: str = "damping"
    lines: list = field(default_factory=list)

    def __post_init__(self):
        if any(e < 0 for e in self.line_errors):
            raise ValueError("errors must be nonnegative")

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "relative_error": self.relative_error,
            "line_errors": [float(e) for e in self.line_errors],
            "lines": [[float(b), float(l)] for b, l in self.lines],
            "singular_values": [float(s) for s in self.singular_values],
            "mu": self.mu,
            "timings": self.timings,
            "config": self.config,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)


def recover_coefficient(lines: FourierLineSamples, support_box, K: int, line_index=None, reg="gcv"):
    """Fit the ``K x K`` sine series on the support box to the cone samples.

    Returns the estimate on the ``Q`` grid (``(n_t, n_x, P)``) and the fit.
    """
    if line_index is None:
        line_index = [(b, l) for b in range(len(lines.beta_grid)) for l in range(len(lines.lambda_grid))]
    D = cone_design(lines.beta_grid, lines.lambda_grid, lines.t_axis, lines.x_axis, support_box, K, line_index)
    vals = np.stack([lines.f_values[:, b, l] for b, l in line_index])
    fit = fit_cone(vals, D, reg)
    est = evaluate_series(fit.coefficients, lines.t_axis, lines.x_axis, support_box, K)
    return est, fit


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineSettings:
    """Grids and regularisation of the recovery pipeline."""

    manifold: dict = field(default_factory=lambda: {"catalog_id": "euclidean_disk"})
    grid_n: int = 64
    n_t: int = 33
    n_x: int = 33
    T: float = 1.0
    beta_grid: tuple = (0.6, 0.7, 0.8, 0.9, 0.95)
    lambda_grid: tuple = (-1.6, -1.2, -0.8, -0.4, 0.4, 0.8, 1.2, 1.6)
    attenuation_budget: float = ATTENUATION_BUDGET
    support_box: tuple = ((0.1, 0.9), (0.1, 0.9))
    K: int = 4
    n_points: int = 128
    n_dirs: int = 100
    line_reg: Optional[float] = None
    cone_reg: object = "gcv"
    node_panel: float = 0.2
    direct_solver: bool = True

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["beta_grid"] = list(self.beta_grid)
        d["lambda_grid"] = list(self.lambda_grid)
        d["support_box"] = [list(b) for b in self.support_box]
        return d


class PipelineContext:
    """Geometry shared by all lines: grid, geodesics, ray geometry and quadrature nodes."""

    def __init__(self, settings: PipelineSettings):
        self.settings = settings
        self.manifold: TransversalManifold = manifold_from_config(dict(settings.manifold))
        self.geodesics = xray.fan_beam_geodesics(self.manifold, settings.n_points, settings.n_dirs)
        self.geometry = xray.ray_geometry(self.manifold, settings.grid_n, self.geodesics)
        self.nodes = xray.quadrature_nodes(self.geodesics, max_panel=settings.node_panel)
        self._factors: dict = {}
        g = self.geometry.grid
        self.box = g.box
        self.points = g.centers.reshape(-1, 2)
        self.mask = g.mask.ravel()
        self.q_grid = QGrid(settings.T, settings.n_t, settings.n_x, settings.grid_n)

    def system(self, alpha: float):
        """Ray transform system and, with the direct solver, its cached factorisation."""
        key = float(alpha)
        if key not in self._factors:
            sys = xray.build_system(self.manifold, key, self.settings.grid_n, self.geodesics, self.geometry)
            fac = xray.NormalFactorization(sys, self.settings.line_reg) if self.settings.direct_solver else None
            self._factors[key] = (sys, fac)
        return self._factors[key]

    def admissible_lines(self, beta_grid, lambda_grid) -> list:
        b = self.settings.attenuation_budget
        return [
            (ib, il)
            for ib, beta in enumerate(beta_grid)
            for il, lam in enumerate(lambda_grid)
            if abs(line_attenuation(beta, lam)) <= b + 1e-12
        ]


def _relative_l2(est: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    num = float(np.sum(np.abs(est[..., mask] - truth[..., mask]) ** 2))
    den = float(np.sum(np.abs(truth[..., mask]) ** 2))
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


def _solve_line(ctx: PipelineContext, samples: FourierLineSamples, ib: int, il: int) -> np.ndarray:
    s = ctx.settings
    alpha = line_attenuation(samples.beta_grid[ib], samples.lambda_grid[il])
    data = attenuated_data(samples, ib, il, ctx.geodesics, s.grid_n, ctx.box, ctx.nodes)
    sys, fac = ctx.system(alpha)
    return recover_line(data, sys, s.line_reg, fac)


def recover_difference(ctx: PipelineContext, coeff: np.ndarray, stage: str = "damping", config: Optional[dict] = None, workers: int = 1) -> RecoveryReport:
    """Run samples, data, per-line inversion and cone fit for ``coeff`` on the ``Q`` grid."""
    s = ctx.settings
    timings = {}
    t0 = time.perf_counter()
    qg = ctx.q_grid
    samples = fourier_line_samples(coeff, s.beta_grid, s.lambda_grid, qg.t, qg.x1, ctx.points)
    timings["samples"] = time.perf_counter() - t0
    lines = ctx.admissible_lines(samples.beta_grid, samples.lambda_grid)
    if not lines:
        raise ConditioningError("no line satisfies the attenuation budget", np.zeros(0))
    t1 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        estimates = list(pool.map(lambda bl: _solve_line(ctx, samples, *bl), lines))
    timings["lines"] = time.perf_counter() - t1
    est_values = np.zeros_like(samples.f_values)
    errors = []
    for (ib, il), est in zip(lines, estimates):
        est_values[ctx.mask, ib, il] = est
        truth = samples.f_values[ctx.mask, ib, il]
        nt = np.linalg.norm(truth)
        errors.append(float(np.linalg.norm(est - truth) / nt) if nt > 0 else float(np.linalg.norm(est)))
    t2 = time.perf_counter()
    est_samples = FourierLineSamples(samples.beta_grid, samples.lambda_grid, est_values, qg.t, qg.x1, ctx.points)
    recon, fit = recover_coefficient(est_samples, s.support_box, s.K, lines, s.cone_reg)
    timings["cone_fit"] = time.perf_counter() - t2
    return RecoveryReport(
        line_errors=errors,
        reconstruction=recon,
        relative_error=_relative_l2(recon, coeff, ctx.mask),
        timings=timings,
        config=config if config is not None else s.as_dict(),
        singular_values=list(fit.singular_values),
        mu=fit.mu,
        stage=stage,
        lines=[(samples.beta_grid[b], samples.lambda_grid[l]) for b, l in lines],
    )


def pipeline(
    a1: np.ndarray,
    a2: np.ndarray,
    q1: np.ndarray,
    q2: np.ndarray,
    settings: Optional[PipelineSettings] = None,
    conformal: Optional[np.ndarray] = None,
    ctx: Optional[PipelineContext] = None,
    floor: float = 1e-12,
    workers: int = 1,
) -> RecoveryReport:
    """Recover the damping difference, or the potential difference when the dampings agree.

    All coefficients are arrays on the ``Q`` grid ``(n_t, n_x, P)``;
    ``conformal`` is the factor ``c`` on the same grid (default one).
    The recovered quantity is ``c (a1 - a2)`` or ``c (q1 - q2)``.
    """
    settings = settings or PipelineSettings()
    ctx = ctx or PipelineContext(settings)
    c = 1.0 if conformal is None else conformal
    a = c * (np.asarray(a1) - np.asarray(a2))
    q = c * (np.asarray(q1) - np.asarray(q2))
    check_boundary(a)
    check_boundary(q)
    scale = max(float(np.max(np.abs(a1))), float(np.max(np.abs(a2))), 1e-300)
    if float(np.max(np.abs(a))) > floor * scale:
        return recover_difference(ctx, a, "damping", workers=workers)
    qscale = max(float(np.max(np.abs(q1))), float(np.max(np.abs(q2))), 1e-300)
    if float(np.max(np.abs(q))) > floor * qscale:
        return recover_difference(ctx, q, "potential", workers=workers)
    zero = np.zeros_like(a)
    return RecoveryReport([], zero, 0.0, {}, settings.as_dict(), stage="identical")


def write_slice_csv(report: RecoveryReport, truth: np.ndarray, ctx: PipelineContext, path, it: Optional[int] = None, ix: Optional[int] = None) -> None:
    """Truth and reconstruction on the ``M0`` pixels at one ``(t, x1)`` node."""
    qg = ctx.q_grid
    it = qg.n_t // 2 if it is None else it
    ix = qg.n_x // 2 if ix is None else ix
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1_prime", "x2_prime", "truth", "reconstruction"])
        for p in np.flatnonzero(ctx.mask):
            w.writerow([repr(float(ctx.points[p, 0])), repr(float(ctx.points[p, 1])), repr(float(truth[it, ix, p])), repr(float(np.real(report.reconstruction[it, ix, p])))])
