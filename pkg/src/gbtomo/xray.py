"""Attenuated geodesic ray transform on a transversal manifold.

``I^alpha f(x, xi) = int_0^L exp(int_0^t alpha(gamma(s)) ds) f(gamma(t)) dt``
along non-tangential geodesics.  Forward evaluation uses composite
Gauss-Legendre quadrature along the geodesic; the discrete system uses a
pixel basis with exact polyline-pixel intersection lengths.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg, sparse
from scipy.interpolate import CubicHermiteSpline

from .manifold import GeodesicSegment, TransversalManifold, sample_inflow_boundary, trace_batch

Attenuation = Union[float, complex, Callable[[np.ndarray], np.ndarray]]

GAUSS_NODES = 8
DEFAULT_SMOOTHING = 1e-2


class TrappedRayError(ValueError):
    """The geodesic never leaves the domain."""


class ConfigurationError(ValueError):
    """The pixel grid does not intersect the domain."""


# ---------------------------------------------------------------------------
# geodesic parametrisation
# ---------------------------------------------------------------------------


def _curve(seg: GeodesicSegment):
    """Cubic Hermite interpolant of the geodesic from its samples.

    Straight segments (two samples with equal tangents) are evaluated
    exactly as lines.
    """
    if seg.manifold.flat or (seg.tau.size == 2 and np.allclose(seg.tangents[0], seg.tangents[1], atol=1e-15, rtol=0)):
        x0, v0 = seg.points[0].copy(), seg.tangents[0].copy()
        return lambda t: x0 + np.asarray(t, dtype=float)[..., None] * v0
    tau = seg.tau
    keep = np.concatenate([[True], np.diff(tau) > 1e-14])
    return CubicHermiteSpline(tau[keep], seg.points[keep], seg.tangents[keep], axis=0)


def _is_constant(alpha) -> bool:
    return not callable(alpha)


def _check_segment(seg: GeodesicSegment) -> None:
    if not np.isfinite(seg.exit_time):
        raise TrappedRayError("geodesic is trapped (exit time is infinite)")
    if not seg.non_tangential:
        raise ValueError("the ray transform is evaluated on non-tangential geodesics only")


def _panels(seg: GeodesicSegment, breakpoints=None, max_panel: float = 0.05) -> np.ndarray:
    """Panel edges on ``[0, L]``: sample times, optional breakpoints and a maximal width."""
    L = seg.exit_time
    edges = [seg.tau[(seg.tau > 0) & (seg.tau < L)], [0.0, L]]
    if breakpoints is not None:
        b = np.asarray(breakpoints, dtype=float)
        edges.append(b[(b > 0) & (b < L)])
    e = np.unique(np.concatenate(edges))
    # subdivide wide panels into k equal parts
    k = np.maximum(1, np.ceil(np.diff(e) / max_panel).astype(np.int64))
    start = np.repeat(e[:-1], k)
    width = np.repeat(np.diff(e) / k, k)
    offs = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
    return np.concatenate([start + width * offs, e[-1:]])


@functools.lru_cache(maxsize=8)
def _leggauss(n: int):
    return np.polynomial.legendre.leggauss(n)


def _gauss(edges: np.ndarray, n: int = GAUSS_NODES):
    u, w = _leggauss(n)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (b - a) * u[None, :] + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes, weights


def attenuation_integral(m: TransversalManifold, alpha: Attenuation, seg: GeodesicSegment, t: np.ndarray, breakpoints=None) -> np.ndarray:
    """``int_0^t alpha(gamma(s)) ds`` at the times ``t``."""
    t = np.asarray(t, dtype=float)
    if _is_constant(alpha):
        return alpha * t
    curve = _curve(seg)
    edges = _panels(seg, breakpoints)
    nodes, weights = _gauss(edges)
    vals = np.asarray(alpha(curve(nodes.ravel())), dtype=complex).reshape(nodes.shape)
    panel_int = np.sum(vals * weights, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(panel_int)])
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, edges.size - 2)
    start = edges[idx]
    # partial panel [start, t] by a Gauss rule of the same order
    u, w = _leggauss(GAUSS_NODES)
    sub = 0.5 * (t - start)[..., None] * u + 0.5 * (t + start)[..., None]
    sv = np.asarray(alpha(curve(sub.reshape(-1))), dtype=complex).reshape(sub.shape)
    part = 0.5 * (t - start) * np.sum(sv * w, axis=-1)
    out = cum[idx] + part
    return out.real if np.all(np.isreal(out)) else out


def forward(m: TransversalManifold, alpha: Attenuation, f: Callable, seg: GeodesicSegment, breakpoints=None, max_panel: float = 0.05):
    """Attenuated ray transform of ``f`` along one geodesic.

    Parameters
    ----------
    alpha : float, complex or callable
        Attenuation, constant or a function of points ``(N, dim)``.
    f : callable
        Integrand, a function of points ``(N, dim)``.
    breakpoints : array_like, optional
        Times where ``f`` or ``alpha`` may jump; panels are split there.

    Raises
    ------
    TrappedRayError
        For a trapped geodesic.
    """
    _check_segment(seg)
    curve = _curve(seg)
    edges = _panels(seg, breakpoints, max_panel)
    nodes, weights = _gauss(edges)
    t = nodes.ravel()
    pts = curve(t)
    A = attenuation_integral(m, alpha, seg, t, breakpoints)
    vals = np.asarray(f(pts)) * np.exp(A)
    total = np.sum(vals * weights.ravel())
    return complex(total) if np.iscomplexobj(total) else float(total)


def fan_beam_geodesics(m: TransversalManifold, n_points: int, n_dirs: int, step: float = 0.05) -> list:
    """Non-tangential geodesics from a fan-beam inflow sampling."""
    pairs = sample_inflow_boundary(m, n_points, n_dirs)
    x0 = np.array([p[0] for p in pairs])
    xi = np.array([p[1] for p in pairs])
    segs = trace_batch(m, x0, xi, step=step)
    return [s for s in segs if s.non_tangential and np.isfinite(s.exit_time)]


# ---------------------------------------------------------------------------
# pixel grid and system assembly
# ---------------------------------------------------------------------------


@dataclass
class PixelGrid:
    """Uniform pixel partition of the bounding box, masked to the domain."""

    n: int
    box: tuple
    mask: np.ndarray  # (n, n) bool, indexed [ix, iy]

    @property
    def spacing(self) -> tuple:
        (x0, x1), (y0, y1) = self.box
        return ((x1 - x0) / self.n, (y1 - y0) / self.n)

    @property
    def centers(self) -> np.ndarray:
        (x0, _), (y0, _) = self.box
        dx, dy = self.spacing
        cx = x0 + dx * (np.arange(self.n) + 0.5)
        cy = y0 + dy * (np.arange(self.n) + 0.5)
        X, Y = np.meshgrid(cx, cy, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @property
    def n_unknowns(self) -> int:
        return int(self.mask.sum())

    def column_index(self) -> np.ndarray:
        """Column of each pixel in the system matrix (``-1`` outside the mask)."""
        idx = np.full(self.mask.shape, -1, dtype=np.int64)
        idx[self.mask] = np.arange(self.n_unknowns)
        return idx

    def sample(self, f: Callable) -> np.ndarray:
        """Values of ``f`` at masked pixel centres (column order)."""
        return np.asarray(f(self.centers[self.mask]))

    def to_image(self, values: np.ndarray, fill=np.nan) -> np.ndarray:
        img = np.full(self.mask.shape, fill, dtype=np.result_type(values, float))
        img[self.mask] = values
        return img

    def laplacian(self) -> sparse.csr_matrix:
        """Graph Laplacian ``D^T D`` of nearest-neighbour differences on the mask."""
        col = self.column_index()
        rows, cols, vals = [], [], []
        k = 0
        for axis in (0, 1):
            a = col[:-1, :] if axis == 0 else col[:, :-1]
            b = col[1:, :] if axis == 0 else col[:, 1:]
            ok = (a >= 0) & (b >= 0)
            ia, ib = a[ok], b[ok]
            r = k + np.arange(ia.size)
            rows += [r, r]
            cols += [ia, ib]
            vals += [np.ones(ia.size), -np.ones(ia.size)]
            k += ia.size
        D = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(k, self.n_unknowns)
        )
        return (D.T @ D).tocsr()


def pixel_grid(m: TransversalManifold, n: int) -> PixelGrid:
    """Pixels of the bounding box that meet the domain.

    A pixel is kept when its centre, a corner or an edge midpoint lies in
    the closed domain.
    """
    box = tuple(tuple(map(float, b)) for b in m.bounding_box[:2])
    (x0, x1), (y0, y1) = box
    dx, dy = (x1 - x0) / n, (y1 - y0) / n
    mask = np.zeros((n, n), dtype=bool)
    for fx in (0.0, 0.5, 1.0):
        for fy in (0.0, 0.5, 1.0):
            X, Y = np.meshgrid(x0 + dx * (np.arange(n) + fx), y0 + dy * (np.arange(n) + fy), indexing="ij")
            mask |= m.boundary_fn(np.stack([X, Y], axis=-1)) <= 0.0
    if not mask.any():
        raise ConfigurationError("no pixel of the grid meets the domain")
    return PixelGrid(n, box, mask)


def _polyline(seg: GeodesicSegment, max_len: float):
    """Polyline approximation of the geodesic with pieces no longer than ``max_len``."""
    L = seg.exit_time
    if seg.manifold.flat or seg.tau.size == 2:
        return np.array([0.0, L]), np.stack([seg.entry_point, seg.exit_point])
    k = max(2, int(math.ceil(L / max_len)) + 1)
    t = np.linspace(0.0, L, k)
    return t, _curve(seg)(t)


def _piece_weights(A_a, A_b, s0, s1, length):
    """``length * int_{s0}^{s1} exp(A_a + (A_b - A_a) s) ds`` (exact for linear exponent)."""
    dA = A_b - A_a
    base = length * (s1 - s0) * np.exp(A_a + dA * 0.5 * (s0 + s1))
    x = 0.5 * dA * (s1 - s0)
    small = np.abs(x) < 1e-6
    x_safe = np.where(small, 1.0, x)
    corr = np.where(small, 1.0 + x * x / 6.0, np.sinh(x_safe) / x_safe)
    return base * corr


def _refine_crossings(curve, t, axis, target, lo, hi, n_iter: int = 8):
    """Newton refinement of ``curve(t)[axis] = target`` kept inside ``[lo, hi]``."""
    dcurve = curve.derivative()
    for _ in range(n_iter):
        r = curve(t)[np.arange(t.size), axis] - target
        d = dcurve(t)[np.arange(t.size), axis]
        step = np.where(np.abs(d) > 1e-14, r / np.where(np.abs(d) > 1e-14, d, 1.0), 0.0)
        t = np.clip(t - step, lo, hi)
        if np.max(np.abs(step), initial=0.0) < 1e-15:
            break
    return t


def _segment_pieces(seg: GeodesicSegment, grid: PixelGrid):
    """Pixel indices and arclength intervals of the geodesic's pixel pieces.

    Pixel-edge crossings are located on a polyline with pieces of at most
    half a pixel and, for curved geodesics, refined by Newton's method on
    the interpolated curve.  Returns ``ix, iy, ta, tb, t, own, s0, s1``
    where ``[ta, tb]`` is the arclength interval of each piece and ``t,
    own, s0, s1`` locate it on the polyline for attenuations that are not
    constant.
    """
    dx, dy = grid.spacing
    (x0, _), (y0, _) = grid.box
    t, P = _polyline(seg, 0.5 * min(dx, dy))
    Pa, Pb = P[:-1], P[1:]
    lengths = np.diff(t)
    curved = t.size > 2
    curve = _curve(seg) if curved else None
    times = [t]
    for ax, (o, d) in enumerate(((x0, dx), (y0, dy))):
        ua = (Pa[:, ax] - o) / d
        ub = (Pb[:, ax] - o) / d
        lo = np.floor(np.minimum(ua, ub))
        hi = np.floor(np.maximum(ua, ub))
        cnt = (hi - lo).astype(np.int64)
        if cnt.sum() == 0:
            continue
        own = np.repeat(np.arange(Pa.shape[0]), cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        line = lo[own] + 1 + offs
        s_cross = (line - ua[own]) / (ub[own] - ua[own])
        tc = t[own] + s_cross * lengths[own]
        if curved:
            # allow the true crossing to move into a neighbouring piece
            tc = _refine_crossings(curve, tc, ax, o + d * line, t[np.maximum(own - 1, 0)], t[np.minimum(own + 2, t.size - 1)])
        times.append(tc)
    cuts = np.unique(np.concatenate(times))
    ta, tb = cuts[:-1], cuts[1:]
    keep = tb - ta > 1e-15
    ta, tb = ta[keep], tb[keep]
    tm = 0.5 * (ta + tb)
    mid = curve(tm) if curved else Pa[0] + (tm / t[-1])[:, None] * (Pb[-1] - Pa[0])
    ix = np.clip(np.floor((mid[:, 0] - x0) / dx).astype(np.int64), 0, grid.n - 1)
    iy = np.clip(np.floor((mid[:, 1] - y0) / dy).astype(np.int64), 0, grid.n - 1)
    own = np.clip(np.searchsorted(t, tm, side="right") - 1, 0, lengths.size - 1)
    s0 = (ta - t[own]) / lengths[own]
    s1 = (tb - t[own]) / lengths[own]
    return ix, iy, ta, tb, t, own, s0, s1


@dataclass
class RayGeometry:
    """Attenuation-independent ray/pixel intersection data of a geodesic set."""

    grid: PixelGrid
    geodesics: list
    row: np.ndarray
    col: np.ndarray
    ta: np.ndarray
    tb: np.ndarray
    pieces: list  # per geodesic (t, own, s0, s1) for variable attenuation

    def weights(self, alpha: Attenuation) -> np.ndarray:
        """Attenuated arclength of every piece."""
        if _is_constant(alpha):
            if alpha == 0:
                return self.tb - self.ta
            # int_ta^tb exp(alpha tau) dtau, written stably
            return _piece_weights(alpha * self.ta, alpha * self.tb, 0.0, 1.0, self.tb - self.ta)
        out = []
        for seg, (t, own, s0, s1) in zip(self.geodesics, self.pieces):
            A = attenuation_integral(seg.manifold, alpha, seg, t)
            out.append(_piece_weights(A[:-1][own], A[1:][own], s0, s1, np.diff(t)[own]))
        return np.concatenate(out)


def ray_geometry(m: TransversalManifold, grid_n: int, geodesic_set: Sequence[GeodesicSegment]) -> RayGeometry:
    """Intersect every geodesic with the pixel grid."""
    if len(geodesic_set) == 0:
        raise ValueError("geodesic set is empty")
    grid = pixel_grid(m, grid_n)
    rows, ixs, iys, tas, tbs, pieces = [], [], [], [], [], []
    for r, seg in enumerate(geodesic_set):
        _check_segment(seg)
        ix, iy, ta, tb, t, own, s0, s1 = _segment_pieces(seg, grid)
        missing = ~grid.mask[ix, iy]
        if np.any(missing):
            grid.mask[ix[missing], iy[missing]] = True
        rows.append(np.full(ix.size, r))
        ixs.append(ix)
        iys.append(iy)
        tas.append(ta)
        tbs.append(tb)
        pieces.append((t, own, s0, s1))
    col = grid.column_index()[np.concatenate(ixs), np.concatenate(iys)]
    return RayGeometry(grid, list(geodesic_set), np.concatenate(rows), col, np.concatenate(tas), np.concatenate(tbs), pieces)


@dataclass
class RayTransformSystem:
    """Sparse discretisation of the attenuated ray transform."""

    manifold: TransversalManifold
    geodesics: list
    attenuation: Attenuation
    grid: PixelGrid
    matrix: sparse.csr_matrix
    reg_lambda: float = 0.0

    def apply(self, f_values: np.ndarray) -> np.ndarray:
        return self.matrix @ f_values

    def adjoint(self, data: np.ndarray) -> np.ndarray:
        """Transpose action (conjugate transpose for complex attenuation)."""
        return self.matrix.conj().T @ data

    def default_reg_lambda(self) -> float:
        """``1e-4`` times the largest row sum of ``A^* A``."""
        A = abs(self.matrix)
        return 1e-4 * float(np.max(A.T @ (A @ np.ones(A.shape[1]))))

    def metadata(self) -> dict:
        return {
            "catalog_id": self.manifold.catalog_id,
            "params": self.manifold.params,
            "grid_n": self.grid.n,
            "n_unknowns": self.grid.n_unknowns,
            "n_geodesics": len(self.geodesics),
            "nnz": int(self.matrix.nnz),
            "attenuation": None if callable(self.attenuation) else _jsonable(self.attenuation),
            "reg_lambda": self.reg_lambda,
        }

    def dump_coo(self, path) -> None:
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v!r}\n")


def _jsonable(x):
    if isinstance(x, complex):
        return [x.real, x.imag]
    return float(x)


def build_system(
    m: TransversalManifold,
    alpha: Attenuation,
    grid_n: int,
    geodesic_set: Sequence[GeodesicSegment],
    geometry: Optional[RayGeometry] = None,
) -> RayTransformSystem:
    """Assemble the pixel-basis matrix of the attenuated transform.

    Each entry is the arclength of the geodesic inside the pixel weighted
    by the attenuation factor, integrated exactly for an exponent that is
    linear along each polyline piece.  A precomputed ``geometry`` is reused
    across attenuations.
    """
    geo = ray_geometry(m, grid_n, geodesic_set) if geometry is None else geometry
    val = geo.weights(alpha)
    A = sparse.csr_matrix((val, (geo.row, geo.col)), shape=(len(geo.geodesics), geo.grid.n_unknowns))
    A.sum_duplicates()
    return RayTransformSystem(m, geo.geodesics, alpha, geo.grid, A)


@dataclass
class QuadratureNodes:
    """Gauss nodes of many geodesics for repeated forward evaluations."""

    points: np.ndarray
    tau: np.ndarray
    weights: np.ndarray
    ray: np.ndarray
    n_rays: int


def quadrature_nodes(geodesic_set: Sequence[GeodesicSegment], max_panel: float = 0.05) -> QuadratureNodes:
    pts, taus, ws, rays = [], [], [], []
    for r, seg in enumerate(geodesic_set):
        _check_segment(seg)
        nodes, weights = _gauss(_panels(seg, None, max_panel))
        t = nodes.ravel()
        pts.append(_curve(seg)(t))
        taus.append(t)
        ws.append(weights.ravel())
        rays.append(np.full(t.size, r))
    return QuadratureNodes(np.concatenate(pts), np.concatenate(taus), np.concatenate(ws), np.concatenate(rays), len(geodesic_set))


def forward_many(nodes: QuadratureNodes, alpha: complex, f_values: np.ndarray) -> np.ndarray:
    """Forward transform of many geodesics for a constant attenuation.

    ``f_values`` are the integrand values at ``nodes.points``.
    """
    w = nodes.weights * np.exp(alpha * nodes.tau) if alpha != 0 else nodes.weights
    vals = w * f_values
    if np.iscomplexobj(vals):
        return np.bincount(nodes.ray, vals.real, nodes.n_rays) + 1j * np.bincount(nodes.ray, vals.imag, nodes.n_rays)
    return np.bincount(nodes.ray, vals, nodes.n_rays)


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


@dataclass
class InversionReport:
    """Diagnostics of the normal-equation solve."""

    converged: bool
    iterations: int
    relative_residual: float
    data_misfit: list = field(default_factory=list)
    objective: list = field(default_factory=list)


def invert(
    sys: RayTransformSystem,
    data: np.ndarray,
    reg_lambda: Optional[float] = None,
    smoothing: float = DEFAULT_SMOOTHING,
    rtol: float = 1e-8,
    max_iter: int = 2000,
    return_report: bool = False,
):
    """Regularised least squares by conjugate gradients on the normal equations.

    Solves ``(A^* A + reg_lambda (I + smoothing * Lap)) f = A^* data`` and
    stops at relative residual ``rtol`` or after ``max_iter`` iterations,
    returning the last iterate with ``converged = False`` in the report.
    """
    data = np.asarray(data)
    A = sys.matrix
    if data.shape[0] != A.shape[0]:
        raise ValueError("data length must equal the number of geodesics")
    lam = sys.default_reg_lambda() if reg_lambda is None else float(reg_lambda)
    if lam < 0:
        raise ValueError("reg_lambda must be nonnegative")
    sys.reg_lambda = lam
    R = sparse.identity(A.shape[1], format="csr") + smoothing * sys.grid.laplacian()
    AH = A.conj().T.tocsr()

    def normal(x):
        return AH @ (A @ x) + lam * (R @ x)

    dtype = np.result_type(A.dtype, data.dtype, float)
    b = AH @ data
    x = np.zeros(A.shape[1], dtype=dtype)
    r = b.astype(dtype, copy=True)
    p = r.copy()
    rr = np.vdot(r, r).real
    bnorm = math.sqrt(np.vdot(b, b).real)
    report = InversionReport(False, 0, 0.0)

    def record(x):
        res = A @ x - data
        mis = float(np.linalg.norm(res))
        report.data_misfit.append(mis)
        report.objective.append(0.5 * mis**2 + 0.5 * lam * float(np.vdot(x, R @ x).real))

    record(x)
    if bnorm == 0.0:
        report.converged = True
        return (x, report) if return_report else x
    for k in range(1, max_iter + 1):
        Ap = normal(p)
        alpha = rr / np.vdot(p, Ap).real
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = np.vdot(r, r).real
        record(x)
        report.iterations = k
        report.relative_residual = math.sqrt(rr_new) / bnorm
        if report.relative_residual < rtol:
            report.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return (x, report) if return_report else x


def relative_l2_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth))


def gaussian_phantom(center=(0.1, -0.05), width: float = 0.25, amplitude: float = 1.0) -> Callable:
    """Smooth Gaussian bump phantom."""
    c = np.asarray(center, dtype=float)

    def f(x):
        d = np.asarray(x) - c
        return amplitude * np.exp(-np.sum(d * d, axis=-1) / (2.0 * width**2))

    return f


def write_grid_csv(grid: PixelGrid, values: np.ndarray, path, name: str = "value") -> None:
    centers = grid.centers[grid.mask]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", name])
        for (a, b), v in zip(centers, values):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(np.real(v)))])


def write_system_json(sys: RayTransformSystem, data: np.ndarray, path) -> None:
    payload = dict(sys.metadata())
    payload["data"] = [float(np.real(d)) for d in data]
    if np.iscomplexobj(data):
        payload["data_imag"] = [float(np.imag(d)) for d in data]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


class NormalFactorization:
    """Cholesky factor of ``A^* A + reg_lambda (I + smoothing * Lap)`` for repeated solves.

    Every right-hand side sharing one attenuation reuses the factor, so
    the regularised inverse acts as one fixed linear map on the data.
    """

    def __init__(self, sys: RayTransformSystem, reg_lambda: Optional[float] = None, smoothing: float = DEFAULT_SMOOTHING):
        A = sys.matrix
        lam = sys.default_reg_lambda() if reg_lambda is None else float(reg_lambda)
        if lam < 0:
            raise ValueError("reg_lambda must be nonnegative")
        sys.reg_lambda = lam
        self.system = sys
        self.reg_lambda = lam
        self._AH = A.conj().T.tocsr()
        R = sparse.identity(A.shape[1], format="csr") + smoothing * sys.grid.laplacian()
        normal = (self._AH @ A + lam * R).toarray()
        self._factor = linalg.cho_factor(normal, lower=True)

    def solve(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data)
        if data.shape[0] != self.system.matrix.shape[0]:
            raise ValueError("data length must equal the number of geodesics")
        return linalg.cho_solve(self._factor, self._AH @ data)
