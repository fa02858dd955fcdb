"""Config-driven experiment runners shared by the command line and the tests.

Every runner takes a plain dictionary (the subcommand section of an
experiment configuration), writes its artifacts into an output directory
and returns a summary dictionary.  Runners are pure functions of the
configuration: no wall-clock values enter the emitted files.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Callable

import numpy as np

from . import carleman, recover, verify, xray
from . import plots
from .beam import BeamParameters, Coefficients, SpacetimeBox, assemble_quasimode
from .fermi import bump, build_cover
from .manifold import geodesic_trace, manifold_from_config


# ---------------------------------------------------------------------------
# coefficient presets
# ---------------------------------------------------------------------------


def compact_damping(t, x1, xp):
    """Smooth complex damping supported in ``(0.05, 0.95)^2 x {|x'| < 0.7}``."""
    r = np.sqrt(np.sum(np.asarray(xp) ** 2, axis=-1))
    return 0.8 * bump((t - 0.5) / 0.45) * bump((x1 - 0.5) / 0.45) * bump(r / 0.7) * (1 + 0.5j)


def smooth_potential(t, x1, xp):
    """Bounded smooth potential ``0.3 cos(t) exp(-|x'|^2)``."""
    return 0.3 * np.cos(t) * np.exp(-np.sum(np.asarray(xp) ** 2, axis=-1))


def coefficient_preset(name: str) -> Coefficients:
    """``zero`` or ``compact`` coefficient pair for beam experiments."""
    if name == "zero":
        return Coefficients()
    if name == "compact":
        return Coefficients(a=compact_damping, q=smooth_potential, support=((0.0, 1.0), (0.0, 1.0)))
    raise ValueError(f"unknown coefficient preset {name!r}")


def beam_builder(cfg: dict) -> Callable:
    """``builder(h, kind)`` for the geodesic and cover described by ``cfg``."""
    m = manifold_from_config(cfg["manifold"])
    seg = geodesic_trace(m, np.asarray(cfg["start"], dtype=float), np.asarray(cfg["direction"], dtype=float))
    cover = build_cover(seg, float(cfg["delta_prime"]))
    coeffs = coefficient_preset(cfg["coefficients"])
    beta = float(cfg.get("beta", 0.6))
    lam = float(cfg.get("lam", 0.0))

    def builder(h, kind):
        return assemble_quasimode(cover, BeamParameters(h, lam=lam, beta=beta), coeffs, kind, SpacetimeBox())

    builder.cover = cover
    builder.coefficients = coeffs
    return builder


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _h_grid(cfg):
    return [2.0 ** (-k) for k in cfg["h_exponents"]]


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_trace(cfg: dict, out: str, emit_plots: bool = False) -> dict:
    m = manifold_from_config(cfg["manifold"])
    seg = geodesic_trace(m, np.asarray(cfg["start"], dtype=float), np.asarray(cfg["direction"], dtype=float), step=float(cfg["step"]))
    seg.to_csv(os.path.join(out, "trace.csv"))
    summary = {"exit_time": float(seg.exit_time), "non_tangential": bool(seg.non_tangential), "n_samples": int(seg.tau.size)}
    _write_json(os.path.join(out, "trace.json"), summary)
    if emit_plots:
        plots.write_polyline_svg(os.path.join(out, "trace.svg"), seg.points, title="geodesic")
    return summary


def run_beam(cfg: dict, out: str, emit_plots: bool = False) -> dict:
    builder = beam_builder(cfg)
    qm = builder(float(cfg["h"]), cfg["kind"])
    geo = qm.geodesic
    tau = np.linspace(geo.tau_lo, geo.tau_hi, int(cfg["n_tau"]))
    H = qm.riccati.at(tau)[:, 0, 0]
    with open(os.path.join(out, "riccati.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "re_H", "im_H"])
        for t, hv in zip(tau, H):
            w.writerow([repr(float(t)), repr(float(hv.real)), repr(float(hv.imag))])
    width = verify.beam_width(qm)
    y = np.linspace(-6 * width, 6 * width, int(cfg["n_y"]))
    t0, x10 = (float(v) for v in cfg["slice"])
    qm.field_slice_csv(os.path.join(out, "beam_slice.csv"), t0, x10, tau, y)
    summary = {"beam_width": float(width), "imag_bound": float(qm.imag_bound), "charts": len(qm.cover.charts), "length": float(geo.length)}
    _write_json(os.path.join(out, "beam.json"), summary)
    if emit_plots:
        T, Y = np.meshgrid(tau, y, indexing="ij")
        plots.write_heatmap_svg(os.path.join(out, "beam_slice.svg"), np.abs(qm.sheet(t0, x10, T, Y)), title="|v| in Fermi coordinates")
    return summary


def run_verify(cfg: dict, out: str, emit_plots: bool = False) -> dict:
    builder = beam_builder(cfg)
    h_grid = _h_grid(cfg)
    quantity = cfg["quantity"]
    if quantity == "concentration":
        psi = lambda x: np.ones(np.asarray(x).shape[:-1])
        res = verify.concentration_check(builder, psi, tuple(cfg["tpoint"]), h_grid)
        payload = {k: (np.real(v).tolist() if isinstance(v, np.ndarray) else v) for k, v in res.as_dict().items()}
        _write_json(os.path.join(out, "concentration.json"), payload)
        return {"rel_error_limit": float(res.rel_errors_limit[-1]), "cross_slope": float(res.cross_slope)}
    sweep = verify.h_sweep(builder, h_grid, quantity, builder.coefficients)
    sweep.to_json(os.path.join(out, f"{quantity}.json"))
    sweep.to_csv(os.path.join(out, f"{quantity}.csv"))
    if emit_plots:
        plots.write_loglog_svg(os.path.join(out, f"{quantity}.svg"), h_grid, [sweep.values], [quantity], title=f"{quantity} vs h")
    return {"quantity": quantity, "fitted_slope": float(sweep.fitted_slope), "flagged": bool(sweep.flagged)}


def run_xray(cfg: dict, out: str, emit_plots: bool = False) -> dict:
    m = manifold_from_config(cfg["manifold"])
    segs = xray.fan_beam_geodesics(m, int(cfg["n_points"]), int(cfg["n_dirs"]))
    f = xray.gaussian_phantom(tuple(cfg["phantom"]["center"]), float(cfg["phantom"]["width"]))
    geometry = xray.ray_geometry(m, int(cfg["grid_n"]), segs)
    nodes = xray.quadrature_nodes(segs)
    alpha = float(cfg["alpha"])
    data = xray.forward_many(nodes, alpha, f(nodes.points))
    sys = xray.build_system(m, alpha, int(cfg["grid_n"]), segs, geometry)
    reg = cfg["reg_lambda"]
    est, rep = xray.invert(sys, data, reg, smoothing=float(cfg["smoothing"]), return_report=True)
    grid = sys.grid
    truth = grid.sample(f)
    err = xray.relative_l2_error(est, truth)
    xray.write_grid_csv(grid, est, os.path.join(out, "reconstruction.csv"), "f_hat")
    xray.write_grid_csv(grid, truth, os.path.join(out, "truth.csv"), "f")
    summary = {"relative_error": err, "n_rays": len(segs), "n_unknowns": grid.n_unknowns, "converged": bool(rep.converged), "iterations": int(rep.iterations)}
    _write_json(os.path.join(out, "xray.json"), summary)
    if emit_plots:
        plots.write_heatmap_svg(os.path.join(out, "reconstruction.svg"), np.real(grid.to_image(est)), title="reconstruction")
    return summary


def run_carleman(cfg: dict, out: str, emit_plots: bool = False, seed: int = 0) -> dict:
    b = cfg["boundary"]
    dom = carleman.CylinderDomain(T=float(b["T"]), n=int(b["n"]), n_t=int(b["grid_points"]), n_x=int(b["grid_points"]))
    seeds = [seed + k for k in range(int(b["n_seeds"]))]
    sweep = carleman.boundary_sweep(dom, b["h_grid"], b["eps_grid"], b["beta_grid"], seeds)
    sweep.to_json(os.path.join(out, "boundary.json"))
    sweep.to_csv(os.path.join(out, "boundary.csv"))
    i = cfg["interior"]
    torus = carleman.TorusGrid(n=int(i["n"]), points=int(i["points"]), length=float(i["length"]))
    h_grid = _h_grid(i)
    ratios = carleman.interior_ratio_sweep(h_grid, float(i["beta"]), torus, i["test"])
    slope, ci = verify.fit_slope(h_grid, ratios, exclude_largest=False)
    interior = {"h": h_grid, "ratio": [float(r) for r in ratios], "fitted_slope": float(slope), "slope_ci": float(ci)}
    _write_json(os.path.join(out, "interior.json"), interior)
    if emit_plots:
        plots.write_loglog_svg(os.path.join(out, "interior.svg"), h_grid, [ratios], ["ratio"], title="interior ratio vs h")
    return {"boundary_pass": sweep.n_pass, "boundary_total": sweep.n_total, "interior_slope": float(slope)}


def recover_settings(cfg: dict) -> recover.PipelineSettings:
    return recover.PipelineSettings(
        manifold=dict(cfg["manifold"]),
        grid_n=int(cfg["grid_n"]),
        n_t=int(cfg["n_t"]),
        n_x=int(cfg["n_x"]),
        T=float(cfg["T"]),
        beta_grid=tuple(float(b) for b in cfg["beta_grid"]),
        lambda_grid=tuple(float(l) for l in cfg["lambda_grid"]),
        attenuation_budget=float(cfg["attenuation_budget"]),
        support_box=tuple(tuple(float(v) for v in b) for b in cfg["support_box"]),
        K=int(cfg["K"]),
        n_points=int(cfg["n_points"]),
        n_dirs=int(cfg["n_dirs"]),
        line_reg=cfg["line_reg"],
        cone_reg="gcv" if cfg["cone_reg"] == "gcv" else float(cfg["cone_reg_weight"]),
        node_panel=float(cfg["node_panel"]),
        direct_solver=bool(cfg["direct_solver"]),
    )


def recover_inputs(cfg: dict, ctx: recover.PipelineContext, seed: int):
    """Coefficient pairs ``(a1, a2, q1, q2)`` on the ``Q`` grid for the configured case."""
    ph_cfg = cfg["phantom"]
    ph = recover.bandlimited_phantom(
        K=int(cfg["K"]), seed=seed, box=cfg["support_box"], decay=float(ph_cfg["decay"]), width=float(ph_cfg["width"]), spread=float(ph_cfg["spread"])
    )
    qg = ctx.q_grid
    diff = ph.on_grid(qg.t, qg.x1, ctx.points) * ctx.mask[None, None, :]
    base = 0.2 * np.ones_like(diff) * ctx.mask[None, None, :]
    zero = np.zeros_like(diff)
    case = cfg["case"]
    if case == "damping":
        return base + diff, base, zero, zero, diff
    if case == "potential":
        return base, base, base + diff, base, diff
    if case == "identical":
        return base, base, base, base, zero
    raise ValueError(f"unknown recovery case {case!r}")


def run_recover(cfg: dict, out: str, emit_plots: bool = False, seed: int = 0, workers: int = 1) -> dict:
    settings = recover_settings(cfg)
    ctx = recover.PipelineContext(settings)
    a1, a2, q1, q2, truth = recover_inputs(cfg, ctx, seed)
    rep = recover.pipeline(a1, a2, q1, q2, settings, ctx=ctx, workers=workers)
    payload = rep.as_dict()
    payload.pop("timings")
    _write_json(os.path.join(out, "recovery.json"), payload)
    recover.write_slice_csv(rep, truth, ctx, os.path.join(out, "slice.csv"))
    if emit_plots:
        qg = ctx.q_grid
        img = np.zeros(ctx.points.shape[0])
        img[ctx.mask] = np.real(rep.reconstruction[qg.n_t // 2, qg.n_x // 2, ctx.mask] - truth[qg.n_t // 2, qg.n_x // 2, ctx.mask])
        plots.write_heatmap_svg(os.path.join(out, "difference.svg"), img.reshape(settings.grid_n, settings.grid_n), title="reconstruction minus truth")
    return {"stage": rep.stage, "relative_error": rep.relative_error, "max_line_error": max(rep.line_errors) if rep.line_errors else 0.0}


RUNNERS = {
    "trace": run_trace,
    "beam": run_beam,
    "verify": run_verify,
    "xray": run_xray,
    "carleman": run_carleman,
    "recover": run_recover,
}
