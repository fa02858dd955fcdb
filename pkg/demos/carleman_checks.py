"""Check the boundary and interior Carleman estimates numerically.

Run with ``python demos/carleman_checks.py``.
"""

from __future__ import annotations

from gbtomo import carleman, verify


def main() -> None:
    dom = carleman.CylinderDomain(T=0.5, n=2, n_t=41, n_x=41)
    sweep = carleman.boundary_sweep(dom, [1e-2, 3e-3, 1e-3], [0.1], [0.8], range(20))
    print(f"boundary estimate holds in {sweep.n_pass}/{sweep.n_total} cases, max ratio {sweep.max_ratio:.2e}")

    bad = carleman.CarlemanParams(0.05, 0.1, 0.8)
    print("guard violations at h = 0.05:", bad.violations(0.5))

    torus = carleman.TorusGrid(n=2, points=128, length=1.0)
    hs = [2.0**-k for k in (4, 5, 6)]
    ratios = carleman.interior_ratio_sweep(hs, 0.8, torus, "wave_packet")
    slope = verify.fit_slope(hs, ratios, exclude_largest=False)[0]
    print("interior ratios:", [round(r, 4) for r in ratios], f"slope {slope:.3f}")


if __name__ == "__main__":
    main()
