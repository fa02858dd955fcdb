"""Trace a geodesic on a curved disk and build a Gaussian beam along it.

Run with ``python demos/trace_and_beam.py``.
"""

from __future__ import annotations

import numpy as np

from gbtomo.beam import BeamParameters, Coefficients, assemble_quasimode
from gbtomo.fermi import build_cover
from gbtomo.manifold import constant_curvature_disk, geodesic_trace
from gbtomo import verify


def main() -> None:
    m = constant_curvature_disk(0.5)
    seg = geodesic_trace(m, np.array([-1.0, 0.0]), np.array([1.0, 0.0]))
    print(f"diameter length {seg.exit_time:.6f}, exit point {seg.exit_point}")

    cover = build_cover(seg, 1.5)
    print(f"{len(cover.charts)} Fermi chart(s) along the geodesic")

    qm = assemble_quasimode(cover, BeamParameters(2.0**-5), Coefficients(), "v")
    print(f"min Im H along the beam: {qm.riccati.min_imag_eig():.4f}")
    print(f"det identity error: {qm.riccati.det_identity_error():.2e}")

    order = verify.eikonal_residual_order(qm.phase, cover.charts[0])
    print(f"eikonal residual decays like |y|^{order.fitted_slope:.2f}")

    norms = verify.l2_norms(qm)
    print("L2 norms on the tube:", {k: round(v, 5) for k, v in norms.items()})


if __name__ == "__main__":
    main()
