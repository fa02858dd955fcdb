"""Invert the attenuated geodesic ray transform of a Gaussian phantom.

Run with ``python demos/xray_inversion.py``.  Uses a 32 x 32 pixel grid so
it finishes in a few seconds.
"""

from __future__ import annotations

from gbtomo import xray
from gbtomo.manifold import euclidean_disk


def main() -> None:
    m = euclidean_disk()
    segs = xray.fan_beam_geodesics(m, 64, 64)
    f = xray.gaussian_phantom((0.1, -0.05), 0.25)
    nodes = xray.quadrature_nodes(segs)
    for alpha in (0.0, -0.3):
        data = xray.forward_many(nodes, alpha, f(nodes.points))
        sys = xray.build_system(m, alpha, 32, segs)
        est = xray.invert(sys, data, None)
        err = xray.relative_l2_error(est, sys.grid.sample(f))
        print(f"alpha {alpha:+.1f}: {len(segs)} rays, relative L2 error {100 * err:.2f}%")


if __name__ == "__main__":
    main()
