"""Geometry of the non-convex sector domain.

The sector's inner boundary is an arc of the unit circle with half-angle
alpha, seen from outside the circle.  Its exterior-sphere radius is 1
(the arc itself is the only concave part) and, measured on the arc, the
visibility constant of the rounded-square core is cos(alpha).  Case (I)
of the smallness test with theta = 2 then reads

    1 - cos(alpha) < cos(alpha) / 2,   i.e.  cos(alpha) > 2/3,

which this script checks for a few half-angles.

    python3 demos/geometry_report.py
"""
import numpy as np

from rbsde.catalog.domains import SectorDomainSpec, make_sector_domain
from rbsde.geometry.constants import check_smallness, compute_gamma, estimate_r0


def main():
    print(f"{'alpha':>6} {'cos a':>8} {'gamma_arc':>10} {'gamma':>8} {'R0':>8} {'margin(I)':>10}  pass")
    for alpha in (0.5, 0.7, 0.8, 0.84, 0.85, 0.9):
        sec = make_sector_domain(SectorDomainSpec(alpha=alpha))
        r0 = estimate_r0(sec.domain, n_samples=20_000)
        gamma = compute_gamma(sec.domain, sec.core)
        gamma_arc = compute_gamma(sec.domain, sec.core, boundary_subset=sec.inner_arc_sampler())
        # terminal values on the whole inner arc: sup phi_C^+ is reached at its end points
        xi = sec.inner_arc_sampler()
        xi_bound = float(np.max(np.maximum(sec.core.phi_c(xi), 0.0)))
        rep = check_smallness(sec.domain, sec.core, xi_bound, True, 2.0, "I", gamma=gamma_arc, r0=r0)
        print(f"{alpha:6.2f} {np.cos(alpha):8.4f} {gamma_arc:10.4f} {gamma:8.4f} {r0:8.4f} "
              f"{rep.margins['case_I']:+10.4f}  {rep.smallness_pass}")
    print(f"threshold: cos(alpha) = 2/3 at alpha = {np.arccos(2 / 3):.4f}")


if __name__ == "__main__":
    main()
