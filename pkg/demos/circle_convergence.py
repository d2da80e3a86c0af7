"""Penalization converging to a martingale on the unit circle.

On the sector domain, a terminal value on the inner arc,
xi = arc_point(nu(W_T)), gives a reflected solution that stays on the arc:
Y is the point at angle theta_t = E_t[nu], and K pushes radially towards
the centre of the circle.  The penalized solutions approach this explicit
solution from outside the domain at rate about 1/n.

    python3 demos/circle_convergence.py [N]
"""
import sys
import warnings

import numpy as np

from rbsde.catalog.domains import SectorDomainSpec, make_sector_domain
from rbsde.geometry.pseudo import build_pseudo_distance
from rbsde.lattice import BrownianLattice, sample_paths
from rbsde.solver import solve_reflected
from rbsde import validation as V


def main(N=200):
    alpha = 0.7
    sec = make_sector_domain(SectorDomainSpec(alpha=alpha))
    pseudo = build_pseudo_distance(sec.domain, sec.core)
    lat = BrownianLattice(1.0, N, 1)
    nu = V.smooth_terminal(alpha)
    g = lambda x: sec.arc_point(nu.at(x[..., 0]))  # noqa: E731
    paths = sample_paths(lat, 1000, seed=0)
    oracle = V.circle_oracle(alpha, nu, lat)

    # the whole schedule is wanted here, so running out of it is expected
    warnings.filterwarnings("ignore", message="schedule exhausted")
    run = solve_reflected(pseudo, g, None, None, lat, [4, 8, 16, 32, 64, 128, 256, 512], paths=paths)
    print(f"{'n':>5} {'sup d(Y,D)':>11} {'n*d':>7} {'|Y-oracle|':>11} {'E Var_T':>8}")
    for row in run.table:
        f = run.history[row["n"]]
        err = V.oracle_field_error(oracle, sec, f)
        print(f"{row['n']:5d} {row['sup_dist']:11.3e} {row['n'] * row['sup_dist']:7.4f} {err:11.3e} "
              f"{row['var_mean']:8.4f}")
    print(f"oracle E[int dVar] = {oracle.expected_var:.4f}")
    rate = V.check_distance_rate(run.table)
    print(f"fitted distance rate: n^{rate.fitted['slope']:.3f}")

    # along paths the penalized K is (almost) radial: compare with the inward normal
    sol = run.solution
    Yc = sol.Y[:, :-1] - sec.circle_center
    cos = np.einsum("pki,pki->pk", sol.dK, -Yc) / (np.linalg.norm(sol.dK, axis=-1) * np.linalg.norm(Yc, axis=-1)
                                                    + 1e-300)
    live = np.linalg.norm(sol.dK, axis=-1) > 0
    print(f"min cosine between dK and the inward radial direction: {cos[live].min():.6f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
