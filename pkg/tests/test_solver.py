import warnings

import numpy as np
import pytest

from rbsde.errors import (ContractionViolated, LatticeMismatch, PicardDivergence, ScheduleExhausted,
                          TerminalOutsideDomain, UnsupportedDepth)
from rbsde.lattice import BrownianLattice, sample_paths
from rbsde.solver import (CONVERGENCE_COLUMNS, Generator, PenalizationConfig, extract_k_path, solve_path_dependent,
                          solve_penalized, solve_reflected, write_convergence_csv)
from rbsde.validation import smooth_terminal


def _const(pt):
    pt = np.asarray(pt, float)
    return lambda x: np.broadcast_to(pt, np.shape(x)[:-1] + pt.shape).copy()


def _arc(sec, alpha=0.7):
    nu = smooth_terminal(alpha)
    return lambda x: sec.arc_point(nu.at(np.asarray(x)[..., 0]))


def _linear(a, b):
    b = np.asarray(b, float)
    return Generator(fn=lambda t, x, y, z: a * y + b,
                     jac_y=lambda t, x, y, z: np.broadcast_to(a * np.eye(y.shape[-1]), y.shape + (y.shape[-1],)),
                     lipschitz_y=abs(a), name="linear")


def test_constant_interior_terminal_in_ball(ball):
    dom, core, ps = ball
    lat = BrownianLattice(1.0, 30, 1)
    paths = sample_paths(lat, 50, 0)
    for n in (4, 256):
        f = solve_penalized(ps, _const([0.3, 0.2]), None, None, lat, PenalizationConfig(n=n))
        assert all(np.max(np.abs(z)) == 0.0 for z in f.Z)
        assert np.allclose(f.Y[0], [0.3, 0.2], atol=0)
        sol = extract_k_path(f, paths, ps)
        assert sol.var[:, -1].max() == 0.0


def test_terminal_equality_and_residuals(sector07):
    sec, ps = sector07
    lat = BrownianLattice(1.0, 40, 1)
    g = _arc(sec)
    f = solve_penalized(ps, g, None, None, lat, PenalizationConfig(n=64))
    assert np.array_equal(f.Y[lat.N], g(f.X[lat.N]))
    assert f.residuals.max() <= 1e-12
    assert f.Y[0].shape == (1, 2) and f.Z[0].shape == (1, 2, 1)


def test_terminal_outside_domain(ball):
    lat = BrownianLattice(1.0, 5, 1)
    with pytest.raises(TerminalOutsideDomain):
        solve_penalized(ball[2], _const([1.5, 0.0]), None, None, lat, PenalizationConfig(n=4))


def _push_problem():
    # an outward drift against a weak penalty: the one-step equation is
    # nonlinear at most nodes of the lower half of the lattice
    F = Generator(fn=lambda t, x, y, z: np.zeros_like(y) + np.array([2.0, 0.0]),
                  jac_y=lambda t, x, y, z: np.zeros(y.shape + (2,)), name="push")
    g = lambda x: np.stack([0.5 + 0.3 * np.tanh(x[..., 0]), 0.3 * np.sin(x[..., 0])], -1)  # noqa: E731
    return F, g, PenalizationConfig(n=1, cap_psi=0.02, cap_zsq=1.0)


def test_picard_and_newton_agree(ball):
    from dataclasses import replace
    F, g, cfg = _push_problem()
    lat = BrownianLattice(1.0, 40, 1)
    a = solve_penalized(ball[2], g, F, None, lat, cfg)
    b = solve_penalized(ball[2], g, F, None, lat, replace(cfg, method="picard"))
    assert b.contraction < 1
    assert b.iterations.max() > a.iterations.max()
    assert a.sup_diff(b) <= 1e-10


def test_contraction_violated(sector07):
    sec, ps = sector07
    lat = BrownianLattice(1.0, 10, 1)
    with pytest.raises(ContractionViolated):
        solve_penalized(ps, _arc(sec), None, None, lat, PenalizationConfig(n=512, method="picard"))


def test_picard_divergence_reports_location(ball):
    from dataclasses import replace
    F, g, cfg = _push_problem()
    lat = BrownianLattice(1.0, 40, 1)
    with pytest.raises(PicardDivergence) as info:
        solve_penalized(ball[2], g, F, None, lat, replace(cfg, method="picard", picard_max_iters=2))
    assert info.value.n == 1 and 0 <= info.value.step < lat.N and info.value.node >= 0


def test_caps_default_matches_explicit(sector07):
    sec, ps = sector07
    lat = BrownianLattice(1.0, 30, 1)
    a = solve_penalized(ps, _arc(sec), None, None, lat, PenalizationConfig(n=32))
    b = solve_penalized(ps, _arc(sec), None, None, lat, PenalizationConfig(n=32, cap_psi=1.0, cap_zsq=100.0))
    assert all(np.array_equal(x, y) for x, y in zip(a.Y, b.Y))
    # caps that never bind change nothing either
    c = solve_penalized(ps, _arc(sec), None, None, lat, PenalizationConfig(n=32, cap_psi=np.inf, cap_zsq=np.inf))
    assert a.sup_diff(c) <= 1e-12


def test_k_extraction(sector07):
    sec, ps = sector07
    lat = BrownianLattice(1.0, 40, 1)
    F = _linear(-0.5, [0.0, 0.1])
    f = solve_penalized(ps, _arc(sec), F, None, lat, PenalizationConfig(n=64))
    paths = sample_paths(lat, 300, 3)
    sol = extract_k_path(f, paths, ps, F)
    assert sol.discrepancy <= 1e-10
    assert np.allclose(sol.K, sol.Phi + sol.Theta, atol=1e-14)
    assert np.all(np.diff(sol.var, axis=1) >= 0)
    with pytest.raises(LatticeMismatch):
        extract_k_path(f, sample_paths(BrownianLattice(1.0, 41, 1), 10, 0), ps)


def test_schedule_driver_and_table(sector07, tmp_path):
    sec, ps = sector07
    lat = BrownianLattice(1.0, 30, 1)
    paths = sample_paths(lat, 100, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run = solve_reflected(ps, _arc(sec), None, None, lat, [4, 8, 16, 32], paths=paths)
    assert not run.converged and [r["n"] for r in run.table] == [4, 8, 16, 32]
    dist = [r["sup_dist"] for r in run.table]
    assert all(b < a for a, b in zip(dist, dist[1:]))
    write_convergence_csv(run.table, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == ",".join(CONVERGENCE_COLUMNS) and len(lines) == 5
    with pytest.raises(ScheduleExhausted) as info:
        solve_reflected(ps, _arc(sec), None, None, lat, [4, 8], stop_tol=1e-14, strict=True)
    assert info.value.result is not None and len(info.value.result.table) == 2
    loose = solve_reflected(ps, _arc(sec), None, None, lat, [4, 8, 16], stop_tol=1.0)
    assert loose.converged and len(loose.table) == 2


def test_inactive_penalty_stops_early(ball):
    lat = BrownianLattice(1.0, 20, 1)
    run = solve_reflected(ball[2], _const([0.1, 0.1]), None, None, lat, [4, 8, 16])
    assert run.converged and len(run.table) == 1


def test_path_dependent_depth_one_is_markovian(ball):
    lat = BrownianLattice(1.0, 12, 1)
    F = _linear(1.0, [0.5, 0.0])
    g = lambda x: 0.4 * np.stack([np.tanh(x[..., 0]), np.cos(x[..., 0])], -1)  # noqa: E731
    cfg = PenalizationConfig(n=16)
    direct = solve_penalized(ball[2], g, F, None, lat, cfg)
    pd = solve_path_dependent([1.0], g, F, lat, cfg, ball[2])
    assert all(np.array_equal(a, b) for a, b in zip(direct.Y, pd.head.Y))


def test_path_dependent_prefix_irrelevance(ball):
    lat = BrownianLattice(1.0, 10, 1)
    F = _linear(1.0, [0.5, 0.0])
    g1 = lambda x: 0.4 * np.stack([np.tanh(x[..., 0]), np.cos(x[..., 0])], -1)  # noqa: E731
    cfg = PenalizationConfig(n=16)
    direct = solve_penalized(ball[2], g1, F, None, lat, cfg)
    pd = solve_path_dependent([0.5, 1.0], lambda x1, x2: g1(x2), F, lat, cfg, ball[2])
    assert np.max(np.abs(pd.head.Y[0] - direct.Y[0])) <= 1e-12


def test_path_dependent_depth_limit(ball):
    lat = BrownianLattice(1.0, 10, 1)
    with pytest.raises(UnsupportedDepth):
        solve_path_dependent([0.2, 0.5, 1.0], lambda *x: x[0], None, lat, PenalizationConfig(), ball[2])
    with pytest.raises(ValueError):
        solve_path_dependent([0.25], lambda x: x, None, BrownianLattice(1.0, 10, 1), PenalizationConfig(), ball[2])
