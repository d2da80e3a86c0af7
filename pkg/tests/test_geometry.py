import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbsde.catalog.domains import PolarStarSpec, ball_core, make_ball, make_polar_star
from rbsde.errors import CaseInapplicable, DegenerateGradient, OutsideUniquenessBand
from rbsde.geometry.constants import (check_core, check_hessian_psi_sq, check_smallness, compute_gamma,
                                      estimate_r0, verify_exterior_sphere)
from rbsde.geometry.levelset import (distance_to_domain, finite_difference_errors, project, rho_eps_bridge,
                                     sample_boundary, sample_interior, smoothstep)
from rbsde.geometry.pseudo import build_pseudo_distance, outward_normal


# -- smoothstep / bridge -------------------------------------------------------

def test_smoothstep_plateaus_and_midpoint():
    assert smoothstep(-1.0) == 0.0
    assert smoothstep(2.0) == 1.0
    assert smoothstep(0.5) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(-0.5, 1.5))
def test_smoothstep_symmetry(x):
    assert smoothstep(x) + smoothstep(1.0 - x) == pytest.approx(1.0, abs=1e-14)


def test_smoothstep_strictly_increasing_inside():
    x = np.linspace(0.1, 0.9, 2001)
    assert np.all(np.diff(smoothstep(x)) > 0)
    from rbsde.geometry.levelset import smoothstep_jet
    assert np.all(smoothstep_jet(np.linspace(0.02, 0.98, 2001))[1] > 0)


@pytest.mark.parametrize("eps", [0.05, 0.3, 1.0])
def test_rho_bridge(eps):
    v, d1, d2 = rho_eps_bridge(eps)
    assert v(-2 * eps) == pytest.approx(-eps / 2)
    assert v(1.0) == 1.0
    x = np.linspace(-1.5 * eps, 0.5 * eps, 4001)
    assert np.all(d2(x) >= -1e-12)
    assert np.all(np.diff(v(x)) >= -1e-15)
    # C^2 matching at the ends of the bridge
    assert d1(-eps) == pytest.approx(0.0) and d1(0.0) == pytest.approx(1.0)
    assert d2(0.0) == pytest.approx(0.0, abs=1e-12)
    # derivative of the value agrees with d1
    h = 1e-6
    xm = -0.37 * eps
    assert (v(xm + h) - v(xm - h)) / (2 * h) == pytest.approx(d1(xm), rel=1e-6)


# -- level-set domains ---------------------------------------------------------

@pytest.mark.parametrize("which", ["ball", "star"])
def test_finite_difference_consistency(which, ball, star):
    dom = ball[0] if which == "ball" else star[0]
    pts = sample_interior(dom, 100, np.random.default_rng(1)) * 1.2
    g_err, h_err = finite_difference_errors(dom, pts, h=1e-4)
    assert g_err <= 1e-5 and h_err <= 1e-5


def test_sector_finite_difference_in_tube(sector07):
    sec, _ = sector07
    rng = np.random.default_rng(3)
    bnd = sample_boundary(sec.domain, 200, rng)
    n = sec.domain.grad_phi(bnd)
    pts = bnd + rng.uniform(-0.25, 0.25, size=(len(bnd), 1)) * n
    g_err, h_err = finite_difference_errors(sec.domain, pts[:100], h=1e-4)
    assert g_err <= 1e-5 and h_err <= 1e-5


def test_bounding_radius(ball, star, sector07):
    for dom in (ball[0], star[0], sector07[0].domain):
        u = np.random.default_rng(0).normal(size=(500, dom.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        assert np.all(dom.phi(u * dom.bounding_radius) > 0)


def test_boundary_sampler_band(star):
    pts = sample_boundary(star[0], 500, np.random.default_rng(0))
    assert len(pts) > 0
    assert np.max(np.abs(star[0].phi(pts))) <= 1e-6


# -- projection and normals ------------------------------------------------------

def test_project_ball():
    dom, _ = make_ball(1.0)
    assert np.allclose(project(dom, np.array([2.0, 0.0])), [1.0, 0.0], atol=1e-12)
    y = np.array([0.2, -0.3])
    assert np.array_equal(project(dom, y), y)


def test_project_star_matches_dense_boundary(star):
    dom = star[0]
    rng = np.random.default_rng(5)
    bnd = sample_boundary(dom, 200, rng)
    y = bnd + 0.02 * dom.grad_phi(bnd) / np.linalg.norm(dom.grad_phi(bnd), axis=1, keepdims=True)
    x = project(dom, y, r0=0.24)
    t = np.linspace(0, 2 * np.pi, 400_001)
    rho = 1 + 0.3 * np.cos(3 * t)
    dense = np.stack([rho * np.cos(t), rho * np.sin(t)], -1)
    for yi, xi in zip(y[:20], x[:20]):
        j = np.argmin(np.sum((dense - yi) ** 2, axis=1))
        assert np.linalg.norm(dense[j] - xi) <= 1e-5


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_project_idempotent(a, b):
    dom, _ = make_ball(1.0)
    p = project(dom, np.array([a, b]))
    assert np.allclose(project(dom, p), p, atol=1e-9)


def test_project_outside_band_raises():
    dom, _ = make_ball(1.0)
    with pytest.raises(OutsideUniquenessBand):
        project(dom, np.array([3.0, 0.0]), r0=1.0)


def test_outward_normal(ball, sector07):
    dom, _, ps = ball
    assert np.allclose(outward_normal(dom, ps, np.array([1.0, 0.0])), [1.0, 0.0])
    assert np.allclose(outward_normal(dom, ps, np.array([0.1, 0.2])), 0.0)
    sec, pss = sector07
    y = sec.arc_point(0.0)
    n = outward_normal(sec.domain, pss, y)
    # towards the centre of the circle carrying the inner arc
    assert np.allclose(n, (sec.circle_center - y), atol=1e-9)


def test_outward_normal_degenerate(ball):
    dom, core, ps = ball
    from dataclasses import replace
    bad = replace(ps, grad_floor=1e6)
    with pytest.raises(DegenerateGradient):
        outward_normal(dom, bad, np.array([1.5, 0.0]))


# -- pseudo-distance ----------------------------------------------------------------

def test_pseudo_distance_ball(ball):
    dom, core, ps = ball
    assert ps.margin > 0
    val = ps.psi(np.array([2.0, 0.0]))
    assert ps.c_low * 1.0 - 1e-9 <= val <= ps.c_high * 1.0 + 1e-9
    inside = sample_interior(dom, 500, np.random.default_rng(0))
    assert np.all(ps.psi(inside) == 0.0)


def test_pseudo_distance_sector(sector07):
    sec, ps = sector07
    assert ps.margin > 0
    assert ps.checks["boundary_value"] <= 1e-9
    assert ps.checks["boundary_grad"] <= 1e-6
    assert ps.checks["boundary_hess"] <= 1e-5
    assert 0 < ps.c_low <= ps.c_high < np.inf


def test_pseudo_distance_psi_ratio_and_big_psi(star):
    dom, core = star
    ps = build_pseudo_distance(dom, core, n_samples=2000)
    rng = np.random.default_rng(2)
    bnd = sample_boundary(dom, 300, rng)
    n = dom.grad_phi(bnd)
    y = bnd + rng.uniform(0.01, 0.3, size=(len(bnd), 1)) * n / np.linalg.norm(n, axis=1, keepdims=True)
    psi = ps.psi(y)
    d = distance_to_domain(dom, y)
    assert np.all(psi > 0)
    ratio = np.linalg.norm(ps.big_psi(y), axis=-1) / psi
    assert ratio.min() > 0 and np.isfinite(ratio.max())
    assert np.all(psi / d > 0.5 * ps.c_low)


def test_hessian_psi_sq(ball, sector07):
    assert check_hessian_psi_sq(ball[2]) == pytest.approx(0.0, abs=1e-9)
    c1 = check_hessian_psi_sq(sector07[1], n_samples=2000, seed=0)
    c2 = check_hessian_psi_sq(sector07[1], n_samples=4000, seed=1)
    assert np.isfinite(c1) and np.isfinite(c2)


# -- constants -------------------------------------------------------------------------

def test_r0_ball_is_cap():
    dom, _ = make_ball(1.0)
    assert estimate_r0(dom, n_samples=20_000) == 10.0


def test_r0_star(star):
    r0 = estimate_r0(star[0], n_samples=20_000)
    assert 0 < r0 < 1
    worst, _ = verify_exterior_sphere(star[0], r0, 20_000)
    assert worst <= 1e-10


def test_gamma_ball_and_star(ball, star):
    assert compute_gamma(ball[0], ball[1]) == pytest.approx(1.0, abs=1e-9)
    assert compute_gamma(*star) > 0


def test_gamma_rotation_invariance(star):
    dom, core = star
    spec = PolarStarSpec(cos_coeffs=(1.0, 0.0, 0.0, 0.0), sin_coeffs=(0.0, 0.0, 0.3))
    rot, rcore = make_polar_star(spec)  # 1 + 0.3 sin 3t is a rotation of 1 + 0.3 cos 3t
    assert compute_gamma(rot, rcore) == pytest.approx(compute_gamma(dom, core), abs=1e-3)


def test_gamma_offset_core_is_smaller():
    # moving the core off-centre tilts the rays relative to the normals
    dom, _ = make_ball(1.0)
    shift = np.array([0.8, 0.0])
    base = ball_core(0.1)
    from rbsde.geometry.levelset import ConvexCore
    core = ConvexCore(lambda y: base.phi_c(y - shift), lambda y: base.grad_phi_c(y - shift),
                      contains_origin=False)
    g = compute_gamma(dom, core)
    assert 0 < g < 1
    # min over t of (1 - 0.8 cos t) / |y - shift| is 0.6, attained at cos t = 0.8
    assert g == pytest.approx(0.6, abs=1e-3)


def test_smallness_cases(ball):
    dom, core, _ = ball
    rep = check_smallness(dom, core, None, True, 1.0, "IV", gamma=1.0, r0=10.0)
    assert rep.smallness_pass and rep.smallness_case == "IV"
    with pytest.raises(CaseInapplicable):
        check_smallness(dom, core, None, True, 1.0, "I", gamma=1.0, r0=10.0)
    from rbsde.geometry.levelset import ConvexCore
    plain = ConvexCore(core.phi_c, core.grad_phi_c)
    with pytest.raises(CaseInapplicable):
        check_smallness(dom, plain, 0.5, True, 1.0, "III", gamma=1.0, r0=10.0)
    rep = check_smallness(dom, core, 0.1, False, 1.0, "I", gamma=1.0, r0=10.0)
    assert not rep.smallness_pass
    js = rep.to_json()
    assert '"gamma"' in js and '"r0"' in js


def test_core_invariants(ball, star):
    for dom, core in ((ball[0], ball[1]), star):
        out = check_core(core, dom, n=500)
        assert out["phi_c_origin"] < 0
        assert out["midpoint_convexity"] <= 1e-10
        assert out["distance_identity"] <= 1e-8
