"""Parameterised domains and convex cores: ball, polar star, the sector
domain built around a unit-circle arc, and rotational lifting to R^d."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, fsolve

from ..errors import AxisDegeneracy, InfeasibleSpec, NotStarShaped
from ..geometry.levelset import (ConvexCore, LevelSetDomain, radial_jet, rho_eps_bridge,
                                 smooth_abs, smoothstep_jet)
from .curves import Arc, ClosedCurve, clothoid_spline


def _split_jet(jet, dim, name, bounding_radius, grad_floor, signed_distance, meta=None):
    return LevelSetDomain(
        dim=dim,
        phi=lambda y: jet(y)[0],
        grad_phi=lambda y: jet(y)[1],
        hess_phi=lambda y: jet(y)[2],
        bounding_radius=bounding_radius,
        grad_floor=grad_floor,
        signed_distance=signed_distance,
        name=name,
        jet_fn=jet,
        meta=meta or {},
    )


def ball_core(radius: float, name: str = "ball_core") -> ConvexCore:
    """Ball of ``radius`` about 0 with phi_c(y) = rho_bridge(|y| - radius)."""
    val, d1, d2 = rho_eps_bridge(radius)

    def jet(y):
        return radial_jet(y, lambda r: val(r - radius), lambda r: d1(r - radius),
                          lambda r: d2(r - radius))

    return ConvexCore(phi_c=lambda y: jet(y)[0], grad_phi_c=lambda y: jet(y)[1],
                      hess_phi_c=lambda y: jet(y)[2], ball_radius=radius, name=name)


# ---------------------------------------------------------------------------
# ball
# ---------------------------------------------------------------------------

def make_ball(radius: float = 1.0, dim: int = 2):
    """Ball of given radius: phi(y) = |y| - radius (smoothed near 0), core = half ball."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    h, dh, d2h = smooth_abs(radius / 2)

    def jet(y):
        v, g, H = radial_jet(y, h, dh, d2h)
        return v - radius, g, H

    domain = _split_jet(jet, dim, f"ball(radius={radius:g})", radius + 1.0, 1.0, True,
                        meta={"kind": "ball", "radius": radius, "convex": True})
    return domain, ball_core(radius / 2)


# ---------------------------------------------------------------------------
# polar star
# ---------------------------------------------------------------------------

@dataclass
class PolarStarSpec:
    """rho(t) = sum_k cos_coeffs[k] cos(k t) + sum_k sin_coeffs[k] sin((k+1) t),
    drawn about ``offset``; star-shape is judged with respect to the origin."""

    cos_coeffs: Sequence[float] = (1.0,)
    sin_coeffs: Sequence[float] = ()
    offset: Sequence[float] = (0.0, 0.0)

    def rho(self, t):
        t = np.asarray(t, dtype=float)
        r, dr, ddr = (np.zeros_like(t) for _ in range(3))
        for k, c in enumerate(self.cos_coeffs):
            r = r + c * np.cos(k * t)
            dr = dr - c * k * np.sin(k * t)
            ddr = ddr - c * k * k * np.cos(k * t)
        for j, c in enumerate(self.sin_coeffs):
            k = j + 1
            r = r + c * np.sin(k * t)
            dr = dr + c * k * np.cos(k * t)
            ddr = ddr - c * k * k * np.sin(k * t)
        return r, dr, ddr


def _polar_jet(spec: PolarStarSpec, rho_min: float):
    t0 = rho_min / 2
    mean = float(spec.cos_coeffs[0]) if len(spec.cos_coeffs) else 0.0
    h, dh, d2h = smooth_abs(t0)
    off = np.asarray(spec.offset, dtype=float)

    def jet(y):
        y = np.asarray(y, dtype=float)
        p = y - off
        shape = p.shape[:-1]
        pf = p.reshape(-1, 2)
        r = np.linalg.norm(pf, axis=-1)
        v0, g0, H0 = radial_jet(pf, h, dh, d2h)
        v = v0 - mean
        g, H = g0.copy(), H0.copy()
        far = r >= t0 / 2
        if np.any(far):
            rf = r[far]
            th = np.arctan2(pf[far, 1], pf[far, 0])
            w, dw, d2w = smoothstep_jet((rf - t0 / 2) / (t0 / 2))
            dw, d2w = dw / (t0 / 2), d2w / (t0 / 2) ** 2
            rho, drho, ddrho = spec.rho(th)
            dev = rho - mean
            f = h(rf) - mean - w * dev
            fr = dh(rf) - dw * dev
            fth = -w * drho
            frr = d2h(rf) - d2w * dev
            frt = -dw * drho
            ftt = -w * ddrho
            er = pf[far] / rf[:, None]
            et = np.stack([-er[:, 1], er[:, 0]], -1)
            v[far] = f
            g[far] = fr[:, None] * er + (fth / rf)[:, None] * et
            rr = er[:, :, None] * er[:, None, :]
            tt = et[:, :, None] * et[:, None, :]
            rt = er[:, :, None] * et[:, None, :] + et[:, :, None] * er[:, None, :]
            H[far] = (frr[:, None, None] * rr + (fr / rf + ftt / rf**2)[:, None, None] * tt
                      + (frt / rf - fth / rf**2)[:, None, None] * rt)
        return v.reshape(shape), g.reshape(shape + (2,)), H.reshape(shape + (2, 2))

    return jet


def star_shape_margin(spec: PolarStarSpec, n: int = 4096):
    """inf over the boundary of (y/|y|) . n(y), sampled on an angle grid."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    rho, drho, _ = spec.rho(t)
    er = np.stack([np.cos(t), np.sin(t)], -1)
    et = np.stack([-np.sin(t), np.cos(t)], -1)
    y = np.asarray(spec.offset) + rho[:, None] * er
    nrm = rho[:, None] * er - drho[:, None] * et
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    ny = np.linalg.norm(y, axis=-1)
    return float(np.min(np.einsum("ij,ij->i", y, nrm) / np.where(ny > 0, ny, 1.0)))


def make_polar_star(spec: PolarStarSpec):
    """Planar domain {|y - o| < rho(angle)} with a small ball core about 0."""
    t = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
    rho = spec.rho(t)[0]
    if rho.min() <= 0:
        raise NotStarShaped("radius function must be positive")
    margin = star_shape_margin(spec)
    if margin <= 0:
        raise NotStarShaped(f"strict star-shape margin {margin:.3g} <= 0")
    jet = _polar_jet(spec, float(rho.min()))
    off = np.asarray(spec.offset, dtype=float)
    pts = off + rho[:, None] * np.stack([np.cos(t), np.sin(t)], -1)
    inner = float(np.min(np.linalg.norm(pts, axis=-1)))
    rb = float(np.max(np.linalg.norm(pts, axis=-1))) + 1.0
    domain = _split_jet(jet, 2, "polar_star", rb, 1.0, False,
                        meta={"kind": "polar_star", "star_margin": margin})
    return domain, ball_core(0.5 * inner)


# ---------------------------------------------------------------------------
# sector domain
# ---------------------------------------------------------------------------

@dataclass
class SectorDomainSpec:
    """Parameters of the sector domain.

    Angles are measured from the downward vertical about the centre of the
    unit circle carrying the inner arc.  ``transition`` is the arclength of
    the curvature ramp from 0 into the turn of each connecting curve.
    """

    alpha: float = 0.7
    eta: float = 0.1
    eps_corner: float = 0.1
    transition: float = 0.5
    cell: float = 0.01

    @property
    def half_side(self):
        return np.sin(self.alpha) + self.eta

    @property
    def outer_radius(self):
        return (2 * np.sin(self.alpha) + 2 * self.eta + 1) / np.cos(self.alpha)


def _rounded_square_core(half_side: float, corner: float) -> ConvexCore:
    b = half_side - corner

    def jet(y):
        y = np.asarray(y, dtype=float)
        sgn = np.where(y >= 0, 1.0, -1.0)
        q = np.abs(y) - b
        w = np.maximum(q, 0.0)
        wn = np.linalg.norm(w, axis=-1)
        inner = np.minimum(np.max(q, axis=-1), 0.0)
        v = wn + inner - corner
        out = wn > 0
        safe = np.where(out, wn, 1.0)
        g_out = sgn * w / safe[..., None]
        arg = np.argmax(q, axis=-1)
        g_in = sgn * np.eye(y.shape[-1])[arg]
        g = np.where(out[..., None], g_out, g_in)
        both = np.all(q > 0, axis=-1)
        H = np.where(both[..., None, None],
                     (np.eye(y.shape[-1]) - g[..., :, None] * g[..., None, :]) / safe[..., None, None],
                     0.0)
        return v, g, H

    return ConvexCore(phi_c=lambda y: jet(y)[0], grad_phi_c=lambda y: jet(y)[1],
                      hess_phi_c=lambda y: jet(y)[2], name="rounded_square")


@dataclass
class SectorDomain:
    """Sector domain product.  Coordinates are centred at the core centre, so
    the inner arc lies on the unit circle about ``circle_center``."""

    domain: LevelSetDomain
    core: ConvexCore
    spec: SectorDomainSpec
    curve: ClosedCurve
    circle_center: np.ndarray
    hull_points: np.ndarray = field(repr=False)
    max_abs_curvature: float = 1.0

    def arc_point(self, t):
        """Point of the unit circle at angle t from the downward vertical."""
        t = np.asarray(t, dtype=float)
        return self.circle_center + np.stack([np.sin(t), -np.cos(t)], -1)

    # the closed-form circle example lives on (cos t, sin t); this rotation
    # maps it onto the inner arc
    rotation = np.array([[0.0, 1.0], [-1.0, 0.0]])

    def from_circle_frame(self, y):
        return self.circle_center + np.asarray(y) @ self.rotation.T

    def vector_from_circle_frame(self, v):
        """Rotate vectors/matrices with leading axis of size 2 (e.g. Z of shape (..., 2, d'))."""
        return np.einsum("ij,...jk->...ik", self.rotation, v)

    def inner_arc_sampler(self, n: int = 2001):
        return self.arc_point(np.linspace(-self.spec.alpha, self.spec.alpha, n))

    def on_inner_arc(self, y, tol=1e-9):
        y = np.asarray(y) - self.circle_center
        t = np.arctan2(y[..., 0], -y[..., 1])
        return (np.abs(np.linalg.norm(y, axis=-1) - 1) <= tol) & (np.abs(t) <= self.spec.alpha + tol)


def _connecting_curve(spec: SectorDomainSpec):
    a = spec.alpha
    r_out = spec.outer_radius
    A = np.array([np.sin(a), -np.cos(a)])
    P = r_out * A

    def ang(p):
        return np.arctan2(p[0], -p[1])

    def b_angle(L):
        return ang(clothoid_spline(A, a, [0, L], [1, 0], cell=spec.cell).pos[-1]) - a - spec.eps_corner

    L1 = brentq(b_angle, 1e-8, 4 * spec.eps_corner, xtol=1e-14)
    tau = spec.transition

    def curve(x, cell=0.02, order=8):
        k, L3, L4 = x
        knots = np.cumsum([0, L1, tau, L3, L4])
        return clothoid_spline(A, a, knots, [1, 0, -k, -k, -1 / r_out], cell=cell, order=order)

    def resid(x):
        k, L3, L4 = x
        end = curve(x).pos[-1]
        head = a + L1 / 2 - k * tau / 2 - k * L3 - (k + 1 / r_out) * L4 / 2
        return [*(end - P), head - (a - np.pi)]

    rho = (r_out - 1) / 2
    sol, info, ier, msg = fsolve(resid, [1 / rho, np.pi * rho, tau], full_output=True, xtol=1e-13)
    if ier != 1 or np.max(np.abs(resid(sol))) > 1e-8 or min(sol) <= 0:
        raise InfeasibleSpec(f"connecting curve shooting failed: {msg}")
    sp = curve(sol, cell=spec.cell, order=12)
    # snap the far end onto the outer arc (closure error is ~1e-11)
    sp.pos[-1] = P
    sp.vel[-1] = -np.array([np.cos(a), np.sin(a)])
    sp.acc[-1] = -P / r_out**2
    return sp, L1, float(sol[0])


def make_sector_domain(spec: SectorDomainSpec = None) -> SectorDomain:
    """Sector domain: inner unit arc of half-angle alpha, outer concentric arc,
    and two mirror-symmetric C^2 connecting curves with one inflection at the
    angle alpha + eps_corner.  phi is the signed distance to the boundary."""
    spec = spec or SectorDomainSpec()
    a, eta, eps = spec.alpha, spec.eta, spec.eps_corner
    if not (0 < a < np.pi / 2) or eta <= 0 or not (0 < eps < np.pi / 2 - a):
        raise InfeasibleSpec("need 0 < alpha < pi/2, eta > 0, 0 < eps_corner < pi/2 - alpha")
    eta_max = np.sin(a) * (1 - np.cos(a)) / (1 - np.sin(a))
    if eta >= eta_max:
        raise InfeasibleSpec(f"eta={eta:g} too large: core leaves the triangle (need < {eta_max:.4g})")
    lam = spec.half_side
    r_out = spec.outer_radius
    L1curve, _, k_turn = _connecting_curve(spec)
    origin = np.zeros(2)
    segments = [
        Arc(origin, r_out, -a - np.pi / 2, 2 * a),          # outer arc, P2 -> P1
        L1curve.reversed(),                                 # P1 -> A1
        Arc(origin, 1.0, a - np.pi / 2, -2 * a),            # inner arc, A1 -> A2
        L1curve.mirrored(),                                 # A2 -> P2
    ]
    shift = np.array([0.0, -1.0 - lam])  # core centre in the circle frame
    curve_fig = ClosedCurve(segments)
    kap = curve_fig.curvature(np.linspace(0, curve_fig.length, 20000, endpoint=False))
    poly = curve_fig.polyline(4000)
    _check_simple(poly, lam, eta, shift)

    def jet(y):
        y = np.asarray(y, dtype=float)
        return curve_fig.signed_distance_jet(y + shift)

    rb = float(np.max(np.linalg.norm(poly - shift, axis=-1))) + 0.5
    domain = _split_jet(jet, 2, f"sector(alpha={a:g}, eta={eta:g}, eps={eps:g})", rb, 1.0, True,
                        meta={"kind": "sector", "alpha": a, "eta": eta, "eps_corner": eps})
    core = _rounded_square_core(lam, eta)
    # S_{alpha,eps}: inner arc extended along both connecting curves up to B
    hull_t = np.linspace(0, L1curve.knots[np.searchsorted(L1curve.knots, 0) + 0], 2)
    sB = _b_arclength(L1curve, a, eps)
    s_grid = np.linspace(0, sB, 50)
    right = L1curve.eval(s_grid)[0]
    arc = np.stack([np.sin(np.linspace(-a, a, 101)), -np.cos(np.linspace(-a, a, 101))], -1)
    hull = np.concatenate([right[::-1] * [-1, 1], arc, right]) - shift
    del hull_t
    return SectorDomain(domain, core, spec, curve_fig, -shift, hull,
                        max_abs_curvature=float(np.max(np.abs(kap))))


def _b_arclength(spline, a, eps):
    s = spline.knots
    p = spline.pos
    t = np.arctan2(p[:, 0], -p[:, 1])
    j = int(np.argmin(np.abs(t - a - eps)))
    return float(s[j])


def _check_simple(poly, lam, eta, center):
    from shapely.geometry import Polygon, box

    ring = Polygon(poly)
    if not ring.is_valid:
        raise InfeasibleSpec("boundary curve self-intersects")
    sq = box(center[0] - lam, center[1] - lam, center[0] + lam, center[1] + lam)
    # the core may touch the inner arc at its lowest point only
    if sq.buffer(-1e-9).difference(ring).area > 1e-8:
        raise InfeasibleSpec("core is not contained in the domain")


# ---------------------------------------------------------------------------
# rotational lift
# ---------------------------------------------------------------------------

def revolve_jet(planar_jet, d: int):
    """Lift a planar jet in (r, z) coordinates to R^d with r = |y_1..y_{d-1}|."""

    def jet(y):
        y = np.asarray(y, dtype=float)
        shape = y.shape[:-1]
        yf = y.reshape(-1, d)
        r = np.linalg.norm(yf[:, :-1], axis=-1)
        v, g2, H2 = planar_jet(np.stack([r, yf[:, -1]], -1))
        fx, fz = g2[:, 0], g2[:, 1]
        fxx, fxz, fzz = H2[:, 0, 0], H2[:, 0, 1], H2[:, 1, 1]
        safe = np.where(r > 1e-12, r, 1.0)
        u = np.where((r > 1e-12)[:, None], yf[:, :-1] / safe[:, None], 0.0)
        g = np.concatenate([fx[:, None] * u, fz[:, None]], -1)
        # on the axis fx = 0 by symmetry and fx / r tends to fxx
        fx_r = np.where(r > 1e-8, fx / safe, fxx)
        m = d - 1
        H = np.zeros((len(yf), d, d))
        uu = u[:, :, None] * u[:, None, :]
        H[:, :m, :m] = (fxx - fx_r)[:, None, None] * uu + fx_r[:, None, None] * np.eye(m)
        H[:, :m, m] = fxz[:, None] * u
        H[:, m, :m] = fxz[:, None] * u
        H[:, m, m] = fzz
        return v.reshape(shape), g.reshape(shape + (d,)), H.reshape(shape + (d, d))

    return jet


def revolve_to_dim(planar: LevelSetDomain, d: int, core: Optional[ConvexCore] = None):
    """Rotationally symmetric lift of a planar domain symmetric in its first
    coordinate; the second planar coordinate becomes the axis y_d."""
    if planar.dim != 2:
        raise AxisDegeneracy("revolve_to_dim expects a planar domain")
    if d < 2:
        raise ValueError("d must be >= 2")
    if d == 2:
        return (planar, core) if core is not None else planar
    jet = revolve_jet(planar.jet, d)
    lifted = _split_jet(jet, d, f"revolve({planar.name}, d={d})", planar.bounding_radius,
                        planar.grad_floor, planar.signed_distance,
                        meta={**planar.meta, "revolved_dim": d})
    if core is None:
        return lifted

    def core_planar_jet(y):
        v, g = core.phi_c(y), core.grad_phi_c(y)
        H = core.hess_phi_c(y) if core.hess_phi_c is not None else np.zeros(g.shape + (2,))
        return v, g, H

    cj = revolve_jet(core_planar_jet, d)
    lifted_core = ConvexCore(phi_c=lambda y: cj(y)[0], grad_phi_c=lambda y: cj(y)[1],
                             hess_phi_c=lambda y: cj(y)[2], ball_radius=core.ball_radius,
                             name=f"revolve({core.name})")
    return lifted, lifted_core
