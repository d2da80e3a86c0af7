"""Level-set domains, convex cores and the smooth scalar helpers they share.

All evaluators are vectorised: a point array of shape ``(..., d)`` maps to
values ``(...)``, gradients ``(..., d)`` and Hessians ``(..., d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import weakref

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from ..errors import NonConvergence, OutsideUniquenessBand

Evaluator = Callable[[np.ndarray], np.ndarray]

BOUNDARY_TOL = 1e-12


# ---------------------------------------------------------------------------
# scalar helpers
# ---------------------------------------------------------------------------

def smoothstep_jet(x):
    """Value, first and second derivative of the C-infinity step.

    The step is s(x) / (s(x) + s(1 - x)) with s(x) = exp(-1/x) for x > 0,
    written in logistic form to stay finite near the plateaus.
    """
    x = np.asarray(x, dtype=float)
    v = np.where(x >= 1.0, 1.0, 0.0)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    mid = (x > 0.0) & (x < 1.0)
    if np.any(mid):
        np_err = np.errstate(over="ignore", divide="ignore", invalid="ignore")
        np_err.__enter__()
        t = x[mid]
        u = 1.0 - t
        g = 1.0 / t - 1.0 / u
        sig = expit(-g)
        q = sig * expit(g)  # sig (1 - sig) without cancellation near the top plateau
        h = 1.0 / t**2 + 1.0 / u**2
        dh = -2.0 / t**3 + 2.0 / u**3
        v[mid] = sig
        d1[mid] = q * h
        # q underflows to 0 long before h overflows; clean the 0 * inf products
        d1[mid] = np.where(q > 0, q * h, 0.0)
        d2[mid] = np.where(q > 0, q * h * h * (1.0 - 2.0 * sig) + q * dh, 0.0)
        np_err.__exit__(None, None, None)
    return v, d1, d2


def smoothstep(x):
    """C-infinity nondecreasing step: 0 on (-inf, 0], 1 on [1, inf)."""
    v = smoothstep_jet(x)[0]
    return v if np.ndim(v) else float(v)


def rho_eps_bridge(eps: float):
    """Return ``(value, d1, d2)`` callables of the convex C^2 bridge.

    The bridge equals -eps/2 left of -eps, the identity right of 0, and on
    [-eps, 0] is the quartic whose slope is the cubic smoothstep 3u^2 - 2u^3
    in u = (x + eps) / eps.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def _u(x):
        return np.clip((np.asarray(x, dtype=float) + eps) / eps, 0.0, 1.0)

    def value(x):
        x = np.asarray(x, dtype=float)
        u = _u(x)
        out = np.where(x > 0.0, x, -0.5 * eps + eps * (u**3 - 0.5 * u**4))
        return out if out.ndim else float(out)

    def d1(x):
        x = np.asarray(x, dtype=float)
        u = _u(x)
        out = np.where(x > 0.0, 1.0, 3 * u**2 - 2 * u**3)
        return out if out.ndim else float(out)

    def d2(x):
        x = np.asarray(x, dtype=float)
        u = _u(x)
        out = np.where(x > 0.0, 0.0, (6 * u - 6 * u**2) / eps)
        return out if out.ndim else float(out)

    return value, d1, d2


def smooth_abs(t0: float):
    """C^2 even surrogate of |t| that is exact for |t| >= t0.

    Returns ``(value, d1, d2)`` acting on nonnegative radii.
    """
    b = 3.0 / (4.0 * t0)
    c = -1.0 / (8.0 * t0**3)
    a = 3.0 * t0 / 8.0

    def value(r):
        return np.where(r >= t0, r, a + b * r**2 + c * r**4)

    def d1(r):
        return np.where(r >= t0, 1.0, 2 * b * r + 4 * c * r**3)

    def d2(r):
        return np.where(r >= t0, 0.0, 2 * b + 12 * c * r**2)

    return value, d1, d2


def radial_jet(y, f, df, d2f):
    """Value, gradient and Hessian of y -> f(|y|) for a C^2 radial profile.

    Requires df(0) = 0 so that the origin is a regular point; there the
    Hessian limit d2f(0) * I is used.
    """
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    r = np.linalg.norm(y, axis=-1)
    safe = np.where(r > 1e-300, r, 1.0)
    u = y / safe[..., None]
    v, g1, g2 = (np.asarray(fn(r), dtype=float) for fn in (f, df, d2f))
    grad = g1[..., None] * u
    eye = np.eye(d)
    g1_over_r = np.where(r > 1e-8, g1 / safe, g2)
    hess = (g2 - g1_over_r)[..., None, None] * (u[..., :, None] * u[..., None, :]) \
        + g1_over_r[..., None, None] * eye
    return v, grad, hess


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSetDomain:
    """Bounded domain D = {phi < 0} with C^2 level function.

    ``bounding_radius`` is a radius with phi > 0 whenever |y| >= it, and
    ``grad_floor`` a lower bound for |grad phi| in a band around the boundary.
    ``signed_distance`` marks level functions that are exact signed
    distances near the boundary, which enables exact projections.
    """

    dim: int
    phi: Evaluator
    grad_phi: Evaluator
    hess_phi: Evaluator
    bounding_radius: float
    grad_floor: float
    signed_distance: bool = False
    name: str = "domain"
    jet_fn: Optional[Callable] = field(default=None, repr=False, compare=False)
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def jet(self, y):
        if self.jet_fn is not None:
            return self.jet_fn(y)
        return self.phi(y), self.grad_phi(y), self.hess_phi(y)

    def contains(self, y, closed: bool = True):
        v = self.phi(np.asarray(y, dtype=float))
        return v <= BOUNDARY_TOL if closed else v < 0


@dataclass(frozen=True)
class ConvexCore:
    """Convex C = {phi_c < 0} containing the origin.

    ``ball_radius`` is set when C is the Euclidean ball of that radius
    centred at the origin (enables the ball cases of the smallness check).
    """

    phi_c: Evaluator
    grad_phi_c: Evaluator
    contains_origin: bool = True
    ball_radius: Optional[float] = None
    hess_phi_c: Optional[Evaluator] = None
    name: str = "core"


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _newton_to_zero_set(domain: LevelSetDomain, y, tol: float, max_iter: int = 60):
    y = np.array(y, dtype=float)
    ok = np.zeros(len(y), dtype=bool)
    for _ in range(max_iter):
        v = domain.phi(y)
        ok = np.abs(v) <= tol
        if ok.all():
            break
        g = domain.grad_phi(y)
        gg = np.einsum("...i,...i->...", g, g)
        step = np.where(gg > 1e-300, v / np.where(gg > 1e-300, gg, 1.0), 0.0)
        y = np.where(ok[:, None], y, y - step[:, None] * g)
    return y, np.abs(domain.phi(y)) <= tol


def sample_boundary(domain: LevelSetDomain, n: int, rng=None, band: float = 1e-6):
    """Points on the zero level set.

    A first batch of uniform candidates in the bounding box is driven into
    the band |phi| <= band by Newton steps along grad phi.  The remaining
    points start from jittered copies of that batch, which keeps the
    Newton work local.  Every point receives one final Newton correction.
    The spread is not uniform in arclength.
    """
    rng = np.random.default_rng(rng)
    rb = domain.bounding_radius
    out = []
    have = 0
    pilot = None
    for _ in range(200):
        m = max(int(1.2 * (n - have)), 64)
        if pilot is None or len(pilot) < 16:
            y = rng.uniform(-rb, rb, size=(min(m, 2048), domain.dim))
        else:
            y = pilot[rng.integers(0, len(pilot), size=m)]
            y = y + rng.normal(scale=0.02 * rb, size=y.shape)
        y, ok = _newton_to_zero_set(domain, y, band)
        y = y[ok & (np.linalg.norm(y, axis=-1) < rb)]
        if len(y):
            y, _ = _newton_to_zero_set(domain, y, 0.0, max_iter=1)
            y = y[np.abs(domain.phi(y)) <= band]
            out.append(y)
            have += len(y)
            pilot = np.concatenate(out)
        if have >= n:
            break
    if not out:
        return np.empty((0, domain.dim))
    return np.concatenate(out)[:n]


def sample_interior(domain: LevelSetDomain, n: int, rng=None, closed: bool = True):
    """Uniform samples of D (or its closure) by rejection from the box."""
    rng = np.random.default_rng(rng)
    rb = domain.bounding_radius
    out, have = [], 0
    for _ in range(1000):
        y = rng.uniform(-rb, rb, size=(max(2 * (n - have), 256), domain.dim))
        y = y[domain.contains(y, closed=closed)]
        out.append(y)
        have += len(y)
        if have >= n:
            break
    return np.concatenate(out)[:n]


def sample_exterior_band(domain: LevelSetDomain, n: int, width: float, rng=None,
                         boundary=None):
    """Points y = x + t n(x) with x on the boundary and t uniform in (0, width]."""
    rng = np.random.default_rng(rng)
    x = boundary if boundary is not None else sample_boundary(domain, n, rng)
    x = x[rng.integers(0, len(x), size=n)] if len(x) != n else x
    g = domain.grad_phi(x)
    nrm = g / np.linalg.norm(g, axis=-1, keepdims=True)
    t = width * (1.0 - rng.uniform(size=n))
    return x + t[:, None] * nrm


def finite_difference_errors(domain: LevelSetDomain, points, h: float = 1e-4):
    """Max relative errors of grad/hess against central differences of phi."""
    pts = np.asarray(points, dtype=float)
    d = pts.shape[-1]
    eye = np.eye(d) * h
    g = domain.grad_phi(pts)
    H = domain.hess_phi(pts)
    g_fd = np.stack([(domain.phi(pts + e) - domain.phi(pts - e)) / (2 * h) for e in eye], -1)
    H_fd = np.stack([(domain.grad_phi(pts + e) - domain.grad_phi(pts - e)) / (2 * h)
                     for e in eye], -1)
    eg = np.max(np.linalg.norm(g - g_fd, axis=-1) / np.maximum(1.0, np.linalg.norm(g, axis=-1)))
    eH = np.max(np.linalg.norm(H - H_fd, axis=(-2, -1))
                / np.maximum(1.0, np.linalg.norm(H, axis=(-2, -1))))
    return float(eg), float(eH)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(domain: LevelSetDomain, y, r0: Optional[float] = None, tol: float = 1e-12,
            max_iter: int = 50):
    """Closest point of the closure of D.

    Points of the closure are returned unchanged.  Outside points are moved
    onto the boundary and then polished by Newton iteration on the
    Lagrange conditions x - y + mu grad phi(x) = 0, phi(x) = 0.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    pts = np.atleast_2d(y).reshape(-1, y.shape[-1])
    out = pts.copy()
    outside = domain.phi(pts) > 0
    if np.any(outside):
        yo = pts[outside]
        if domain.signed_distance:
            v, g, _ = domain.jet(yo)
            x = yo - v[:, None] * g
        else:
            x = _lagrange_newton(domain, yo, tol, max_iter)
        if r0 is not None:
            dist = np.linalg.norm(x - yo, axis=-1)
            if np.any(dist >= r0):
                raise OutsideUniquenessBand(
                    f"distance {dist.max():.3g} to the domain exceeds R0={r0:.3g}")
        out[outside] = x
    out = out.reshape(y.shape)
    return out[0] if single and out.ndim > 1 else out


_SEED_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _boundary_seeds(domain, n=20000):
    """Dense boundary cloud with a KD-tree, cached per domain object."""
    try:
        return _SEED_CACHE[domain]
    except KeyError:
        pts = sample_boundary(domain, n, np.random.default_rng(12345), band=1e-10)
        entry = (pts, cKDTree(pts))
        _SEED_CACHE[domain] = entry
        return entry


def _lagrange_newton(domain, y, tol, max_iter):
    pts, tree = _boundary_seeds(domain)
    x = pts[tree.query(y)[1]]
    g = domain.grad_phi(x)
    gg = np.einsum("ij,ij->i", g, g)
    mu = np.einsum("ij,ij->i", y - x, g) / gg
    d = y.shape[-1]
    eye = np.eye(d)
    for _ in range(max_iter):
        v, g, H = domain.jet(x)
        r1 = x - y + mu[:, None] * g
        res = np.maximum(np.abs(r1).max(axis=-1), np.abs(v))
        if np.all(res <= tol):
            return x
        J = np.zeros((len(x), d + 1, d + 1))
        J[:, :d, :d] = eye + mu[:, None, None] * H
        J[:, :d, d] = g
        J[:, d, :d] = g
        rhs = np.concatenate([r1, v[:, None]], axis=-1)
        step = np.linalg.solve(J, rhs[..., None])[..., 0]
        x = x - step[:, :d]
        mu = mu - step[:, d]
    v, g, _ = domain.jet(x)
    res = np.maximum(np.abs(x - y + mu[:, None] * g).max(axis=-1), np.abs(v))
    if np.any(res > 1e3 * tol):
        raise NonConvergence(f"projection residual {res.max():.3g} after {max_iter} iterations")
    return x


def distance_to_domain(domain: LevelSetDomain, y):
    """d(y, D); exact for signed-distance level functions."""
    y = np.asarray(y, dtype=float)
    if domain.signed_distance:
        return np.maximum(domain.phi(y), 0.0)
    return np.linalg.norm(y - project(domain, y), axis=-1)
