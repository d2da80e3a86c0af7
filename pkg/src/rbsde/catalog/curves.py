"""Closed planar C^2 curves built from circular arcs and quintic Hermite cells,
with a vectorised signed-distance jet.

The curve is traversed counter-clockwise, so the enclosed domain lies on the
left and the outward normal is the tangent turned clockwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# rows: coefficients of u^0..u^5; columns: P0, V0, A0, P1, V1, A1
_QUINTIC = np.array([
    [1, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0, 0],
    [0, 0, 0.5, 0, 0, 0],
    [-10, -6, -1.5, 10, -4, 0.5],
    [15, 8, 1.5, -15, 7, -1],
    [-6, -3, -0.5, 6, -3, 0.5],
], dtype=float)


@dataclass
class Arc:
    center: np.ndarray
    radius: float
    start_angle: float
    sweep: float  # signed; positive = counter-clockwise about the centre

    @property
    def length(self):
        return self.radius * abs(self.sweep)

    def eval(self, s):
        sgn = np.sign(self.sweep)
        a = self.start_angle + sgn * s / self.radius
        c, si = np.cos(a), np.sin(a)
        p = self.center + self.radius * np.stack([c, si], -1)
        dp = sgn * np.stack([-si, c], -1)
        ddp = -np.stack([c, si], -1) / self.radius
        return p, dp, ddp


@dataclass
class HermiteSpline:
    """Piecewise quintic Hermite interpolant in an arclength-like parameter."""

    knots: np.ndarray  # (m,)
    pos: np.ndarray    # (m, 2)
    vel: np.ndarray    # (m, 2)
    acc: np.ndarray    # (m, 2)

    @property
    def length(self):
        return float(self.knots[-1] - self.knots[0])

    def eval(self, s):
        s = np.asarray(s, dtype=float) + self.knots[0]
        i = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, len(self.knots) - 2)
        h = self.knots[i + 1] - self.knots[i]
        u = (s - self.knots[i]) / h
        data = np.stack([self.pos[i], h[:, None] * self.vel[i], h[:, None] ** 2 * self.acc[i],
                         self.pos[i + 1], h[:, None] * self.vel[i + 1],
                         h[:, None] ** 2 * self.acc[i + 1]], axis=1)  # (n, 6, 2)
        coef = np.einsum("kj,njc->nkc", _QUINTIC, data)
        up = u[:, None] ** np.arange(6)
        dup = np.concatenate([np.zeros_like(u)[:, None],
                              np.arange(1, 6) * u[:, None] ** np.arange(5)], 1)
        ddup = np.concatenate([np.zeros((len(u), 2)),
                               np.arange(2, 6) * np.arange(1, 5) * u[:, None] ** np.arange(4)], 1)
        p = np.einsum("nk,nkc->nc", up, coef)
        dp = np.einsum("nk,nkc->nc", dup, coef) / h[:, None]
        ddp = np.einsum("nk,nkc->nc", ddup, coef) / h[:, None] ** 2
        return p, dp, ddp

    def reversed(self):
        """Same point set traversed backwards."""
        k = self.knots[-1] - self.knots[::-1]
        return HermiteSpline(k, self.pos[::-1].copy(), -self.vel[::-1], self.acc[::-1].copy())

    def mirrored(self):
        """Mirror image in the vertical axis, same parameter direction."""
        flip = np.array([-1.0, 1.0])
        return HermiteSpline(self.knots.copy(), self.pos * flip, self.vel * flip, self.acc * flip)


def clothoid_spline(start, heading, kappa_knots, kappa_values, cell=0.01, order=12):
    """Integrate a curve with piecewise-linear curvature and tabulate it.

    ``kappa_knots`` are arclength breakpoints starting at 0; the curvature is
    linear between them.  Position is integrated with Gauss-Legendre
    quadrature per cell; tangent and curvature data at the knots are exact,
    so the quintic Hermite interpolant is C^2 across cells.
    """
    kk = np.asarray(kappa_knots, dtype=float)
    kv = np.asarray(kappa_values, dtype=float)
    pieces = []
    for a, b in zip(kk[:-1], kk[1:]):
        m = max(1, int(np.ceil((b - a) / cell)))
        pieces.append(np.linspace(a, b, m + 1)[:-1])
    s = np.concatenate(pieces + [kk[-1:]])

    def kappa(x):
        return np.interp(x, kk, kv)

    # heading is the exact integral of the piecewise-linear curvature
    seg_int = np.concatenate([[0.0], np.cumsum(0.5 * (kv[1:] + kv[:-1]) * np.diff(kk))])

    def head(x):
        x = np.asarray(x, dtype=float)
        j = np.clip(np.searchsorted(kk, x, side="right") - 1, 0, len(kk) - 2)
        dx = x - kk[j]
        slope = (kv[j + 1] - kv[j]) / (kk[j + 1] - kk[j])
        return heading + seg_int[j] + kv[j] * dx + 0.5 * slope * dx**2

    gx, gw = np.polynomial.legendre.leggauss(order)
    a, b = s[:-1], s[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    q = mid[:, None] + half[:, None] * gx[None, :]
    hq = head(q)
    incr = np.stack([(np.cos(hq) * gw).sum(1) * half, (np.sin(hq) * gw).sum(1) * half], -1)
    pos = np.asarray(start, dtype=float) + np.concatenate([[[0.0, 0.0]], np.cumsum(incr, 0)])
    h = head(s)
    tan = np.stack([np.cos(h), np.sin(h)], -1)
    nrm = np.stack([-np.sin(h), np.cos(h)], -1)
    acc = kappa(s)[:, None] * nrm
    return HermiteSpline(s, pos, tan, acc)


class ClosedCurve:
    """Concatenation of segments forming a closed C^2 curve (counter-clockwise)."""

    def __init__(self, segments, n_seed: int = 1024):
        self.segments = list(segments)
        lengths = np.array([seg.length for seg in self.segments])
        self.offsets = np.concatenate([[0.0], np.cumsum(lengths)])
        self.length = float(self.offsets[-1])
        self._seed_s = np.linspace(0.0, self.length, n_seed, endpoint=False)
        self._seed_p = self.eval(self._seed_s)[0]
        self._tree = cKDTree(self._seed_p)

    def eval(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        flat = s.reshape(-1)
        idx = np.clip(np.searchsorted(self.offsets, flat, side="right") - 1,
                      0, len(self.segments) - 1)
        p = np.empty(flat.shape + (2,))
        dp = np.empty_like(p)
        ddp = np.empty_like(p)
        for k, seg in enumerate(self.segments):
            m = idx == k
            if np.any(m):
                p[m], dp[m], ddp[m] = seg.eval(flat[m] - self.offsets[k])
        shape = s.shape + (2,)
        return p.reshape(shape), dp.reshape(shape), ddp.reshape(shape)

    def curvature(self, s):
        _, dp, ddp = self.eval(s)
        cross = dp[..., 0] * ddp[..., 1] - dp[..., 1] * ddp[..., 0]
        return cross / np.linalg.norm(dp, axis=-1) ** 3

    def closest(self, y, iters: int = 30, tol: float = 1e-14):
        """Arclength parameter of the closest curve point (local Newton from a seed)."""
        y = np.asarray(y, dtype=float).reshape(-1, 2)
        _, j = self._tree.query(y)
        s = self._seed_s[j]
        h = self.length / len(self._seed_s)
        active = np.arange(len(y))
        for _ in range(iters):
            p, dp, ddp = self.eval(s[active])
            r = p - y[active]
            g = np.einsum("ij,ij->i", r, dp)
            gp = np.einsum("ij,ij->i", dp, dp) + np.einsum("ij,ij->i", r, ddp)
            step = np.where(gp > 0.1, g / np.where(gp > 0.1, gp, 1.0), 0.5 * g)
            step = np.clip(step, -h * 4, h * 4)
            s[active] -= step
            active = active[np.abs(step) > tol]
            if len(active) == 0:
                break
        return np.mod(s, self.length)

    def signed_distance_jet(self, y):
        """phi, grad phi, Hessian of the signed distance (positive outside)."""
        y = np.asarray(y, dtype=float)
        shape = y.shape[:-1]
        yf = y.reshape(-1, 2)
        s = self.closest(yf)
        p, dp, ddp = self.eval(s)
        speed = np.linalg.norm(dp, axis=-1)
        t = dp / speed[:, None]
        n = np.stack([t[:, 1], -t[:, 0]], -1)
        phi = np.einsum("ij,ij->i", yf - p, n)
        kap = (dp[:, 0] * ddp[:, 1] - dp[:, 1] * ddp[:, 0]) / speed**3
        denom = 1.0 + kap * phi
        coef = kap / np.where(np.abs(denom) > 1e-12, denom, 1e-12)
        hess = coef[:, None, None] * t[:, :, None] * t[:, None, :]
        return phi.reshape(shape), n.reshape(shape + (2,)), hess.reshape(shape + (2, 2))

    def polyline(self, n: int = 4000):
        return self.eval(np.linspace(0.0, self.length, n, endpoint=False))[0]
