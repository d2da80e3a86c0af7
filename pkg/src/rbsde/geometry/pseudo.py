"""Pseudo-distance psi: a smooth surrogate for d(., D) that vanishes on the
closure of D and whose gradient is seen positively by the convex core."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateGradient, ParameterSearchFailed
from .levelset import (BOUNDARY_TOL, ConvexCore, LevelSetDomain, distance_to_domain,
                       sample_boundary, sample_exterior_band, smoothstep_jet)

log = logging.getLogger(__name__)


def psi_jet(domain: LevelSetDomain, y, R: float, eps: float, kappa: float):
    """Value, gradient and Hessian of

        phi~ = phi+ (1 - step(|y| - R - 1)) + step(|y| - R)
        psi  = phi~ + kappa |y| step(phi~ / eps)

    The positive part is taken on {phi >= 0}, so on the boundary the
    gradient and Hessian are the one-sided limits from outside.
    """
    y = np.asarray(y, dtype=float)
    shape = y.shape[:-1]
    d = y.shape[-1]
    yf = y.reshape(-1, d)
    m = len(yf)
    r = np.linalg.norm(yf, axis=-1)
    rs = np.where(r > 0, r, 1.0)
    er = yf / rs[:, None]
    eye = np.eye(d)
    perp = (eye - er[:, :, None] * er[:, None, :]) / rs[:, None, None]

    # phi is only needed where the cut-off leaves it alive
    ph = np.zeros(m)
    gph = np.zeros((m, d))
    Hph = np.zeros((m, d, d))
    near = r < R + 2.0
    if np.any(near):
        v, g, H = domain.jet(yf[near])
        pos = v >= 0
        idx = np.flatnonzero(near)[pos]
        ph[idx], gph[idx], Hph[idx] = v[pos], g[pos], H[pos]

    ta, ta1, ta2 = smoothstep_jet(r - R - 1.0)
    a = 1.0 - ta
    ga = -ta1[:, None] * er
    Ha = -(ta2[:, None, None] * er[:, :, None] * er[:, None, :] + ta1[:, None, None] * perp)
    b, b1, b2 = smoothstep_jet(r - R)
    gb = b1[:, None] * er
    Hb = b2[:, None, None] * er[:, :, None] * er[:, None, :] + b1[:, None, None] * perp

    pt = ph * a + b
    gpt = a[:, None] * gph + ph[:, None] * ga + gb
    Hpt = (a[:, None, None] * Hph + gph[:, :, None] * ga[:, None, :] + ga[:, :, None] * gph[:, None, :]
           + ph[:, None, None] * Ha + Hb)

    s, s1, s2 = smoothstep_jet(pt / eps)
    s1, s2 = s1 / eps, s2 / eps**2
    psi = pt + kappa * r * s
    gpsi = gpt + kappa * (s[:, None] * er + (r * s1)[:, None] * gpt)
    outer = lambda u, w: u[:, :, None] * w[:, None, :]  # noqa: E731
    Hpsi = Hpt + kappa * (s[:, None, None] * perp
                          + s1[:, None, None] * (outer(er, gpt) + outer(gpt, er))
                          + (r * s2)[:, None, None] * outer(gpt, gpt)
                          + (r * s1)[:, None, None] * Hpt)
    return psi.reshape(shape), gpsi.reshape(shape + (d,)), Hpsi.reshape(shape + (d, d))


@dataclass(frozen=True)
class PseudoDistance:
    """psi with its certified parameters and sampled constants.

    ``c_low``/``c_high`` bound psi / d(., D) on the verification band and
    ``margin`` is the sampled infimum of grad phi_C . grad psi off D.
    """

    domain: LevelSetDomain
    core: ConvexCore
    R: float
    eps: float
    kappa: float
    margin: float = float("nan")
    c_low: float = float("nan")
    c_high: float = float("nan")
    grad_floor: float = float("nan")
    checks: dict = field(default_factory=dict, repr=False, compare=False)

    def jet(self, y):
        return psi_jet(self.domain, y, self.R, self.eps, self.kappa)

    def psi(self, y):
        return self.jet(y)[0]

    def grad_psi(self, y):
        return self.jet(y)[1]

    def hess_psi(self, y):
        return self.jet(y)[2]

    def big_psi(self, y):
        """Psi(y) = psi(y) grad psi(y)."""
        v, g, _ = self.jet(y)
        return v[..., None] * g


def outward_normal(domain: LevelSetDomain, pseudo: PseudoDistance, y,
                   boundary_tol: float = BOUNDARY_TOL):
    """Unit normal grad psi / |grad psi| off D, zero inside D.

    Points with |phi| <= boundary_tol count as boundary points, where the
    normal is grad phi / |grad phi|.
    """
    y = np.asarray(y, dtype=float)
    yf = y.reshape(-1, y.shape[-1])
    v, g, _ = domain.jet(yf)
    out = np.zeros_like(yf)
    mask = v >= -boundary_tol
    if np.any(mask):
        gp = pseudo.grad_psi(yf[mask])
        on = np.abs(v[mask]) <= boundary_tol
        gp = np.where(on[:, None], g[mask], gp)
        nrm = np.linalg.norm(gp, axis=-1)
        floor = pseudo.grad_floor if np.isfinite(pseudo.grad_floor) else 0.0
        if np.any(nrm < max(0.5 * floor, 1e-12)):
            raise DegenerateGradient(f"|grad psi| = {nrm.min():.3g} off D")
        out[mask] = gp / nrm[:, None]
    return out.reshape(y.shape)


def _exterior_samples(domain, n, R, rng, boundary):
    d = domain.dim
    parts = [sample_exterior_band(domain, n, w, rng, boundary=boundary) for w in (1e-3, 0.05, 0.5)]
    # shell samples covering the cut-off regions out to R + 3
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    rad = rng.uniform(0.0, R + 3.0, size=n)
    parts.append(u * rad[:, None])
    y = np.concatenate(parts)
    return y[domain.phi(y) > 0]


def build_pseudo_distance(domain: LevelSetDomain, core: ConvexCore, n_samples: int = 4000,
                          max_halvings: int = 20, max_doublings: int = 20,
                          margin_target: float = 1e-3, seed: int = 0) -> PseudoDistance:
    """Search (R, eps, kappa) and certify the pseudo-distance on samples.

    R = bounding_radius + 1; eps is halved from 1 until every sampled y
    off D with phi(y) <= eps lies in B_R and has grad phi_C . grad phi > 0;
    kappa is doubled from 1 until grad phi_C . grad psi >= margin_target
    on every exterior sample.
    """
    rng = np.random.default_rng(seed)
    R = domain.bounding_radius + 1.0
    bnd = sample_boundary(domain, n_samples, rng)
    if len(bnd) == 0:
        raise ParameterSearchFailed("no boundary samples")
    ext = _exterior_samples(domain, n_samples, R, rng, bnd)
    v_ext, g_ext, _ = domain.jet(ext)
    gc_ext = core.grad_phi_c(ext)
    r_ext = np.linalg.norm(ext, axis=-1)

    eps = 1.0
    for _ in range(max_halvings):
        sel = (v_ext <= eps) & (r_ext < R + 1)
        ok = np.all(r_ext[sel] < R) and np.all(np.einsum("ij,ij->i", gc_ext[sel], g_ext[sel]) > 0)
        if ok and eps < 1.0:
            break
        eps /= 2
    else:
        raise ParameterSearchFailed("no eps found: grad phi_C . grad phi <= 0 arbitrarily close to D")

    kappa = 1.0
    for _ in range(max_doublings):
        _, gpsi, _ = psi_jet(domain, ext, R, eps, kappa)
        margin = float(np.min(np.einsum("ij,ij->i", gc_ext, gpsi)))
        if margin >= margin_target:
            break
        kappa *= 2
    else:
        raise ParameterSearchFailed(f"kappa search exhausted (margin {margin:.3g}); "
                                    "the core likely does not see all of the boundary")
    log.info("pseudo-distance: R=%g eps=%g kappa=%g margin=%g", R, eps, kappa, margin)

    psi, gpsi, _ = psi_jet(domain, ext, R, eps, kappa)
    grad_floor = float(np.min(np.linalg.norm(gpsi, axis=-1)))
    band = ext[v_ext <= 0.5]
    band = band[domain.phi(band) > 1e-9]
    dist = distance_to_domain(domain, band)
    ratio = psi_jet(domain, band, R, eps, kappa)[0] / dist
    # boundary consistency: psi = phi, grad psi = grad phi, hess psi = hess phi
    pb, gb, Hb = psi_jet(domain, bnd, R, eps, kappa)
    vb, gpb, Hpb = domain.jet(bnd)
    on = vb >= 0
    checks = {
        "boundary_value": float(np.max(np.abs(pb))),
        "boundary_grad": float(np.max(np.abs(gb[on] - gpb[on]), initial=0.0)),
        "boundary_hess": float(np.max(np.abs(Hb[on] - Hpb[on]), initial=0.0)),
        "n_exterior": int(len(ext)),
        "n_boundary": int(len(bnd)),
    }
    return PseudoDistance(domain, core, R, eps, kappa, margin=margin,
                          c_low=float(ratio.min()), c_high=float(ratio.max()),
                          grad_floor=grad_floor, checks=checks)
