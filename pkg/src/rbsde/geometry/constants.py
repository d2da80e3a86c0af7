"""Geometric constants and checkers: exterior-sphere radius R0, the
visibility constant gamma, the four smallness cases, and the
quasi-convexity constant of psi^2."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from ..errors import CaseInapplicable, EmptyBoundarySample, VerificationFailed
from .levelset import (ConvexCore, LevelSetDomain, project, sample_boundary,
                       sample_exterior_band, sample_interior)
from .pseudo import PseudoDistance

R0_CAP = 10.0


def _unit(g):
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def tangential_curvature(domain: LevelSetDomain, x):
    """Smallest principal curvature (outward normal convention: convex > 0)
    of the level set through each point x."""
    _, g, H = domain.jet(x)
    gn = np.linalg.norm(g, axis=-1)
    n = g / gn[:, None]
    d = x.shape[-1]
    P = np.eye(d) - n[:, :, None] * n[:, None, :]
    S = P @ H @ P / gn[:, None, None]
    # push the normal direction out of the way before taking the minimum
    S = S + 1e6 * n[:, :, None] * n[:, None, :]
    return np.linalg.eigvalsh(S)[:, 0]


def exterior_sphere_violation(domain: LevelSetDomain, y, y2, r0: float):
    """max(0, -[(y - y').n(y) + |y - y'|^2 / (2 R0)]) per pair."""
    n = _unit(domain.grad_phi(y))
    diff = y - y2
    val = np.einsum("ij,ij->i", diff, n) + np.einsum("ij,ij->i", diff, diff) / (2 * r0)
    return np.maximum(-val, 0.0)


def _pairs(domain, n_pairs, rng, boundary, normals):
    """Index of boundary points y and closure points y'.

    Two fifths of the y' are boundary neighbours of y (where the inequality
    is tight), two fifths are boundary points pushed inward along -n by up
    to the domain diameter (kept if inside), the rest are random boundary
    points.
    """
    nb = len(boundary)
    iy = rng.integers(0, nb, size=n_pairs)
    n_loc = 2 * n_pairs // 5
    tree = cKDTree(boundary)
    k = min(16, nb)
    _, nbr = tree.query(boundary[iy[:n_loc]], k=k)
    local = boundary[nbr[np.arange(n_loc), rng.integers(1, k, size=n_loc)]] if k > 1 \
        else boundary[iy[:n_loc]]
    n_in = 2 * n_pairs // 5
    inward = np.empty((0, boundary.shape[1]))
    diam = 2 * domain.bounding_radius
    for _ in range(20):
        m = int(1.3 * (n_in - len(inward))) + 16
        ib = rng.integers(0, nb, size=m)
        depth = diam * rng.uniform(0, 1, size=m) ** 2
        cand = boundary[ib] - depth[:, None] * normals[ib]
        inward = np.concatenate([inward, cand[domain.phi(cand) <= 0]])
        if len(inward) >= n_in:
            break
    inward = inward[:n_in]
    rest = boundary[rng.integers(0, nb, size=n_pairs - n_loc - len(inward))]
    return iy, np.concatenate([local, inward, rest])


def verify_exterior_sphere(domain: LevelSetDomain, r0: float, n_pairs: int = 100_000,
                           tol: float = 1e-10, seed: int = 0, boundary=None):
    """Worst violation over sampled pairs; returns (worst, (y, y'))."""
    rng = np.random.default_rng(seed)
    if boundary is None:
        boundary = sample_boundary(domain, 20000, rng, band=1e-12)
    normals = _unit(domain.grad_phi(boundary))
    iy, y2 = _pairs(domain, n_pairs, rng, boundary, normals)
    y = boundary[iy]
    diff = y - y2
    val = np.einsum("ij,ij->i", diff, normals[iy]) + np.einsum("ij,ij->i", diff, diff) / (2 * r0)
    viol = np.maximum(-val, 0.0)
    j = int(np.argmax(viol))
    return float(viol[j]), (y[j], y2[j])


def estimate_r0(domain: LevelSetDomain, n_samples: int = 100_000, cap: float = R0_CAP,
                tol: float = 1e-10, seed: int = 0, n_boundary: int = 20000) -> float:
    """Exterior-sphere radius from the largest sampled concave curvature,
    then verified on ``n_samples`` pairs.

    Only the concave part of the curvature limits R0, so the bound is
    1 / sup max(-kappa_min, 0); convex domains get ``cap``.
    """
    rng = np.random.default_rng(seed)
    bnd = sample_boundary(domain, n_boundary, rng, band=1e-12)
    if len(bnd) == 0:
        raise EmptyBoundarySample("no boundary samples for R0")
    kmin = tangential_curvature(domain, bnd)
    worst = float(max(-kmin.min(), 0.0))
    r0 = cap if worst * cap <= 1.0 else 1.0 / worst
    viol, pair = verify_exterior_sphere(domain, r0, n_samples, tol, seed + 1, boundary=bnd)
    if viol > tol:
        raise VerificationFailed(f"exterior-sphere inequality violated by {viol:.3g} with R0={r0:.6g}",
                                 worst=pair)
    return r0


def _as_points(boundary_subset, n, rng):
    if boundary_subset is None:
        return None
    if callable(boundary_subset):
        try:
            return np.asarray(boundary_subset(n), dtype=float)
        except TypeError:
            return np.asarray(boundary_subset(), dtype=float)
    return np.asarray(boundary_subset, dtype=float)


def _visibility(domain, core, x):
    g = domain.grad_phi(x)
    return np.einsum("ij,ij->i", core.grad_phi_c(x), _unit(g))


def compute_gamma(domain: LevelSetDomain, core: ConvexCore,
                  boundary_subset: Union[None, np.ndarray, Callable] = None,
                  n_samples: int = 20000, seed: int = 0, refine: int = 8) -> float:
    """gamma = inf over boundary of grad phi_C . grad phi / |grad phi|.

    The sampled minimum is refined by a shrinking tangential pattern search
    from the worst samples (each trial point is re-projected onto the
    boundary).  With ``boundary_subset`` only those points are used.
    """
    rng = np.random.default_rng(seed)
    pts = _as_points(boundary_subset, n_samples, rng)
    subset = pts is not None
    if not subset:
        pts = sample_boundary(domain, n_samples, rng, band=1e-12)
    if len(pts) == 0:
        raise EmptyBoundarySample("no boundary points to evaluate gamma on")
    vals = _visibility(domain, core, pts)
    best = float(vals.min())
    if subset or refine == 0:
        return best
    spacing = 4.0 * domain.bounding_radius / np.sqrt(len(pts)) if domain.dim > 2 else \
        2.0 * np.pi * domain.bounding_radius / len(pts)
    for j in np.argsort(vals)[:refine]:
        x, v, h = pts[j], vals[j], spacing
        while h > 1e-9:
            n = _unit(domain.grad_phi(x[None]))[0]
            dirs = rng.normal(size=(8, domain.dim))
            dirs -= np.outer(dirs @ n, n)
            dirs = _unit(dirs)
            trial = project_to_boundary(domain, x + h * dirs)
            tv = _visibility(domain, core, trial)
            k = int(np.argmin(tv))
            if tv[k] < v:
                x, v = trial[k], tv[k]
            else:
                h /= 2
        best = min(best, float(v))
    return best


def project_to_boundary(domain, y, iters: int = 30):
    """Newton steps along grad phi onto {phi = 0} (not a closest point)."""
    y = np.array(y, dtype=float)
    for _ in range(iters):
        v, g, _ = domain.jet(y)
        y = y - (v / np.einsum("ij,ij->i", g, g))[:, None] * g
        if np.max(np.abs(v)) < 1e-14:
            break
    return y


@dataclass
class GeometryReport:
    gamma: float
    r0: float
    smallness_case: str = "none"
    theta: float = 1.0
    margins: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    requested_case: Optional[str] = None

    @property
    def admissible(self) -> bool:
        return self.gamma > 0 and self.r0 > 0

    @property
    def smallness_pass(self) -> bool:
        return self.smallness_case != "none"

    def to_dict(self):
        d = asdict(self)
        d["admissible"] = self.admissible
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


_CASES = {"I": "I", "i": "I", "1": "I", "II": "II", "ii": "II", "2": "II",
          "III": "III", "iii": "III", "3": "III", "IV": "IV", "iv": "IV", "4": "IV"}


def check_smallness(domain: LevelSetDomain, core: ConvexCore, xi_bound: Optional[float],
                    f_sign_ok: bool, theta: float, case: str, *, gamma: float, r0: float,
                    n_samples: int = 20000, seed: int = 0) -> GeometryReport:
    """Evaluate one case of the smallness assumption.

    (I)   ||phi_C^+(xi)||_inf < gamma R0 / theta, with the generator sign condition
    (II)  sup_D phi_C^+ < gamma R0 / theta
    (III) ball core of radius lam: ||xi||_inf^2 < lam^2 + 2 R0^2 / theta, with sign condition
    (IV)  ball core: sup_D |x|^2 < lam^2 + 2 R0^2 / theta

    ``xi_bound`` is ||phi_C^+(xi)||_inf for case I and ||xi||_inf for case III.
    Suprema over D are sampled (interior plus boundary points).
    """
    if theta < 1:
        raise ValueError("theta must be >= 1")
    key = _CASES.get(str(case))
    if key is None:
        raise CaseInapplicable(f"unknown smallness case {case!r}")
    if key in ("III", "IV") and core.ball_radius is None:
        raise CaseInapplicable(f"case {key} needs a ball core centred at the origin")
    if key in ("I", "III") and xi_bound is None:
        raise CaseInapplicable(f"case {key} needs a bound on the terminal condition")
    rhs_gamma = gamma * r0 / theta
    margins: dict = {}
    samples: dict = {}
    ok_sign = bool(f_sign_ok)
    if key in ("II", "IV"):
        rng = np.random.default_rng(seed)
        pts = np.concatenate([sample_interior(domain, n_samples, rng),
                              sample_boundary(domain, n_samples // 4, rng)])
        samples["domain_points"] = int(len(pts))
    if key == "I":
        margins["bound"] = rhs_gamma
        margins["lhs"] = float(xi_bound)
        margins["case_I"] = rhs_gamma - float(xi_bound)
        ok = margins["case_I"] > 0 and ok_sign
    elif key == "II":
        sup = float(np.max(np.maximum(core.phi_c(pts), 0.0)))
        margins.update(bound=rhs_gamma, lhs=sup, case_II=rhs_gamma - sup)
        ok = margins["case_II"] > 0
    else:
        lam = core.ball_radius
        bound = lam**2 + 2 * r0**2 / theta
        if key == "III":
            lhs = float(xi_bound) ** 2
            ok_extra = ok_sign
        else:
            lhs = float(np.max(np.einsum("ij,ij->i", pts, pts)))
            ok_extra = True
        margins.update(bound=bound, lhs=lhs)
        margins[f"case_{key}"] = bound - lhs
        ok = margins[f"case_{key}"] > 0 and ok_extra
    margins["generator_sign_ok"] = ok_sign
    return GeometryReport(gamma=float(gamma), r0=float(r0), smallness_case=key if ok else "none",
                          theta=float(theta), margins=margins, samples=samples, requested_case=key)


def check_hessian_psi_sq(pseudo: PseudoDistance, n_samples: int = 4000, width: float = 0.2,
                         seed: int = 0) -> float:
    """Smallest C with z' Hess(psi^2)(y) z >= -C psi(y) |z|^2 on samples off D.

    The inner minimum over z is exact (smallest eigenvalue), so the sample
    only ranges over y.
    """
    rng = np.random.default_rng(seed)
    y = sample_exterior_band(pseudo.domain, n_samples, width, rng)
    psi, g, H = pseudo.jet(y)
    keep = psi > 1e-12
    if not np.any(keep):
        return float("inf")
    psi, g, H = psi[keep], g[keep], H[keep]
    M = 2 * g[:, :, None] * g[:, None, :] + 2 * psi[:, None, None] * H
    lam = np.linalg.eigvalsh(M)[:, 0]
    return float(max(0.0, np.max(-lam / psi)))


# ---------------------------------------------------------------------------
# domain / core invariants
# ---------------------------------------------------------------------------

def core_as_domain(core: ConvexCore, dim: int, radius: float) -> LevelSetDomain:
    hess = core.hess_phi_c or (lambda y: np.zeros(np.shape(y) + (np.shape(y)[-1],)))
    return LevelSetDomain(dim=dim, phi=core.phi_c, grad_phi=core.grad_phi_c, hess_phi=hess,
                          bounding_radius=radius, grad_floor=1.0, name=core.name)


def check_core(core: ConvexCore, domain: LevelSetDomain, n: int = 2000, seed: int = 0,
               tol: float = 1e-8):
    """Sampled convex-core invariants.  Returns a dict of worst violations:
    origin value, midpoint convexity, outside-distance identity and
    containment C in D."""
    rng = np.random.default_rng(seed)
    d = domain.dim
    rb = domain.bounding_radius
    x = rng.uniform(-rb, rb, size=(n, d))
    y = rng.uniform(-rb, rb, size=(n, d))
    mid = core.phi_c((x + y) / 2) - (core.phi_c(x) + core.phi_c(y)) / 2
    cdom = core_as_domain(core, d, rb)
    out = x[core.phi_c(x) > 1e-3]
    p = project(cdom, out)
    dist_err = np.abs(core.phi_c(out) - np.linalg.norm(out - p, axis=-1))
    inside_c = sample_interior(cdom, n, rng)
    return {
        "phi_c_origin": float(core.phi_c(np.zeros(d))),
        "midpoint_convexity": float(max(mid.max(), 0.0)),
        "distance_identity": float(dist_err.max()) if len(out) else 0.0,
        "core_outside_domain": float(max(domain.phi(inside_c).max(), 0.0)),
    }
