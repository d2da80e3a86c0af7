"""Circle Gamma-martingale oracle and the checker battery run against solver
output: Skorokhod inequality, Var(K) domination, distance rate, Hoelder
uniformity, stability, exponential moments and the Gamma-martingale identity.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InsufficientData
from .geometry.levelset import project
from .geometry.pseudo import PseudoDistance, outward_normal
from .lattice import BrownianLattice, PathBatch, conditional_expectation
from .solver import (Generator, PenalizationConfig, ReflectedSolution, SolverField, extract_k_path,
                     holder_quotient, solve_penalized, zero_generator)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _clean(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst: float
    tolerance: float
    samples: int = 0
    fitted: dict = field(default_factory=dict)

    def to_dict(self):
        return _clean(asdict(self))

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _report(name, worst, tol, samples, fitted=None, passed=None):
    worst = float(worst)
    ok = bool(worst <= tol) if passed is None else bool(passed)
    return CheckReport(name, ok, worst, float(tol), int(samples), dict(fitted or {}))


# ---------------------------------------------------------------------------
# terminal functionals of W_T
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Terminal:
    """nu as a function of the last lattice move.

    ``fn(w_prev, w_T)`` returns nu; Markovian terminals ignore ``w_prev``.
    A terminal that needs ``w_prev`` only does so to break ties.
    """

    fn: Callable
    markov: bool = True
    name: str = "terminal"
    bound: float = float("inf")

    def at(self, w_T, w_prev=None):
        return np.asarray(self.fn(w_prev, w_T), dtype=float)

    def children(self, lattice: BrownianLattice):
        """nu on the two children of every step N-1 node, shape (N, 2)."""
        N, s = lattice.N, lattice.sqrt_dt
        wp = lattice.w_axis(N - 1)
        return np.stack([self.at(wp - s, wp), self.at(wp + s, wp)], axis=-1)


def smooth_terminal(alpha: float) -> Terminal:
    """nu = alpha (2 Phi(W_T) - 1) with Phi the standard normal cdf."""
    return Terminal(lambda wp, w: alpha * (2.0 * ndtr(w) - 1.0), True, "smooth_cdf", alpha)


def sign_terminal(alpha: float) -> Terminal:
    """nu = alpha sign(W_T); on W_T = 0 (even N) the sign of the last move is used,
    so |nu| = alpha on every path."""
    def fn(wp, w):
        s = np.sign(w)
        if wp is not None:
            s = np.where(s == 0, np.sign(w - wp), s)
        return alpha * s
    return Terminal(fn, False, "sign", alpha)


def constant_terminal(c: float) -> Terminal:
    return Terminal(lambda wp, w: np.full(np.shape(w), float(c)), True, "constant", abs(c))


def arc_point_pair(alpha: float, p_up: float = 0.5) -> Terminal:
    """Two-valued nu in {-alpha, alpha}: alpha when W_T lies above the
    (1 - p_up) normal quantile, with the sign tie rule at W_T = 0."""
    from scipy.special import ndtri
    q = float(ndtri(1.0 - p_up)) if 0 < p_up < 1 else (-np.inf if p_up >= 1 else np.inf)

    def fn(wp, w):
        s = np.where(w > q, 1.0, np.where(w < q, -1.0, 0.0))
        if wp is not None:
            s = np.where(s == 0, np.sign(w - wp), s)
        return alpha * s
    return Terminal(fn, q != 0.0, "arc_point_pair", alpha)


# ---------------------------------------------------------------------------
# circle oracle
# ---------------------------------------------------------------------------

@dataclass
class CircleOracle:
    """theta_k = E_k[nu] on the lattice (d' = 1), eta_k its Z-projection.

    Fields are lists over k = 0..N-1 of arrays over the k+1 nodes;
    ``theta_children`` holds nu on both children of each step N-1 node.
    ``Y``/``Z`` live in the circle frame; ``expected_var`` is
    E[int dVar] = (E[nu^2] - E[nu]^2) / 2 and ``var_field[k]`` is
    E_k[int_{t_k}^T dVar] by backward induction.
    """

    alpha: float
    terminal: Terminal
    lattice: BrownianLattice
    theta: list
    eta: list
    theta_children: np.ndarray
    var_field: list
    expected_var: float
    closed_form_var: float

    def Y(self, k):
        th = self.theta[k]
        return np.stack([np.cos(th), np.sin(th)], -1)

    def Z(self, k):
        th, e = self.theta[k], self.eta[k]
        return (e[:, None] * np.stack([-np.sin(th), np.cos(th)], -1))[..., None]

    def dvar(self, k):
        return 0.5 * self.eta[k] ** 2 * self.lattice.dt

    def y_terminal(self):
        """nu at step N on the Markov grid (None when nu depends on the last move)."""
        if not self.terminal.markov:
            return None
        return self.terminal.at(self.lattice.w_axis(self.lattice.N))

    def theta_paths(self, paths: PathBatch):
        """theta along sampled paths, shape (P, N+1)."""
        N = self.lattice.N
        nodes = paths.nodes[:, :, 0]
        th = np.empty((paths.count, N + 1))
        for k in range(N):
            th[:, k] = self.theta[k][nodes[:, k]]
        up = paths.increments[:, N - 1, 0] > 0
        th[:, N] = self.theta_children[nodes[:, N - 1], up.astype(int)]
        return th

    def path_quantities(self, paths: PathBatch):
        """Circle-frame Y (P, N+1, 2), Z (P, N, 2, 1), dVar (P, N) and
        lattice reflection increments dK = E_k[Y_{k+1}] - Y_k (P, N, 2)."""
        if paths.lattice != self.lattice:
            from .errors import LatticeMismatch
            raise LatticeMismatch("paths were sampled on a different lattice")
        N = self.lattice.N
        th = self.theta_paths(paths)
        Y = np.stack([np.cos(th), np.sin(th)], -1)
        nodes = paths.nodes[:, :N, 0]
        eta = np.stack([self.eta[k][nodes[:, k]] for k in range(N)], axis=1)
        thk = th[:, :N]
        Z = (eta[..., None] * np.stack([-np.sin(thk), np.cos(thk)], -1))[..., None]
        dvar = 0.5 * eta ** 2 * self.lattice.dt
        h = eta * self.lattice.sqrt_dt
        dK = (np.cos(h) - 1.0)[..., None] * Y[:, :N]
        return Y, Z, dvar, dK

    def var_paths(self, paths: PathBatch):
        """Var_T = sum_k eta_k^2 dt / 2 along each path, without materializing Y or Z."""
        if paths.lattice != self.lattice:
            from .errors import LatticeMismatch
            raise LatticeMismatch("paths were sampled on a different lattice")
        out = np.zeros(paths.count)
        for k in range(self.lattice.N):
            out += self.eta[k][paths.nodes[:, k, 0]] ** 2
        return 0.5 * self.lattice.dt * out

    def var_bound(self):
        """Deterministic lattice bound max over paths of Var_T."""
        b = np.zeros(self.lattice.N)
        for k in range(self.lattice.N - 1, -1, -1):
            nxt = np.maximum(b[:-1], b[1:]) if k < self.lattice.N - 1 else np.zeros(k + 1)
            b = nxt + self.dvar(k)
        return float(b[0])


def circle_oracle(alpha: float, nu: Terminal, lattice: BrownianLattice) -> CircleOracle:
    if not 0 < alpha < np.pi / 2:
        raise ValueError("alpha must lie in (0, pi/2)")
    if lattice.dprime != 1:
        raise ValueError("the circle oracle is driven by a single Brownian motion")
    N = lattice.N
    ch = nu.children(lattice)
    theta = [None] * N
    eta = [None] * N
    theta[N - 1] = ch.mean(axis=-1)
    eta[N - 1] = (ch[:, 1] - ch[:, 0]) / (2 * lattice.sqrt_dt)
    for k in range(N - 2, -1, -1):
        nxt = theta[k + 1]
        theta[k] = 0.5 * (nxt[:-1] + nxt[1:])
        eta[k] = (nxt[1:] - nxt[:-1]) / (2 * lattice.sqrt_dt)
    var = [None] * N
    acc = np.zeros(N)
    for k in range(N - 1, -1, -1):
        nxt = acc if k == N - 1 else conditional_expectation(lattice, acc)
        acc = nxt + 0.5 * eta[k] ** 2 * lattice.dt
        var[k] = acc
    # closed form: second and first moments of nu by exact weights over children
    from scipy.stats import binom
    wts = binom.pmf(np.arange(N), N - 1, 0.5)
    m1 = float(np.sum(wts * ch.mean(-1)))
    m2 = float(np.sum(wts * (ch ** 2).mean(-1)))
    out = CircleOracle(alpha, nu, lattice, theta, eta, ch, var, float(var[0][0]), 0.5 * (m2 - m1 ** 2))
    return out


def oracle_in_sector(oracle: CircleOracle, sector, k: int):
    """Oracle Y (nodes, 2) and Z (nodes, 2, 1) at step k in the sector frame."""
    Y = sector.from_circle_frame(oracle.Y(k))
    Z = sector.vector_from_circle_frame(oracle.Z(k))
    return Y, Z


def oracle_field_error(oracle: CircleOracle, sector, fields: SolverField) -> float:
    """sup over nodes k < N of |Y_solver - Y_oracle| in the sector frame."""
    err = 0.0
    for k in range(oracle.lattice.N):
        Y, _ = oracle_in_sector(oracle, sector, k)
        err = max(err, float(np.max(np.linalg.norm(fields.Y[k] - Y, axis=-1))))
    return err


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def _test_processes(domain, core, paths, count, seed, center, batch=16):
    """OU-type adapted processes pulled toward ``center``, driven by the
    path's own increments through a random mixing matrix per process, and
    mapped into the closed domain by closest-point projection.  Yields
    batches of shape (b, P, N, d)."""
    rng = np.random.default_rng(seed)
    P, N, dp = paths.increments.shape
    d = domain.dim
    dt = paths.lattice.dt
    dW = paths.increments.astype(float) * paths.lattice.sqrt_dt
    for lo in range(0, count, batch):
        b = min(batch, count - lo)
        lam = rng.uniform(0.5, 4.0, size=b)
        B = rng.normal(size=(b, d, dp)) * rng.uniform(0.1, 1.0, size=b)[:, None, None]
        v = np.broadcast_to((center + 0.5 * rng.normal(size=(b, d)))[:, None, :], (b, P, d)).copy()
        V = np.empty((b, P, N, d))
        for k in range(N):
            V[:, :, k] = v
            v = v + lam[:, None, None] * (center - v) * dt + np.einsum("bij,pj->bpi", B, dW[:, k])
        flat = V.reshape(-1, d)
        # points inside the convex core are inside D; project only the rest
        out = core.phi_c(flat) > 0
        flat[out] = project(domain, flat[out])
        yield V


def check_skorokhod(solution: ReflectedSolution, pseudo: PseudoDistance, r0: float,
                    n_test_processes: int = 200, seed: int = 0, tol: float = 1e-6,
                    center=None, adversarial: Sequence[float] = (0.1, 0.5, 1.0),
                    max_paths: Optional[int] = 200) -> CheckReport:
    """sum_k (Y_k - V_k).dK_k + c |Y_k - V_k|^2 n(Y_k).dK_k >= -tol, c = 1/(2 R0),
    for OU-type test processes V inside the closed domain and for V obtained
    by pushing Y inward along -n and projecting."""
    domain = pseudo.domain
    c = 1.0 / (2.0 * r0)
    m = solution.paths.count if max_paths is None else min(max_paths, solution.paths.count)
    Y = solution.Y[:m, :-1]
    dK = solution.dK[:m]
    paths = solution.paths
    paths = PathBatch(paths.lattice, paths.seed, paths.increments[:m], paths.nodes[:m])
    P, N, d = Y.shape
    nrm = outward_normal(domain, pseudo, Y.reshape(-1, d)).reshape(P, N, d)
    ndk = np.einsum("pki,pki->pk", nrm, dK)
    center = np.zeros(d) if center is None else np.asarray(center, float)

    def total(V):
        diff = Y - V
        return np.sum(np.einsum("pki,pki->pk", diff, dK) + c * np.einsum("pki,pki->pk", diff, diff) * ndk,
                      axis=1)

    worst = np.inf
    count = 0
    for Vb in _test_processes(domain, pseudo.core, paths, n_test_processes, seed, center):
        for V in Vb:
            worst = min(worst, float(total(V).min()))
            count += 1
    for s in adversarial:
        V = project(domain, (Y - s * nrm).reshape(-1, d)).reshape(P, N, d)
        worst = min(worst, float(total(V).min()))
        count += 1
    self_test = float(np.max(np.abs(total(Y))))
    worst = min(worst, 0.0) if count else 0.0
    return _report("skorokhod", max(0.0, -worst), tol, count * P,
                   {"c": c, "self_test": self_test, "n_processes": count, "n_paths": P})


def boundary_band(pseudo: PseudoDistance, fields: SolverField, factor: float = 10.0) -> float:
    """10 x the final-n distance bound (sup over nodes of d(Y, D))."""
    from .geometry.levelset import distance_to_domain
    return factor * float(np.max(distance_to_domain(pseudo.domain, fields.stack_nodes())))


def check_var_domination(solution: ReflectedSolution, pseudo: PseudoDistance, r0: float,
                         F: Optional[Generator] = None, band: Optional[float] = None,
                         rel_slack: float = 0.05, equality: bool = False) -> CheckReport:
    """dVar <= 1_boundary([n.f]+ + |Z|^2/(2 R0)) dt per step.

    Violations are normalized per path by sum_k |Z_k|^2 dt.  With
    ``equality`` the absolute deviation |dVar - rhs| is gated instead (the
    equality case of a Gamma-martingale on a sphere of radius R0).
    """
    F = F or zero_generator()
    dt = solution.fields.lattice.dt
    Y = solution.Y[:, :-1]
    P, N, d = Y.shape
    if band is None:
        band = boundary_band(pseudo, solution.fields)
    psi = pseudo.psi(Y.reshape(-1, d)).reshape(P, N)
    on = psi <= band
    nrm = outward_normal(pseudo.domain, pseudo, Y.reshape(-1, d)).reshape(P, N, d)
    nf = np.maximum(np.einsum("pki,pki->pk", nrm, solution.F), 0.0)
    zsq = np.einsum("pkij,pkij->pk", solution.Z, solution.Z)
    rhs = on * (nf + zsq / (2.0 * r0)) * dt
    dvar = solution.dvar
    gap = np.abs(dvar - rhs) if equality else np.maximum(dvar - rhs, 0.0)
    scale = np.sum(zsq, axis=1) * dt
    scale = np.where(scale > 0, scale, 1.0)
    ratio = gap / scale[:, None]
    return _report("var_domination_equality" if equality else "var_domination", ratio.max(initial=0.0),
                   rel_slack, P * N, {"band": band, "boundary_fraction": float(on.mean()),
                                      "max_abs_gap": float(gap.max(initial=0.0))})


def check_distance_rate(table, gate: float = -0.8, drop_smallest: int = 1,
                        column: str = "sup_dist") -> CheckReport:
    """OLS slope of log sup_dist against log n, smallest n discarded."""
    rows = sorted(table, key=lambda r: r["n"])
    if len(rows) < 5:
        raise InsufficientData(f"distance-rate fit needs >= 5 values of n, got {len(rows)}")
    rows = rows[drop_smallest:]
    n = np.array([r["n"] for r in rows], float)
    dist = np.array([r[column] for r in rows], float)
    if np.any(dist <= 0):
        raise InsufficientData("non-positive distances cannot be fitted on a log scale")
    slope, icpt = np.polyfit(np.log(n), np.log(dist), 1)
    return _report("distance_rate", slope, gate, len(rows), {"slope": float(slope), "intercept": float(icpt)})


def check_holder(fields_by_n, alpha_prime: float = 0.5, ratio_tol: float = 2.0,
                 max_points: int = 1500) -> CheckReport:
    """max/min over n of the discrete Hoelder quotient."""
    items = sorted(fields_by_n.items()) if isinstance(fields_by_n, dict) else list(enumerate(fields_by_n))
    if len(items) < 3:
        raise InsufficientData("Hoelder check needs fields at >= 3 values of n")
    q = {int(n): holder_quotient(f, alpha_prime, max_points) for n, f in items}
    vals = np.array(list(q.values()))
    ratio = 1.0 if vals.max() == 0 else (np.inf if vals.min() == 0 else vals.max() / vals.min())
    return _report("holder", ratio, ratio_tol, len(vals), {"quotients": q})


def _lattice_norms(a: ReflectedSolution, b: ReflectedSolution):
    dt = a.fields.lattice.dt
    dy = np.sqrt(np.mean(np.max(np.sum((a.Y - b.Y) ** 2, -1), 1)))
    dz = np.sqrt(np.mean(np.sum((a.Z - b.Z) ** 2, axis=(-2, -1)).sum(1) * dt))
    dk = np.sqrt(np.mean(np.max(np.sum((a.K - b.K) ** 2, -1), 1)))
    return float(dy), float(dz), float(dk)


def stability_experiment(pseudo: PseudoDistance, make_terminal: Callable, lattice: BrownianLattice,
                         config: PenalizationConfig, paths: PathBatch, deltas: Sequence[float],
                         F: Optional[Generator] = None, diffusion=None) -> CheckReport:
    """Solve with terminal ``make_terminal(delta)`` for each delta and compare
    with delta = 0 in lattice S^2 / H^2 norms along the sampled paths.

    Passes when the combined error strictly decreases as delta decreases and
    the delta = 0 re-solve reproduces the base within 2 picard_tol N.
    """
    F = F or zero_generator()
    base_f = solve_penalized(pseudo, make_terminal(0.0), F, diffusion, lattice, config)
    base = extract_k_path(base_f, paths, pseudo, F)
    again = extract_k_path(solve_penalized(pseudo, make_terminal(0.0), F, diffusion, lattice, config),
                           paths, pseudo, F)
    zero_err = sum(_lattice_norms(base, again))
    errs = {}
    for dl in sorted(deltas, reverse=True):
        sol = extract_k_path(solve_penalized(pseudo, make_terminal(dl), F, diffusion, lattice, config),
                             paths, pseudo, F)
        errs[float(dl)] = _lattice_norms(base, sol)
    combined = [sum(errs[dl]) for dl in sorted(errs, reverse=True)]
    monotone = all(b < a for a, b in zip(combined, combined[1:]))
    zero_tol = 2 * config.picard_tol * lattice.N
    ok = monotone and zero_err <= zero_tol
    return _report("stability", zero_err, zero_tol, len(deltas) + 1,
                   {"errors": {str(k): v for k, v in errs.items()}, "combined": combined,
                    "monotone": monotone}, passed=ok)


def estimate_exp_moments(var_T, theta: float = 2.0, p: float = 1.1, r0: float = 1.0,
                         min_paths: int = 10_000, stability_tol: float = 0.1) -> CheckReport:
    """Monte Carlo E[exp(theta p Var_T(K) / R0)]; stability is the relative
    change between the first half of the paths and all of them."""
    v = np.asarray(var_T, float).ravel()
    if len(v) < min_paths:
        raise InsufficientData(f"need >= {min_paths} paths, got {len(v)}")
    lam = theta * p / r0
    vals = np.exp(lam * v)
    half = float(vals[: len(v) // 2].mean())
    full = float(vals.mean())
    change = abs(full - half) / full if np.isfinite(full) else np.inf
    ok = bool(np.isfinite(full) and change <= stability_tol)
    return _report("exp_moments", change, stability_tol, len(v),
                   {"estimate": full, "estimate_half": half, "exponent": lam,
                    "var_max": float(v.max()), "var_mean": float(v.mean())}, passed=ok)


def gamma_martingale_check(Y, Z, dvar, dK, domain, dt: float, boundary_tol: float = 1e-6,
                           rel_slack: float = 0.05, angle_tol: float = 1e-6) -> CheckReport:
    """For a process claimed to live on the boundary:
    (a) max |phi(Y)| <= boundary_tol;
    (b) |dVar - [-Tr(Z^T hess phi(Y) Z)/2]+ dt| <= rel_slack * sum |Z|^2 dt per path;
    (c) dK parallel to grad phi(Y): 1 - |dK.n| / |dK| <= angle_tol.
    Arrays: Y (P, N+1, d), Z (P, N, d, d'), dvar (P, N), dK (P, N, d)."""
    Y = np.asarray(Y, float)
    P, N1, d = Y.shape
    N = N1 - 1
    v, g, H = domain.jet(Y[:, :N].reshape(-1, d))
    a = float(np.max(np.abs(domain.phi(Y.reshape(-1, d)))))
    Zf = np.asarray(Z, float).reshape(P * N, d, -1)
    tr = np.einsum("mij,mik,mkj->m", Zf, H, Zf)
    pred = (np.maximum(-0.5 * tr, 0.0) * dt).reshape(P, N)
    zsq = np.einsum("mij,mij->m", Zf, Zf).reshape(P, N)
    scale = zsq.sum(1) * dt
    scale = np.where(scale > 0, scale, 1.0)
    b = float(np.max(np.abs(dvar - pred) / scale[:, None], initial=0.0))
    dk = np.asarray(dK, float).reshape(-1, d)
    mag = np.linalg.norm(dk, axis=-1)
    nrm = g / np.linalg.norm(g, axis=-1, keepdims=True)
    live = mag > 1e-300
    cos = np.abs(np.einsum("ij,ij->i", dk[live], nrm[live])) / mag[live]
    c = float(np.max(1.0 - cos, initial=0.0))
    ok = a <= boundary_tol and b <= rel_slack and c <= angle_tol
    return _report("gamma_martingale", max(a / boundary_tol, b / rel_slack, c / angle_tol), 1.0, P * N,
                   {"boundary": a, "var_identity": b, "parallel": c}, passed=ok)
