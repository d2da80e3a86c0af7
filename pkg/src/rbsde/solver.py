"""Backward lattice solver for the penalized BSDE

    Y_t = g(X_T) + int_t^T [f - n rho_M1(psi(Y)) grad psi(Y) (1 + rho_M2(|Z|^2))] ds - int_t^T Z dW,

extraction of the reflection process K along paths, the driver over an
increasing schedule of penalization intensities, and the discrete
path-dependent mode.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import (ContractionViolated, LatticeMismatch, PicardDivergence, ScheduleExhausted,
                     TerminalOutsideDomain, UnsupportedDepth)
from .geometry.levelset import distance_to_domain
from .geometry.pseudo import PseudoDistance
from .lattice import BrownianLattice, ForwardDiffusion, PathBatch, conditional_expectation, z_projection

log = logging.getLogger(__name__)

TERMINAL_TOL = 1e-9
CONVERGENCE_COLUMNS = ("n", "sup_dist", "sup_n_psi", "holder_quotient", "var_mean", "var_max",
                       "picard_max_iters")


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generator:
    """f(t, x, y, z) evaluated on node batches: x (m, dx), y (m, d), z (m, d, d').

    ``jac_y`` (optional) returns df/dy of shape (m, d, d); without it a
    central finite difference is used.  ``is_zero`` short-circuits f = 0.
    """

    fn: Callable
    jac_y: Optional[Callable] = None
    lipschitz_y: float = 0.0
    name: str = "generator"
    is_zero: bool = False

    def __call__(self, t, x, y, z):
        if self.is_zero:
            return np.zeros_like(y)
        return np.asarray(self.fn(t, x, y, z), dtype=float)

    def jacobian(self, t, x, y, z, h: float = 1e-7):
        m, d = y.shape
        if self.is_zero:
            return np.zeros((m, d, d))
        if self.jac_y is not None:
            return np.asarray(self.jac_y(t, x, y, z), dtype=float)
        J = np.empty((m, d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            J[:, :, i] = (self(t, x, y + e, z) - self(t, x, y - e, z)) / (2 * h)
        return J


def zero_generator() -> Generator:
    return Generator(fn=lambda t, x, y, z: np.zeros_like(y), name="zero", is_zero=True)


@dataclass(frozen=True)
class PenalizationConfig:
    """Penalization intensity, truncation caps and one-step solver settings.

    ``cap_psi`` (M1) and ``cap_zsq`` (M2) truncate psi and |z|^2 as x -> min(x, M);
    ``None`` selects the defaults M1 = max(10 C / n, 1) with C = ``n_psi_bound``
    and M2 = 100; ``inf`` disables a cap.  ``method`` is ``"newton"``
    (damped Newton with backtracking, default) or ``"picard"`` (fixed-point
    iteration, refused when the contraction heuristic fails).
    """

    n: int = 1
    cap_psi: Optional[float] = None
    cap_zsq: Optional[float] = None
    picard_tol: float = 1e-12
    picard_max_iters: int = 200
    method: str = "newton"
    damping_after: int = 50
    n_psi_bound: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.picard_tol <= 0:
            raise ValueError("picard_tol must be positive")
        for cap in (self.cap_psi, self.cap_zsq):
            if cap is not None and not cap > 0:
                raise ValueError("caps must be positive")
        if self.method not in ("newton", "picard"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def M1(self) -> float:
        return self.cap_psi if self.cap_psi is not None else max(10.0 * self.n_psi_bound / self.n, 1.0)

    @property
    def M2(self) -> float:
        return self.cap_zsq if self.cap_zsq is not None else 100.0


@dataclass
class SolverField:
    """Node-wise solution of one penalized problem: Y[k] has shape
    (k+1,)*d' + (d,), Z[k] (k < N) has shape (k+1,)*d' + (d, d')."""

    lattice: BrownianLattice
    Y: List[np.ndarray]
    Z: List[np.ndarray]
    X: List[np.ndarray]
    config: PenalizationConfig
    iterations: np.ndarray
    residuals: np.ndarray
    k0: int = 0
    contraction: float = float("nan")

    @property
    def n(self):
        return self.config.n

    @property
    def dim(self):
        return self.Y[-1].shape[-1]

    def y0(self):
        return self.Y[self.k0].reshape(-1, self.dim)[0] if self.k0 == 0 else self.Y[self.k0]

    def stack_nodes(self, upto: Optional[int] = None):
        """All (Y) node values for steps k0..upto-1 flattened to (m, d)."""
        upto = self.lattice.N if upto is None else upto
        return np.concatenate([self.Y[k].reshape(-1, self.dim) for k in range(self.k0, upto)])

    def sup_diff(self, other: "SolverField") -> float:
        return float(max(np.max(np.abs(a - b)) for a, b in zip(self.Y[self.k0:], other.Y[self.k0:])))


def _penalty(pseudo, y, zsq, cfg):
    """n rho_M1(psi) grad psi (1 + rho_M2(|z|^2)) and the pieces of its y-Jacobian."""
    psi, g, H = pseudo.jet(y)
    rho1 = np.minimum(psi, cfg.M1)
    a = 1.0 + np.minimum(zsq, cfg.M2)
    pen = cfg.n * (rho1 * a)[:, None] * g
    return pen, psi, g, H, rho1, a


def _step_residual(pseudo, F, t, x, y, z, zsq, m, dt, cfg):
    pen = _penalty(pseudo, y, zsq, cfg)
    return y - m - F(t, x, y, z) * dt + dt * pen[0], pen


def _solve_step(pseudo, F, t, x, z, m, dt, cfg, k):
    """Solve y = m + F(t, x, y, z) dt - dt n rho(psi(y)) grad psi(y) (1 + rho(|z|^2))
    for a batch of nodes.  Returns (y, iterations, max residual)."""
    zsq = np.einsum("mij,mij->m", z, z)
    y = m.copy()
    G, pen = _step_residual(pseudo, F, t, x, y, z, zsq, m, dt, cfg)
    res = np.max(np.abs(G), axis=-1)
    active = np.flatnonzero(res > cfg.picard_tol)
    it = 0
    d = m.shape[-1]
    eye = np.eye(d)
    while active.size and it < cfg.picard_max_iters:
        it += 1
        ya, Ga = y[active], G[active]
        xa, za, zsa, ma = x[active], z[active], zsq[active], m[active]
        if cfg.method == "picard":
            lam = 1.0 if it <= cfg.damping_after else 0.5
            y_new = ya - lam * Ga
            Gn, pen_n = _step_residual(pseudo, F, t, xa, y_new, za, zsa, ma, dt, cfg)
        else:
            _, psi, g, H, rho1, a = (p[active] for p in pen)
            J = (eye - dt * F.jacobian(t, xa, ya, za)
                 + (dt * cfg.n * a)[:, None, None]
                 * ((psi < cfg.M1)[:, None, None] * g[:, :, None] * g[:, None, :] + rho1[:, None, None] * H))
            delta = np.linalg.solve(J, Ga[..., None])[..., 0]
            lam = np.ones(len(active))
            y_new = ya - delta
            Gn, pen_n = _step_residual(pseudo, F, t, xa, y_new, za, zsa, ma, dt, cfg)
            n0 = np.linalg.norm(Ga, axis=-1)
            bad = np.linalg.norm(Gn, axis=-1) > (1 - 1e-4 * lam) * n0
            for _ in range(40):
                bad &= np.max(np.abs(Gn), axis=-1) > cfg.picard_tol
                if not bad.any():
                    break
                lam[bad] *= 0.5
                y_new[bad] = ya[bad] - lam[bad, None] * delta[bad]
                Gb, pen_b = _step_residual(pseudo, F, t, xa[bad], y_new[bad], za[bad], zsa[bad], ma[bad], dt, cfg)
                Gn[bad] = Gb
                for full, part in zip(pen_n, pen_b):
                    full[bad] = part
                bad[bad] = np.linalg.norm(Gb, axis=-1) > (1 - 1e-4 * lam[bad]) * n0[bad]
        y[active] = y_new
        G[active] = Gn
        for full, part in zip(pen, pen_n):
            full[active] = part
        res[active] = np.max(np.abs(Gn), axis=-1)
        active = active[res[active] > cfg.picard_tol]
    if active.size:
        node = int(active[np.argmax(res[active])])
        raise PicardDivergence(
            f"one-step solve did not reach tol {cfg.picard_tol:g} (residual {res[node]:.3g}) "
            f"at n={cfg.n}, step={k}, node={node}", n=cfg.n, step=k, node=node)
    return y, it, float(res.max(initial=0.0))


def contraction_heuristic(pseudo: PseudoDistance, F: Generator, dt: float, cfg: PenalizationConfig,
                          hess_bound: Optional[float] = None) -> float:
    """dt (K_fy + n M1 Lip(grad psi) (1 + M2)); Lip(grad psi) from a sampled Hessian bound."""
    if hess_bound is None:
        hess_bound = pseudo.checks.get("hess_bound")
    if hess_bound is None:
        from .geometry.levelset import sample_exterior_band
        y = sample_exterior_band(pseudo.domain, 2000, 0.1, np.random.default_rng(0))
        hess_bound = float(np.max(np.linalg.norm(pseudo.hess_psi(y), ord=2, axis=(-2, -1))))
    lip = max(hess_bound, 1.0)
    return dt * (F.lipschitz_y + cfg.n * cfg.M1 * lip * (1 + cfg.M2))


def terminal_values(g, X_T):
    return np.asarray(g(X_T), dtype=float)


def solve_penalized(pseudo: PseudoDistance, g: Callable, F: Optional[Generator],
                    diffusion: Optional[ForwardDiffusion], lattice: BrownianLattice,
                    config: PenalizationConfig, terminal_field: Optional[np.ndarray] = None,
                    k_start: int = 0, k_end: Optional[int] = None, X=None,
                    check_terminal: bool = True) -> SolverField:
    """Backward induction for the penalized equation.

    Z_k is the lattice projection of Y_{k+1}; Y_k solves the implicit
    one-step equation at every node.  ``terminal_field`` (values at step
    ``k_end``) replaces g(X_N) for sub-interval solves; intermediate
    terminals of such solves are penalized values and may lie slightly
    outside D, so they skip the domain check (``check_terminal=False``).
    """
    F = F or zero_generator()
    diffusion = diffusion or ForwardDiffusion()
    k_end = lattice.N if k_end is None else k_end
    X = X if X is not None else diffusion.values(lattice)
    d_prime = lattice.dprime
    if terminal_field is None:
        yT = terminal_values(g, X[k_end])
    else:
        yT = np.asarray(terminal_field, dtype=float)
    flat = yT.reshape(-1, yT.shape[-1])
    bad = pseudo.domain.phi(flat) > TERMINAL_TOL if check_terminal else np.zeros(len(flat), bool)
    if np.any(bad):
        raise TerminalOutsideDomain(f"{int(bad.sum())} terminal values lie outside the closed domain "
                                    f"(max phi {pseudo.domain.phi(flat).max():.3g})")
    d = yT.shape[-1]
    dt = lattice.dt
    cfg = config
    contraction = float("nan")
    if cfg.method == "picard":
        contraction = contraction_heuristic(pseudo, F, dt, cfg)
        if not contraction < 1:
            raise ContractionViolated(f"Picard map is not a contraction: heuristic {contraction:.3g} >= 1 "
                                      f"(n={cfg.n}, dt={dt:g}, M1={cfg.M1:g}, M2={cfg.M2:g})")
    Y: List[Optional[np.ndarray]] = [None] * (lattice.N + 1)
    Z: List[Optional[np.ndarray]] = [None] * lattice.N
    Y[k_end] = yT
    iters = np.zeros(lattice.N, dtype=int)
    resid = np.zeros(lattice.N)
    for k in range(k_end - 1, k_start - 1, -1):
        nxt = Y[k + 1]
        m = conditional_expectation(lattice, nxt)
        z = z_projection(lattice, nxt)
        shp = m.shape[:-1]
        x = X[k].reshape(-1, X[k].shape[-1])
        y, it, r = _solve_step(pseudo, F, k * dt, x, z.reshape(-1, d, d_prime), m.reshape(-1, d), dt, cfg, k)
        Y[k] = y.reshape(shp + (d,))
        Z[k] = z
        iters[k], resid[k] = it, r
    return SolverField(lattice, Y, Z, X, cfg, iters, resid, k0=k_start, contraction=contraction)


# ---------------------------------------------------------------------------
# paths and K
# ---------------------------------------------------------------------------

@dataclass
class ReflectedSolution:
    """Path-wise (Y, Z, K) for one penalized field.

    Arrays: Y (P, N+1, d), Z (P, N, d, d'), dK (P, N, d), K (P, N+1, d),
    var (P, N+1), Phi/Theta split accumulators (P, N+1, d), dW (P, N, d').
    """

    fields: SolverField
    paths: PathBatch
    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    K: np.ndarray
    var: np.ndarray
    Phi: np.ndarray
    Theta: np.ndarray
    dW: np.ndarray
    F: np.ndarray
    discrepancy: float
    converged: bool = True
    table: list = field(default_factory=list)

    @property
    def n(self):
        return self.fields.n

    @property
    def dvar(self):
        return np.diff(self.var, axis=1)


def extract_k_path(fields: SolverField, paths: PathBatch, pseudo: PseudoDistance,
                   F: Optional[Generator] = None) -> ReflectedSolution:
    """Accumulate dK = n rho(psi(Y_k)) grad psi(Y_k) (1 + rho(|Z_k|^2)) dt along paths,
    split as Phi (the '1' part) and Theta (the |Z|^2 part), and compare with
    the residual form dK = Y_{k+1} - Y_k + f dt - Z dW."""
    lat = fields.lattice
    if paths.lattice != lat:
        raise LatticeMismatch("paths were sampled on a different lattice")
    F = F or zero_generator()
    cfg = fields.config
    P, N, d = paths.count, lat.N, fields.dim
    dp = lat.dprime
    Y = np.stack([paths.gather(fields.Y, k) for k in range(N + 1)], axis=1)
    Z = np.stack([paths.gather(fields.Z, k) for k in range(N)], axis=1)
    X = np.stack([paths.gather(fields.X, k) for k in range(N)], axis=1)
    dW = paths.increments.astype(float) * lat.sqrt_dt
    yk = Y[:, :N].reshape(-1, d)
    zk = Z.reshape(-1, d, dp)
    zsq = np.einsum("mij,mij->m", zk, zk)
    psi, g, _ = pseudo.jet(yk)
    rho1 = np.minimum(psi, cfg.M1)
    base = cfg.n * rho1[:, None] * g * lat.dt
    dPhi = base.reshape(P, N, d)
    dTheta = (base * np.minimum(zsq, cfg.M2)[:, None]).reshape(P, N, d)
    dK = dPhi + dTheta
    f = np.stack([F(k * lat.dt, X[:, k].reshape(P, -1), Y[:, k], Z[:, k]) for k in range(N)], axis=1)
    dK_res = Y[:, 1:] - Y[:, :N] + f * lat.dt - np.einsum("pkij,pkj->pki", Z, dW)
    disc = float(np.max(np.abs(np.cumsum(dK - dK_res, axis=1)))) if N else 0.0
    zeros = np.zeros((P, 1, d))
    K = np.concatenate([zeros, np.cumsum(dK, axis=1)], axis=1)
    var = np.concatenate([np.zeros((P, 1)), np.cumsum(np.linalg.norm(dK, axis=-1), axis=1)], axis=1)
    Phi = np.concatenate([zeros, np.cumsum(dPhi, axis=1)], axis=1)
    Theta = np.concatenate([zeros, np.cumsum(dTheta, axis=1)], axis=1)
    return ReflectedSolution(fields, paths, Y, Z, dK, K, var, Phi, Theta, dW, f, disc)


# ---------------------------------------------------------------------------
# schedule driver
# ---------------------------------------------------------------------------

def holder_quotient(fields: SolverField, alpha_prime: float = 0.5, max_points: int = 1500) -> float:
    """sup |u(t,x) - u(t',x')| / (|t-t'|^{a/2} + |x-x'|^a) over a fixed node subsample."""
    lat = fields.lattice
    ks = range(fields.k0, lat.N + 1)
    total = sum(lat.n_nodes(k) for k in ks)
    stride = max(1, int(np.ceil(total / max_points)))
    pts_t, pts_x, vals = [], [], []
    count = 0
    for k in ks:
        xk = fields.X[k].reshape(-1, fields.X[k].shape[-1])
        yk = fields.Y[k].reshape(-1, fields.dim)
        idx = np.arange(len(xk))
        sel = idx[(idx + count) % stride == 0]
        count += len(xk)
        pts_t.append(np.full(len(sel), k * lat.dt))
        pts_x.append(xk[sel])
        vals.append(yk[sel])
    t = np.concatenate(pts_t)
    x = np.concatenate(pts_x)
    u = np.concatenate(vals)
    best = 0.0
    for i in range(0, len(t), 256):
        dt_ = np.abs(t[i:i + 256, None] - t[None, :])
        dx = np.linalg.norm(x[i:i + 256, None, :] - x[None, :, :], axis=-1)
        du = np.linalg.norm(u[i:i + 256, None, :] - u[None, :, :], axis=-1)
        den = dt_ ** (alpha_prime / 2) + dx ** alpha_prime
        q = np.where(den > 0, du / np.where(den > 0, den, 1.0), 0.0)
        best = max(best, float(q.max()))
    return best


def field_diagnostics(pseudo: PseudoDistance, fields: SolverField, alpha_prime: float = 0.5):
    """sup-node distance to the closed domain, sup n psi, Hoelder quotient."""
    ys = fields.stack_nodes()
    dist = distance_to_domain(pseudo.domain, ys)
    psi = pseudo.psi(ys)
    return {
        "sup_dist": float(np.max(dist)),
        "sup_n_psi": float(fields.n * np.max(psi)),
        "holder_quotient": holder_quotient(fields, alpha_prime),
        "picard_max_iters": int(fields.iterations.max(initial=0)),
    }


def solve_reflected(pseudo: PseudoDistance, g: Callable, F: Optional[Generator],
                    diffusion: Optional[ForwardDiffusion], lattice: BrownianLattice,
                    n_schedule: Sequence[int], stop_tol: float = 0.0,
                    config: Optional[PenalizationConfig] = None, paths: Optional[PathBatch] = None,
                    alpha_prime: float = 0.5, strict: bool = False, keep_fields: bool = True):
    """Solve along an increasing n schedule.

    Stops early once the sup-node change of Y between consecutive n is
    <= stop_tol, or at once if the penalty vanishes at every node.  If the schedule runs out first, the last iterate is
    returned with ``converged = False`` (or ScheduleExhausted is raised
    when ``strict``).  ``solution.table`` holds one row per n with the
    convergence-table columns plus ``sup_diff``; ``solution.history``
    maps n to its field when ``keep_fields``.
    """
    sched = list(n_schedule)
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError("n_schedule must be non-empty and strictly increasing")
    base = config or PenalizationConfig()
    F = F or zero_generator()
    diffusion = diffusion or ForwardDiffusion()
    X = diffusion.values(lattice)
    table = []
    history: Dict[int, SolverField] = {}
    prev = None
    converged = False
    sol = None
    for n in sched:
        cfg = replace(base, n=int(n))
        fields = solve_penalized(pseudo, g, F, diffusion, lattice, cfg, X=X)
        row = {"n": int(n), **field_diagnostics(pseudo, fields, alpha_prime)}
        row["sup_diff"] = float("nan") if prev is None else fields.sup_diff(prev)
        if paths is not None:
            sol = extract_k_path(fields, paths, pseudo, F)
            row["var_mean"] = float(sol.var[:, -1].mean())
            row["var_max"] = float(sol.var[:, -1].max())
        else:
            row["var_mean"] = row["var_max"] = float("nan")
        table.append(row)
        log.info("n=%d sup_dist=%.3g sup_diff=%.3g", n, row["sup_dist"], row["sup_diff"])
        if keep_fields:
            history[int(n)] = fields
        # a field on which the penalty never acts is the same for every n
        inactive = row["sup_n_psi"] == 0.0
        if inactive or (prev is not None and row["sup_diff"] <= stop_tol):
            converged = True
            prev = fields
            break
        prev = fields
    if sol is None or sol.fields is not prev:
        sol = extract_k_path(prev, paths, pseudo, F) if paths is not None else None
    result = ReflectedRun(fields=prev, solution=sol, table=table, history=history, converged=converged)
    if not converged:
        msg = f"schedule exhausted at n={sched[-1]} without reaching stop_tol={stop_tol:g}"
        if strict:
            raise ScheduleExhausted(msg, result=result)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return result


@dataclass
class ReflectedRun:
    fields: SolverField
    solution: Optional[ReflectedSolution]
    table: list
    history: Dict[int, SolverField]
    converged: bool

    def write_table(self, path):
        write_convergence_csv(self.table, path)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_convergence_csv(table, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CONVERGENCE_COLUMNS)
        for row in table:
            wr.writerow([_fmt(row[c]) for c in CONVERGENCE_COLUMNS])


# ---------------------------------------------------------------------------
# discrete path dependence
# ---------------------------------------------------------------------------

@dataclass
class PathDependentField:
    """Solution of a terminal condition g(X_{t_1}, ..., X_{t_l}).

    ``head`` covers steps 0..k_1 (Markovian in the current node); for l = 2,
    ``tails[j]`` is the field on steps k_1..N given the node j at step k_1.
    """

    lattice: BrownianLattice
    steps: tuple
    head: SolverField
    tails: Dict[int, SolverField] = field(default_factory=dict)

    def y_along(self, nodes):
        """Y along one path given its node indices (N+1, d') or (N+1,)."""
        nodes = np.asarray(nodes).reshape(self.lattice.N + 1, -1)
        k1 = self.steps[0]
        out = []
        for k in range(self.lattice.N + 1):
            src = self.head if (k <= k1 or not self.tails) else self.tails[int(nodes[k1, 0])]
            out.append(src.Y[k][tuple(nodes[k])])
        return np.array(out)


def _grid_step(lattice, t):
    k = t / lattice.dt
    kr = int(round(k))
    if abs(k - kr) > 1e-9 or not 0 <= kr <= lattice.N:
        raise ValueError(f"time {t} is not on the lattice grid")
    return kr


def solve_path_dependent(times: Sequence[float], g: Callable, F: Optional[Generator],
                         lattice: BrownianLattice, config: PenalizationConfig,
                         pseudo: PseudoDistance, diffusion: Optional[ForwardDiffusion] = None):
    """Interval-by-interval backward construction for xi = g(X_{t_1}, ..., X_{t_l}), l <= 2.

    On [t_1, T] the Markovian problem is solved once per frozen value of
    X_{t_1}; the step-k_1 values define a new terminal function on
    [0, t_1].  Values at times after t_l enter through X_{t_l} only, so
    g is evaluated with X_{t_l} frozen and the segment [t_l, T] keeps a
    node-constant terminal.
    """
    times = list(times)
    if len(times) > 2:
        raise UnsupportedDepth(f"path dependence of depth {len(times)} > 2 is not supported")
    if len(times) == 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be non-empty and increasing")
    F = F or zero_generator()
    diffusion = diffusion or ForwardDiffusion()
    X = diffusion.values(lattice)
    steps = tuple(_grid_step(lattice, t) for t in times)
    N = lattice.N
    shape_k = lattice.shape

    if len(times) == 1:
        k1 = steps[0]
        if k1 == N:
            head = solve_penalized(pseudo, g, F, diffusion, lattice, config, X=X)
            return PathDependentField(lattice, steps, head)
        # terminal depends on X_{t_1} only: solve [t_1, N] per node value at t_1
        tails, term = {}, np.empty(shape_k(k1) + (pseudo.domain.dim,))
        for j, xv in _nodes(lattice, k1, X):
            yN = np.broadcast_to(np.asarray(g(xv), float), shape_k(N) + (pseudo.domain.dim,))
            tail = solve_penalized(pseudo, None, F, diffusion, lattice, config, terminal_field=np.array(yN),
                                   k_start=k1, X=X)
            tails[j[0]] = tail
            term[j] = tail.Y[k1][j]
        head = solve_penalized(pseudo, None, F, diffusion, lattice, config, terminal_field=term,
                               k_end=k1, X=X, check_terminal=False)
        return PathDependentField(lattice, steps, head, tails)

    k1, k2 = steps
    if lattice.dprime != 1:
        raise UnsupportedDepth("path-dependent mode is implemented for d' = 1")
    dim = pseudo.domain.dim
    term1 = np.empty(shape_k(k1) + (dim,))
    tails: Dict[int, SolverField] = {}
    for j1, x1 in _nodes(lattice, k1, X):
        if k2 == N:
            yN = np.asarray(g(x1, X[N]), float)
        else:
            # freeze X_{t_2}: one solve on [k2, N] per node at k2, then [k1, k2]
            term2 = np.empty(shape_k(k2) + (dim,))
            for j2, x2 in _nodes(lattice, k2, X):
                const = np.broadcast_to(np.asarray(g(x1, x2), float), shape_k(N) + (dim,))
                seg = solve_penalized(pseudo, None, F, diffusion, lattice, config,
                                      terminal_field=np.array(const), k_start=k2, X=X)
                term2[j2] = seg.Y[k2][j2]
            yN = None
        if yN is not None:
            tail = solve_penalized(pseudo, None, F, diffusion, lattice, config, terminal_field=yN,
                                   k_start=k1, X=X)
        else:
            tail = solve_penalized(pseudo, None, F, diffusion, lattice, config, terminal_field=term2,
                                   k_start=k1, k_end=k2, X=X, check_terminal=False)
        tails[j1[0]] = tail
        term1[j1] = tail.Y[k1][j1]
    head = solve_penalized(pseudo, None, F, diffusion, lattice, config, terminal_field=term1,
                           k_end=k1, X=X, check_terminal=False)
    return PathDependentField(lattice, steps, head, tails)


def _nodes(lattice, k, X):
    for j in np.ndindex(*lattice.shape(k)):
        yield j, X[k][j]
