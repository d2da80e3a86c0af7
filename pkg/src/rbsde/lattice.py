"""Recombining binomial Brownian lattice, forward diffusions on it, the two
one-step operators of backward induction, and reproducible path sampling.

Node ``j`` at step ``k`` (per driver axis) counts up-moves, so W = (2j - k) sqrt(dt).
A field at step k is an array of shape ``(k+1,)*d' + value_shape``; the
children of node j are j (down) and j+1 (up) along every axis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import LatticeMismatch, MissingChild, NotRecombining

PATH_BLOCK = 4096


@dataclass(frozen=True)
class BrownianLattice:
    T: float = 1.0
    N: int = 100
    dprime: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.dprime not in (1, 2):
            raise ValueError("only driver dimensions 1 and 2 are supported")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    def times(self):
        return np.linspace(0.0, self.T, self.N + 1)

    def shape(self, k: int):
        return (k + 1,) * self.dprime

    def w_axis(self, k: int):
        """W values along one axis at step k."""
        return (2.0 * np.arange(k + 1) - k) * self.sqrt_dt

    def node_values(self, k: int):
        """W at every node of step k, shape (k+1,)*d' + (d',)."""
        axes = np.meshgrid(*([self.w_axis(k)] * self.dprime), indexing="ij")
        return np.stack(axes, -1)

    def n_nodes(self, k: int) -> int:
        return (k + 1) ** self.dprime

    def increments(self):
        """The 2^d' one-step increments with child offsets (in up-moves)."""
        combos = np.array(np.meshgrid(*([[0, 1]] * self.dprime), indexing="ij")).reshape(self.dprime, -1).T
        return combos, (2.0 * combos - 1.0) * self.sqrt_dt


def _child_views(f, dprime):
    """Child arrays aligned with the parent grid, keyed by up-move offsets."""
    if dprime == 1:
        return {(0,): f[:-1], (1,): f[1:]}
    return {(0, 0): f[:-1, :-1], (1, 0): f[1:, :-1], (0, 1): f[:-1, 1:], (1, 1): f[1:, 1:]}


def _check_next(lattice: BrownianLattice, f, k: Optional[int]):
    f = np.asarray(f, dtype=float)
    m = f.shape[0] - 1
    if k is not None and m != k + 1:
        raise MissingChild(f"field has {m + 1} nodes per axis, step {k + 1} needs {k + 2}")
    if f.shape[: lattice.dprime] != (m + 1,) * lattice.dprime:
        raise MissingChild("field is not defined on a full step grid")
    return f


def conditional_expectation(lattice: BrownianLattice, f_next, k: Optional[int] = None, node=None):
    """E_k[f_{k+1}]: mean over the 2^d' children (whole step, or one node)."""
    f_next = _check_next(lattice, f_next, k)
    views = _child_views(f_next, lattice.dprime)
    out = sum(views.values()) / len(views)
    if node is None:
        return out
    node = tuple(np.atleast_1d(node))
    if any(j < 0 or j >= out.shape[0] for j in node):
        raise MissingChild(f"node {node} has no children in this field")
    return out[node]


def z_projection(lattice: BrownianLattice, f_next, k: Optional[int] = None, node=None):
    """E_k[f_{k+1} dW^T] / dt, shape (...nodes...) + value_shape + (d',)."""
    f_next = _check_next(lattice, f_next, k)
    views = _child_views(f_next, lattice.dprime)
    n = len(views)
    comps = []
    for a in range(lattice.dprime):
        acc = 0.0
        for off, v in views.items():
            acc = acc + (1.0 if off[a] else -1.0) * v
        comps.append(acc / (n * lattice.sqrt_dt))
    out = np.stack(comps, -1)
    if node is None:
        return out
    node = tuple(np.atleast_1d(node))
    if any(j < 0 or j >= out.shape[0] for j in node):
        raise MissingChild(f"node {node} has no children in this field")
    return out[node]


@dataclass
class ForwardDiffusion:
    """X_t = x0 + int b dt + int sigma dW on the lattice.

    In ``identity`` mode X = x0 + W.  In ``euler`` mode X is propagated node
    by node; the lattice only stays recombining when the up-down and
    down-up moves land on the same value, which is checked.
    """

    b: Optional[Callable] = None
    sigma: Optional[Callable] = None
    x0: Optional[np.ndarray] = None
    mode: str = "identity"
    recombine_tol: float = 1e-12

    def values(self, lattice: BrownianLattice):
        """List over k of X at every node, shape (k+1,)*d' + (dim_x,)."""
        x0 = np.zeros(lattice.dprime) if self.x0 is None else np.atleast_1d(np.asarray(self.x0, float))
        if self.mode == "identity":
            if x0.shape[-1] != lattice.dprime:
                raise LatticeMismatch("identity mode needs x0 of the driver dimension")
            return [x0 + lattice.node_values(k) for k in range(lattice.N + 1)]
        if self.mode != "euler":
            raise ValueError(f"unknown diffusion mode {self.mode!r}")
        if self.b is None or self.sigma is None:
            raise ValueError("euler mode needs b and sigma")
        xs = [x0.reshape((1,) * lattice.dprime + x0.shape)]
        combos, dws = lattice.increments()
        for k in range(lattice.N):
            t = k * lattice.dt
            x = xs[-1]
            drift = np.asarray(self.b(t, x), float)
            sig = np.asarray(self.sigma(t, x), float)
            nxt = np.full(lattice.shape(k + 1) + x0.shape, np.nan)
            for off, dw in zip(combos, dws):
                cand = x + drift * lattice.dt + np.einsum("...ij,j->...i", sig, dw)
                sl = tuple(slice(o, o + k + 1) for o in off)
                prev = nxt[sl]
                clash = ~np.isnan(prev) & (np.abs(prev - cand) > self.recombine_tol * (1 + np.abs(cand)))
                if np.any(clash):
                    raise NotRecombining(f"euler step {k} does not recombine (max gap "
                                         f"{np.nanmax(np.abs(prev - cand)):.3g})")
                nxt[sl] = cand
            xs.append(nxt)
        return xs

    def check_ellipticity(self, lattice: BrownianLattice, n: int = 64, seed: int = 0, tol=1e-12):
        """Smallest eigenvalue of sigma^T sigma over sampled (t, x)."""
        if self.mode == "identity":
            return 1.0
        rng = np.random.default_rng(seed)
        xs = self.values(lattice)
        worst = np.inf
        for _ in range(n):
            k = int(rng.integers(0, lattice.N))
            x = xs[k].reshape(-1, xs[k].shape[-1])
            x = x[rng.integers(0, len(x))]
            s = np.asarray(self.sigma(k * lattice.dt, x), float)
            worst = min(worst, float(np.linalg.eigvalsh(s.T @ s)[0]))
        if worst <= tol:
            raise ValueError(f"sigma^T sigma is not positive definite (min eig {worst:.3g})")
        return worst


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

@dataclass
class PathSample:
    seed: int
    index: int
    increments: np.ndarray  # (N, d') of +-1
    nodes: np.ndarray       # (N+1, d') up-move counts


@dataclass
class PathBatch:
    """``count`` paths stored as int8 signs and int32 node indices."""

    lattice: BrownianLattice
    seed: int
    increments: np.ndarray  # (count, N, d') int8
    nodes: np.ndarray = field(repr=False)  # (count, N+1, d') int32

    @property
    def count(self) -> int:
        return self.increments.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> PathSample:
        return PathSample(self.seed, int(i), self.increments[i], self.nodes[i])

    def w(self, k: Optional[int] = None):
        """Brownian values along the paths, (count, N+1, d') or at step k."""
        steps = np.arange(self.lattice.N + 1)[None, :, None]
        w = (2.0 * self.nodes - steps) * self.lattice.sqrt_dt
        return w if k is None else w[:, k]

    def gather(self, fields, k: int):
        """Values of a per-step field list along all paths at step k."""
        idx = tuple(self.nodes[:, k, a] for a in range(self.lattice.dprime))
        return fields[k][idx]

    def to_csv(self, path, max_paths: Optional[int] = None):
        """Rows (path, step, axis, increment)."""
        m = self.count if max_paths is None else min(max_paths, self.count)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["path", "step", "axis", "increment"])
            for i in range(m):
                for k in range(self.lattice.N):
                    for a in range(self.lattice.dprime):
                        wr.writerow([i, k, a, int(self.increments[i, k, a])])


def sample_paths(lattice: BrownianLattice, count: int, seed: int) -> PathBatch:
    """i.i.d. +-1 increment paths.

    Paths are generated in blocks of PATH_BLOCK; block b uses the counter
    based Philox generator keyed by SeedSequence(seed, spawn_key=(b,)), so a
    path's increments depend only on (seed, its index), not on ``count``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n_blocks = -(-count // PATH_BLOCK)
    inc = np.empty((count, lattice.N, lattice.dprime), dtype=np.int8)
    for b in range(n_blocks):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))
        lo, hi = b * PATH_BLOCK, min((b + 1) * PATH_BLOCK, count)
        bits = gen.integers(0, 2, size=(PATH_BLOCK, lattice.N, lattice.dprime), dtype=np.int8)
        inc[lo:hi] = 2 * bits[: hi - lo] - 1
    ups = (inc > 0).astype(np.int32)
    nodes = np.concatenate([np.zeros((count, 1, lattice.dprime), np.int32), np.cumsum(ups, axis=1)], axis=1)
    return PathBatch(lattice, seed, inc, nodes)
