import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbsde.errors import MissingChild, NotRecombining
from rbsde.lattice import (BrownianLattice, ForwardDiffusion, conditional_expectation, sample_paths,
                           z_projection)


@pytest.mark.parametrize("dprime", [1, 2])
def test_brownian_moments_exact(dprime):
    lat = BrownianLattice(1.0, 20, dprime)
    k = 12
    w = lat.node_values(k + 1)[..., 0]
    m = conditional_expectation(lat, w, k)
    assert np.max(np.abs(m - lat.node_values(k)[..., 0])) <= 1e-15
    sq = conditional_expectation(lat, w ** 2, k)
    assert np.max(np.abs(sq - (lat.node_values(k)[..., 0] ** 2 + lat.dt))) <= 1e-14


def test_z_projection_is_central_difference():
    lat = BrownianLattice(1.0, 50, 1)
    f = np.sin(lat.node_values(11))  # (12, 1)
    z = z_projection(lat, f, 10)
    expect = (f[1:] - f[:-1]) / (2 * lat.sqrt_dt)
    assert z.shape == (11, 1, 1)
    assert np.allclose(z[:, :, 0], expect, atol=1e-15)


def test_z_projection_two_drivers():
    lat = BrownianLattice(1.0, 10, 2)
    W = lat.node_values(5)
    z = z_projection(lat, W, 4)  # f = W: Z = identity
    assert z.shape == (5, 5, 2, 2)
    assert np.allclose(z, np.eye(2), atol=1e-14)


@given(st.integers(1, 30))
@settings(max_examples=20, deadline=None)
def test_tower_property(k):
    lat = BrownianLattice(1.0, 40, 1)
    rng = np.random.default_rng(k)
    f = rng.normal(size=(k + 3, 2))
    two = conditional_expectation(lat, conditional_expectation(lat, f, k + 1), k)
    assert two.shape == (k + 1, 2)
    # E_k f_{k+2} equals the binomial (1/4, 1/2, 1/4) average
    direct = 0.25 * f[:-2] + 0.5 * f[1:-1] + 0.25 * f[2:]
    assert np.allclose(two, direct, atol=1e-14)


def test_missing_child():
    lat = BrownianLattice(1.0, 10, 1)
    with pytest.raises(MissingChild):
        conditional_expectation(lat, np.zeros(5), k=5)
    with pytest.raises(MissingChild):
        conditional_expectation(lat, np.zeros(5), node=7)


def test_invalid_lattice():
    for kw in ({"N": 0}, {"dprime": 3}, {"T": -1.0}):
        with pytest.raises(ValueError):
            BrownianLattice(**kw)


def test_forward_diffusion_identity_and_nonrecombining():
    lat = BrownianLattice(1.0, 8, 1)
    X = ForwardDiffusion(x0=np.array([0.5])).values(lat)
    assert np.allclose(X[3][..., 0], 0.5 + lat.w_axis(3))
    zero = lambda t, x: np.zeros_like(x)  # noqa: E731
    # sigma = x: x(1 + s)(1 - s) = x(1 - s)(1 + s), so the lattice recombines
    geo = ForwardDiffusion(b=zero, sigma=lambda t, x: x[..., None], x0=np.array([1.0]), mode="euler").values(lat)
    assert geo[2].shape == (3, 1)
    assert geo[2][1, 0] == pytest.approx(1.0 - lat.dt)
    with pytest.raises(NotRecombining):
        ForwardDiffusion(b=zero, sigma=lambda t, x: (x ** 2)[..., None], x0=np.array([1.0]),
                         mode="euler").values(lat)


def test_paths_statistics_and_determinism():
    lat = BrownianLattice(1.0, 100, 1)
    a = sample_paths(lat, 20_000, seed=7)
    wT = a.w(lat.N)[:, 0]
    assert abs(wT.mean()) < 0.03
    assert abs(wT.var() - 1.0) < 0.05
    b = sample_paths(lat, 20_000, seed=7)
    assert np.array_equal(a.increments, b.increments)
    # a path depends on (seed, index) only
    c = sample_paths(lat, 5000, seed=7)
    assert np.array_equal(a.increments[:5000], c.increments)
    assert not np.array_equal(sample_paths(lat, 100, seed=8).increments, a.increments[:100])


def test_path_nodes_consistent_with_increments(tmp_path):
    lat = BrownianLattice(1.0, 6, 2)
    p = sample_paths(lat, 10, seed=1)
    assert p.nodes.shape == (10, 7, 2)
    assert np.array_equal(np.diff(p.nodes, axis=1), (p.increments > 0).astype(int))
    p.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "path,step,axis,increment" and len(rows) == 1 + 10 * 6 * 2
