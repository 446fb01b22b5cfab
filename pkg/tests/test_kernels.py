import numpy as np
import pytest

from kgexplain import kernels
from kgexplain.errors import ContractError


def random_edges(rng, n, n_edges):
    src = rng.integers(0, n, n_edges)
    dst = rng.integers(0, n, n_edges)
    return src.astype(np.int64), dst.astype(np.int64)


def dense_from_edges(vals, src, dst, n):
    m = np.zeros((n, n))
    for v, s, d in zip(vals, src, dst):
        m[s, d] += v
    return m


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_edge_spmv_matches_dense(backend):
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 10))
        src, dst = random_edges(rng, n, int(rng.integers(0, 25)))
        vals = rng.random(len(src))
        u = rng.random(n)
        out = kernels.impl("edge_spmv", backend)(u, vals, src, dst, n)
        expected = u @ dense_from_edges(vals, src, dst, n)
        np.testing.assert_allclose(out, expected, atol=1e-12)


def test_backends_agree():
    if "numba" not in kernels.available_backends():
        pytest.skip("numba not installed")
    rng = np.random.default_rng(1)
    n, E = 50, 300
    src, dst = random_edges(rng, n, E)
    vals = rng.random(E)
    u = rng.random(n)
    g = rng.random(n)
    rows = rng.random((E, 4))
    counts = rng.integers(0, 5, n)
    for name, args in (
        ("edge_spmv", (u, vals, src, dst, n)),
        ("edge_spmv_bw", (g, u, vals, src, dst)),
        ("scatter_add_rows", (rows, dst, n)),
        ("scatter_add_vec", (vals, dst, n)),
        ("walk_step", (counts, src, dst, n)),
    ):
        a = kernels.impl(name, "numba")(*args)
        b = kernels.impl(name, "numpy")(*args)
        if isinstance(a, tuple):
            for x, y in zip(a, b):
                np.testing.assert_allclose(x, y, atol=1e-12)
        else:
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_edge_spmv_backward_matches_dense_adjoint():
    rng = np.random.default_rng(2)
    n, E = 7, 18
    src, dst = random_edges(rng, n, E)
    vals = rng.random(E)
    u = rng.random(n)
    g = rng.random(n)
    g_u, g_vals = kernels.edge_spmv_bw(g, u, vals, src, dst)
    m = dense_from_edges(vals, src, dst, n)
    np.testing.assert_allclose(g_u, m @ g, atol=1e-12)
    np.testing.assert_allclose(g_vals, u[src] * g[dst], atol=1e-12)


def test_walk_step_stays_integer():
    src = np.array([0, 1], dtype=np.int64)
    dst = np.array([1, 2], dtype=np.int64)
    counts = np.array([3, 0, 0], dtype=np.int64)
    out = kernels.walk_step(counts, src, dst, 3)
    assert out.dtype == np.int64
    assert out.tolist() == [0, 3, 0]


def test_backend_switching():
    prev = kernels.active_backend()
    with kernels.use_backend("numpy"):
        assert kernels.active_backend() == "numpy"
    assert kernels.active_backend() == prev
    with pytest.raises(ContractError):
        kernels.set_backend("cuda")
