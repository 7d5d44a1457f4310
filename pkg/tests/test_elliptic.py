import numpy as np
import pytest

from saddlecert.elliptic import (EllipticOperator, InadmissibleError, adjoint_apply,
                                 jacobian_apply, jacobian_matrix, neumann_stiffness,
                                 operator_norm_estimates, second_adjoint_apply,
                                 second_adjoint_matrix, solve_state)
from saddlecert.grid import Grid


def _manufactured_error(n):
    # y = cos(pi x) satisfies the Neumann conditions; f = (pi^2 + u) y
    g = Grid(1, n)
    x = g.coordinates()[0]
    u = 1.0 + 0.5 * np.sin(2 * np.pi * x)
    y = np.cos(np.pi * x)
    f = (np.pi ** 2 + u) * y
    return g.norm(solve_state(EllipticOperator(g), u, f).y - y)


def test_manufactured_convergence_order():
    errs = [_manufactured_error(n) for n in (32, 64, 128)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9), orders


def test_manufactured_2d():
    errs = []
    for n in (16, 32):
        g = Grid(2, n)
        x0, x1 = g.coordinates()
        y = np.cos(np.pi * x0) * np.cos(np.pi * x1)
        u = 2.0 + x0 * x1
        f = (2 * np.pi ** 2 + u) * y
        errs.append(g.norm(solve_state(EllipticOperator(g), u, f).y - y))
    assert np.log2(errs[0] / errs[1]) >= 1.9


@pytest.mark.parametrize("dim,n", [(1, 16), (1, 100), (2, 8), (2, 70)])
def test_constant_coefficients(dim, n):
    # u = f = 1 gives y = 1; the adjoint solve with g = 1 gives z = -1
    g = Grid(dim, n)
    op = EllipticOperator(g)
    c = solve_state(op, np.ones(g.node_count), np.ones(g.node_count))
    assert np.allclose(c.y, 1.0, atol=1e-10)
    assert op.uses_direct == (n <= 64)
    assert np.allclose(adjoint_apply(c, np.ones(g.node_count)), -1.0, atol=1e-10)


def test_stiffness_rows_sum_to_zero():
    for g in (Grid(1, 9), Grid(2, 5)):
        A = neumann_stiffness(g)
        assert np.allclose(A @ np.ones(g.node_count), 0.0)
        assert abs(A - A.T).max() == 0.0


def test_floor_enforced():
    g = Grid(1, 8)
    u = np.ones(8)
    u[5] = 1e-4
    with pytest.raises(InadmissibleError) as exc:
        solve_state(EllipticOperator(g), u, np.ones(8))
    assert exc.value.node == 5


def test_zero_source_gives_trivial_state():
    g = Grid(1, 8)
    c = solve_state(EllipticOperator(g), np.zeros(8), np.zeros(8))
    assert c.trivial and not c.y.any()
    assert not jacobian_apply(c, np.ones(8)).any()


def _random_cache(dim, n, seed):
    g = Grid(dim, n)
    rng = np.random.default_rng(seed)
    u = 0.5 + rng.random(g.node_count)
    f = 1.0 + rng.random(g.node_count)
    return g, rng, solve_state(EllipticOperator(g), u, f)


@pytest.mark.parametrize("dim,n", [(1, 40), (2, 10)])
def test_adjoint_identity(dim, n):
    g, rng, c = _random_cache(dim, n, 1)
    worst = 0.0
    for _ in range(100):
        h, w = rng.standard_normal((2, g.node_count))
        a = g.inner(jacobian_apply(c, h), w)
        b = g.inner(h, adjoint_apply(c, w))
        worst = max(worst, abs(a - b) / max(abs(a), abs(b)))
    assert worst <= 1e-11


def test_jacobian_finite_difference():
    g, rng, c = _random_cache(1, 48, 2)
    op = c.op
    f = (op.assemble(c.u) @ c.y) / g.weight
    h = rng.standard_normal(g.node_count)
    # central differences; much smaller steps let solve round-off dominate
    eps = 1e-4
    fd = (solve_state(op, c.u + eps * h, f).y - solve_state(op, c.u - eps * h, f).y) / (2 * eps)
    J = jacobian_apply(c, h)
    assert np.linalg.norm(fd - J) / np.linalg.norm(J) <= 1e-5


def test_second_derivative_finite_difference():
    g, rng, c = _random_cache(1, 48, 3)
    op = c.op
    f = (op.assemble(c.u) @ c.y) / g.weight
    v, xi = rng.standard_normal((2, g.node_count))
    eps = 1e-4
    plus = adjoint_apply(solve_state(op, c.u + eps * xi, f), v)
    minus = adjoint_apply(solve_state(op, c.u - eps * xi, f), v)
    fd = (plus - minus) / (2 * eps)
    H = second_adjoint_apply(c, v, xi)
    assert np.linalg.norm(fd - H) / np.linalg.norm(H) <= 1e-4


def test_dense_matrices_match_matrix_free():
    g, rng, c = _random_cache(1, 20, 4)
    J = jacobian_matrix(c)
    h = rng.standard_normal(20)
    assert np.allclose(J @ h, jacobian_apply(c, h), atol=1e-13)
    v = rng.standard_normal(20)
    H = second_adjoint_matrix(c, v)
    assert np.allclose(H, H.T)
    assert np.allclose(H @ h, second_adjoint_apply(c, v, h), atol=1e-12)


def test_norm_estimate_matches_svd():
    g, rng, c = _random_cache(1, 30, 5)
    est = operator_norm_estimates(c, alpha=0.5)
    s = np.linalg.svd(jacobian_matrix(c), compute_uv=False)[0]
    assert est.converged
    assert est.norm_J == pytest.approx(s, rel=1e-6)
    assert est.norm_B == pytest.approx(s * s / 0.5, rel=1e-6)
