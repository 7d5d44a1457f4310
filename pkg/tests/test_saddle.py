import math
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from saddlecert.cli import Instance, load_config
from saddlecert.elliptic import EllipticOperator, solve_state
from saddlecert.grid import Grid
from saddlecert.pointwise import IndicatorInterval, MoreauYosida, WeightedAbs
from saddlecert.projection import ProjectionSpec
from saddlecert.saddle import (SaddlePoint, SaddleProblem, SolverOptions, assemble_T,
                               fstar_value, lagrangian, prox_fstar, prox_scalar, residual,
                               solve_saddle)

FIX = Path(__file__).parent / "fixtures"


def _problem(name):
    inst = Instance(load_config(FIX / f"{name}.json"), FIX)
    return inst.problem, inst


# --- prox --------------------------------------------------------------------------

def _scalar_fstar(spec, x):
    if isinstance(spec, MoreauYosida):
        return _scalar_fstar(spec.base, x) + 0.5 * spec.gamma * x * x
    if isinstance(spec, IndicatorInterval):
        return 0.0 if spec.lo <= x <= spec.hi else math.inf
    return spec.weight * abs(x)


def _brute_prox(spec, sigma, w):
    base = spec.base if isinstance(spec, MoreauYosida) else spec
    if isinstance(base, IndicatorInterval):
        bounds = (base.lo, base.hi)
    else:
        bounds = (-abs(w) - 1.0, abs(w) + 1.0)
    obj = lambda x: sigma * _scalar_fstar(spec, x) + 0.5 * (x - w) ** 2
    res = minimize_scalar(obj, bounds=bounds, method="bounded", options={"xatol": 1e-10})
    # the bounded search never evaluates the endpoints themselves
    cands = [res.x, bounds[0], bounds[1], 0.0]
    return min(cands, key=lambda x: (obj(x), x))


SPECS = [IndicatorInterval(-1.0, 1.0), IndicatorInterval(-0.3, 2.0), WeightedAbs(0.5),
         MoreauYosida(IndicatorInterval(-1.0, 1.0), 0.3), MoreauYosida(WeightedAbs(0.2), 2.0)]


def test_prox_matches_brute_force():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(1000):
        spec = SPECS[k % len(SPECS)]
        sigma = float(rng.uniform(0.05, 5.0))
        w = float(rng.uniform(-4.0, 4.0))
        got = float(prox_scalar(spec, sigma, np.array([w]))[0])
        worst = max(worst, abs(got - _brute_prox(spec, sigma, w)))
    assert worst <= 1e-6


def test_projected_prox_stays_blockwise():
    g = Grid(1, 12)
    P = ProjectionSpec(g, 3)
    w = np.random.default_rng(0).standard_normal(12) * 3
    v = prox_fstar(IndicatorInterval(-1.0, 1.0), 0.7, w, P)
    assert np.allclose(v, P.project(v))
    assert np.allclose(P.averages(v), np.clip(P.averages(w), -1, 1))


def test_fstar_value_domain():
    g = Grid(1, 4)
    ind = IndicatorInterval(-1.0, 1.0)
    assert fstar_value(ind, np.array([0.0, 1.0, -1.0, 0.5]), g) == 0.0
    assert fstar_value(ind, np.array([0.0, 1.1, 0.0, 0.0]), g) == math.inf
    assert fstar_value(WeightedAbs(2.0), np.ones(4), g) == pytest.approx(2.0)
    P = ProjectionSpec(g, 2)
    assert fstar_value(ind, np.array([0.1, 0.2, 0.0, 0.0]), g, P) == math.inf


# --- solver --------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["l1_fit", "linf_fit"])
def test_fixtures_converge(name):
    p, inst = _problem(name)
    r = solve_saddle(p, inst.initial_point(), inst.solver_options())
    assert r.converged and r.residual <= 1e-8
    assert residual(p, r.point).norm <= 1e-8
    assert r.point.u.min() >= p.op.u_floor


def test_trivial_instance_is_exactly_zero():
    p, inst = _problem("trivial")
    r = solve_saddle(p, inst.initial_point(), inst.solver_options())
    assert r.converged and r.residual == 0.0
    assert not r.point.u.any() and not r.point.v.any()


def test_l1_solution_satisfies_inclusion():
    p, inst = _problem("l1_fit")
    q = solve_saddle(p, inst.initial_point(), inst.solver_options()).point
    eta = solve_state(p.op, q.u, p.f).y - p.data
    # with gamma > 0 the dual variable is the clipped scaled residual
    assert np.allclose(q.v, np.clip(eta / p.gamma, -1, 1), atol=1e-6)


def test_dual_variable_maximises_lagrangian():
    p, inst = _problem("l1_fit")
    q = solve_saddle(p, inst.initial_point(), inst.solver_options()).point
    L0 = lagrangian(p, q)
    rng = np.random.default_rng(5)
    for _ in range(50):
        v = np.clip(q.v + 0.3 * rng.standard_normal(q.v.size), -1, 1)
        assert lagrangian(p, SaddlePoint(q.u, v)) <= L0 + 1e-9


def test_regularisation_path_shrinks_u():
    p, inst = _problem("l1_fit")
    norms = []
    for alpha in (0.01, 0.1, 1.0):
        pa = p.with_(alpha=alpha)
        r = solve_saddle(pa, inst.initial_point(), inst.solver_options())
        assert r.converged
        norms.append(pa.grid.norm(r.point.u))
    assert norms[0] >= norms[1] >= norms[2]


def test_reversal_equivariance():
    p, inst = _problem("linf_fit")
    opts = inst.solver_options()
    r = solve_saddle(p, inst.initial_point(), opts)
    pr = p.with_(f=p.f[::-1], data=p.data[::-1])
    rr = solve_saddle(pr, inst.initial_point(), opts)
    assert np.allclose(rr.point.u, r.point.u[::-1], atol=1e-6)
    assert np.allclose(rr.point.v, r.point.v[::-1], atol=1e-6)


def test_nonconvergence_reports_best_iterate():
    p, inst = _problem("l1_fit")
    r = solve_saddle(p, inst.initial_point(), SolverOptions(max_iter=5))
    assert not r.converged and r.status == "max_iter"
    assert r.residual == pytest.approx(min(r.history))


def test_block_operator_h_mode():
    p, inst = _problem("l1_fit")
    q = solve_saddle(p, inst.initial_point(), inst.solver_options()).point
    T = assemble_T(p, q, "H")
    K = T.K_matrix()
    assert np.allclose(T.G_matrix(), p.alpha * np.eye(K.shape[0]))
    assert np.allclose(T.B_matrix(), K @ K.T / p.alpha)
    xi = np.random.default_rng(1).standard_normal(K.shape[0])
    assert np.allclose(T.K_apply(xi), K @ xi)
    assert np.allclose(T.Kt_apply(xi), K.T @ xi)


def test_block_operator_r0_mode_symmetric():
    p, inst = _problem("l1_fit")
    q = solve_saddle(p, inst.initial_point(), inst.solver_options()).point
    T = assemble_T(p, q, "R0")
    G = T.G_matrix()
    assert np.allclose(G, G.T)
    B = T.B_matrix()
    assert np.allclose(B, B.T)
    with pytest.raises(ValueError):
        assemble_T(p, q, "X")


def test_problem_validation():
    g = Grid(1, 8)
    op = EllipticOperator(g)
    with pytest.raises(ValueError):
        SaddleProblem(op, np.ones(8), np.ones(7), 1.0, IndicatorInterval())
    with pytest.raises(ValueError):
        SaddleProblem(op, np.ones(8), np.ones(8), 0.0, IndicatorInterval())
    with pytest.raises(ValueError):
        SaddleProblem(op, np.ones(8), np.ones(8), 1.0, IndicatorInterval(), gamma=-1.0)
