import json
import math
from pathlib import Path

import numpy as np
import pytest

from saddlecert import elliptic as ell
from saddlecert.certificates import (DenseLimitError, CertifyOptions, _checked_snap, _project,
                                     a_lower_gamma, a_lower_kv, block_T_matrix, certify,
                                     cone_infimum, empirical_aubin, estimate_bbar, estimate_cG,
                                     estimate_tildelip, gamma_sweep, necessary_check,
                                     projection_certificate, projection_matrix,
                                     sample_neighbourhood)
from saddlecert.cli import Instance, load_config, parse_config
from saddlecert.projection import ProjectionSpec
from saddlecert.pointwise import ConeKind, IndicatorInterval, InfeasibleError, cone_field
from saddlecert.elliptic import EllipticOperator
from saddlecert.grid import Grid
from saddlecert.saddle import SaddlePoint, SaddleProblem, assemble_T, solve_saddle, state

FIX = Path(__file__).parent / "fixtures"
Z, NN, NP, F = (int(k) for k in (ConeKind.ZERO, ConeKind.NONNEG, ConeKind.NONPOS, ConeKind.FULL))
TOL = 1e-10


def _load(name, **changes):
    cfg = json.loads((FIX / f"{name}.json").read_text())
    cfg.update(changes)
    return Instance(parse_config(cfg), FIX)


def _solved(name, **changes):
    inst = _load(name, **changes)
    r = solve_saddle(inst.problem, inst.initial_point(), inst.solver_options())
    assert r.converged
    return inst.problem, r.point, inst


@pytest.fixture(scope="module")
def l1():
    return _solved("l1_fit")


# --- cone infimum ------------------------------------------------------------------

def test_cone_infimum_subspace_values():
    assert cone_infimum(np.eye(3), [F, F, F]).lower == pytest.approx(1.0)
    r = cone_infimum(np.diag([2.0, 0.5]), [F, F], [F, F])
    assert r.exact and r.lower == pytest.approx(0.5) and r.upper == pytest.approx(0.5)
    assert cone_infimum(np.eye(2), [Z, Z]).lower == math.inf
    # restricted to the first coordinate only
    assert cone_infimum(np.diag([2.0, 0.5]), [F, Z], [F, F]).lower == pytest.approx(2.0)


def test_cone_infimum_half_lines_bracket_brute_force():
    rng = np.random.default_rng(11)
    for k in range(20):
        A = rng.standard_normal((2, 2))
        dom = rng.choice([NN, NP, F], 2)
        rc = rng.choice([NN, NP, F], 2)
        r = cone_infimum(A, dom, rc, seed=k)
        th = np.linspace(0, 2 * np.pi, 20001)
        Zs = _project(dom[None, :], np.stack([np.cos(th), np.sin(th)], 1))
        nz = np.linalg.norm(Zs, axis=1)
        Zs = Zs[nz > 1e-12] / nz[nz > 1e-12, None]
        brute = np.linalg.norm(_project(rc[None, :], Zs @ A.T), axis=1).min()
        assert r.lower <= brute + 1e-9
        # the sampled angles miss the true minimiser by at most |A| * spacing
        assert r.upper >= brute - np.linalg.norm(A, 2) * (th[1] - th[0])
        assert r.upper <= brute + 1e-9


# --- modulus ------------------------------------------------------------------------

def test_tildelip_trivial_cases():
    assert estimate_tildelip(3.0 * np.eye(4), [F] * 4) == pytest.approx(1 / 3)
    assert estimate_tildelip(np.eye(4), [Z] * 4) == 0.0
    assert estimate_tildelip(np.diag([1.0, 0.0]), [F, F]) == math.inf


def test_tildelip_matches_sphere_search():
    rng = np.random.default_rng(3)
    Q = rng.standard_normal((6, 6))
    T = Q @ Q.T + 0.1 * np.eye(6)
    cone = np.array([F, Z, F, F, Z, Z], dtype=np.int8)
    W = rng.standard_normal((200000, 3))
    W /= np.linalg.norm(W, axis=1)[:, None]
    full = np.zeros((W.shape[0], 6))
    full[:, [0, 2, 3]] = W
    inf = np.linalg.norm((full @ T)[:, [0, 2, 3]], axis=1).min()
    assert estimate_tildelip(T, cone) == pytest.approx(1 / inf, rel=0.02)


def test_tildelip_reciprocity():
    rng = np.random.default_rng(4)
    for k in range(10):
        Q = rng.standard_normal((5, 5))
        cone = rng.choice([Z, NN, NP, F], 5)
        cone[0] = F
        r = cone_infimum(Q.T, cone, cone, seed=k)
        tl = estimate_tildelip(Q, cone, seed=k)
        if math.isfinite(tl) and tl > 0:
            assert tl * r.lower == pytest.approx(1.0, abs=1e-6)


# --- constants ----------------------------------------------------------------------

def _instance(rng, n, m, kinds):
    Q = rng.standard_normal((n, n))
    G = Q @ Q.T + rng.uniform(0.05, 1.0) * np.eye(n)
    K = rng.standard_normal((m, n)) * rng.uniform(0.2, 3.0)
    return G, K, np.asarray(kinds, dtype=np.int8)


def _a_kv(G, K, c_kv):
    lam = float(np.linalg.eigvalsh(G)[0])
    s = float(np.linalg.norm(K @ np.linalg.inv(G), 2))
    return a_lower_kv(c_kv if c_kv > TOL else 0.0, lam, float(np.linalg.norm(K, 2)), s)


def test_branch_two_constant_sound_on_subspace_cones():
    rng = np.random.default_rng(2025)
    active = 0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 9 - n))
        kinds = rng.choice([Z, F], m)
        kinds[rng.integers(m)] = F
        G, K, kf = _instance(rng, n, m, kinds)
        Kf = K[kf == F]
        c_kv = float(np.linalg.svd(Kf @ np.linalg.solve(G, Kf.T), compute_uv=False)[-1])
        a = _a_kv(G, Kf, c_kv)
        exact = np.linalg.svd(block_T_matrix(G, Kf, 0.0), compute_uv=False)[-1]
        active += a > 0
        assert exact >= a * (1 - 1e-9)
    assert active >= 120


def test_branch_two_constant_sound_on_mixed_cones():
    rng = np.random.default_rng(7)
    for k in range(100):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kinds = rng.choice([Z, NN, NP, F], m)
        kinds[0] = max(kinds[0], NN)
        G, K, kf = _instance(rng, n, m, kinds)
        B = K @ np.linalg.solve(G, K.T)
        # the attained (upper) value of c_KV makes the check stricter, not looser
        a = _a_kv(G, K, cone_infimum(B, kf, kf, starts=8, iters=300, seed=k).upper)
        V = np.concatenate([np.full(n, F, dtype=np.int8), kf])
        T = block_T_matrix(G, K, 0.0)
        W = _project(V[None, :], rng.standard_normal((1000, n + m)))
        W = W[np.linalg.norm(W, axis=1) > 0]
        W /= np.linalg.norm(W, axis=1)[:, None]
        sampled = np.linalg.norm(_project(V[None, :], W @ T), axis=1).min()
        pg = cone_infimum(T.T, V, V, starts=8, iters=300, seed=k).upper
        assert min(sampled, pg) >= a * (1 - 1e-9)


def test_branch_one_constant_sound():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        G, K, _ = _instance(rng, n, m, [F] * m)
        gamma = float(rng.uniform(0.01, 2.0))
        a = a_lower_gamma(float(np.linalg.eigvalsh(G)[0]), gamma)
        assert np.linalg.svd(block_T_matrix(G, K, gamma), compute_uv=False)[-1] >= a * (1 - 1e-9)
    assert a_lower_gamma(1.0, 0.0) == 0.0


# --- c_G and the necessary condition ------------------------------------------------

def test_cG_modes(l1):
    p, q, _ = l1
    assert estimate_cG(p, q, "H").value == p.alpha
    G = assemble_T(p, q, "R0").G_matrix()
    lam = np.linalg.eigvalsh(0.5 * (G + G.T))[0]
    est = estimate_cG(p, q, "R0")
    assert est.converged
    assert est.value == pytest.approx(lam, abs=1e-7)
    assert estimate_cG(p, SaddlePoint(q.u, np.zeros_like(q.v)), "R0").value == pytest.approx(p.alpha)


def test_cG_random_dual_small_grid():
    p, q, _ = _solved("l1_fit", grid={"dim": 1, "n": 16})
    v = np.random.default_rng(9).uniform(-1, 1, 16)
    G = assemble_T(p, SaddlePoint(q.u, v), "R0").G_matrix()
    lam = np.linalg.eigvalsh(0.5 * (G + G.T))[0]
    assert estimate_cG(p, SaddlePoint(q.u, v), "R0").value == pytest.approx(lam, abs=1e-7)


def test_necessary_check_values(l1):
    p, q, _ = l1
    assert necessary_check(Kt=np.eye(3), cone=[Z] * 3).c_lower == math.inf
    assert necessary_check(Kt=np.eye(3), cone=[F] * 3).c_lower == pytest.approx(1.0)
    K = assemble_T(p, q, "H").K_matrix()
    nc = necessary_check(Kt=K.T, cone=[F] * K.shape[0])
    sv = np.linalg.svd(ell.jacobian_matrix(state(p, q.u)), compute_uv=False)[-1]
    assert nc.c_lower == pytest.approx(sv, rel=0.05)


def test_dense_limit():
    cfg = json.loads((FIX / "l1_fit.json").read_text())
    cfg["grid"] = {"dim": 2, "n": 70}
    inst = Instance(parse_config(cfg), FIX)
    q = SaddlePoint(np.ones(4900), np.zeros(4900))
    with pytest.raises(DenseLimitError):
        estimate_bbar(inst.problem, q)


# --- sampling and b-bar --------------------------------------------------------------

def test_neighbourhood_samples_are_feasible_and_close(l1):
    p, q, _ = l1
    eta = state(p, q.u).y - p.data
    v0, e0 = _checked_snap(p.fstar_reg, q.v, eta)
    w = p.grid.weight
    for t in (0.2, 0.05):
        for s in sample_neighbourhood(p.fstar_reg, v0, e0, w, t, 24, seed=1):
            cone_field(p.fstar_reg, s.v, s.eta)
            assert w * np.sum((s.v - v0) ** 2) < t * t
            assert w * np.sum((s.eta - e0) ** 2) < t * t


def test_bbar_bracket_ordered(l1):
    p, q, _ = l1
    bb = estimate_bbar(p, q, sample_count=8)
    assert bb.lower <= bb.upper
    assert all(d["lower"] <= d["upper"] for d in bb.per_t)


def test_off_graph_pair_is_infeasible(l1):
    p, q, _ = l1
    eta = state(p, q.u).y - p.data
    v = q.v.copy()
    j = int(np.argmax(np.abs(eta)))
    v[j] = -np.sign(eta[j])  # the wrong endpoint for a nonzero residual
    with pytest.raises(InfeasibleError) as exc:
        _checked_snap(p.fstar_reg, v, eta)
    assert j in list(exc.value.nodes)
    with pytest.raises(InfeasibleError):
        certify(p, SaddlePoint(q.u, v), CertifyOptions(sample_count=4))


# --- projection --------------------------------------------------------------------

@pytest.fixture(scope="module")
def proj():
    return _solved("projection")


def test_projection_single_block():
    p, q, _ = _solved("projection", projection_blocks=1)
    pc = projection_certificate(p, q)
    J = ell.jacobian_matrix(state(p, q.u))
    one = np.ones(p.grid.node_count)
    # e_1 = 1 / sqrt(|Omega|) with |Omega| = 1
    assert pc.sigma_min == pytest.approx(p.grid.weight * np.sum((J.T @ one) ** 2), rel=1e-10)
    assert pc.sigma_min > 0


def test_projection_sigma_decreases_with_refinement(proj):
    p, q, _ = proj
    sig = [float(np.linalg.svd(projection_matrix(p, q, ProjectionSpec(p.grid, nb)),
                               compute_uv=False)[-1]) for nb in (1, 2, 4, 8, 16)]
    assert all(a >= b for a, b in zip(sig, sig[1:]))


def test_projection_certificate(proj):
    p, q, _ = proj
    pc = projection_certificate(p, q)
    assert pc.sc_holds and pc.sigma_min > 0
    assert pc.b_bar_proj_lower == pytest.approx(pc.sigma_min / p.alpha)
    assert pc.matrix.shape == (8, 8)


def test_projection_strict_complementarity_failure():
    # v = 1 on a block with zero average residual
    g = Grid(1, 16)
    P = ProjectionSpec(g, 4)
    op = EllipticOperator(g)
    u = np.ones(16)
    y = state(SaddleProblem(op, np.ones(16), np.zeros(16), 1.0, IndicatorInterval()), u).y
    data = y.copy()
    data[:4] -= 0.1
    data[8:12] += 0.1
    v = np.zeros(16)
    v[:4], v[4:8], v[8:12], v[12:] = 1.0, 1.0, -1.0, 0.3
    data[12:] = y[12:]
    p = SaddleProblem(op, np.ones(16), data, 1.0, IndicatorInterval(), projection=P)
    pc = projection_certificate(p, SaddlePoint(u, v))
    assert not pc.sc_holds and 1 in pc.violations


def test_projection_bound_below_projected_bbar():
    p, q, _ = _solved("projection", grid={"dim": 1, "n": 32})
    pc = projection_certificate(p, q)
    bb = estimate_bbar(p, q, sample_count=12)
    assert pc.b_bar_proj_lower <= bb.upper


# --- verdicts ----------------------------------------------------------------------

def test_trivial_instance_certified_degenerate():
    p, q, _ = _solved("trivial")
    rep = certify(p, q, CertifyOptions(sample_count=4))
    assert rep.verdict == "CertifiedDegenerate"
    assert rep.b_bar == 0.0 and rep.necessary_c_lower == 0.0


def test_regularised_verdict_ignores_bbar(l1):
    p, q, _ = l1
    pg = p.with_(gamma=0.2)
    rg = solve_saddle(pg, q)
    rep = certify(pg, rg.point, CertifyOptions(sample_count=4, t_ladder=(0.01,)))
    assert rep.verdict == "MetricallyRegular"
    assert rep.ell_bound <= 1.0 / min(p.alpha, 0.2) + 1e-12


def test_verdict_monotone_in_gamma(l1):
    p, q, _ = l1
    order = {"CertifiedDegenerate": 0, "NotCertified": 1, "MetricallyRegular": 2}
    prev = -1
    for gm in (0.05, 0.1, 0.3):
        pg = p.with_(gamma=gm)
        r = solve_saddle(pg, q)
        rep = certify(pg, r.point, CertifyOptions(sample_count=4))
        assert order[rep.verdict] >= prev
        prev = order[rep.verdict]


def test_report_serialises(l1):
    p, q, _ = l1
    d = certify(p, q, CertifyOptions(sample_count=4)).to_dict()
    for k in ("gamma", "c_G", "b_bar", "b_bar_upper", "tildelip", "ell_bound", "verdict",
              "provenance"):
        assert k in d
    assert d["b_bar"] <= d["b_bar_upper"]


# --- empirical probes -------------------------------------------------------------

def test_empirical_aubin_skips_zero(l1):
    p, q, _ = l1
    d = np.random.default_rng(0).standard_normal(p.grid.node_count)
    tab = empirical_aubin(p, q, [np.zeros_like(d), 1e-3 * d])
    assert tab.rows[0].skipped and math.isnan(tab.rows[0].ratio)
    assert tab.rows[1].converged and tab.rows[1].ratio > 0


def test_gamma_sweep_rows(l1):
    p, q, _ = l1
    sw = gamma_sweep(p, q, [p.gamma])
    assert sw.rows[0].distance == 0.0 and sw.slope == 0.0
    wide = gamma_sweep(p, q, [0.1, 0.12, 0.15]).slope
    narrow = gamma_sweep(p, q, [0.1, 0.11, 0.125]).slope
    assert 0 < wide < math.inf
    assert narrow == pytest.approx(wide, rel=0.5)
