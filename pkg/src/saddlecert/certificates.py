"""Stability certificates for critical points of the fitting saddle problems.

The central quantity is a cone-constrained infimum

    inf { dist(A z, polar(R)) : z in D, |z| = 1 } = inf { |Proj_R(A z)| : z in D, |z| = 1 }

for product cones D, R of the real line (Moreau decomposition turns the distance to
the polar into the norm of a projection).  b-bar, the modulus estimate and the
necessary condition are all instances of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import elliptic as ell
from .pointwise import (ConeField, ConeKind, IndicatorInterval, InfeasibleError, MoreauYosida,
                        WeightedAbs, _broadcast, cone_field, strict_complementarity)
from .projection import ProjectionSpec
from .saddle import (SaddlePoint, SaddleProblem, SolverOptions, assemble_T, prox_scalar,
                     residual, solve_saddle, state)

TOL_CERT = 1e-6
N_DENSE_MAX = 4096
DEGENERACY_RTOL = 1e-12
SNAP_RTOL = 1e-6

_Z, _NN, _NP, _F = int(ConeKind.ZERO), int(ConeKind.NONNEG), int(ConeKind.NONPOS), int(ConeKind.FULL)


class DenseLimitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Cone-constrained infimum

def _kinds(c) -> np.ndarray:
    return c.kinds if isinstance(c, ConeField) else np.asarray(c, dtype=np.int8).reshape(-1)


def _project(kinds, x):
    return np.select([kinds == _Z, kinds == _NN, kinds == _NP],
                     [0.0, np.maximum(x, 0.0), np.minimum(x, 0.0)], default=x)


def _sigma_min_rect(M) -> tuple:
    """inf over unit z of |M z| and a minimiser."""
    r, c = M.shape
    if c == 0:
        return math.inf, None
    if r < c:
        # a null vector exists
        _, _, Vt = np.linalg.svd(M) if r else (None, None, np.eye(c))
        return 0.0, Vt[-1]
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    return float(s[-1]), Vt[-1]


@dataclass(frozen=True)
class ConeInf:
    lower: float
    upper: float
    witness: Optional[np.ndarray]
    exact: bool


def cone_infimum(A: np.ndarray, dom, rng_cone=None, starts: int = 16, iters: int = 500,
                 seed: int = 0) -> ConeInf:
    """Bracket inf_{z in dom, |z|=1} |Proj_rng(A z)| (|A z| when rng_cone is None).

    Subspace cones give the exact value from an SVD of the retained block.  Otherwise
    the lower bound drops sign constraints (half-lines in dom become lines, half-lines
    in rng_cone become {0} so that the polar is a line) and the upper bound comes from
    projected gradient descent on the sphere with multiple starts.
    """
    A = np.asarray(A, dtype=float)
    dk = _kinds(dom)
    rk = None if rng_cone is None else _kinds(rng_cone)
    if np.any(dk == ConeKind.EMPTY) or not np.any(dk != _Z):
        return ConeInf(math.inf, math.inf, None, True)
    if rk is not None and np.any(rk == ConeKind.EMPTY):
        raise ValueError("range cone must not contain empty nodes")

    half_d = (dk == _NN) | (dk == _NP)
    cols = np.flatnonzero(dk != _Z)
    if rk is None:
        rows = np.arange(A.shape[0])
        half_r = np.zeros(0, dtype=bool)
    else:
        half_r = (rk == _NN) | (rk == _NP)
        rows = np.flatnonzero(rk == _F)
    lower, wit = _sigma_min_rect(A[np.ix_(rows, cols)])
    if wit is not None:
        z = np.zeros(A.shape[1])
        z[cols] = wit
        wit = z
    if not np.any(half_d) and not np.any(half_r):
        return ConeInf(lower, lower, wit, True)

    def phi(z):
        Az = A @ z
        r = Az if rk is None else _project(rk, Az)
        return float(r @ r), r

    rng = np.random.default_rng(seed)
    step0 = 1.0 / max(np.linalg.norm(A, 2) ** 2, 1e-300)
    cand = []
    if wit is not None:
        cand.append(_project(dk, wit))
        cand.append(_project(dk, -wit))
    colnorm = np.einsum("ij,ij->j", A, A)[cols]
    for j in cols[np.argsort(colnorm, kind="stable")][:4]:
        e = np.zeros(A.shape[1])
        e[j] = -1.0 if dk[j] == _NP else 1.0
        cand.append(e)
    while len(cand) < starts:
        cand.append(_project(dk, rng.standard_normal(A.shape[1])))
    best_val, best_z = math.inf, None
    for z in cand[:max(starts, 1)]:
        nz = np.linalg.norm(z)
        if not nz > 0:
            continue
        z = z / nz
        val, r = phi(z)
        s = step0
        for _ in range(iters):
            grad = A.T @ r
            zt = _project(dk, z - s * grad)
            nt = np.linalg.norm(zt)
            if nt > 0:
                zt /= nt
                vt, rt = phi(zt)
                if vt < val:
                    z, val, r = zt, vt, rt
                    s *= 1.5
                    continue
            s *= 0.5
            if s < 1e-14 * step0:
                break
        if val < best_val:
            best_val, best_z = val, z
    upper = math.sqrt(max(best_val, 0.0))
    return ConeInf(min(lower, upper), upper, best_z, False)


# ---------------------------------------------------------------------------
# Feasible base points and neighbourhood sampling

def _base_spec(spec):
    return (spec.base, spec.gamma) if isinstance(spec, MoreauYosida) else (spec, 0.0)


def snap_feasible(spec, v, eta):
    """Nearby exactly feasible pair: (prox(v + eta), v + eta - prox(v + eta)).

    The second entry lies in the subdifferential at the first by the prox
    characterisation, so tolerance-free case classification applies.
    """
    w = np.asarray(v, dtype=float) + np.asarray(eta, dtype=float)
    pv = prox_scalar(spec, 1.0, w)
    return pv, w - pv


@dataclass(frozen=True)
class _Flip:
    node: int
    v: float
    eta: float
    cost_v: float
    cost_eta: float
    kind: str


def _node_flips(base, gamma, v, zeta, i, d_small):
    """Branch changes at one node as (v, zeta, label) in base coordinates."""
    out = []
    if isinstance(base, IndicatorInterval):
        lo, hi = base.lo, base.hi
        if v == hi or v == lo:
            s = 1.0 if v == hi else -1.0
            if zeta != 0.0:
                out.append((v, 0.0, "half"))
                out.append((v - s * d_small, 0.0, "line"))
            else:
                out.append((v - s * d_small, 0.0, "line"))
                out.append((v, s * d_small, "point"))
        else:
            b, s = (hi, 1.0) if hi - v <= v - lo else (lo, -1.0)
            out.append((b, 0.0, "half"))
            out.append((b, s * d_small, "point"))
    else:
        dl = base.weight
        if v != 0.0:
            out.append((0.0, zeta, "half"))
            out.append((0.0, zeta * (1 - 1e-6), "point"))
        elif abs(zeta) < dl:
            s = 1.0 if zeta >= 0 else -1.0
            out.append((0.0, s * dl, "half"))
            out.append((s * d_small, s * dl, "line"))
        else:
            s = 1.0 if zeta > 0 else -1.0
            out.append((s * d_small, zeta, "line"))
            out.append((0.0, zeta * (1 - 1e-6), "point"))
    return out


def _graph_projection(base, v, zeta):
    """Nearest point of the graph of the base subdifferential, node by node."""
    if isinstance(base, IndicatorInterval):
        lo, hi = _broadcast(base.lo, v.size), _broadcast(base.hi, v.size)
        c = [(np.clip(v, lo, hi), np.zeros_like(v)), (hi, np.maximum(zeta, 0.0)),
             (lo, np.minimum(zeta, 0.0))]
    else:
        dl = _broadcast(base.weight, v.size)
        c = [(np.maximum(v, 0.0), dl), (np.minimum(v, 0.0), -dl),
             (np.zeros_like(v), np.clip(zeta, -dl, dl))]
    d = np.array([(a - v) ** 2 + (b - zeta) ** 2 for a, b in c])
    k = np.argmin(d, axis=0)
    idx = np.arange(v.size)
    return (np.array([a for a, _ in c])[k, idx], np.array([b for _, b in c])[k, idx])


@dataclass
class NeighbourhoodSample:
    v: np.ndarray
    eta: np.ndarray
    label: str


def sample_neighbourhood(spec, v0, eta0, weights, t: float, count: int, seed: int = 0,
                         d_small: float = 1e-6) -> list:
    """Feasible pairs (v, eta), eta in dF*(v), with |v - v0| < t and |eta - eta0| < t.

    Includes the centre, single-node branch flips in order of cost, greedy multi-node
    flips of each type, and Gaussian perturbations projected onto the graph.
    """
    base, gamma = _base_spec(spec)
    v0 = np.asarray(v0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), v0.shape)
    zeta0 = eta0 - gamma * v0
    t2 = t * t
    flips = []
    for i in range(v0.size):
        bi = base.at(i)
        for vn, zn, lab in _node_flips(bi, gamma, float(v0[i]), float(zeta0[i]), i, d_small):
            en = zn + gamma * vn
            flips.append(_Flip(i, vn, en, w[i] * (vn - v0[i]) ** 2, w[i] * (en - eta0[i]) ** 2, lab))
    flips = [f for f in flips if f.cost_v < t2 and f.cost_eta < t2]
    flips.sort(key=lambda f: (max(f.cost_v, f.cost_eta), f.node, f.kind))

    samples = [NeighbourhoodSample(v0.copy(), eta0.copy(), "centre")]

    def apply(chosen, label):
        v, e = v0.copy(), eta0.copy()
        for f in chosen:
            v[f.node], e[f.node] = f.v, f.eta
        samples.append(NeighbourhoodSample(v, e, label))

    def greedy(pool, label):
        cv = ce = 0.0
        used, chosen = set(), []
        for f in pool:
            if f.node in used:
                continue
            if cv + f.cost_v < t2 and ce + f.cost_eta < t2:
                cv += f.cost_v
                ce += f.cost_eta
                used.add(f.node)
                chosen.append(f)
        if chosen:
            apply(chosen, f"{label}[{len(chosen)} nodes]")

    for kind in ("line", "half", "point"):
        greedy([f for f in flips if f.kind == kind], f"greedy-{kind}")
    greedy(flips, "greedy-mixed")
    n_single = max(0, (count - len(samples)) // 2)
    for f in flips[:n_single]:
        apply([f], f"flip-{f.kind}@{f.node}")

    rng = np.random.default_rng(seed)
    attempts = 0
    total_w = float(np.sum(w))
    while len(samples) < count and attempts < 20 * count:
        attempts += 1
        scale = t * rng.uniform(0.1, 0.9) / math.sqrt(2.0 * total_w)
        vp = v0 + scale * rng.standard_normal(v0.size)
        zp = (eta0 + scale * rng.standard_normal(v0.size)) - gamma * vp
        vq, zq = _graph_projection(base, vp, zp)
        eq_ = zq + gamma * vq
        if (np.sum(w * (vq - v0) ** 2) < t2 and np.sum(w * (eq_ - eta0) ** 2) < t2):
            samples.append(NeighbourhoodSample(vq, eq_, "gaussian"))
    return samples[:max(count, 1)]


# ---------------------------------------------------------------------------
# b-bar

@dataclass
class BbarEstimate:
    lower: float
    upper: float
    per_t: list
    witnesses: list
    space: str


def _centre(p: SaddleProblem, q: SaddlePoint):
    """Exactly feasible (v, eta) near (q.v, K(q.u)), weights and integrand.

    With a projection everything is expressed through block values.
    """
    eta_raw = state(p, q.u).y - p.data
    spec = _spec_for(p.fstar_reg, p.projection)
    if p.projection is None:
        v, eta = _checked_snap(spec, q.v, eta_raw)
        return v, eta, np.full(p.grid.node_count, p.grid.weight), spec
    P = p.projection
    v, eta = _checked_snap(spec, P.averages(q.v), P.averages(eta_raw))
    return v, eta, P.measures(), spec


def _checked_snap(spec, v, eta):
    """snap_feasible, refusing pairs that are not within SNAP_RTOL of the graph."""
    v = np.asarray(v, dtype=float)
    eta = np.asarray(eta, dtype=float)
    vs, es = snap_feasible(spec, v, eta)
    moved = np.abs(vs - v) + np.abs(es - eta)
    bad = np.flatnonzero(~(moved <= SNAP_RTOL * (1.0 + np.abs(v) + np.abs(eta))))
    if bad.size:
        raise InfeasibleError(bad, f"q is not critical: (v, K(u)) is off the subdifferential "
                                   f"graph by up to {moved.max():.3e} at {bad.size} node(s): "
                                   + ", ".join(map(str, bad[:10])))
    return vs, es


def _reduced_B(p: SaddleProblem, q: SaddlePoint, mode: str, B: Optional[np.ndarray] = None):
    """B-bar in nodal values, or in the orthonormal block basis when p has a projection."""
    N = p.grid.node_count
    if N > N_DENSE_MAX:
        raise DenseLimitError(f"dense assembly refused for {N} > {N_DENSE_MAX} unknowns")
    if B is None:
        B = assemble_T(p, q, mode).B_matrix()
    if p.projection is None:
        return B
    E = p.projection.basis()
    Bp = p.grid.weight * (E.T @ B @ E)
    return 0.5 * (Bp + Bp.T)


def _spec_for(spec, projection):
    """Per-block scalar integrand (parameters must be block constant)."""
    if projection is None:
        return spec
    base, gamma = _base_spec(spec)
    if isinstance(base, IndicatorInterval):
        nb = IndicatorInterval(projection.averages(_broadcast(base.lo, projection.grid.node_count)),
                               projection.averages(_broadcast(base.hi, projection.grid.node_count)))
    else:
        nb = WeightedAbs(projection.averages(_broadcast(base.weight, projection.grid.node_count)))
    return MoreauYosida(nb, gamma) if gamma > 0 else nb


def estimate_bbar(p: SaddleProblem, q: SaddlePoint, t_ladder: Sequence[float] = (0.2, 0.1, 0.05),
                  sample_count: int = 24, seed: int = 0, mode: str = "H",
                  B: Optional[np.ndarray] = None, starts: int = 16, iters: int = 500) -> BbarEstimate:
    """Bracket sup_t inf over sampled neighbourhood cones of |B z - nu| / |z|."""
    B = _reduced_B(p, q, mode, B)
    v0, eta0, wts, spec = _centre(p, q)
    space = "nodes" if p.projection is None else "blocks"
    cone_field(spec, v0, eta0)  # raises InfeasibleError on an infeasible centre
    per_t, wits = [], []
    for k, t in enumerate(t_ladder):
        lo_t = up_t = math.inf
        best = None
        for j, smp in enumerate(sample_neighbourhood(spec, v0, eta0, wts, t, sample_count, seed + k)):
            K = cone_field(spec, smp.v, smp.eta)
            r = cone_infimum(B, K, K, starts=starts, iters=iters, seed=seed + 1000 * k + j)
            lo_t = min(lo_t, r.lower)
            if r.upper < up_t:
                up_t, best = r.upper, smp.label
        per_t.append({"t": float(t), "lower": lo_t, "upper": up_t})
        wits.append({"t": float(t), "sample": best or "none", "upper": up_t})
    lower = max(d["lower"] for d in per_t)
    upper = max(d["upper"] for d in per_t)
    return BbarEstimate(min(lower, upper), upper, per_t, wits, space)


# ---------------------------------------------------------------------------
# c_G, modulus estimate, necessary condition

@dataclass(frozen=True)
class CGEstimate:
    value: float
    iterations: int
    converged: bool


def estimate_cG(p: SaddleProblem, q: SaddlePoint, mode: str = "H", tol: float = 1e-8,
                max_iter: int = 5000, seed: int = 0) -> CGEstimate:
    """Smallest eigenvalue of the symmetric part of G by shift-invert Lanczos.

    The spectrum clusters around alpha, which stalls plain inverse iteration; the
    Krylov variant separates the cluster in a few dozen solves.
    """
    if mode == "H":
        return CGEstimate(float(p.alpha), 0, True)
    T = assemble_T(p, q, "R0")
    G = T.G_matrix()
    G = 0.5 * (G + G.T)
    N = G.shape[0]
    # any shift below the spectrum keeps G - shift SPD; the Gershgorin bound is one
    shift = p.alpha - 1.01 * np.abs(G - p.alpha * np.eye(N)).sum(axis=1).max() - 1e-3 * p.alpha
    fac = sla.cho_factor(G - shift * np.eye(N))
    solves = [0]

    def inv(x):
        solves[0] += 1
        return sla.cho_solve(fac, x)

    if N <= 2:
        return CGEstimate(float(np.linalg.eigvalsh(G)[0]), 0, True)
    OPinv = spla.LinearOperator((N, N), matvec=inv, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(N)
    try:
        w = spla.eigsh(G, k=1, sigma=shift, which="LM", OPinv=OPinv, v0=v0,
                       tol=tol * 1e-4, maxiter=max_iter, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        lam = float(exc.eigenvalues[0]) if len(exc.eigenvalues) else math.nan
        return CGEstimate(lam, solves[0], False)
    return CGEstimate(float(w[0]), solves[0], True)


def block_T_matrix(G: np.ndarray, K: np.ndarray, gamma: float) -> np.ndarray:
    """Dense [[G, K^T], [-K, gamma I]]."""
    nu, nv = G.shape[0], K.shape[0]
    T = np.zeros((nu + nv, nu + nv))
    T[:nu, :nu] = G
    T[:nu, nu:] = K.T
    T[nu:, :nu] = -K
    T[nu:, nu:] = gamma * np.eye(nv)
    return T


def estimate_tildelip(T: np.ndarray, cone, starts: int = 16, iters: int = 500, seed: int = 0,
                      tol: float = 1e-12) -> float:
    """sup{|w| : w in cone, dist(T* w, polar(cone)) <= 1} = 1 / inf of the same distance.

    Uses the lower end of the infimum bracket, so the returned modulus is conservative.
    """
    r = cone_infimum(np.asarray(T).T, cone, cone, starts=starts, iters=iters, seed=seed)
    if math.isinf(r.lower):
        return 0.0
    if r.lower <= tol:
        return math.inf
    return 1.0 / r.lower


@dataclass(frozen=True)
class NecessaryCheck:
    c_lower: float
    c_upper: float
    passed: bool


def necessary_check(p: Optional[SaddleProblem] = None, q: Optional[SaddlePoint] = None,
                    Kt: Optional[np.ndarray] = None, cone=None, tol_cert: float = TOL_CERT,
                    seed: int = 0) -> NecessaryCheck:
    """inf over unit eta in K_F of |K* eta|; positivity is necessary for regularity."""
    if cone is None:
        v0, eta0, _, spec = _centre(p, q)
        cone = cone_field(spec, v0, eta0)
    if Kt is None:
        Kt = assemble_T(p, q, "H").K_matrix().T
        if p.projection is not None:
            Kt = Kt @ p.projection.basis() * math.sqrt(p.grid.weight)
    r = cone_infimum(Kt, cone, None, seed=seed)
    return NecessaryCheck(r.lower, r.upper, bool(r.lower > tol_cert))


# ---------------------------------------------------------------------------
# Projection certificate

@dataclass
class ProjectionCertificate:
    sigma_min: float
    b_bar_proj_lower: float
    sc_holds: bool
    violations: list
    matrix: np.ndarray = field(repr=False)


def projection_matrix(p: SaddleProblem, q: SaddlePoint, proj: ProjectionSpec) -> np.ndarray:
    """M_ij = <e_i, dS dS* e_j> in the orthonormal block basis."""
    J = ell.jacobian_matrix(state(p, q.u))
    E = proj.basis()
    JtE = J.T @ E
    M = p.grid.weight * (JtE.T @ JtE)
    return 0.5 * (M + M.T)


def projection_certificate(p: SaddleProblem, q: SaddlePoint, proj: Optional[ProjectionSpec] = None,
                           tol: float = 1e-9) -> ProjectionCertificate:
    proj = proj or p.projection
    if proj is None:
        raise ValueError("no projection given")
    if proj.orthonormality_error() > 1e-12:
        raise ValueError("projection basis is not orthonormal")
    M = projection_matrix(p, q, proj)
    sig = float(np.linalg.svd(M, compute_uv=False)[-1])
    c = state(p, q.u)
    spec = _spec_for(p.fstar_reg, proj)
    vb, eb = _checked_snap(spec, proj.averages(q.v), proj.averages(c.y - p.data))
    cone_field(spec, vb, eb)
    base, gamma = _base_spec(spec)
    zeta = eb - gamma * vb
    if isinstance(base, IndicatorInterval):
        rep = strict_complementarity("l1", vb, zeta, tol=tol)
    else:
        rep = strict_complementarity("linf", vb, zeta, delta=float(np.max(base.weight)), tol=tol)
    return ProjectionCertificate(sig, sig / p.alpha, rep.all_hold, rep.violations, M)


# ---------------------------------------------------------------------------
# Combined report

@dataclass
class CertifyOptions:
    mode: str = "H"
    tol_cert: float = TOL_CERT
    t_ladder: tuple = (0.2, 0.1, 0.05)
    sample_count: int = 24
    seed: int = 0
    starts: int = 16
    iters: int = 500


@dataclass
class CertificateReport:
    gamma: float
    c_G: float
    b_bar: float
    b_bar_upper: float
    tildelip: float
    ell_bound: float
    verdict: str
    provenance: dict
    necessary_c_lower: float = math.nan
    sigma_min: Optional[float] = None
    b_bar_proj_lower: Optional[float] = None
    sc_holds: Optional[bool] = None
    residual: float = math.nan
    per_t: list = field(default_factory=list)
    witnesses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "gamma", "c_G", "b_bar", "b_bar_upper", "tildelip", "ell_bound", "verdict",
            "provenance", "necessary_c_lower", "residual", "per_t", "witnesses")}
        if self.sigma_min is not None:
            d["projection"] = {"sigma_min": self.sigma_min,
                               "b_bar_proj_lower": self.b_bar_proj_lower,
                               "sc_holds": self.sc_holds}
        return d


def a_lower_gamma(c_G: float, gamma: float) -> float:
    """Constant for gamma > 0: choosing lambda = gamma - min(c_G, gamma) in the cone-infimum
    estimate leaves min(c_G, gamma)^2 in front of both |xi|^2 and |eta|^2."""
    if gamma <= 0 or c_G <= 0:
        return 0.0
    return min(c_G, gamma)


def a_lower_kv(c_kv: float, lam_G: float, norm_K: float, norm_KGinv: float) -> float:
    """Constant for the cone condition at gamma = 0.

    With r = T* w, eliminating xi gives c_KV |eta| <= |r2| + |K G^-1| |r1|, and then
    |xi| <= (|r1| + |K| |eta|) / lam_G.  Adding the two bounds:
    a = 1 / (1/lam_G + (1 + |K|/lam_G) sqrt(1 + |K G^-1|^2) / c_KV).
    """
    if c_kv <= 0 or lam_G <= 0 or not math.isfinite(norm_KGinv):
        return 0.0
    return 1.0 / (1.0 / lam_G + (1.0 + norm_K / lam_G) * math.sqrt(1.0 + norm_KGinv ** 2) / c_kv)


def certify(p: SaddleProblem, q: SaddlePoint, opts: CertifyOptions = CertifyOptions()) -> CertificateReport:
    prov = {}
    res = residual(p, q).norm
    if res > 1e-6:
        prov["warning"] = f"residual {res:.3e} is not small; q may not be critical"
    cg = estimate_cG(p, q, opts.mode, seed=opts.seed)
    prov["c_G"] = ("alpha (H mode)" if opts.mode == "H" else
                   f"shift-invert Lanczos on symmetric G, {cg.iterations} solves"
                   + ("" if cg.converged else ", not converged"))
    bb = estimate_bbar(p, q, opts.t_ladder, opts.sample_count, opts.seed, opts.mode,
                       starts=opts.starts, iters=opts.iters)
    prov["b_bar"] = (f"max over t in {list(opts.t_ladder)} of sampled lower bounds "
                     f"({opts.sample_count} samples per t, {bb.space} space)")
    prov["b_bar_upper"] = "max over t of the smallest sampled upper bound"
    b_bar, b_up = bb.lower, bb.upper

    T = assemble_T(p, q, opts.mode)
    G = T.G_matrix()
    K = T.K_matrix()
    v0, eta0, _, spec = _centre(p, q)
    KF = cone_field(spec, v0, eta0)
    if p.projection is not None:
        E = p.projection.basis() * math.sqrt(p.grid.weight)
        K = E.T @ K
    nec = necessary_check(Kt=K.T, cone=KF, tol_cert=opts.tol_cert, seed=opts.seed)
    prov["necessary_c_lower"] = "inf of |K* eta| over unit eta in K_F at q"

    proj_fields = {}
    if p.projection is not None:
        pc = projection_certificate(p, q)
        proj_fields = dict(sigma_min=pc.sigma_min, b_bar_proj_lower=pc.b_bar_proj_lower,
                           sc_holds=pc.sc_holds)
        prov["sigma_min"] = f"dense SVD of the {pc.matrix.shape[0]}x{pc.matrix.shape[0]} block matrix"
        if pc.sc_holds and pc.b_bar_proj_lower > b_bar:
            b_bar = pc.b_bar_proj_lower
            b_up = max(b_up, b_bar)
            prov["b_bar"] += "; raised to sigma_min/alpha (block strict complementarity holds)"

    V = np.concatenate([np.full(G.shape[0], _F, dtype=np.int8), KF.kinds])
    Tm = block_T_matrix(G, K, p.gamma)
    tl = estimate_tildelip(Tm, V, starts=opts.starts, iters=opts.iters, seed=opts.seed)
    prov["tildelip"] = "reciprocal of the cone infimum for T* on X x K_F at q"

    a_i = a_lower_gamma(cg.value, p.gamma)
    try:
        nKG = float(np.linalg.norm(K @ np.linalg.inv(G), 2))
    except np.linalg.LinAlgError:
        nKG = math.inf
    nK = float(np.linalg.norm(K, 2)) if K.size else 0.0
    a_ii = a_lower_kv(b_bar if b_bar > opts.tol_cert else 0.0, cg.value, nK, nKG)
    a = max(a_i, a_ii)
    ell_bound = 1.0 / a if a > 0 else math.inf
    prov["ell_bound"] = ("1/max(min(c_G, gamma), 1/(1/c_G + (1+|K|/c_G) sqrt(1+|K G^-1|^2)/b_bar)); "
                         "derived constants, checked on random instances")

    # Degeneracy is only claimed with an exact witness: a unit eta in K_F with K* eta = 0
    # up to round-off, which rules out regularity at gamma = 0.  A small sampled b_bar_upper
    # alone is evidence, not proof.
    k_scale = 1.0 + nK
    if p.gamma > 0 or b_bar > opts.tol_cert:
        verdict = "MetricallyRegular"
    elif nec.c_upper <= DEGENERACY_RTOL * k_scale:
        verdict = "CertifiedDegenerate"
        prov["verdict"] = "necessary condition fails: K* vanishes on a unit vector of K_F"
    else:
        verdict = "NotCertified"
    if cg.value <= 0:
        prov["c_G_warning"] = "c_G <= 0: G is not positive definite at q"
    return CertificateReport(
        gamma=float(p.gamma), c_G=cg.value, b_bar=b_bar, b_bar_upper=b_up, tildelip=tl,
        ell_bound=ell_bound, verdict=verdict, provenance=prov, necessary_c_lower=nec.c_lower,
        residual=res, per_t=bb.per_t, witnesses=bb.witnesses, **proj_fields)


# ---------------------------------------------------------------------------
# Empirical probes

@dataclass
class PerturbationRow:
    magnitude: float
    distance: float
    ratio: float
    converged: bool
    iterations: int
    residual: float
    skipped: bool = False


@dataclass
class AubinTable:
    rows: list
    blow_up: bool
    spread: float


def _blow_up(rows) -> bool:
    ok = [r for r in rows if r.converged and not r.skipped and r.ratio > 0]
    for a in ok:
        for b in ok:
            if b.magnitude <= a.magnitude / 99.0 and b.ratio > 10.0 * a.ratio:
                return True
    return False


def empirical_aubin(p: SaddleProblem, qbar: SaddlePoint, perturbations: Sequence[np.ndarray],
                    opts: SolverOptions = SolverOptions()) -> AubinTable:
    """Re-solve with data + dy from qbar and record |q - q_dy| / |dy|."""
    g = p.grid
    rows = []
    for dy in perturbations:
        dy = np.asarray(dy, dtype=float)
        m = g.norm(dy)
        if m == 0.0:
            rows.append(PerturbationRow(0.0, 0.0, math.nan, True, 0, 0.0, skipped=True))
            continue
        try:
            r = solve_saddle(p.with_(data=p.data + dy), qbar, opts)
        except (ell.InadmissibleError, ell.SolverBreakdown):
            rows.append(PerturbationRow(m, math.nan, math.nan, False, 0, math.nan))
            continue
        dist = qbar.distance(r.point, g)
        rows.append(PerturbationRow(m, dist, dist / m, r.converged, r.iterations, r.residual))
    good = [r.ratio for r in rows if r.converged and not r.skipped]
    spread = (max(good) / min(good)) if good and min(good) > 0 else math.inf
    return AubinTable(rows, _blow_up(rows), spread)


@dataclass
class GammaRow:
    gamma: float
    distance: float
    converged: bool
    iterations: int
    residual: float


@dataclass
class GammaSweep:
    rows: list
    slope: float


def gamma_sweep(p: SaddleProblem, q0: SaddlePoint, gammas: Sequence[float],
                opts: SolverOptions = SolverOptions()) -> GammaSweep:
    """Solve at each gamma from q0 (a solution at p.gamma) and report distances."""
    g = p.grid
    rows = []
    for gm in gammas:
        try:
            r = solve_saddle(p.with_(gamma=float(gm)), q0, opts)
        except (ell.InadmissibleError, ell.SolverBreakdown):
            rows.append(GammaRow(float(gm), math.nan, False, 0, math.nan))
            continue
        rows.append(GammaRow(float(gm), q0.distance(r.point, g), r.converged, r.iterations, r.residual))
    slopes = [r.distance / abs(r.gamma - p.gamma) for r in rows
              if r.converged and r.gamma != p.gamma and math.isfinite(r.distance)]
    return GammaSweep(rows, max(slopes) if slopes else 0.0)
