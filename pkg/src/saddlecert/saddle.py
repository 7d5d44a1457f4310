"""Saddle-point problems  min_u max_v  alpha/2 |u|^2 + <S(u) - y_data, v> - F*(v).

F* is the indicator of [-1, 1] (L1 data fitting) or delta |.| (L-infinity fitting),
optionally with a Moreau-Yosida term gamma/2 |v|^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import elliptic as ell
from .grid import GridFunction
from .pointwise import IndicatorInterval, MoreauYosida, WeightedAbs, _broadcast
from .projection import ProjectionSpec


def _vals(x) -> np.ndarray:
    if isinstance(x, GridFunction):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class SaddleProblem:
    op: ell.EllipticOperator
    f: np.ndarray
    data: np.ndarray
    alpha: float
    fstar: object  # IndicatorInterval or WeightedAbs
    gamma: float = 0.0
    projection: Optional[ProjectionSpec] = None

    def __post_init__(self):
        N = self.op.grid.node_count
        for name in ("f", "data"):
            arr = np.array(_vals(getattr(self, name)), dtype=float)
            if arr.size != N or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must hold {N} finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if not isinstance(self.fstar, (IndicatorInterval, WeightedAbs)):
            raise TypeError("fstar must be IndicatorInterval or WeightedAbs")
        if self.projection is not None and self.projection.grid != self.op.grid:
            raise ValueError("projection lives on a different grid")

    @property
    def grid(self):
        return self.op.grid

    @property
    def kind(self) -> str:
        return "l1" if isinstance(self.fstar, IndicatorInterval) else "linf"

    @property
    def fstar_reg(self):
        """F* including the Moreau-Yosida term when gamma > 0."""
        return MoreauYosida(self.fstar, self.gamma) if self.gamma > 0 else self.fstar

    def with_(self, **changes) -> "SaddleProblem":
        kw = dict(op=self.op, f=self.f, data=self.data, alpha=self.alpha,
                  fstar=self.fstar, gamma=self.gamma, projection=self.projection)
        kw.update(changes)
        return SaddleProblem(**kw)


@dataclass(frozen=True, eq=False)
class SaddlePoint:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("u", "v"):
            arr = np.array(_vals(getattr(self, name)), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, p: SaddleProblem, u0: float = 0.0) -> "SaddlePoint":
        N = p.grid.node_count
        return cls(np.full(N, float(u0)), np.zeros(N))

    def distance(self, other: "SaddlePoint", grid) -> float:
        return math.hypot(grid.norm(self.u - other.u), grid.norm(self.v - other.v))


@dataclass(frozen=True)
class Residual:
    r_primal: np.ndarray
    r_dual: np.ndarray
    norm: float


def state(p: SaddleProblem, u) -> ell.StateCache:
    return ell.solve_state(p.op, u, p.f)


def fstar_value(spec, v, grid, projection: Optional[ProjectionSpec] = None,
                tol: float = 0.0) -> float:
    """Integral of the conjugate integrand; +inf outside its domain."""
    v = _vals(v)
    if projection is not None and np.abs(v - projection.project(v)).max(initial=0.0) > 1e-12:
        return math.inf
    extra = 0.0
    if isinstance(spec, MoreauYosida):
        extra = 0.5 * spec.gamma * grid.inner(v, v)
        spec = spec.base
    if isinstance(spec, IndicatorInterval):
        n = v.size
        lo, hi = _broadcast(spec.lo, n), _broadcast(spec.hi, n)
        if np.any(v < lo - tol) or np.any(v > hi + tol):
            return math.inf
        return extra
    if isinstance(spec, WeightedAbs):
        return extra + grid.weight * float(np.sum(_broadcast(spec.weight, v.size) * np.abs(v)))
    raise TypeError(f"unsupported conjugate {spec!r}")


def prox_scalar(spec, sigma: float, w: np.ndarray) -> np.ndarray:
    """Pointwise prox of sigma * f*."""
    w = np.asarray(w, dtype=float)
    if isinstance(spec, MoreauYosida):
        s = 1.0 + sigma * spec.gamma
        return prox_scalar(spec.base, sigma / s, w / s)
    if isinstance(spec, IndicatorInterval):
        n = w.size
        return np.clip(w, _broadcast(spec.lo, n), _broadcast(spec.hi, n))
    if isinstance(spec, WeightedAbs):
        thr = sigma * _broadcast(spec.weight, w.size)
        return np.sign(w) * np.maximum(np.abs(w) - thr, 0.0)
    raise TypeError(f"unsupported conjugate {spec!r}")


def prox_fstar(spec, sigma: float, w, projection: Optional[ProjectionSpec] = None) -> np.ndarray:
    """prox of sigma F*; with a projection the dual variable is confined to blocks.

    Restricting F* to piecewise constants makes the prox act on block averages, since
    the quadratic distance splits into a block-constant part and an orthogonal part.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    w = _vals(w)
    if projection is None:
        return prox_scalar(spec, sigma, w)
    if not isinstance(spec, MoreauYosida) and not np.isscalar(getattr(spec, "weight", 0.0)):
        raise ValueError("projected prox needs block-constant integrand parameters")
    return projection.expand(prox_scalar(spec, sigma, projection.averages(w)))


def lagrangian(p: SaddleProblem, q: SaddlePoint) -> float:
    c = state(p, q.u)
    g = p.grid
    fs = fstar_value(p.fstar_reg, q.v, g, p.projection)
    if math.isinf(fs):
        return -math.inf
    return 0.5 * p.alpha * g.inner(q.u, q.u) + g.inner(c.y - p.data, q.v) - fs


def _residual_parts(p, u, v, y, grad_v, sigma):
    r_p = p.alpha * u + grad_v
    r_d = v - prox_fstar(p.fstar_reg, sigma, v + sigma * (y - p.data), p.projection)
    return r_p, r_d


def residual(p: SaddleProblem, q: SaddlePoint, sigma: float = 1.0) -> Residual:
    """Proximal form of the critical point conditions."""
    c = state(p, q.u)
    r_p, r_d = _residual_parts(p, q.u, q.v, c.y, ell.adjoint_apply(c, q.v), sigma)
    g = p.grid
    return Residual(r_p, r_d, math.hypot(g.norm(r_p), g.norm(r_d)))


# ---------------------------------------------------------------------------
# Solver

@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 20000
    sigma_residual: float = 1.0
    step_product: float = 0.9
    step_ratio: Optional[float] = None
    restimate_every: int = 200
    history_stride: int = 10
    enforce_floor: bool = True
    seed: int = 0


@dataclass
class SolveResult:
    point: SaddlePoint
    converged: bool
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    tau: float = 0.0
    sigma: float = 0.0
    status: str = "converged"
    step_reductions: int = 0


STALL_FACTOR = 0.99
MIN_STEP_PRODUCT = 1e-4


def _lipschitz(cache, seed):
    return ell.operator_norm_estimates(cache, 1.0, seed=seed, tol=1e-8, max_iter=200).norm_J


def solve_saddle(p: SaddleProblem, init: SaddlePoint, opts: SolverOptions = SolverOptions()) -> SolveResult:
    """Primal-dual hybrid gradient with K linearised at every iterate.

    u+ = prox_tauG(u - tau dS(u)* v),  v+ = prox_sigmaF*(v + sigma [K(u+) + dS(u+)(u+ - u)]).
    Steps satisfy tau sigma L^2 = step_product where L estimates |dS| and is refreshed
    periodically; it only ever grows so the step condition stays satisfied.
    """
    g = p.grid
    floor = p.op.u_floor
    u = np.array(init.u, dtype=float)
    v = np.array(init.v, dtype=float)
    cache = state(p, u)
    trivial = cache.trivial
    L = max(_lipschitz(cache, opts.seed), 1e-12) * 1.05
    r = opts.step_ratio if opts.step_ratio is not None else (
        math.sqrt(p.gamma / p.alpha) if p.gamma > 0 else 1.0)

    def steps(L, product):
        s = math.sqrt(product) / L
        return s * r, s / r

    product = opts.step_product
    tau, sigma = steps(L, product)
    grad_v = ell.adjoint_apply(cache, v)
    r_p, r_d = _residual_parts(p, u, v, cache.y, grad_v, opts.sigma_residual)
    res = math.hypot(g.norm(r_p), g.norm(r_d))
    history = [res]
    best = (res, u.copy(), v.copy())
    window_start = res
    reductions = 0
    it = 0
    status = "converged" if res <= opts.tol else "max_iter"
    while res > opts.tol and it < opts.max_iter:
        it += 1
        u_new = (u - tau * grad_v) / (1.0 + tau * p.alpha)
        if trivial:
            u_new = np.zeros_like(u)  # no coupling: the u-subproblem is solved exactly
        elif opts.enforce_floor:
            np.maximum(u_new, floor, out=u_new)
        cache_new = state(p, u_new)
        k_lin = (cache_new.y - p.data) + ell.jacobian_apply(cache_new, u_new - u)
        v = prox_fstar(p.fstar_reg, sigma, v + sigma * k_lin, p.projection)
        u, cache = u_new, cache_new
        grad_v = ell.adjoint_apply(cache, v)
        r_p, r_d = _residual_parts(p, u, v, cache.y, grad_v, opts.sigma_residual)
        res = math.hypot(g.norm(r_p), g.norm(r_d))
        if not (math.isfinite(res) and np.abs(u).max() < 1e12 and np.abs(v).max() < 1e12):
            status = "diverged"
            break
        if res < best[0]:
            best = (res, u.copy(), v.copy())
        if it % opts.history_stride == 0:
            history.append(res)
        if opts.restimate_every and it % opts.restimate_every == 0 and not trivial:
            L = max(L, _lipschitz(cache, opts.seed) * 1.05)
            # The linearised iteration can cycle near branch switches; shrinking both
            # steps and restarting from the best iterate breaks the cycle.
            if best[0] > STALL_FACTOR * window_start and product > MIN_STEP_PRODUCT:
                product = max(product / 2.0, MIN_STEP_PRODUCT)
                reductions += 1
                u, v = best[1].copy(), best[2].copy()
                cache = state(p, u)
                grad_v = ell.adjoint_apply(cache, v)
            window_start = best[0]
            tau, sigma = steps(L, product)
    if res <= opts.tol:
        status = "converged"
        out_u, out_v = u, v
    else:
        if status != "diverged":
            status = "max_iter"
        res, out_u, out_v = best
    if history[-1] != res:
        history.append(res)
    return SolveResult(SaddlePoint(out_u, out_v), status == "converged", it, res,
                       history, tau, sigma, status, reductions)


# ---------------------------------------------------------------------------
# Linear part of the derivative of the critical point map

@dataclass(frozen=True, eq=False)
class BlockOperator:
    """T = [[G, K*], [-K, gamma I]] with G = alpha I (H mode) or alpha I + d_u[dS(u)* v] (R0 mode)."""

    mode: str
    alpha: float
    gamma: float
    cache: ell.StateCache
    kcache: ell.StateCache
    v: np.ndarray

    def G_apply(self, xi) -> np.ndarray:
        out = self.alpha * _vals(xi)
        if self.mode == "R0":
            out = out + ell.second_adjoint_apply(self.cache, self.v, xi)
        return out

    def K_apply(self, xi) -> np.ndarray:
        return ell.jacobian_apply(self.kcache, xi)

    def Kt_apply(self, eta) -> np.ndarray:
        return ell.adjoint_apply(self.kcache, eta)

    def G_matrix(self) -> np.ndarray:
        N = self.cache.grid.node_count
        G = self.alpha * np.eye(N)
        if self.mode == "R0":
            G = G + ell.second_adjoint_matrix(self.cache, self.v)
        return G

    def K_matrix(self) -> np.ndarray:
        return ell.jacobian_matrix(self.kcache)

    def B_matrix(self) -> np.ndarray:
        """Nodal matrix of K G^-1 K*."""
        K = self.K_matrix()
        if self.mode == "H":
            B = (K @ K.T) / self.alpha
        else:
            B = K @ np.linalg.solve(self.G_matrix(), K.T)
        return 0.5 * (B + B.T)


def assemble_T(p: SaddleProblem, q: SaddlePoint, mode: str = "H", ubar=None) -> BlockOperator:
    """Block operator at q; in H mode K is linearised at ubar (default q.u)."""
    if mode not in ("H", "R0"):
        raise ValueError("mode must be 'H' or 'R0'")
    cache = state(p, q.u)
    kcache = cache if ubar is None else state(p, ubar)
    return BlockOperator(mode, p.alpha, p.gamma, cache, kcache, np.array(q.v))
