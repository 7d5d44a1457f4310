"""Finite-difference solution operator of -Lap y + u y = f with homogeneous Neumann data.

The discrete system is A_u y = M f with A_u = stiffness + h^d diag(u) and the lumped
mass M = h^d I.  Because M is a multiple of the identity, pointwise multiplication is
self-adjoint for the quadrature pairing and the adjoint of the Jacobian is simply its
transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, GridFunction

DIRECT_MAX_PER_AXIS = 64
CG_RTOL = 1e-12
STATE_RTOL = 1e-10


class InadmissibleError(ValueError):
    def __init__(self, min_value: float, node: int, floor: float):
        self.min_value, self.node, self.floor = min_value, node, floor
        super().__init__(f"u below floor {floor:g}: min value {min_value:.6g} at node {node}")


class SolverBreakdown(RuntimeError):
    pass


def _vals(x) -> np.ndarray:
    if isinstance(x, GridFunction):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


def neumann_stiffness(grid: Grid) -> sp.csr_matrix:
    """h^d times the cell-centred Neumann Laplacian (rows sum to zero)."""
    n = grid.n
    main = np.full(n, 2.0)
    main[[0, -1]] = 1.0
    L1 = sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1], format="csr")
    if grid.dim == 1:
        return (L1 / grid.h).tocsr()
    I = sp.identity(n, format="csr")
    return (sp.kron(L1, I) + sp.kron(I, L1)).tocsr()


@dataclass(frozen=True)
class EllipticOperator:
    grid: Grid
    u_floor: float = 1e-3
    direct_max_per_axis: int = DIRECT_MAX_PER_AXIS
    stiffness: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.u_floor > 0:
            raise ValueError("u_floor must be positive")
        object.__setattr__(self, "stiffness", neumann_stiffness(self.grid))

    def assemble(self, u) -> sp.csr_matrix:
        return (self.stiffness + sp.diags(self.grid.weight * _vals(u))).tocsr()

    def check_admissible(self, u):
        u = _vals(u)
        i = int(np.argmin(u))
        if not u[i] >= self.u_floor:
            raise InadmissibleError(float(u[i]), i, self.u_floor)

    @property
    def uses_direct(self) -> bool:
        return self.grid.n <= self.direct_max_per_axis


class StateCache:
    """y = S(u) together with a reusable solver for A_u."""

    def __init__(self, op: EllipticOperator, u, y, solver, trivial=False):
        self.op = op
        self.u = u
        self.y = y
        self._solver = solver
        self.trivial = trivial
        u.setflags(write=False)
        y.setflags(write=False)

    @property
    def grid(self) -> Grid:
        return self.op.grid

    def solve(self, rhs) -> np.ndarray:
        return self._solver(np.asarray(rhs, dtype=float))


def _banded_upper(A: sp.csr_matrix, bw: int) -> np.ndarray:
    N = A.shape[0]
    ab = np.zeros((bw + 1, N))
    Ad = A.todia()
    for off, row in zip(Ad.offsets, Ad.data):
        if 0 <= off <= bw:
            # dia stores entry (i, i+off) at data[off_index, i+off]
            ab[bw - off, off:] = row[off:]
    return ab


def _make_solver(op: EllipticOperator, A: sp.csr_matrix):
    if op.uses_direct:
        bw = 1 if op.grid.dim == 1 else op.grid.n
        try:
            cb = sla.cholesky_banded(_banded_upper(A, bw), lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SolverBreakdown(f"Cholesky failed: {exc}") from None
        return lambda b: sla.cho_solve_banded((cb, False), b, check_finite=False)

    diag = A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda x: x / diag, dtype=float)

    def cg_solve(b):
        if b.ndim == 2:
            return np.column_stack([cg_solve(b[:, j]) for j in range(b.shape[1])])
        if not np.any(b):
            return np.zeros_like(b)
        x, info = spla.cg(A, b, rtol=CG_RTOL, atol=0.0, maxiter=20 * b.size, M=M)
        # the recursive residual drifts from the true one; restart from x to close the gap
        for _ in range(3):
            if info != 0 or np.linalg.norm(A @ x - b) <= CG_RTOL * np.linalg.norm(b):
                break
            x, info = spla.cg(A, b, x0=x, rtol=CG_RTOL, atol=0.0, maxiter=20 * b.size, M=M)
        if info != 0:
            raise SolverBreakdown(f"CG did not converge (info={info})")
        return x

    return cg_solve


def solve_state(op: EllipticOperator, u, f) -> StateCache:
    """Solve A_u y = M f.  With f identically zero the state is zero for every u."""
    u = np.array(_vals(u), dtype=float)
    f = _vals(f)
    w = op.grid.weight
    if not np.any(f):
        zero = np.zeros(op.grid.node_count)
        return StateCache(op, u, zero, lambda b: np.zeros_like(b), trivial=True)
    op.check_admissible(u)
    A = op.assemble(u)
    solver = _make_solver(op, A)
    y = solver(w * f)
    res = np.linalg.norm(A @ y - w * f)
    # round-off floor of evaluating A y itself
    floor = 64 * np.finfo(float).eps * abs(A).sum(axis=1).max() * np.linalg.norm(y)
    if not res <= max(STATE_RTOL * np.linalg.norm(w * f), floor):
        raise SolverBreakdown(f"state residual {res:.3e} exceeds tolerance")
    return StateCache(op, u, np.array(y), solver)


def jacobian_apply(cache: StateCache, hdir) -> np.ndarray:
    """w = dS(u) hdir, i.e. A_u w = -M (y hdir)."""
    if cache.trivial:
        return np.zeros_like(cache.y)
    return cache.solve(-cache.grid.weight * cache.y * _vals(hdir))


def adjoint_apply(cache: StateCache, gdir) -> np.ndarray:
    """dS(u)* g = y z with A_u z = -M g."""
    if cache.trivial:
        return np.zeros_like(cache.y)
    z = cache.solve(-cache.grid.weight * _vals(gdir))
    return cache.y * z


def second_adjoint_apply(cache: StateCache, v, xi) -> np.ndarray:
    """Derivative in u of u -> dS(u)* v, applied to xi."""
    if cache.trivial:
        return np.zeros_like(cache.y)
    w = cache.grid.weight
    xi = _vals(xi)
    z = cache.solve(-w * _vals(v))
    w_xi = cache.solve(-w * cache.y * xi)
    zdot = cache.solve(-w * xi * z)
    return w_xi * z + cache.y * zdot


def jacobian_matrix(cache: StateCache) -> np.ndarray:
    """Dense nodal matrix of dS(u); its transpose is the adjoint for the quadrature pairing."""
    N = cache.grid.node_count
    if cache.trivial:
        return np.zeros((N, N))
    return cache.solve(np.diag(-cache.grid.weight * cache.y))


def second_adjoint_matrix(cache: StateCache, v) -> np.ndarray:
    """Dense symmetric matrix of xi -> second_adjoint_apply(cache, v, xi)."""
    N = cache.grid.node_count
    if cache.trivial:
        return np.zeros((N, N))
    w = cache.grid.weight
    Ainv = cache.solve(np.eye(N))
    Ainv = 0.5 * (Ainv + Ainv.T)
    z = Ainv @ (-w * _vals(v))
    P = (z[:, None] * Ainv) * cache.y[None, :]
    H = -w * (P + P.T)
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class NormEstimate:
    norm_J: float
    norm_B: float
    iterations: int
    converged: bool


def operator_norm_estimates(cache: StateCache, alpha: float = 1.0, seed: int = 0,
                            max_iter: int = 2000, tol: float = 1e-14) -> NormEstimate:
    """Power iteration on dS* dS; the H-mode B = dS dS*/alpha has norm ||dS||^2/alpha."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(cache.grid.node_count)
    x /= np.linalg.norm(x)
    lam, converged, it = 0.0, False, 0
    for it in range(1, max_iter + 1):
        yv = adjoint_apply(cache, jacobian_apply(cache, x))
        lam_new = float(np.dot(x, yv))
        nrm = np.linalg.norm(yv)
        if nrm == 0.0:
            lam, converged = 0.0, True
            break
        x = yv / nrm
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam, converged = lam_new, True
            break
        lam = lam_new
    nJ = float(np.sqrt(max(lam, 0.0)))
    return NormEstimate(nJ, nJ * nJ / alpha, it, converged)
