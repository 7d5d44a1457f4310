"""Pointwise set-valued calculus for the scalar integrands used by the fitting problems.

Everything here works node by node. A product cone on the grid is a ``ConeField``:
one closed convex cone of the real line per node, encoded as a small integer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence, Union

import numpy as np

from .grid import Grid, GridFunction, GridMismatchError

TOL_FEAS = 1e-9


class ConeKind(IntEnum):
    EMPTY = 0
    ZERO = 1
    NONNEG = 2
    NONPOS = 3
    FULL = 4


_POLAR = np.array([ConeKind.FULL, ConeKind.FULL, ConeKind.NONPOS, ConeKind.NONNEG, ConeKind.ZERO],
                  dtype=np.int8)


def polar_kind(kind: ConeKind) -> ConeKind:
    return ConeKind(int(_POLAR[int(kind)]))


def kind_contains(kind: ConeKind, x: float, tol: float = 0.0) -> bool:
    if kind == ConeKind.EMPTY:
        return False
    if kind == ConeKind.ZERO:
        return abs(x) <= tol
    if kind == ConeKind.NONNEG:
        return x >= -tol
    if kind == ConeKind.NONPOS:
        return x <= tol
    return True


# ---------------------------------------------------------------------------
# Subsets of the real line

class SetDescriptor1D:
    """Closed subsets of R appearing in the case formulas; all are intervals or empty."""

    def bounds(self) -> Optional[tuple]:
        raise NotImplementedError

    def is_empty(self) -> bool:
        return self.bounds() is None

    def contains(self, x: float, tol: float = 0.0) -> bool:
        b = self.bounds()
        return b is not None and b[0] - tol <= x <= b[1] + tol

    def distance(self, x: float) -> float:
        b = self.bounds()
        if b is None:
            return math.inf
        return max(b[0] - x, x - b[1], 0.0)

    def clipped(self, M: float) -> Optional[tuple]:
        b = self.bounds()
        if b is None:
            return None
        lo, hi = max(b[0], -M), min(b[1], M)
        return (lo, hi) if lo <= hi else None

    def issubset(self, other: "SetDescriptor1D", tol: float = 0.0) -> bool:
        a, b = self.bounds(), other.bounds()
        if a is None:
            return True
        if b is None:
            return False
        return b[0] - tol <= a[0] and a[1] <= b[1] + tol

    def shifted(self, s: float) -> "SetDescriptor1D":
        return self


@dataclass(frozen=True)
class Empty(SetDescriptor1D):
    def bounds(self):
        return None


@dataclass(frozen=True)
class FullLine(SetDescriptor1D):
    def bounds(self):
        return (-math.inf, math.inf)


@dataclass(frozen=True)
class SinglePoint(SetDescriptor1D):
    value: float

    def bounds(self):
        return (self.value, self.value)

    def shifted(self, s):
        return SinglePoint(self.value + s)


@dataclass(frozen=True)
class AffineCone(SetDescriptor1D):
    """base + cone; degenerate cones normalise to SinglePoint, FullLine or Empty."""

    base: float
    cone: ConeKind

    def __new__(cls, base, cone):
        cone = ConeKind(cone)
        if cone == ConeKind.ZERO:
            return SinglePoint(base)
        if cone == ConeKind.FULL:
            return FullLine()
        if cone == ConeKind.EMPTY:
            return Empty()
        return super().__new__(cls)

    def bounds(self):
        if self.cone == ConeKind.NONNEG:
            return (self.base, math.inf)
        return (-math.inf, self.base)

    def shifted(self, s):
        return AffineCone(self.base + s, self.cone)


@dataclass(frozen=True)
class Interval(SetDescriptor1D):
    """Bounded interval; only produced by subdiff."""

    lo: float
    hi: float

    def bounds(self):
        return (self.lo, self.hi)

    def shifted(self, s):
        return Interval(self.lo + s, self.hi + s)


def _half_line(sign: float) -> SetDescriptor1D:
    """[0, inf)*sign."""
    return AffineCone(0.0, ConeKind.NONNEG if sign > 0 else ConeKind.NONPOS)


# ---------------------------------------------------------------------------
# Integrands

Param = Union[float, np.ndarray, GridFunction]


def _as_param(p):
    if isinstance(p, GridFunction):
        return p.values
    if np.ndim(p) == 0:
        return float(p)
    return np.asarray(p, dtype=float)


def _at(p, i):
    return p if isinstance(p, float) else float(p[i])


@dataclass(frozen=True, eq=False)
class SquaredTwoNorm:
    """z -> (weight/2) z^2.

    The unit-weight derivative formula is scaled by the chain rule to general
    weight; this weighted form is an extension, not a separately proved case.
    """

    weight: Param = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weight", _as_param(self.weight))
        if np.any(np.asarray(self.weight) <= 0):
            raise ValueError("SquaredTwoNorm weight must be positive")

    def at(self, i):
        return SquaredTwoNorm(_at(self.weight, i))


@dataclass(frozen=True, eq=False)
class IndicatorInterval:
    """Indicator of [lo, hi]; lo and hi may vary from node to node."""

    lo: Param = -1.0
    hi: Param = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lo", _as_param(self.lo))
        object.__setattr__(self, "hi", _as_param(self.hi))
        if np.any(np.asarray(self.hi) - np.asarray(self.lo) <= 0):
            raise ValueError("IndicatorInterval requires lo < hi at every node")

    def at(self, i):
        return IndicatorInterval(_at(self.lo, i), _at(self.hi, i))


@dataclass(frozen=True, eq=False)
class WeightedAbs:
    """z -> weight * |z|."""

    weight: Param = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weight", _as_param(self.weight))
        if np.any(np.asarray(self.weight) <= 0):
            raise ValueError("WeightedAbs weight must be positive")

    def at(self, i):
        return WeightedAbs(_at(self.weight, i))


@dataclass(frozen=True, eq=False)
class MoreauYosida:
    """base + (gamma/2) z^2."""

    base: Union[IndicatorInterval, WeightedAbs]
    gamma: float

    def __post_init__(self):
        if not isinstance(self.base, (IndicatorInterval, WeightedAbs)):
            raise TypeError("MoreauYosida wraps IndicatorInterval or WeightedAbs only")
        if not self.gamma > 0:
            raise ValueError("MoreauYosida gamma must be positive")

    def at(self, i):
        return MoreauYosida(self.base.at(i), self.gamma)


IntegrandSpec = Union[SquaredTwoNorm, IndicatorInterval, WeightedAbs, MoreauYosida]


def linear_part(spec: IntegrandSpec) -> float:
    """Slope T of the smooth part of the subdifferential (0 for the nonsmooth kinds)."""
    if isinstance(spec, MoreauYosida):
        return float(spec.gamma)
    if isinstance(spec, SquaredTwoNorm):
        if not isinstance(spec.weight, float):
            raise ValueError("node-varying SquaredTwoNorm weight has no scalar slope")
        return spec.weight
    return 0.0


def _sign(x: float) -> float:
    return 1.0 if x > 0 else -1.0


def subdiff(spec: IntegrandSpec, z: float, tol: float = 0.0) -> SetDescriptor1D:
    """Convex subdifferential of the scalar integrand at z (exact for tol = 0)."""
    if isinstance(spec, SquaredTwoNorm):
        return SinglePoint(spec.weight * z)
    if isinstance(spec, IndicatorInterval):
        if abs(z - spec.hi) <= tol:
            return _half_line(1.0)
        if abs(z - spec.lo) <= tol:
            return _half_line(-1.0)
        if spec.lo < z < spec.hi:
            return SinglePoint(0.0)
        return Empty()
    if isinstance(spec, WeightedAbs):
        d = spec.weight
        if abs(z) <= tol:
            return Interval(-d, d)
        return SinglePoint(d * _sign(z))
    if isinstance(spec, MoreauYosida):
        return subdiff(spec.base, z, tol).shifted(spec.gamma * z)
    raise TypeError(f"unsupported integrand {spec!r}")


def _graph_derivative(spec, z, zeta, dz, tol, convex):
    if isinstance(spec, SquaredTwoNorm):
        if abs(zeta - spec.weight * z) <= tol:
            return SinglePoint(spec.weight * dz)
        return Empty()

    if isinstance(spec, MoreauYosida):
        g = spec.gamma
        return _graph_derivative(spec.base, z, zeta - g * z, dz, tol, convex).shifted(g * dz)

    if isinstance(spec, IndicatorInterval):
        at_hi, at_lo = abs(z - spec.hi) <= tol, abs(z - spec.lo) <= tol
        if at_hi or at_lo:
            s = 1.0 if at_hi else -1.0
            if zeta * s > tol and abs(dz) <= tol:
                return FullLine()
            if abs(zeta) <= tol:
                if abs(dz) <= tol:
                    return _half_line(s)
                if s * dz < 0:
                    return _half_line(s) if convex else SinglePoint(0.0)
            return Empty()
        if spec.lo < z < spec.hi and abs(zeta) <= tol:
            return SinglePoint(0.0)
        return Empty()

    if isinstance(spec, WeightedAbs):
        d = spec.weight
        if abs(z) > tol:
            return SinglePoint(0.0) if abs(zeta - d * _sign(z)) <= tol else Empty()
        if abs(zeta) > d + tol:
            return Empty()
        if abs(zeta) >= d - tol:
            s = _sign(zeta)
            if abs(dz) <= tol:
                return _half_line(-s)
            if s * dz > 0:
                return _half_line(-s) if convex else SinglePoint(0.0)
            return Empty()
        return FullLine() if abs(dz) <= tol else Empty()

    raise TypeError(f"unsupported integrand {spec!r}")


def graph_derivative(spec: IntegrandSpec, z: float, zeta: float, dz: float,
                     tol: float = TOL_FEAS) -> SetDescriptor1D:
    """Graphical derivative of the subdifferential at (z, zeta) in direction dz."""
    return _graph_derivative(spec, z, zeta, dz, tol, convex=False)


def graph_derivative_convexified(spec: IntegrandSpec, z: float, zeta: float, dz: float,
                                 tol: float = TOL_FEAS) -> SetDescriptor1D:
    """Slice at dz of the convex hull of the graph of the graphical derivative."""
    return _graph_derivative(spec, z, zeta, dz, tol, convex=True)


# ---------------------------------------------------------------------------
# Cone fields

def _values(x) -> np.ndarray:
    if isinstance(x, GridFunction):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


def _grid_of(*xs) -> Optional[Grid]:
    grids = {x.grid for x in xs if isinstance(x, GridFunction)}
    if len(grids) > 1:
        raise GridMismatchError("grid mismatch between arguments")
    return grids.pop() if grids else None


class ConeField:
    """Product of per-node cones of the real line."""

    __slots__ = ("grid", "kinds")

    def __init__(self, kinds, grid: Optional[Grid] = None):
        k = np.array(kinds, dtype=np.int8).reshape(-1)
        if k.size and (k.min() < 0 or k.max() > 4):
            raise ValueError("cone kinds must be in 0..4")
        if grid is not None and k.size != grid.node_count:
            raise GridMismatchError("kinds length does not match grid")
        k.setflags(write=False)
        self.kinds = k
        self.grid = grid

    @classmethod
    def uniform(cls, kind: ConeKind, size: int, grid: Optional[Grid] = None):
        return cls(np.full(size, int(kind), dtype=np.int8), grid)

    def __len__(self):
        return self.kinds.size

    def __eq__(self, other):
        return isinstance(other, ConeField) and np.array_equal(self.kinds, other.kinds)

    def __hash__(self):
        return hash(self.kinds.tobytes())

    def __repr__(self):
        counts = np.bincount(self.kinds, minlength=5)
        parts = [f"{ConeKind(i).name}={c}" for i, c in enumerate(counts) if c]
        return f"ConeField({', '.join(parts)})"

    def polar(self) -> "ConeField":
        return ConeField(_POLAR[self.kinds], self.grid)

    def node_contains(self, z, tol: float = 0.0) -> np.ndarray:
        z = _values(z)
        k = self.kinds
        return np.select(
            [k == ConeKind.EMPTY, k == ConeKind.ZERO, k == ConeKind.NONNEG, k == ConeKind.NONPOS],
            [False, np.abs(z) <= tol, z >= -tol, z <= tol],
            default=True)

    def contains(self, z, tol: float = 0.0) -> bool:
        if isinstance(z, GridFunction) and self.grid is not None and z.grid != self.grid:
            raise GridMismatchError("grid mismatch")
        return bool(np.all(self.node_contains(z, tol)))

    def project(self, z) -> np.ndarray:
        """Euclidean (equivalently L2) projection onto the cone; EMPTY nodes give NaN."""
        z = _values(z)
        k = self.kinds
        return np.select(
            [k == ConeKind.ZERO, k == ConeKind.NONNEG, k == ConeKind.NONPOS, k == ConeKind.FULL],
            [0.0, np.maximum(z, 0.0), np.minimum(z, 0.0), z],
            default=np.nan)

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.kinds == ConeKind.EMPTY))

    @property
    def is_subspace(self) -> bool:
        return bool(np.all((self.kinds == ConeKind.ZERO) | (self.kinds == ConeKind.FULL)))

    def span(self) -> "ConeField":
        """Smallest subspace field containing the cone (half-lines become full lines)."""
        k = self.kinds.copy()
        k[(k == ConeKind.NONNEG) | (k == ConeKind.NONPOS)] = ConeKind.FULL
        return ConeField(k, self.grid)


def polar(c: ConeField) -> ConeField:
    return c.polar()


class InfeasibleError(ValueError):
    """eta is not in the subdifferential of the integrand at v on the listed nodes."""

    def __init__(self, nodes, message=None):
        self.nodes = [int(i) for i in nodes]
        shown = ", ".join(map(str, self.nodes[:10])) + (" ..." if len(self.nodes) > 10 else "")
        super().__init__(message or f"infeasible (v, eta) at {len(self.nodes)} node(s): {shown}")


def _broadcast(p, n):
    return np.broadcast_to(np.asarray(p, dtype=float), (n,))


def _cone_kinds(spec, v, eta, tol):
    n = v.size
    kinds = np.full(n, -1, dtype=np.int8)
    if isinstance(spec, MoreauYosida):
        return _cone_kinds(spec.base, v, eta - spec.gamma * v, tol)
    if isinstance(spec, SquaredTwoNorm):
        w = _broadcast(spec.weight, n)
        kinds[np.abs(eta - w * v) <= tol] = ConeKind.FULL
        return kinds
    if isinstance(spec, IndicatorInterval):
        lo, hi = _broadcast(spec.lo, n), _broadcast(spec.hi, n)
        eta0 = np.abs(eta) <= tol
        at_hi = np.abs(v - hi) <= tol
        at_lo = ~at_hi & (np.abs(v - lo) <= tol)
        inside = ~at_hi & ~at_lo & (v > lo) & (v < hi)
        kinds[inside & eta0] = ConeKind.FULL
        kinds[at_hi & eta0] = ConeKind.NONPOS
        kinds[at_hi & (eta > tol)] = ConeKind.ZERO
        kinds[at_lo & eta0] = ConeKind.NONNEG
        kinds[at_lo & (eta < -tol)] = ConeKind.ZERO
        return kinds
    if isinstance(spec, WeightedAbs):
        d = _broadcast(spec.weight, n)
        vz = np.abs(v) <= tol
        kinds[~vz & (np.abs(eta - d * np.sign(v)) <= tol)] = ConeKind.FULL
        ae = np.abs(eta)
        kinds[vz & (ae < d - tol)] = ConeKind.ZERO
        edge = vz & (np.abs(ae - d) <= tol)
        kinds[edge & (eta > 0)] = ConeKind.NONNEG
        kinds[edge & (eta < 0)] = ConeKind.NONPOS
        return kinds
    raise TypeError(f"unsupported integrand {spec!r}")


def cone_field(spec: IntegrandSpec, v, eta, tol: float = TOL_FEAS) -> ConeField:
    """The cone K_F[v|eta] node by node; raises InfeasibleError if eta is not in dF*(v)."""
    grid = _grid_of(v, eta)
    vv, ee = _values(v), _values(eta)
    if vv.shape != ee.shape:
        raise GridMismatchError("v and eta differ in length")
    kinds = _cone_kinds(spec, vv, ee, tol)
    bad = np.flatnonzero(kinds < 0)
    if bad.size:
        raise InfeasibleError(bad)
    return ConeField(kinds, grid)


@dataclass(frozen=True)
class AffineConeField:
    """offset + cone, the value of a regular coderivative."""

    offset: np.ndarray
    cone: ConeField

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.cone.contains(_values(x) - self.offset, tol)


def coderivative(spec: IntegrandSpec, v, eta, deta, tol: float = TOL_FEAS) -> Optional[AffineConeField]:
    """Regular coderivative of the subdifferential at (v, eta) applied to deta.

    Returns ``T deta + polar(K)`` when ``-deta`` lies in K = K_F[v|eta], otherwise None
    (the empty set).  T is gamma for Moreau-Yosida wrapped kinds and 0 otherwise.
    """
    K = cone_field(spec, v, eta, tol)
    d = _values(deta)
    if not K.contains(-d, tol):
        return None
    return AffineConeField(linear_part(spec) * d, K.polar())


# ---------------------------------------------------------------------------
# Outer-limit oracle

DEFAULT_T_LEVELS = tuple(2.0 ** -k for k in range(4, 21))


def _quotient_levels(spec, z, zeta, dz, M, t_levels, probe_count, spacing):
    levels = []
    t0 = t_levels[0]
    mid = (probe_count - 1) / 2
    for t in t_levels:
        pieces = []
        for k in range(probe_count):
            # Perturbations shrink like t^2 so that the probe directions converge to dz
            # faster than the quotients are resolved.
            dzt = dz + (k - mid) * spacing * (t / t0) ** 2
            b = subdiff(spec, z + t * dzt).bounds()
            if b is None:
                continue
            lo, hi = max((b[0] - zeta) / t, -M), min((b[1] - zeta) / t, M)
            if lo <= hi:
                pieces.append((lo, hi))
        levels.append(pieces)
    return levels


def _dist_to_pieces(w, pieces):
    if not pieces:
        return math.inf
    return min(max(lo - w, w - hi, 0.0) for lo, hi in pieces)


def oracle_graph_derivative(spec: IntegrandSpec, z: float, zeta: float, dz: float,
                            M: float = 10.0, t_levels: Sequence[float] = DEFAULT_T_LEVELS,
                            probe_count: int = 9, spacing: float = 1e-3, tail: int = 3,
                            samples_per_piece: int = 11) -> np.ndarray:
    """Sampled outer limit of (subdiff(z + t dz') - zeta)/t within [-M, M].

    Candidates are drawn from the finest level and kept only if they are present at
    each of the last ``tail`` levels, which discards transients of coarse t.
    """
    levels = _quotient_levels(spec, z, zeta, dz, M, t_levels, probe_count, spacing)
    tol = 1e-6 * (1 + M)
    cand = []
    for lo, hi in levels[-1]:
        cand.extend(np.linspace(lo, hi, samples_per_piece) if hi > lo else [lo])
    keep = [w for w in cand if all(_dist_to_pieces(w, p) <= tol for p in levels[-tail:])]
    return np.unique(np.round(np.asarray(keep, dtype=float), 12))


def oracle_convexified(spec: IntegrandSpec, z: float, zeta: float, dz: float,
                       M: float = 10.0, **kw) -> Optional[tuple]:
    """Slice at dz of the conic hull of oracle graph samples, as (lo, hi) clipped to [-M, M]."""
    from scipy.optimize import linprog

    pts = []
    for d in (-1.0, 0.0, 1.0):
        # Snapping keeps quotient round-off from opening spurious vertical rays.
        for w in np.unique(np.round(oracle_graph_derivative(spec, z, zeta, d, M=M, **kw), 8)):
            pts.append((d, w))
    if not pts:
        return None
    P = np.array(pts).T
    m = P.shape[1]
    # variables: lambda (m) >= 0 and w in [-M, M]; constraint P lambda = (dz, w)
    A_eq = np.zeros((2, m + 1))
    A_eq[:, :m] = P
    A_eq[1, m] = -1.0
    b_eq = np.array([dz, 0.0])
    bounds = [(0, None)] * m + [(-M, M)]
    out = []
    for sgn in (1.0, -1.0):
        c = np.zeros(m + 1)
        c[m] = sgn
        res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise RuntimeError(f"linprog failed: {res.message}")
        out.append(res.x[m])
    return (out[0], out[1])


# ---------------------------------------------------------------------------
# Strict complementarity

@dataclass(frozen=True)
class ComplementarityReport:
    holds: np.ndarray
    all_hold: bool
    violations: list


def strict_complementarity(kind: str, v, eta, delta: float = 1.0,
                           tol: float = TOL_FEAS) -> ComplementarityReport:
    """Per-node strict complementarity for 'l1' (bound 1 on v) or 'linf' (bound delta on eta)."""
    vv, ee = _values(v), _values(eta)
    if kind in ("l1", "l1fit", "L1Fit"):
        slack, act = 1.0 - np.abs(vv), np.abs(ee)
    elif kind in ("linf", "linffit", "LinfFit"):
        slack, act = delta - np.abs(ee), np.abs(vv)
    else:
        raise ValueError(f"unknown problem kind {kind!r}")
    holds = (np.abs(slack * act) <= tol) & (slack + act > tol)
    bad = np.flatnonzero(~holds)
    return ComplementarityReport(holds, bool(bad.size == 0), [int(i) for i in bad])
