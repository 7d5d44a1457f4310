"""Analytic derivative formulas checked against the sampled outer-limit oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .pointwise import (DEFAULT_T_LEVELS, Empty, IndicatorInterval, MoreauYosida, SinglePoint,
                        SquaredTwoNorm, WeightedAbs, _dist_to_pieces, _quotient_levels,
                        graph_derivative, graph_derivative_convexified, oracle_convexified,
                        oracle_graph_derivative)

FAMILIES = ("squared", "indicator", "abs", "my")
ORACLE_M = 10.0
DIRECTIONS = (-1.0, -0.5, 0.0, 0.5, 1.0)


def set_tol(M: float = ORACLE_M) -> float:
    return 1e-6 * (1.0 + M)


@dataclass(frozen=True)
class Case:
    family: str
    branch: str
    spec: object
    z: float
    zeta: float
    dz: float
    convexified: bool

    @property
    def name(self) -> str:
        return f"{self.family}/{self.branch}/dz={self.dz:+g}" + ("/conv" if self.convexified else "")


def _branch_points():
    ind = IndicatorInterval(-1.0, 1.0)
    ab = WeightedAbs(0.5)
    sq = SquaredTwoNorm(2.0)
    g = 0.5
    yield "squared", "negative", sq, -1.0, -2.0
    yield "squared", "origin", sq, 0.0, 0.0
    yield "squared", "positive", sq, 0.7, 1.4
    yield "indicator", "interior", ind, 0.3, 0.0
    yield "indicator", "upper-strict", ind, 1.0, 0.8
    yield "indicator", "upper-degenerate", ind, 1.0, 0.0
    yield "indicator", "lower-strict", ind, -1.0, -0.6
    yield "indicator", "lower-degenerate", ind, -1.0, 0.0
    yield "abs", "positive", ab, 0.4, 0.5
    yield "abs", "negative", ab, -0.4, -0.5
    yield "abs", "kink-interior", ab, 0.0, 0.2
    yield "abs", "kink-upper", ab, 0.0, 0.5
    yield "abs", "kink-lower", ab, 0.0, -0.5
    myi = MoreauYosida(ind, g)
    mya = MoreauYosida(ab, g)
    yield "my", "indicator-interior", myi, 0.3, g * 0.3
    yield "my", "indicator-upper-strict", myi, 1.0, 0.8 + g
    yield "my", "indicator-upper-degenerate", myi, 1.0, g
    yield "my", "abs-kink-upper", mya, 0.0, 0.5
    yield "my", "abs-positive", mya, 0.4, 0.5 + g * 0.4


def branch_cases(families: Optional[Iterable[str]] = None) -> list:
    """Branch points x directions x {graph, convexified} for the selected families."""
    wanted = set(FAMILIES if families is None else families)
    unknown = wanted - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown integrand families: {sorted(unknown)}")
    cases = []
    for fam, branch, spec, z, zeta in _branch_points():
        if fam not in wanted:
            continue
        for conv in (False, True):
            for dz in DIRECTIONS:
                cases.append(Case(fam, branch, spec, z, zeta, dz, conv))
    return cases


@dataclass
class CaseResult:
    case: Case
    passed: bool
    analytic: Optional[tuple]
    oracle: Optional[tuple]
    detail: str

    def to_dict(self) -> dict:
        return {"case": self.case.name, "passed": self.passed,
                "analytic": list(self.analytic) if self.analytic else None,
                "oracle": list(self.oracle) if self.oracle else None, "detail": self.detail}


def _wrong(D):
    """A deliberately incorrect answer, used to exercise the failure path."""
    return SinglePoint(0.25) if D.is_empty() or D.bounds() == (0.0, 0.0) else Empty()


def _interval_of(samples) -> Optional[tuple]:
    if len(samples) == 0:
        return None
    return (float(np.min(samples)), float(np.max(samples)))


def check_case(case: Case, M: float = ORACLE_M, fault: bool = False) -> CaseResult:
    """Two-sided containment of the analytic set and the oracle outer limit within [-M, M]."""
    tol = set_tol(M)
    fn = graph_derivative_convexified if case.convexified else graph_derivative
    D = fn(case.spec, case.z, case.zeta, case.dz)
    if fault:
        D = _wrong(D)
    clip = D.clipped(M)

    if case.convexified:
        oc = oracle_convexified(case.spec, case.z, case.zeta, case.dz, M=M)
        if clip is None or oc is None:
            ok = clip is None and oc is None
            detail = "" if ok else "one side empty"
        else:
            err = max(abs(clip[0] - oc[0]), abs(clip[1] - oc[1]))
            ok = err <= tol
            detail = "" if ok else f"endpoint mismatch {err:.3e}"
        return CaseResult(case, ok, clip, oc, detail)

    W = oracle_graph_derivative(case.spec, case.z, case.zeta, case.dz, M=M)
    if clip is None:
        ok = W.size == 0
        return CaseResult(case, ok, None, _interval_of(W),
                          "" if ok else f"oracle found {W.size} points, formula is empty")
    outside = [w for w in W if D.distance(w) > tol]
    if outside:
        return CaseResult(case, False, clip, _interval_of(W),
                          f"oracle point {outside[0]:.6g} not in formula set")
    levels = _quotient_levels(case.spec, case.z, case.zeta, case.dz, M, DEFAULT_T_LEVELS, 9, 1e-3)
    missed = [w for w in np.linspace(clip[0], clip[1], 11)
              if any(_dist_to_pieces(w, p) > tol for p in levels[-3:])]
    if missed:
        return CaseResult(case, False, clip, _interval_of(W),
                          f"formula point {missed[0]:.6g} not in oracle outer limit")
    return CaseResult(case, True, clip, _interval_of(W), "")


def verify_all(families: Optional[Iterable[str]] = None, inject: Optional[str] = None,
               M: float = ORACLE_M) -> list:
    """Run every case; ``inject`` names a branch ("family/branch") whose formula is corrupted."""
    return [check_case(c, M, fault=inject is not None and f"{c.family}/{c.branch}" == inject)
            for c in branch_cases(families)]
