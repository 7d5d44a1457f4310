"""Command-line front end.

    saddlecert {verify-derivatives,solve,certify,perturb,sweep-gamma} --config RUN.json

Exit codes: 0 success, 1 derivative check failed, 2 solver did not converge,
3 infeasible point, 64 configuration error.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import math
import operator
import sys
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import canonical
from .certificates import (CertifyOptions, DenseLimitError, certify, empirical_aubin,
                           gamma_sweep)
from .elliptic import EllipticOperator, InadmissibleError, solve_state
from .grid import Grid, GridError, GridFunction, read_grid_function, write_grid_function
from .pointwise import IndicatorInterval, InfeasibleError, WeightedAbs
from .projection import ProjectionSpec
from .saddle import SaddlePoint, SaddleProblem, SolverOptions, solve_saddle, state
from .verification import FAMILIES, verify_all

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_INFEASIBLE = 3
EXIT_CONFIG = 64

log = logging.getLogger("saddlecert")


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config error at '{key}': {message}")


# ---------------------------------------------------------------------------
# Grid-function expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs,
          "tanh": np.tanh, "log": np.log, "sign": np.sign}
_CONSTS = {"pi": math.pi, "e": math.e}


def evaluate_expression(expr: str, grid: Grid) -> np.ndarray:
    """Evaluate an arithmetic expression in x (and y for d = 2) at the grid nodes."""
    coords = grid.coordinates()
    names = dict(_CONSTS, x=coords[0])
    if grid.dim == 2:
        names["y"] = coords[1]
    tree = ast.parse(expr, mode="eval")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id in names:
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ValueError(f"unsupported syntax: {ast.dump(node)[:60]}")

    with np.errstate(all="raise"):
        try:
            out = np.broadcast_to(np.asarray(ev(tree), dtype=float), (grid.node_count,)).copy()
        except FloatingPointError as exc:
            raise ValueError(f"floating point error: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise ValueError("expression produced non-finite values")
    return out


def _check_expr(v: str) -> str:
    try:
        ast.parse(v, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"not an expression: {exc.msg}") from None
    return v


# ---------------------------------------------------------------------------
# Configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    dim: Literal[1, 2] = 1
    n: int = Field(32, ge=2, le=1024)


class SyntheticData(_Strict):
    source: Literal["synthetic"]
    u_true: str = "1 + 0.5*sin(2*pi*x)"
    noise: Literal["impulsive", "uniform", "none"] = "impulsive"
    level: float = Field(0.05, ge=0.0, le=1e6)
    fraction: float = Field(0.1, gt=0.0, le=1.0)
    offset: str = "0"

    _expr = field_validator("u_true", "offset")(_check_expr)


class FileData(_Strict):
    source: Literal["file"]
    path: str


class SolverConfig(_Strict):
    tol: float = Field(1e-8, gt=0.0, le=1.0)
    max_iter: int = Field(20000, ge=0, le=10_000_000)
    u0: float = Field(1.0, gt=0.0)
    step_product: float = Field(0.9, gt=0.0, lt=1.0)
    history_stride: int = Field(10, ge=1)


class CertificateConfig(_Strict):
    mode: Literal["H", "R0"] = "H"
    tol_cert: float = Field(1e-6, gt=0.0)
    t_ladder: List[Annotated[float, Field(gt=0.0)]] = Field(default_factory=lambda: [0.2, 0.1, 0.05],
                                                            min_length=1)
    sample_count: int = Field(24, ge=1, le=1000)
    starts: int = Field(16, ge=1, le=1000)
    iters: int = Field(500, ge=1, le=100_000)


class PerturbConfig(_Strict):
    magnitudes: List[Annotated[float, Field(ge=0.0)]] = Field(
        default_factory=lambda: [1e-2, 1e-3, 1e-4], min_length=1)
    direction: Literal["random", "near-active"] = "random"


class SweepConfig(_Strict):
    gammas: List[Annotated[float, Field(ge=0.0)]] = Field(
        default_factory=lambda: [0.1, 0.05, 0.025, 0.0125], min_length=1)


class RunConfig(_Strict):
    problem: Literal["l1fit", "linffit"]
    grid: GridConfig = Field(default_factory=GridConfig)
    alpha: float = Field(gt=0.0, le=1e6)
    delta: float = Field(0.05, gt=0.0)
    gamma: float = Field(0.0, ge=0.0, le=1e6)
    epsilon: float = Field(1e-3, gt=0.0)
    f: str = "1"
    data: Annotated[Union[SyntheticData, FileData], Field(discriminator="source")]
    solver: SolverConfig = Field(default_factory=SolverConfig)
    certificate: CertificateConfig = Field(default_factory=CertificateConfig)
    perturb: PerturbConfig = Field(default_factory=PerturbConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    projection_blocks: Optional[int] = Field(None, ge=1)
    output: str = "out"
    seed: int = Field(0, ge=0, lt=2**63)

    _expr = field_validator("f")(_check_expr)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
    return parse_config(obj)


def parse_config(obj) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(key, err["msg"]) from None


def dump_config(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


# ---------------------------------------------------------------------------
# Instance construction

class Instance:
    def __init__(self, cfg: RunConfig, base_dir: Path):
        self.cfg = cfg
        self.grid = Grid(cfg.grid.dim, cfg.grid.n)
        self.op = EllipticOperator(self.grid, u_floor=cfg.epsilon)
        g = self.grid
        try:
            f = evaluate_expression(cfg.f, g)
        except ValueError as exc:
            raise ConfigError("f", str(exc)) from None
        self.u_true = None
        if isinstance(cfg.data, FileData):
            p = Path(cfg.data.path)
            p = p if p.is_absolute() else base_dir / p
            try:
                gf = read_grid_function(p)
            except (OSError, GridError) as exc:
                raise ConfigError("data.path", str(exc)) from None
            if gf.grid != g:
                raise ConfigError("data.path", f"file grid {gf.grid} differs from configured {g}")
            data = np.array(gf.values)
        else:
            data = self._synthetic(cfg.data, f)
        fstar = IndicatorInterval(-1.0, 1.0) if cfg.problem == "l1fit" else WeightedAbs(cfg.delta)
        proj = None
        if cfg.projection_blocks is not None:
            if cfg.projection_blocks > g.n:
                raise ConfigError("projection_blocks", f"must not exceed n = {g.n}")
            proj = ProjectionSpec(g, cfg.projection_blocks)
        self.problem = SaddleProblem(self.op, f, data, cfg.alpha, fstar, cfg.gamma, proj)

    def _synthetic(self, d: SyntheticData, f) -> np.ndarray:
        g = self.grid
        try:
            u = evaluate_expression(d.u_true, g)
        except ValueError as exc:
            raise ConfigError("data.u_true", str(exc)) from None
        try:
            offset = evaluate_expression(d.offset, g)
        except ValueError as exc:
            raise ConfigError("data.offset", str(exc)) from None
        try:
            y = solve_state(self.op, u, f).y
        except InadmissibleError as exc:
            raise ConfigError("data.u_true", str(exc)) from None
        self.u_true = u
        rng = np.random.default_rng(self.cfg.seed)
        data = y + offset
        N = g.node_count
        if d.noise == "impulsive":
            k = max(1, int(round(d.fraction * N)))
            nodes = np.sort(rng.choice(N, size=k, replace=False))
            signs = np.where(rng.random(k) < 0.5, -1.0, 1.0)
            data[nodes] += d.level * signs
        elif d.noise == "uniform":
            data += rng.uniform(-d.level, d.level, N)
        return data

    def solver_options(self) -> SolverOptions:
        s = self.cfg.solver
        return SolverOptions(tol=s.tol, max_iter=s.max_iter, step_product=s.step_product,
                             history_stride=s.history_stride, seed=self.cfg.seed)

    def initial_point(self) -> SaddlePoint:
        return SaddlePoint.zeros(self.problem, self.cfg.solver.u0)

    def certify_options(self) -> CertifyOptions:
        c = self.cfg.certificate
        return CertifyOptions(mode=c.mode, tol_cert=c.tol_cert, t_ladder=tuple(c.t_ladder),
                              sample_count=c.sample_count, seed=self.cfg.seed,
                              starts=c.starts, iters=c.iters)


# ---------------------------------------------------------------------------
# Commands

def _write_point(q: SaddlePoint, grid: Grid, out: Path):
    write_grid_function(GridFunction(grid, q.u), out / "u.gf")
    write_grid_function(GridFunction(grid, q.v), out / "v.gf")


def _solve_summary(r) -> dict:
    return {"status": r.status, "converged": r.converged, "iterations": r.iterations,
            "residual": r.residual, "tau": r.tau, "sigma": r.sigma,
            "step_reductions": r.step_reductions}


def cmd_verify(cfg: RunConfig, out: Path, args) -> int:
    fams = [args.integrand] if args.integrand else None
    results = verify_all(fams, inject=args.inject_fault)
    failed = [r for r in results if not r.passed]
    canonical.write_json({"cases": [r.to_dict() for r in results], "total": len(results),
                          "failed": len(failed)}, out / "verification.json")
    for r in failed:
        print(f"FAIL {r.case.name}: analytic={r.analytic} oracle={r.oracle} {r.detail}",
              file=sys.stderr)
    log.info("%d/%d derivative cases agree with the oracle", len(results) - len(failed), len(results))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_solve(cfg: RunConfig, out: Path, args) -> int:
    inst = Instance(cfg, _base_dir(args))
    r = solve_saddle(inst.problem, inst.initial_point(), inst.solver_options())
    _write_point(r.point, inst.grid, out)
    diag = dict(_solve_summary(r), history=r.history, problem=cfg.problem,
                gamma=cfg.gamma, alpha=cfg.alpha, grid={"dim": cfg.grid.dim, "n": cfg.grid.n},
                seed=cfg.seed)
    canonical.write_json(diag, out / "diagnostics.json")
    log.info("solve: %s after %d iterations, residual %.3e", r.status, r.iterations, r.residual)
    return EXIT_OK if r.converged else EXIT_NOT_CONVERGED


def _read_point(path: Path, grid: Grid, key: str) -> np.ndarray:
    try:
        gf = read_grid_function(path)
    except (OSError, GridError) as exc:
        raise ConfigError(key, f"{path}: {exc}") from None
    if gf.grid != grid:
        raise ConfigError(key, f"{path} lives on {gf.grid}, expected {grid}")
    return np.array(gf.values)


def cmd_certify(cfg: RunConfig, out: Path, args) -> int:
    inst = Instance(cfg, _base_dir(args))
    u = _read_point(Path(args.u) if args.u else out / "u.gf", inst.grid, "--u")
    v = _read_point(Path(args.v) if args.v else out / "v.gf", inst.grid, "--v")
    # with f = 0 the state vanishes for every u, so admissibility is immaterial
    if np.any(inst.problem.f) and not np.all(u >= cfg.epsilon):
        i = int(np.argmin(u))
        print(f"infeasible: u[{i}] = {u[i]:.6g} below epsilon {cfg.epsilon:g}", file=sys.stderr)
        return EXIT_INFEASIBLE
    q = SaddlePoint(u, v)
    try:
        rep = certify(inst.problem, q, inst.certify_options())
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        canonical.write_json({"error": "infeasible", "nodes": exc.nodes}, out / "certificate.json")
        return EXIT_INFEASIBLE
    except DenseLimitError as exc:
        raise ConfigError("grid.n", str(exc)) from None
    canonical.write_json(rep.to_dict(), out / "certificate.json")
    log.info("certify: %s (b_bar in [%.3e, %.3e])", rep.verdict, rep.b_bar, rep.b_bar_upper)
    return EXIT_OK


def _reference(inst: Instance):
    r = solve_saddle(inst.problem, inst.initial_point(), inst.solver_options())
    if not r.converged:
        log.warning("reference solve did not converge (residual %.3e)", r.residual)
    return r


def perturbation_direction(inst: Instance, q: SaddlePoint) -> np.ndarray:
    """Unit-norm data perturbation: seeded Gaussian, or a spike at the node whose
    residual is closest to switching branch, signed towards the switch."""
    g = inst.grid
    if inst.cfg.perturb.direction == "random":
        d = np.random.default_rng(inst.cfg.seed + 1).standard_normal(g.node_count)
    else:
        eta = state(inst.problem, q.u).y - inst.problem.data
        d = np.zeros(g.node_count)
        if inst.cfg.problem == "l1fit":
            j = int(np.argmin(np.abs(eta)))
            d[j] = 1.0 if eta[j] >= 0 else -1.0
        else:
            j = int(np.argmin(inst.cfg.delta - np.abs(eta)))
            d[j] = -1.0 if eta[j] >= 0 else 1.0
    return d / g.norm(d)


def cmd_perturb(cfg: RunConfig, out: Path, args) -> int:
    inst = Instance(cfg, _base_dir(args))
    ref = _reference(inst)
    if not ref.converged:
        return EXIT_NOT_CONVERGED
    d = perturbation_direction(inst, ref.point)
    tab = empirical_aubin(inst.problem, ref.point, [m * d for m in cfg.perturb.magnitudes],
                          inst.solver_options())
    rows = [(r.magnitude, r.distance, r.ratio, r.converged, r.iterations, r.residual, r.skipped)
            for r in tab.rows]
    canonical.write_csv(["magnitude", "distance", "ratio", "converged", "iterations",
                         "residual", "skipped"], rows, out / "perturb.csv")
    canonical.write_json({"blow_up": tab.blow_up, "spread": tab.spread,
                          "direction": cfg.perturb.direction,
                          "reference": _solve_summary(ref)}, out / "perturb.json")
    log.info("perturb: blow_up=%s spread=%.3g", tab.blow_up, tab.spread)
    live = [r for r in tab.rows if not r.skipped]
    return EXIT_NOT_CONVERGED if live and not any(r.converged for r in live) else EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    inst = Instance(cfg, _base_dir(args))
    ref = _reference(inst)
    if not ref.converged:
        return EXIT_NOT_CONVERGED
    sw = gamma_sweep(inst.problem, ref.point, cfg.sweep.gammas, inst.solver_options())
    rows = [(r.gamma, r.distance, r.converged, r.iterations, r.residual) for r in sw.rows]
    canonical.write_csv(["gamma", "distance", "converged", "iterations", "residual"], rows,
                        out / "sweep.csv")
    canonical.write_json({"slope": sw.slope, "base_gamma": cfg.gamma,
                          "reference": _solve_summary(ref)}, out / "sweep.json")
    log.info("sweep-gamma: max slope %.3e", sw.slope)
    return EXIT_NOT_CONVERGED if not any(r.converged for r in sw.rows) else EXIT_OK


COMMANDS = {"verify-derivatives": cmd_verify, "solve": cmd_solve, "certify": cmd_certify,
            "perturb": cmd_perturb, "sweep-gamma": cmd_sweep}


# ---------------------------------------------------------------------------

def _base_dir(args) -> Path:
    return Path(args.config).resolve().parent


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--out", help="output directory (overrides 'output')")
    common.add_argument("--seed", type=int, help="overrides 'seed'")
    common.add_argument("--quiet", action="store_true")
    ap = argparse.ArgumentParser(prog="saddlecert", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify-derivatives", parents=[common],
                       help="check case formulas against the outer-limit oracle")
    v.add_argument("--integrand", choices=FAMILIES)
    v.add_argument("--inject-fault", help=argparse.SUPPRESS)
    sub.add_parser("solve", parents=[common], help="solve the saddle-point problem")
    c = sub.add_parser("certify", parents=[common], help="metric regularity certificate")
    c.add_argument("--u", help="primal GridFunction (default OUT/u.gf)")
    c.add_argument("--v", help="dual GridFunction (default OUT/v.gf)")
    sub.add_parser("perturb", parents=[common], help="data perturbation table")
    sub.add_parser("sweep-gamma", parents=[common], help="Moreau-Yosida parameter sweep")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be nonnegative")
            cfg = cfg.model_copy(update={"seed": args.seed})
        out = Path(args.out) if args.out else _base_dir(args) / cfg.output
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
