"""Uniform cell-centred grids on (0,1)^d and grid functions with the midpoint-rule L2 pairing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GF01"
_HEADER = struct.Struct("<4sII")


class GridError(ValueError):
    pass


class GridMismatchError(GridError):
    pass


class GridFileError(GridError):
    pass


class MalformedHeaderError(GridFileError):
    pass


class LengthMismatchError(GridFileError):
    pass


class NonFiniteError(GridFileError):
    pass


@dataclass(frozen=True)
class Grid:
    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n) != self.n or self.n < 2:
            raise GridError(f"n_per_axis must be an integer >= 2, got {self.n}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def weight(self) -> float:
        """Quadrature weight h^dim of every node."""
        return self.h ** self.dim

    @property
    def node_count(self) -> int:
        return self.n ** self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    def coordinates(self):
        """Cell midpoints, one flattened array per axis (row-major, last axis fastest)."""
        x = (np.arange(self.n) + 0.5) * self.h
        if self.dim == 1:
            return (x,)
        X0, X1 = np.meshgrid(x, x, indexing="ij")
        return (X0.ravel(), X1.ravel())

    def inner(self, a, b) -> float:
        return self.weight * float(np.dot(a, b))

    def norm(self, a) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))


class GridFunction:
    """Immutable node values on a Grid."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid, values):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.size != grid.node_count:
            raise LengthMismatchError(
                f"expected {grid.node_count} values for {grid}, got {arr.size}")
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteError(f"non-finite value at node {int(bad[0])}")
        arr.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("GridFunction is immutable")

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.node_count, float(c)))

    def norm(self) -> float:
        return self.grid.norm(self.values)

    def __repr__(self):
        return f"GridFunction({self.grid}, n_values={self.values.size})"


def _check_same(a: GridFunction, b: GridFunction):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def inner(a: GridFunction, b: GridFunction) -> float:
    _check_same(a, b)
    return a.grid.inner(a.values, b.values)


def norm(a: GridFunction) -> float:
    return a.norm()


def lincomb(alpha: float, a: GridFunction, beta: float, b: GridFunction) -> GridFunction:
    _check_same(a, b)
    return GridFunction(a.grid, alpha * a.values + beta * b.values)


def write_grid_function(f: GridFunction, path) -> None:
    g = f.grid
    payload = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, g.dim, g.n) + payload)


def read_grid_function(path) -> GridFunction:
    raw = Path(path).read_bytes()
    if raw[:4] == MAGIC:
        return _read_binary(raw)
    return _read_csv(raw.decode("utf-8", errors="replace"))


def _read_binary(raw: bytes) -> GridFunction:
    if len(raw) < _HEADER.size:
        raise MalformedHeaderError("truncated GF01 header")
    _, dim, n = _HEADER.unpack_from(raw)
    try:
        grid = Grid(dim, n)
    except GridError as exc:
        raise MalformedHeaderError(str(exc)) from None
    body = raw[_HEADER.size:]
    if len(body) != 8 * grid.node_count:
        raise LengthMismatchError(
            f"payload has {len(body)} bytes, expected {8 * grid.node_count}")
    return GridFunction(grid, np.frombuffer(body, dtype="<f8"))


def _read_csv(text: str) -> GridFunction:
    # Header lines look like "# dim=1 n=32"; without them a 1-D grid is inferred.
    meta = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].replace(",", " ").split():
                if "=" in tok:
                    key, _, val = tok.partition("=")
                    meta[key.strip()] = val.strip()
            continue
        parts = line.split(",")
        if len(parts) != 2:
            if not rows and parts[0].strip().lower() == "index":
                continue
            raise MalformedHeaderError(f"line {lineno}: expected 'index,value'")
        try:
            rows.append((int(parts[0]), float(parts[1])))
        except ValueError:
            if not rows and parts[0].strip().lower() == "index":
                continue
            raise MalformedHeaderError(f"line {lineno}: cannot parse {line!r}") from None
    try:
        dim = int(meta.get("dim", 1))
        n = int(meta["n"]) if "n" in meta else (len(rows) if dim == 1 else math.isqrt(len(rows)))
        grid = Grid(dim, n)
    except (ValueError, GridError) as exc:
        raise MalformedHeaderError(f"bad CSV header: {exc}") from None
    if len(rows) != grid.node_count:
        raise LengthMismatchError(f"CSV has {len(rows)} rows, expected {grid.node_count}")
    values = np.empty(grid.node_count)
    seen = np.zeros(grid.node_count, dtype=bool)
    for idx, val in rows:
        if not 0 <= idx < grid.node_count or seen[idx]:
            raise MalformedHeaderError(f"bad or repeated index {idx}")
        seen[idx] = True
        values[idx] = val
    return GridFunction(grid, values)
