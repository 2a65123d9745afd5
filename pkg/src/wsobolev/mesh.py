"""Discrete torus, mesh functions, difference operators and discrete inner products.

Mesh function values are stored as numpy arrays of shape ``(N,) * d`` with
array axis k holding the lattice coordinate x_k. Periodic wrap is done with
``np.roll``; there are no ghost cells.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridMismatchError
from .weights import WProduct

__all__ = [
    "TorusGrid",
    "MeshFunction",
    "forward_diff",
    "backward_diff",
    "w_diff",
    "backward_w_diff",
    "inner_l2",
    "inner_wk",
    "inner_sobolev",
    "norm_l2",
    "norm_sobolev",
    "divergence_form_apply",
    "mean_zero_project",
]


@dataclass(frozen=True, eq=False)
class TorusGrid:
    """The lattice (1/N) T_N^d together with the weight W used for differences."""

    d: int
    N: int
    w: WProduct

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.w.d != self.d:
            raise ValueError(f"weight has dimension {self.w.d}, grid has {self.d}")
        cw = tuple(c.cell_weights(self.N) for c in self.w.coords)
        if any(np.any(c <= 0) for c in cw):
            raise ValueError("cell weights must be positive")
        object.__setattr__(self, "_cell_weights", cw)

    @classmethod
    def identity(cls, d: int, N: int) -> "TorusGrid":
        return cls(d, N, WProduct.identity(d))

    def __eq__(self, other):
        if not isinstance(other, TorusGrid):
            return NotImplemented
        return self.d == other.d and self.N == other.N and self.w == other.w

    def __hash__(self):
        return hash((self.d, self.N, self.w))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    def cell_weights(self, k: int) -> np.ndarray:
        """1-d array W_k((i+1)/N) - W_k(i/N)."""
        return self._cell_weights[k]

    def cell_weight_field(self, k: int) -> np.ndarray:
        """Cell weights of axis k broadcast to the full grid shape."""
        shape = [1] * self.d
        shape[k] = self.N
        return np.broadcast_to(self._cell_weights[k].reshape(shape), self.shape)

    def points(self) -> np.ndarray:
        """Grid points x/N, shape ``(N,)*d + (d,)``."""
        axes = np.meshgrid(*([np.arange(self.N) / self.N] * self.d), indexing="ij")
        return np.stack(axes, axis=-1)

    def sample(self, fn) -> "MeshFunction":
        """Mesh function with values fn(x/N); fn takes an array of points (..., d)."""
        return MeshFunction(self, np.asarray(fn(self.points()), dtype=float))

    def zeros(self) -> "MeshFunction":
        return MeshFunction(self, np.zeros(self.shape))

    def constant(self, c: float) -> "MeshFunction":
        return MeshFunction(self, np.full(self.shape, float(c)))

    def check_axis(self, k: int):
        if not 0 <= k < self.d:
            raise IndexError(f"axis {k} out of range for d={self.d}")


class MeshFunction:
    """Real values on the discrete torus."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: TorusGrid, values):
        values = np.array(values, dtype=float)
        if values.size != grid.size:
            raise ValueError(f"expected {grid.size} values, got {values.size}")
        values = values.reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("mesh function values must be finite")
        self.grid = grid
        self.values = values

    def __repr__(self):
        return f"MeshFunction(d={self.grid.d}, N={self.grid.N})"

    def _coerce(self, other):
        if isinstance(other, MeshFunction):
            _check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return MeshFunction(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return MeshFunction(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return MeshFunction(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return MeshFunction(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return MeshFunction(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return MeshFunction(self.grid, -self.values)

    def mean(self) -> float:
        return float(self.values.mean())

    def max_abs(self) -> float:
        return float(np.abs(self.values).max())

    # -- serialization -----------------------------------------------------
    def to_csv(self, path) -> None:
        """CSV with columns x1..xd,value (axis 1 fastest) and a JSON sidecar {d, N}."""
        path = Path(path)
        d, N = self.grid.d, self.grid.N
        idx = np.indices(self.grid.shape).reshape(d, -1, order="F").T
        vals = self.values.reshape(-1, order="F")
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"x{k + 1}" for k in range(d)] + ["value"])
            for row, v in zip(idx, vals):
                writer.writerow([*row.tolist(), repr(float(v))])
        sidecar = {"d": d, "N": N, "w": self.grid.w.to_json()}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path, grid: TorusGrid | None = None) -> "MeshFunction":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if grid is None:
            grid = TorusGrid(meta["d"], meta["N"], WProduct.from_json(meta["w"]))
        elif (grid.d, grid.N) != (meta["d"], meta["N"]):
            raise GridMismatchError("sidecar does not match the supplied grid")
        values = np.zeros(grid.shape)
        with path.open() as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                values[tuple(int(i) for i in row[:-1])] = float(row[-1])
        return cls(grid, values)


def _check_same_grid(*fns: MeshFunction):
    g = fns[0].grid
    for f in fns[1:]:
        if f.grid is not g and f.grid != g:
            raise GridMismatchError("mesh functions live on different grids")


# -- array kernels (used by the solvers to avoid wrapper overhead) ----------

def _fwd(a: np.ndarray, k: int, N: int) -> np.ndarray:
    return N * (np.roll(a, -1, axis=k) - a)


def _bwd(a: np.ndarray, k: int, N: int) -> np.ndarray:
    return N * (a - np.roll(a, 1, axis=k))


def _wdiff(a: np.ndarray, grid: TorusGrid, k: int) -> np.ndarray:
    return (np.roll(a, -1, axis=k) - a) / grid.cell_weight_field(k)


def _div_form(coeffs: np.ndarray, a: np.ndarray, grid: TorusGrid) -> np.ndarray:
    out = np.zeros_like(a)
    for k in range(grid.d):
        out += _bwd(coeffs[k] * _wdiff(a, grid, k), k, grid.N)
    return out


# -- operations ---------------------------------------------------------------

def forward_diff(u: MeshFunction, k: int) -> MeshFunction:
    """N [u(x + e_k) - u(x)]."""
    u.grid.check_axis(k)
    return MeshFunction(u.grid, _fwd(u.values, k, u.grid.N))


def backward_diff(u: MeshFunction, k: int) -> MeshFunction:
    """N [u(x) - u(x - e_k)], the negative adjoint of forward_diff in <.,.>_N."""
    u.grid.check_axis(k)
    return MeshFunction(u.grid, _bwd(u.values, k, u.grid.N))


def w_diff(u: MeshFunction, k: int) -> MeshFunction:
    """[u(x + e_k) - u(x)] / [W_k((x_k + 1)/N) - W_k(x_k/N)]."""
    u.grid.check_axis(k)
    return MeshFunction(u.grid, _wdiff(u.values, u.grid, k))


def backward_w_diff(u: MeshFunction, k: int) -> MeshFunction:
    """[u(x) - u(x - e_k)] over the forward cell weight at x.

    The denominator is the increment of the cell starting at x, not the one
    ending at x. With it, sum_x v * w_diff(u) * cw = -sum_x u * backward_w_diff(v) * cw.
    """
    u.grid.check_axis(k)
    a = u.values
    return MeshFunction(u.grid, (a - np.roll(a, 1, axis=k)) / u.grid.cell_weight_field(k))


def inner_l2(u: MeshFunction, v: MeshFunction) -> float:
    _check_same_grid(u, v)
    return float(np.sum(u.values * v.values)) / u.grid.size


def inner_wk(u: MeshFunction, v: MeshFunction, k: int) -> float:
    _check_same_grid(u, v)
    g = u.grid
    g.check_axis(k)
    return float(np.sum(u.values * v.values * g.cell_weight_field(k))) / g.N ** (g.d - 1)


def inner_sobolev(u: MeshFunction, v: MeshFunction) -> float:
    _check_same_grid(u, v)
    total = inner_l2(u, v)
    for k in range(u.grid.d):
        total += inner_wk(w_diff(u, k), w_diff(v, k), k)
    return total


def norm_l2(u: MeshFunction) -> float:
    return float(np.sqrt(inner_l2(u, u)))


def norm_sobolev(u: MeshFunction) -> float:
    return float(np.sqrt(inner_sobolev(u, u)))


def grad_w_norm(u: MeshFunction) -> float:
    """sqrt(sum_k ||w_diff(u, k)||^2_{W_k,N})."""
    return float(np.sqrt(sum(inner_wk(w_diff(u, k), w_diff(u, k), k) for k in range(u.grid.d))))


def divergence_form_apply(A, u: MeshFunction) -> MeshFunction:
    """sum_k D_k(a_kk * w_diff(u, k)) with D_k the backward difference N[g(x) - g(x - e_k)].

    The outer difference is the adjoint one, so that the operator is the
    generator of the random walk with conductances and is symmetric in <.,.>_N.
    """
    if A.grid != u.grid:
        raise GridMismatchError("field and mesh function live on different grids")
    return MeshFunction(u.grid, _div_form(A.coeffs, u.values, u.grid))


def mean_zero_project(u: MeshFunction) -> MeshFunction:
    return MeshFunction(u.grid, u.values - u.values.mean())


def poincare_constant(grid: TorusGrid) -> float:
    """Exact best constant C in ||u - mean u||_N <= C ||grad_W u||, by a dense eigensolve.

    Only meant for small grids.
    """
    from scipy.linalg import eigh

    from .elliptic import DiagonalField, assemble_operator

    L = assemble_operator(DiagonalField.constant(grid, 1.0), 0.0).toarray()
    evals = eigh(L, eigvals_only=True)
    # smallest nonzero eigenvalue of -div grad_W (one zero mode for constants)
    return float(1.0 / np.sqrt(np.sort(evals)[1]))
