"""Discrete generalized elliptic problems  lambda u - div_N(A grad_W u) = f  on the torus.

The operator is symmetric in <.,.>_N, positive definite for lambda > 0 and
positive semidefinite with the constants as kernel for lambda = 0. Solves are
either a sparse direct factorization or matrix-free conjugate gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CompatibilityError, ConvergenceError, EllipticityError, GridMismatchError
from .mesh import (
    MeshFunction,
    TorusGrid,
    _bwd,
    _div_form,
    _wdiff,
    inner_l2,
    inner_sobolev,
    inner_wk,
    w_diff,
)

log = logging.getLogger(__name__)

__all__ = [
    "DiagonalField",
    "DualFunctional",
    "apply_T_lambda",
    "bilinear_form",
    "assemble_operator",
    "solve_resolvent",
    "solve_poisson",
    "dual_apply",
    "dual_canonicalize",
    "dual_norm",
]

DIRECT_SIZE_LIMIT = 4096


@dataclass(frozen=True, eq=False)
class DiagonalField:
    """Diagonal coefficient matrix A = diag(a_11, ..., a_dd) sampled on directed edges.

    ``coeffs[k][x]`` is the coefficient on the edge x -> x + e_k, read at the
    edge's base site.
    """

    grid: TorusGrid
    coeffs: np.ndarray
    theta: float

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.grid.d,) + self.grid.shape:
            raise ValueError(f"coeffs must have shape {(self.grid.d,) + self.grid.shape}, got {c.shape}")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        lo, hi = 1.0 / self.theta, self.theta
        slack = 1e-12 * max(1.0, hi)
        if np.any(c < lo - slack) or np.any(c > hi + slack):
            raise EllipticityError(
                f"coefficients span [{c.min():.6g}, {c.max():.6g}], outside [{lo:.6g}, {hi:.6g}]"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def constant(cls, grid: TorusGrid, value: float = 1.0, theta: float | None = None):
        theta = theta if theta is not None else max(value, 1.0 / value)
        return cls(grid, np.full((grid.d,) + grid.shape, float(value)), theta)

    @classmethod
    def from_arrays(cls, grid: TorusGrid, arrays, theta: float | None = None):
        c = np.stack([np.broadcast_to(np.asarray(a, dtype=float), grid.shape) for a in arrays])
        if theta is None:
            theta = float(max(c.max(), 1.0 / c.min()))
        return cls(grid, c, theta)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.coeffs[k]


def _check_lambda(lam: float, strict: bool):
    if lam < 0 or (strict and lam == 0):
        raise ValueError(f"lambda must be {'positive' if strict else 'non-negative'}, got {lam}")


def _check_grids(A: DiagonalField, *fns: MeshFunction):
    for f in fns:
        if f.grid != A.grid:
            raise GridMismatchError("field and mesh function live on different grids")


def apply_T_lambda(A: DiagonalField, lam: float, u: MeshFunction) -> MeshFunction:
    _check_lambda(lam, strict=False)
    _check_grids(A, u)
    return MeshFunction(u.grid, lam * u.values - _div_form(A.coeffs, u.values, u.grid))


def bilinear_form(A: DiagonalField, lam: float, u: MeshFunction, v: MeshFunction) -> float:
    """lambda <u, v>_N + N^{1-d} sum_k sum_x a_kk dW_k u dW_k v [cell weight]."""
    _check_grids(A, u, v)
    g = u.grid
    total = lam * inner_l2(u, v)
    for k in range(g.d):
        du = _wdiff(u.values, g, k)
        dv = _wdiff(v.values, g, k)
        total += float(np.sum(A.coeffs[k] * du * dv * g.cell_weight_field(k))) / g.N ** (g.d - 1)
    return total


def assemble_operator(A: DiagonalField, lam: float) -> sp.csr_matrix:
    """Sparse matrix of T_lambda acting on C-order flattened values."""
    g = A.grid
    n = g.size
    idx = np.arange(n).reshape(g.shape)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, float(lam))]
    for k in range(g.d):
        plus = np.roll(idx, -1, axis=k).ravel()
        # bond x -- x+e_k with conductance N a_kk(x) / cw_k(x)
        c = (g.N * A.coeffs[k] / g.cell_weight_field(k)).ravel()
        here = idx.ravel()
        rows += [here, plus, here, plus]
        cols += [here, plus, plus, here]
        vals += [c, c, -c, -c]
    M = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return M.tocsr()


def _cg(apply, b: np.ndarray, rtol: float, maxiter: int, project: bool) -> tuple[np.ndarray, int]:
    """Conjugate gradients on flattened arrays; optional mean-zero projection."""
    x = np.zeros_like(b)
    r = b.copy()
    if project:
        r -= r.mean()
    p = r.copy()
    rr = float(r @ r)
    bnorm = float(np.sqrt(b @ b))
    if bnorm == 0.0:
        return x, 0
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise ConvergenceError(f"operator not positive definite along search direction (p.Ap={pAp:.3e})")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        if project:
            r -= r.mean()
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= rtol * bnorm:
            return x, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConvergenceError(
        f"CG did not reach relative residual {rtol:g} in {maxiter} iterations "
        f"(reached {np.sqrt(rr) / bnorm:.3e})"
    )


def _pick_method(method: str, n: int) -> str:
    if method == "auto":
        return "direct" if n <= DIRECT_SIZE_LIMIT else "cg"
    if method not in ("direct", "cg"):
        raise ValueError(f"unknown method {method!r}")
    return method


def solve_resolvent(
    A: DiagonalField,
    lam: float,
    f: MeshFunction,
    *,
    method: str = "auto",
    rtol: float = 1e-10,
    maxiter: int | None = None,
) -> MeshFunction:
    """Unique u with lambda u - div_N(A grad_W u) = f, lambda > 0."""
    _check_lambda(lam, strict=True)
    _check_grids(A, f)
    g = A.grid
    method = _pick_method(method, g.size)
    b = f.values.ravel()
    if method == "direct":
        x = spla.spsolve(assemble_operator(A, lam).tocsc(), b)
    else:
        shape = g.shape

        def apply(v):
            a = v.reshape(shape)
            return (lam * a - _div_form(A.coeffs, a, g)).ravel()

        x, its = _cg(apply, b, rtol, maxiter or 50 * g.size, project=False)
        log.debug("resolvent CG converged in %d iterations", its)
    return MeshFunction(g, x.reshape(g.shape))


def solve_poisson(
    A: DiagonalField,
    f: MeshFunction,
    *,
    method: str = "auto",
    rtol: float = 1e-10,
    maxiter: int | None = None,
    compat_tol: float = 1e-12,
) -> MeshFunction:
    """Unique mean-zero u with div_N(A grad_W u) = f; f must have zero mean."""
    _check_grids(A, f)
    g = A.grid
    fnorm = float(np.sqrt(np.mean(f.values**2)))
    mean = float(f.values.mean())
    if abs(mean) > compat_tol * fnorm:
        raise CompatibilityError(
            f"right-hand side has mean {mean:.3e}; a solution exists only for mean-zero data"
        )
    method = _pick_method(method, g.size)
    n = g.size
    b = -(f.values.ravel() - mean)
    if method == "direct":
        # bordered system [[T0, 1], [1^T, 0]] pins the mean to zero
        T0 = assemble_operator(A, 0.0)
        ones = sp.csr_matrix(np.ones((n, 1)))
        K = sp.bmat([[T0, ones], [ones.T, None]], format="csc")
        sol = spla.spsolve(K, np.concatenate([b, [0.0]]))
        x = sol[:n]
    else:
        shape = g.shape

        def apply(v):
            return (-_div_form(A.coeffs, v.reshape(shape), g)).ravel()

        x, _ = _cg(apply, b, rtol, maxiter or 50 * n, project=True)
    x = x - x.mean()
    return MeshFunction(g, x.reshape(g.shape))


@dataclass(frozen=True)
class DualFunctional:
    """Element of the discrete dual space, v -> <f0, v>_N + sum_k <f_k, dW_k v>_{W_k,N}."""

    f0: MeshFunction
    fk: tuple[MeshFunction, ...]

    def __post_init__(self):
        fk = tuple(self.fk)
        if len(fk) != self.f0.grid.d:
            raise ValueError(f"need {self.f0.grid.d} axis components, got {len(fk)}")
        for f in fk:
            if f.grid != self.f0.grid:
                raise GridMismatchError("dual functional components live on different grids")
        object.__setattr__(self, "fk", fk)

    @property
    def grid(self) -> TorusGrid:
        return self.f0.grid

    @classmethod
    def from_mesh(cls, f: MeshFunction) -> "DualFunctional":
        return cls(f, tuple(f.grid.zeros() for _ in range(f.grid.d)))

    def to_mesh(self) -> MeshFunction:
        """Riesz representative in <.,.>_N:  f0 - sum_k D_k f_k  (backward differences)."""
        g = self.grid
        vals = self.f0.values.copy()
        for k, f in enumerate(self.fk):
            vals -= _bwd(f.values, k, g.N)
        return MeshFunction(g, vals)


def dual_apply(F: DualFunctional, v: MeshFunction) -> float:
    if v.grid != F.grid:
        raise GridMismatchError("functional and mesh function live on different grids")
    total = inner_l2(F.f0, v)
    for k, f in enumerate(F.fk):
        total += inner_wk(f, w_diff(v, k), k)
    return total


def dual_canonicalize(F: DualFunctional, **solver_kw) -> DualFunctional:
    """Canonical representative (u, dW_1 u, ..., dW_d u), u the lambda=1, A=I solution."""
    g = F.grid
    u = solve_resolvent(DiagonalField.constant(g, 1.0), 1.0, F.to_mesh(), **solver_kw)
    return DualFunctional(u, tuple(w_diff(u, k) for k in range(g.d)))


def dual_norm(F: DualFunctional, **solver_kw) -> float:
    """||F||_{-1} = ||u||_{1,W,N} with u the canonical representative."""
    c = dual_canonicalize(F, **solver_kw)
    return float(np.sqrt(inner_sobolev(c.f0, c.f0)))
