"""Interpolation of mesh functions, discretization of continuous data, test functions.

Three interpolants extend a mesh function u to the torus. On the cell with
base vertex x, write s_k = W_k(y_k) - W_k(x_k/N). Then

* piecewise constant:   u~(y) = u(x)
* W-interpolation:      u*(y) = sum over axis subsets S of  c_S(x) prod_{k in S} s_k
* partial (axis m):     u^(m)(y) = the same sum restricted to subsets without m

where c_S is the mixed W-difference prod_{k in S} dW_k applied to u. Cells are
half-open, [x_k, x_k + 1/N) for Lebesgue integration and (x_k, x_k + 1/N] for
integration against dW_k, so that a cell's W_k-measure is exactly its cell weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .elliptic import DualFunctional
from .mesh import MeshFunction, TorusGrid, _wdiff
from .weights import WCoordinate

__all__ = [
    "InterpolantKind",
    "PIECEWISE_CONSTANT",
    "W_FULL",
    "w_partial",
    "interpolate",
    "w_derivative_of_interpolant",
    "discretize_l2",
    "discretize_weighted",
    "discretize_functional",
    "ContinuousFunctional",
    "approx_test_function",
    "ApproxTestFunction",
    "axis_rule",
    "cell_integrals",
]

DEFAULT_ORDER = 10


@dataclass(frozen=True)
class InterpolantKind:
    kind: str
    axis: int | None = None

    def __post_init__(self):
        if self.kind not in ("piecewise_constant", "w_full", "w_partial"):
            raise ValueError(f"unknown interpolant kind {self.kind!r}")
        if (self.kind == "w_partial") != (self.axis is not None):
            raise ValueError("only the partial kind carries an axis")
        if self.axis is not None and self.axis < 0:
            raise ValueError("axis must be non-negative")

    def includes(self, mask: int) -> bool:
        """Whether the term for the axis subset ``mask`` is part of this interpolant."""
        if self.kind == "piecewise_constant":
            return mask == 0
        if self.kind == "w_full":
            return True
        return not (mask >> self.axis) & 1


PIECEWISE_CONSTANT = InterpolantKind("piecewise_constant")
W_FULL = InterpolantKind("w_full")


def w_partial(m: int) -> InterpolantKind:
    return InterpolantKind("w_partial", m)


# -- expansion coefficients ---------------------------------------------------

def mixed_differences(u: MeshFunction) -> dict[int, np.ndarray]:
    """c_S for every axis subset S, keyed by bitmask."""
    g = u.grid
    coeffs = {0: u.values}
    for mask in range(1, 2**g.d):
        k = (mask & -mask).bit_length() - 1  # lowest set axis
        coeffs[mask] = _wdiff(coeffs[mask & ~(1 << k)], g, k)
    return coeffs


def locate(grid: TorusGrid, y) -> tuple[np.ndarray, np.ndarray]:
    """Cell base indices and W-offsets s_k for points y of shape (n, d)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[-1] != grid.d:
        raise ValueError(f"points must have {grid.d} coordinates")
    y = y - np.floor(y)
    idx = np.floor(y * grid.N).astype(int)
    # floating round-off can put a point just below a grid line into the next cell
    idx = np.minimum(idx, grid.N - 1)
    s = np.empty_like(y)
    for k, wk in enumerate(grid.w.coords):
        s[:, k] = wk(y[:, k]) - wk(idx[:, k] / grid.N)
    return idx, s


def interpolate(u: MeshFunction, kind: InterpolantKind, y) -> np.ndarray:
    """Evaluate an interpolant of u at points y (shape (n, d) or (d,))."""
    g = u.grid
    if kind.axis is not None:
        g.check_axis(kind.axis)
    scalar = np.ndim(y) == 1 and g.d > 1 or np.ndim(y) == 0
    idx, s = locate(g, np.reshape(y, (-1, g.d)))
    coeffs = mixed_differences(u)
    out = np.zeros(len(idx))
    key = tuple(idx.T)
    for mask, c in coeffs.items():
        if not kind.includes(mask):
            continue
        term = c[key].copy()
        for k in range(g.d):
            if (mask >> k) & 1:
                term *= s[:, k]
        out += term
    return float(out[0]) if scalar else out


def w_derivative_of_interpolant(u: MeshFunction, m: int, y) -> np.ndarray:
    """dW_m of the W-interpolant: the partial interpolant of the W-difference of u."""
    u.grid.check_axis(m)
    return interpolate(MeshFunction(u.grid, _wdiff(u.values, u.grid, m)), w_partial(m), y)


# -- cell quadrature ----------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss(order: int):
    return np.polynomial.legendre.leggauss(order)


def _pieces(wk: WCoordinate, a: float, b: float):
    pts = [a] + wk.breakpoints_in(a, b) + [b]
    return list(zip(pts[:-1], pts[1:]))


@lru_cache(maxsize=256)
def axis_rule(wk: WCoordinate, N: int, measure: str = "lebesgue", order: int = DEFAULT_ORDER):
    """Per-cell 1-d quadrature rule, padded to equal length.

    ``measure="lebesgue"``: dy on [i/N, (i+1)/N), split at slope breakpoints and atoms.
    ``measure="stieltjes"``: dW_k on (i/N, (i+1)/N]; density part by Gauss on each
    linear piece, atoms as point masses.
    Returns (nodes, weights) of shape (N, L).
    """
    if measure not in ("lebesgue", "stieltjes"):
        raise ValueError(f"unknown measure {measure!r}")
    xg, wg = _gauss(order)
    rows = []
    for i in range(N):
        a, b = i / N, (i + 1) / N
        nodes, weights = [], []
        for lo, hi in _pieces(wk, a, b):
            half = 0.5 * (hi - lo)
            nd = lo + half * (xg + 1.0)
            wt = half * wg
            if measure == "stieltjes":
                wt = wt * wk.density(0.5 * (lo + hi))
            nodes.append(nd)
            weights.append(wt)
        if measure == "stieltjes":
            for p, m in wk.atoms:
                q = 1.0 if p == 0.0 else p
                if a < q <= b:
                    nodes.append(np.array([q]))
                    weights.append(np.array([m]))
        rows.append((np.concatenate(nodes), np.concatenate(weights)))
    L = max(len(n) for n, _ in rows)
    nodes = np.zeros((N, L))
    weights = np.zeros((N, L))
    for i, (nd, wt) in enumerate(rows):
        nodes[i, : len(nd)] = nd
        nodes[i, len(nd):] = nd[-1]
        weights[i, : len(wt)] = wt
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def cell_integrals(
    fn: Callable[[np.ndarray], np.ndarray],
    grid: TorusGrid,
    stieltjes_axis: int | None = None,
    order: int = DEFAULT_ORDER,
) -> np.ndarray:
    """Integral of fn over every cell, Lebesgue in all axes except ``stieltjes_axis``.

    ``fn`` receives points of shape ``grid.shape + (L_1, ..., L_d) + (d,)`` and
    must return an array of shape ``grid.shape + (L_1, ..., L_d)``; values on
    padded nodes are multiplied by zero weights.
    """
    d, N = grid.d, grid.N
    rules = [
        axis_rule(grid.w[k], N, "stieltjes" if k == stieltjes_axis else "lebesgue", order)
        for k in range(d)
    ]
    Ls = [r[0].shape[1] for r in rules]
    full = grid.shape + tuple(Ls)
    pts = np.empty(full + (d,))
    wts = np.ones(full)
    for k, (nodes, weights) in enumerate(rules):
        shape = [1] * (2 * d)
        shape[k] = N
        shape[d + k] = Ls[k]
        pts[..., k] = np.broadcast_to(nodes.reshape(shape), full)
        wts = wts * weights.reshape(shape)
    vals = np.asarray(fn(pts), dtype=float)
    return np.sum(vals * wts, axis=tuple(range(d, 2 * d)))


def _cell_broadcast(values: np.ndarray, d: int) -> np.ndarray:
    return values.reshape(values.shape + (1,) * d)


# -- discretization of continuous data ------------------------------------------

def discretize_l2(f, grid: TorusGrid, cell_integral=None, order: int = DEFAULT_ORDER) -> MeshFunction:
    """f_N(x) = N^d * integral of f over the cell [x, x + 1/N)^d.

    ``cell_integral(lower, upper)`` may supply exact cell integrals; it receives
    arrays of shape grid.shape + (d,).
    """
    if cell_integral is not None:
        lo = grid.points()
        vals = np.asarray(cell_integral(lo, lo + 1.0 / grid.N), dtype=float)
    else:
        vals = cell_integrals(f, grid, None, order)
    return MeshFunction(grid, grid.size * vals)


def discretize_weighted(g, k: int, grid: TorusGrid, order: int = DEFAULT_ORDER) -> MeshFunction:
    """g_N(x) = N^{d-1} / cw_k(x) * integral of g against d(y^k x W_k) over the cell."""
    grid.check_axis(k)
    vals = cell_integrals(g, grid, k, order)
    return MeshFunction(grid, grid.N ** (grid.d - 1) * vals / grid.cell_weight_field(k))


@dataclass(frozen=True)
class ContinuousFunctional:
    """f = f0 - sum_k d/dx_k f_k with f0 in L^2 and f_k in L^2(d(x^k x W_k)).

    Components are callables on points of shape (..., d); ``None`` means zero.
    """

    f0: Callable | None
    fk: Sequence[Callable | None] = ()


def discretize_functional(F: ContinuousFunctional, grid: TorusGrid, order: int = DEFAULT_ORDER) -> DualFunctional:
    f0 = discretize_l2(F.f0, grid, order=order) if F.f0 is not None else grid.zeros()
    fk = list(F.fk) + [None] * (grid.d - len(F.fk))
    comps = tuple(
        discretize_weighted(g, k, grid, order) if g is not None else grid.zeros()
        for k, g in enumerate(fk)
    )
    return DualFunctional(f0, comps)


# -- exact L2 integrals of interpolant expansions ------------------------------

def lebesgue_moments(wk: WCoordinate, N: int, pmax: int = 2, order: int = DEFAULT_ORDER) -> np.ndarray:
    """M[i, p] = integral over [i/N, (i+1)/N) of (W_k(y) - W_k(i/N))^p dy."""
    nodes, weights = axis_rule(wk, N, "lebesgue", order)
    s = wk(nodes) - wk(np.arange(N) / N)[:, None]
    return np.stack([np.sum(weights * s**p, axis=1) for p in range(pmax + 1)], axis=1)


def _expansion_l2_sq(coeffs: dict[int, np.ndarray], grid: TorusGrid, weight_axis: int | None = None) -> float:
    """Integral of (sum_S coeffs[S] prod_{k in S} s_k)^2 over the torus.

    Lebesgue in every axis; if ``weight_axis`` is given, that axis is integrated
    against dW instead and no coefficient may depend on it.
    """
    d = grid.d
    moments = [lebesgue_moments(grid.w[k], grid.N) for k in range(d)]
    total = np.zeros(grid.shape)
    masks = list(coeffs)
    for S, T in product(masks, masks):
        factor = coeffs[S] * coeffs[T]
        for k in range(d):
            if k == weight_axis:
                if (S >> k) & 1 or (T >> k) & 1:
                    raise ValueError("expansion depends on the weighted axis")
                mom = grid.cell_weights(k)
            else:
                mom = moments[k][:, ((S >> k) & 1) + ((T >> k) & 1)]
            shape = [1] * d
            shape[k] = grid.N
            factor = factor * mom.reshape(shape)
        total += factor
    return float(total.sum())


def interpolant_l2_norm(u: MeshFunction, kind: InterpolantKind = W_FULL) -> float:
    """Exact ||I u||_{L^2(T^d)} for the interpolant I of the given kind."""
    coeffs = {S: c for S, c in mixed_differences(u).items() if kind.includes(S)}
    return float(np.sqrt(max(_expansion_l2_sq(coeffs, u.grid), 0.0)))


def interpolant_distance(u: MeshFunction, kind1: InterpolantKind, kind2: InterpolantKind) -> float:
    """Exact L^2(T^d) distance between two interpolants of the same mesh function."""
    coeffs = {}
    for S, c in mixed_differences(u).items():
        sign = int(kind1.includes(S)) - int(kind2.includes(S))
        if sign:
            coeffs[S] = sign * c
    if not coeffs:
        return 0.0
    return float(np.sqrt(max(_expansion_l2_sq(coeffs, u.grid), 0.0)))


def interpolant_sobolev_norm(u: MeshFunction) -> float:
    """Exact ||u*||_{H_{1,W}(T^d)} of the W-interpolant."""
    g = u.grid
    total = interpolant_l2_norm(u, W_FULL) ** 2
    for m in range(g.d):
        du = MeshFunction(g, _wdiff(u.values, g, m))
        coeffs = {S: c for S, c in mixed_differences(du).items() if not (S >> m) & 1}
        total += _expansion_l2_sq(coeffs, g, weight_axis=m)
    return float(np.sqrt(total))


def l2_error_piecewise_constant(f, u: MeshFunction, order: int = DEFAULT_ORDER) -> float:
    """||f - u~||_{L^2(T^d)} by cell quadrature."""
    g = u.grid
    cell = _cell_broadcast(u.values, g.d)
    vals = cell_integrals(lambda p: (f(p) - cell) ** 2, g, None, order)
    return float(np.sqrt(vals.sum()))


def weighted_l2_error_piecewise_constant(gfn, u: MeshFunction, k: int, order: int = DEFAULT_ORDER) -> float:
    """||g - u~||_{L^2(d(x^k x W_k))}, cells half-open on the left along axis k."""
    g = u.grid
    cell = _cell_broadcast(u.values, g.d)
    vals = cell_integrals(lambda p: (gfn(p) - cell) ** 2, g, k, order)
    return float(np.sqrt(vals.sum()))


# -- test functions built from discrete derivatives -----------------------------

@dataclass(frozen=True)
class ApproxTestFunction:
    """G(x) = f(0) + integral over (0, x] of g dW, g a step function on the cells (j/n, (j+1)/n].

    G agrees with f at every node j/n and its W-derivative is g.
    """

    w: WCoordinate
    n: int
    node_values: np.ndarray  # f(j/n), j = 0..n
    g: np.ndarray  # step values, length n

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        t = x - np.floor(x)
        nt = t * self.n
        on_node = np.abs(nt - np.round(nt)) <= 1e-12 * self.n
        j = np.clip(np.ceil(nt).astype(int) - 1, 0, self.n - 1)
        base = self.node_values[j] + self.g[j] * (self.w(t) - self.w(j / self.n))
        node = self.node_values[np.round(nt).astype(int) % self.n]
        return np.where(on_node, node, base)

    def w_derivative(self, x):
        x = np.asarray(x, dtype=float)
        t = x - np.floor(x)
        j = np.ceil(t * self.n).astype(int) - 1
        return self.g[j % self.n]

    def zero_mean_integral(self) -> float:
        """integral over (0, 1] of g dW, equal to f(1) - f(0); zero for periodic f."""
        return float(np.sum(self.g * self.w.cell_weights(self.n)))


def approx_test_function(f: Callable, w: WCoordinate, n: int) -> ApproxTestFunction:
    if n < 1:
        raise ValueError("n must be >= 1")
    node_values = np.asarray(f(np.arange(n + 1) / n), dtype=float)
    g = np.diff(node_values) / w.cell_weights(n)
    return ApproxTestFunction(w, n, node_values, g)


def test_dictionary(w, n_fourier: int = 4, n_approx: int = 8) -> list[tuple[str, Callable]]:
    """Finite family of test functions used to probe weak convergence.

    Constants, the first Fourier modes per axis, and two functions built by
    ``approx_test_function`` along each axis.
    """
    d = w.d
    out: list[tuple[str, Callable]] = [("one", lambda p: np.ones(np.shape(p)[:-1]))]
    for k in range(d):
        for j in range(1, n_fourier + 1):
            out.append((f"cos{j}_x{k + 1}", lambda p, j=j, k=k: np.cos(2 * np.pi * j * p[..., k])))
            out.append((f"sin{j}_x{k + 1}", lambda p, j=j, k=k: np.sin(2 * np.pi * j * p[..., k])))
        for name, base in (("dw_sin", lambda x: np.sin(2 * np.pi * x)), ("dw_cos", lambda x: np.cos(2 * np.pi * x))):
            G = approx_test_function(base, w[k], n_approx)
            out.append((f"{name}_x{k + 1}", lambda p, G=G, k=k: G(p[..., k])))
    return out


test_dictionary.__test__ = False  # keep pytest from collecting it
