"""Homogenization of sequences of coefficient fields.

Three ways to generate the field A^N on each lattice:

* ``discretized_fixed``: weighted cell averages of a fixed field a_kk(x);
* ``periodic_pattern``: a tile of values repeated over the lattice;
* ``random_ergodic``: a stationary random field b_kk on Z^d read at the lattice
  sites, replaced by E[b_kk] on cells whose closure meets the atoms of W_k.

The homogenized entry is 1 / (weak limit of 1 / a^N_kk).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .elliptic import DiagonalField, solve_resolvent
from .errors import EllipticityError
from .interp import (
    ContinuousFunctional,
    cell_integrals,
    discretize_functional,
    discretize_weighted,
    l2_error_piecewise_constant,
)
from .mesh import MeshFunction, TorusGrid, _wdiff, inner_l2, norm_sobolev
from .weights import WProduct

log = logging.getLogger(__name__)

__all__ = [
    "Law",
    "RandomEnvironmentSpec",
    "RandomStudy",
    "CoefficientSequenceSpec",
    "HomogenizedMatrix",
    "HomogenizationResult",
    "AnalyticReference",
    "build_field",
    "slab_mask",
    "predicted_homogenized_matrix",
    "homogenized_field",
    "energy_pair",
    "run_h_convergence_study",
    "fourier_reference",
    "trigonometric_reference",
    "fit_fourier_coefficient",
    "fit_offslab_coefficient",
    "random_homogenization_study",
    "averaged_flux",
    "weak_pairings",
]


# -- random environments -------------------------------------------------------

@dataclass(frozen=True)
class Law:
    """Marginal law of one coefficient: ``uniform`` on [low, high] or ``discrete``."""

    kind: str
    low: float = 0.0
    high: float = 0.0
    values: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "uniform":
            if not 0 < self.low < self.high:
                raise ValueError("uniform law needs 0 < low < high")
        elif self.kind == "discrete":
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise ValueError("discrete law needs matching values and probs")
            if min(self.values) <= 0:
                raise ValueError("discrete law values must be positive")
            if abs(sum(self.probs) - 1.0) > 1e-12 or min(self.probs) < 0:
                raise ValueError("discrete law probs must be a probability vector")
        else:
            raise ValueError(f"unknown law kind {self.kind!r}")

    @classmethod
    def from_dict(cls, desc: dict) -> "Law":
        if desc["kind"] == "uniform":
            return cls("uniform", low=float(desc["low"]), high=float(desc["high"]))
        return cls("discrete", values=tuple(map(float, desc["values"])), probs=tuple(map(float, desc["probs"])))

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "uniform":
            return self.low, self.high
        return min(self.values), max(self.values)

    def mean(self, probs=None) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        p = np.asarray(self.probs if probs is None else probs)
        return float(np.dot(p, self.values))

    def mean_inverse(self, probs=None) -> float:
        if self.kind == "uniform":
            return math.log(self.high / self.low) / (self.high - self.low)
        p = np.asarray(self.probs if probs is None else probs)
        return float(np.dot(p, 1.0 / np.asarray(self.values)))


@dataclass(frozen=True)
class RandomEnvironmentSpec:
    """Stationary ergodic coefficient field, one law per axis.

    ``model="iid"`` draws every site independently. ``model="markov"`` (discrete
    laws only) runs a stationary irreducible Markov chain along axis k for the
    axis-k coefficient, independently across lines.
    """

    laws: tuple[Law, ...]
    model: str = "iid"
    transition: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if self.model not in ("iid", "markov"):
            raise ValueError(f"unknown shift model {self.model!r}")
        if self.model == "markov":
            if self.transition is None or len(self.transition) != len(self.laws):
                raise ValueError("markov model needs one transition matrix per axis")
            for law, P in zip(self.laws, self.transition):
                P = np.asarray(P, dtype=float)
                if law.kind != "discrete" or P.shape != (len(law.values),) * 2:
                    raise ValueError("markov model needs discrete laws with square transition matrices")
                if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
                    raise ValueError("transition rows must be probability vectors")

    @property
    def d(self) -> int:
        return len(self.laws)

    def stationary(self, k: int) -> np.ndarray:
        law = self.laws[k]
        if self.model == "iid":
            return np.asarray(law.probs) if law.kind == "discrete" else np.array([])
        P = np.asarray(self.transition[k], dtype=float)
        evals, evecs = np.linalg.eig(P.T)
        v = np.real(evecs[:, np.argmin(np.abs(evals - 1.0))])
        return v / v.sum()

    def mean_b(self, k: int) -> float:
        law = self.laws[k]
        return law.mean(self.stationary(k) if law.kind == "discrete" else None)

    def mean_inverse_b(self, k: int) -> float:
        law = self.laws[k]
        return law.mean_inverse(self.stationary(k) if law.kind == "discrete" else None)

    def sample(self, k: int, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        law = self.laws[k]
        if self.model == "iid":
            if law.kind == "uniform":
                return rng.uniform(law.low, law.high, size=shape)
            idx = rng.choice(len(law.values), size=shape, p=law.probs)
            return np.asarray(law.values)[idx]
        # stationary Markov chain along axis k
        P = np.asarray(self.transition[k], dtype=float)
        cum = np.cumsum(P, axis=1)
        moved = np.moveaxis(np.empty(shape, dtype=int), k, 0)
        pi = self.stationary(k)
        moved[0] = rng.choice(len(pi), size=moved.shape[1:], p=pi)
        for i in range(1, moved.shape[0]):
            u = rng.random(moved.shape[1:])
            moved[i] = np.minimum((u[..., None] > cum[moved[i - 1]]).sum(axis=-1), len(pi) - 1)
        return np.asarray(law.values)[np.moveaxis(moved, 0, k)]


# -- coefficient sequences -----------------------------------------------------

@dataclass(frozen=True)
class CoefficientSequenceSpec:
    kind: str
    theta: float
    fields: tuple[Callable, ...] = ()
    patterns: tuple[np.ndarray, ...] = ()
    env: RandomEnvironmentSpec | None = None

    def __post_init__(self):
        if self.kind not in ("discretized_fixed", "periodic_pattern", "random_ergodic"):
            raise ValueError(f"unknown coefficient sequence kind {self.kind!r}")
        if self.kind == "random_ergodic":
            if self.env is None:
                raise ValueError("random_ergodic needs an environment")
            for law in self.env.laws:
                lo, hi = law.support
                if lo < 1 / self.theta - 1e-12 or hi > self.theta + 1e-12:
                    raise EllipticityError(f"law support [{lo}, {hi}] violates theta={self.theta}")
        if self.kind == "periodic_pattern":
            pats = tuple(np.asarray(p, dtype=float) for p in self.patterns)
            for p in pats:
                if np.any(p < 1 / self.theta - 1e-12) or np.any(p > self.theta + 1e-12):
                    raise EllipticityError("pattern values violate the ellipticity bound")
            object.__setattr__(self, "patterns", pats)

    @property
    def d(self) -> int:
        if self.kind == "random_ergodic":
            return self.env.d
        return len(self.fields) if self.kind == "discretized_fixed" else len(self.patterns)

    @classmethod
    def constant(cls, value: float, d: int = 1) -> "CoefficientSequenceSpec":
        theta = max(value, 1 / value)
        return cls("periodic_pattern", theta, patterns=tuple(np.full((1,) * d, value) for _ in range(d)))

    @classmethod
    def periodic(cls, patterns: Sequence, theta: float | None = None) -> "CoefficientSequenceSpec":
        pats = tuple(np.asarray(p, dtype=float) for p in patterns)
        if any(p.size == 0 or not np.all(p > 0) for p in pats):
            raise EllipticityError("pattern values must be positive")
        if theta is None:
            theta = max(max(p.max(), 1 / p.min()) for p in pats)
        return cls("periodic_pattern", theta, patterns=pats)

    @classmethod
    def fixed(cls, fields: Sequence[Callable], theta: float) -> "CoefficientSequenceSpec":
        return cls("discretized_fixed", theta, fields=tuple(fields))

    @classmethod
    def random(cls, env: RandomEnvironmentSpec, theta: float) -> "CoefficientSequenceSpec":
        return cls("random_ergodic", theta, env=env)


def slab_mask(grid: TorusGrid, k: int) -> np.ndarray:
    """Cells whose closure [x_k/N, (x_k+1)/N] meets an atom of W_k, broadcast to grid.shape."""
    N = grid.N
    mask1 = np.zeros(N, dtype=bool)
    for p in grid.w[k].singular_support():
        lo = p * N
        i = int(math.floor(lo + 1e-12))  # cell starting at or before p
        mask1[i % N] = True
        if abs(lo - round(lo)) <= 1e-12:
            mask1[(int(round(lo)) - 1) % N] = True  # p is a grid line: the cell ending there too
    shape = [1] * grid.d
    shape[k] = N
    return np.broadcast_to(mask1.reshape(shape), grid.shape)


def _tile(pattern: np.ndarray, grid: TorusGrid) -> np.ndarray:
    pat = pattern.reshape(pattern.shape + (1,) * (grid.d - pattern.ndim))
    idx = np.indices(grid.shape)
    return pat[tuple(idx[k] % pat.shape[k] for k in range(grid.d))]


def build_field(spec: CoefficientSequenceSpec, grid: TorusGrid, rng: np.random.Generator | int | None = None) -> DiagonalField:
    if spec.d != grid.d:
        raise ValueError(f"spec has dimension {spec.d}, grid has {grid.d}")
    if spec.kind == "periodic_pattern":
        coeffs = [_tile(p, grid) for p in spec.patterns]
    elif spec.kind == "discretized_fixed":
        coeffs = [discretize_weighted(fn, k, grid).values for k, fn in enumerate(spec.fields)]
    else:
        if rng is None:
            raise ValueError("random_ergodic fields need an explicit seed or generator")
        rng = np.random.default_rng(rng)
        coeffs = []
        for k in range(grid.d):
            b = spec.env.sample(k, grid.shape, rng)
            b[slab_mask(grid, k)] = spec.env.mean_b(k)
            coeffs.append(b)
    return DiagonalField(grid, np.stack(coeffs), spec.theta)


@dataclass(frozen=True)
class HomogenizedMatrix:
    """Per-axis homogenized entries as functions of position."""

    entries: tuple[Callable, ...]
    description: str

    def __call__(self, k: int, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.broadcast_to(self.entries[k](points), points.shape[:-1]).astype(float)


def predicted_homogenized_matrix(spec: CoefficientSequenceSpec, w: WProduct) -> HomogenizedMatrix:
    if spec.kind == "periodic_pattern":
        vals = [1.0 / float(np.mean(1.0 / p)) for p in spec.patterns]
        return HomogenizedMatrix(
            tuple((lambda pts, v=v: np.full(pts.shape[:-1], v)) for v in vals),
            "harmonic mean of the pattern: " + ", ".join(f"{v:.12g}" for v in vals),
        )
    if spec.kind == "discretized_fixed":
        return HomogenizedMatrix(tuple(spec.fields), "the fixed field itself")
    entries = []
    for k in range(w.d):
        off = 1.0 / spec.env.mean_inverse_b(k)
        on = spec.env.mean_b(k)
        atoms = np.asarray(w[k].singular_support())

        def entry(pts, k=k, off=off, on=on, atoms=atoms):
            x = pts[..., k] - np.floor(pts[..., k])
            hit = np.zeros(x.shape, dtype=bool)
            for p in atoms:
                hit |= x == p
            return np.where(hit, on, off)

        entries.append(entry)
    desc = "1/E[1/b] off the singular slab, E[b] on it: " + ", ".join(
        f"({1 / spec.env.mean_inverse_b(k):.12g}, {spec.env.mean_b(k):.12g})" for k in range(w.d)
    )
    return HomogenizedMatrix(tuple(entries), desc)


def homogenized_field(spec: CoefficientSequenceSpec, grid: TorusGrid, off_slab: Sequence[float] | None = None) -> DiagonalField:
    """The predicted homogenized matrix discretized on a grid.

    For random environments, ``off_slab`` overrides the off-membrane value per
    axis (used when fitting an effective coefficient).
    """
    if spec.kind == "periodic_pattern":
        vals = [1.0 / float(np.mean(1.0 / p)) for p in spec.patterns]
        coeffs = np.stack([np.full(grid.shape, v) for v in vals])
    elif spec.kind == "discretized_fixed":
        return build_field(spec, grid)
    else:
        coeffs = []
        for k in range(grid.d):
            off = off_slab[k] if off_slab is not None else 1.0 / spec.env.mean_inverse_b(k)
            a = np.full(grid.shape, float(off))
            a[slab_mask(grid, k)] = spec.env.mean_b(k)
            coeffs.append(a)
        coeffs = np.stack(coeffs)
    theta = max(spec.theta, float(coeffs.max()), float(1 / coeffs.min()))
    return DiagonalField(grid, coeffs, theta)


# -- energies and studies ---------------------------------------------------------

def energy_pair(A: DiagonalField, u: MeshFunction, lam: float) -> tuple[float, float]:
    """(lambda <u, u>_N, N^{1-d} sum_k sum_x a_kk (dW_k u)^2 [cell weight])."""
    if A.grid != u.grid:
        from .errors import GridMismatchError

        raise GridMismatchError("field and mesh function live on different grids")
    g = u.grid
    mass = lam * inner_l2(u, u)
    energy = 0.0
    for k in range(g.d):
        du = _wdiff(u.values, g, k)
        energy += float(np.sum(A.coeffs[k] * du**2 * g.cell_weight_field(k))) / g.N ** (g.d - 1)
    return mass, energy


@dataclass(frozen=True)
class AnalyticReference:
    """Closed-form homogenized solution u0 with its W-gradient and the homogenized matrix."""

    u0: Callable
    grad_w: tuple[Callable, ...]
    a_hom: HomogenizedMatrix
    description: str = "analytic"

    def energies(self, w: WProduct, lam: float, n_cells: int = 256) -> tuple[float, float]:
        grid = TorusGrid(w.d, n_cells, w)
        mass = lam * float(cell_integrals(lambda p: self.u0(p) ** 2, grid).sum())
        energy = 0.0
        for k in range(w.d):
            energy += float(
                cell_integrals(lambda p, k=k: self.a_hom(k, p) * self.grad_w[k](p) ** 2, grid, k).sum()
            )
        return mass, energy


@dataclass
class HomogenizationResult:
    records: list[dict] = field(default_factory=list)
    reference_mass: float = float("nan")
    reference_energy: float = float("nan")
    predicted: str = ""
    reference: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_rows(self) -> list[tuple[int, str, float]]:
        rows = []
        for r in self.records:
            for key in ("sobolev_norm", "l2_error", "l2_mass", "w_energy"):
                rows.append((r["N"], key, r[key]))
        return rows


def _upsample(u: MeshFunction, factor: int) -> np.ndarray:
    vals = u.values
    for k in range(u.grid.d):
        vals = np.repeat(vals, factor, axis=k)
    return vals


def _solve_level(spec, w, F, lam, N, rng, solver_kw):
    grid = TorusGrid(w.d, N, w)
    A = build_field(spec, grid, rng)
    f = discretize_functional(F, grid).to_mesh()
    u = solve_resolvent(A, lam, f, **solver_kw)
    return grid, A, u


def run_h_convergence_study(
    spec: CoefficientSequenceSpec,
    w: WProduct,
    F: ContinuousFunctional,
    lam: float,
    N_list: Sequence[int],
    reference: AnalyticReference | str = "fine",
    seed: int | None = None,
    fine_factor: int = 4,
    jobs: int = 1,
    **solver_kw,
) -> HomogenizationResult:
    """Solve the discrete problem along N_list and compare with the homogenized limit."""
    N_list = list(N_list)
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    predicted = predicted_homogenized_matrix(spec, w)
    seeds = np.random.SeedSequence(seed).spawn(len(N_list)) if spec.kind == "random_ergodic" else [None] * len(N_list)
    if spec.kind == "random_ergodic" and seed is None:
        raise ValueError("random_ergodic studies need an explicit seed")

    result = HomogenizationResult(predicted=predicted.description)
    if isinstance(reference, AnalyticReference):
        result.reference = reference.description
        result.reference_mass, result.reference_energy = reference.energies(w, lam, max(256, N_list[-1]))
        u_ref = None
    elif reference == "fine":
        M = fine_factor * N_list[-1]
        fine = TorusGrid(w.d, M, w)
        A_hom = homogenized_field(spec, fine)
        u_ref = solve_resolvent(A_hom, lam, discretize_functional(F, fine).to_mesh(), **solver_kw)
        result.reference = f"fine-grid homogenized solve, N={M}"
        result.reference_mass, result.reference_energy = energy_pair(A_hom, u_ref, lam)
    else:
        raise ValueError(f"unknown reference {reference!r}")

    def level(args):
        N, ss = args
        rng = np.random.default_rng(ss) if ss is not None else None
        try:
            grid, A, u = _solve_level(spec, w, F, lam, N, rng, solver_kw)
        except Exception as exc:  # surface the offending level
            raise type(exc)(f"N={N}: {exc}") from exc
        if u_ref is None:
            err = l2_error_piecewise_constant(reference.u0, u)
        elif u_ref.grid.N % N == 0:
            diff = _upsample(u, u_ref.grid.N // N) - u_ref.values
            err = float(np.sqrt(np.mean(diff**2)))
        else:
            from .interp import PIECEWISE_CONSTANT, interpolate

            ref = u_ref
            err = l2_error_piecewise_constant(
                lambda p: interpolate(ref, PIECEWISE_CONSTANT, p.reshape(-1, w.d)).reshape(p.shape[:-1]), u
            )
        mass, energy = energy_pair(A, u, lam)
        return {"N": N, "sobolev_norm": norm_sobolev(u), "l2_error": err, "l2_mass": mass, "w_energy": energy}

    work = list(zip(N_list, seeds))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            result.records = list(pool.map(level, work))
    else:
        result.records = [level(a) for a in work]
    return result


def trigonometric_reference(
    lam: float,
    a_diag: Sequence[float],
    terms: Sequence[tuple[float, Sequence[int], str]],
    constant: float = 0.0,
) -> AnalyticReference:
    """Exact solution of lambda u - sum_k a_k u_kk = c + sum amp * trig(2 pi m.x) for W = x.

    Each term is (amplitude, integer wave vector m, "cos" or "sin"); the
    response of mode m is damped by lambda + 4 pi^2 sum_k a_k m_k^2.
    """
    a = np.asarray(a_diag, dtype=float)
    d = a.size
    modes = []
    for amp, m, kind in terms:
        m = np.asarray(m, dtype=float).reshape(d)
        if kind not in ("cos", "sin"):
            raise ValueError(f"unknown term type {kind!r}")
        modes.append((amp / (lam + 4 * math.pi**2 * float(np.dot(a, m**2))), m, kind))
    c0 = constant / lam

    def u0(p):
        out = np.full(p.shape[:-1], c0)
        for c, m, kind in modes:
            phase = 2 * np.pi * (p @ m)
            out = out + c * (np.cos(phase) if kind == "cos" else np.sin(phase))
        return out

    def grad(k):
        def g(p):
            out = np.zeros(p.shape[:-1])
            for c, m, kind in modes:
                phase = 2 * np.pi * (p @ m)
                dphase = 2 * np.pi * m[k]
                out = out + c * dphase * (-np.sin(phase) if kind == "cos" else np.cos(phase))
            return out

        return g

    a_hom = HomogenizedMatrix(
        tuple((lambda p, v=v: np.full(p.shape[:-1], v)) for v in a),
        "constant " + ", ".join(f"{v:.12g}" for v in a),
    )
    return AnalyticReference(u0, tuple(grad(k) for k in range(d)), a_hom, f"trigonometric solution with a={a.tolist()}")


def fourier_reference(lam: float, a_hom: float, amplitude: float = 1.0, mode: int = 1) -> AnalyticReference:
    """u0 = A cos(2 pi m x) / (lambda + 4 pi^2 m^2 a) for W = x, d = 1, constant a."""
    return trigonometric_reference(lam, [a_hom], [(amplitude, [mode], "cos")])


def fit_fourier_coefficient(u: MeshFunction, f: MeshFunction, lam: float, mode: int = 1) -> float:
    """Effective coefficient a from the response of one Fourier mode (d=1, W=x).

    The amplitude ratio |u^|/|f^| of mode m is 1/(lambda + 4 pi^2 m^2 a).
    """
    x = u.grid.points()[..., 0]
    c, s = np.cos(2 * np.pi * mode * x), np.sin(2 * np.pi * mode * x)
    amp_u = math.hypot(np.mean(u.values * c), np.mean(u.values * s))
    amp_f = math.hypot(np.mean(f.values * c), np.mean(f.values * s))
    return (amp_f / amp_u - lam) / (4 * math.pi**2 * mode**2)


def fit_offslab_coefficient(
    u: MeshFunction,
    spec: CoefficientSequenceSpec,
    F: ContinuousFunctional,
    lam: float,
    fine_factor: int = 4,
    axis: int = 0,
) -> float:
    """Off-membrane coefficient whose homogenized solution best matches u in L^2.

    The reference family is the fine-grid solve with E[b] on the singular slab
    and a free constant elsewhere (same value on every axis when d > 1).
    """
    w = u.grid.w
    fine = TorusGrid(u.grid.d, fine_factor * u.grid.N, w)
    f_fine = discretize_functional(F, fine).to_mesh()
    target = _upsample(u, fine_factor)

    def misfit(a):
        A = homogenized_field(spec, fine, off_slab=[a] * fine.d)
        ref = solve_resolvent(A, lam, f_fine, method="direct")
        return float(np.mean((ref.values - target) ** 2))

    res = minimize_scalar(misfit, bounds=(1 / spec.theta, spec.theta), method="bounded", options={"xatol": 1e-7})
    return float(res.x)


@dataclass
class RandomStudy:
    seeds: list[int]
    fitted: np.ndarray
    predicted: float

    @property
    def mean(self) -> float:
        return float(self.fitted.mean())

    @property
    def std(self) -> float:
        return float(self.fitted.std(ddof=1))

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(len(self.fitted))


def random_homogenization_study(
    spec: CoefficientSequenceSpec,
    w: WProduct,
    F: ContinuousFunctional,
    lam: float,
    N: int,
    seeds: Sequence[int],
    fine_factor: int = 4,
    jobs: int = 1,
) -> RandomStudy:
    """Fit the off-membrane effective coefficient for independent realizations."""

    def one(seed):
        grid = TorusGrid(w.d, N, w)
        A = build_field(spec, grid, np.random.default_rng(seed))
        u = solve_resolvent(A, lam, discretize_functional(F, grid).to_mesh(), method="direct")
        return fit_offslab_coefficient(u, spec, F, lam, fine_factor)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            fitted = list(pool.map(one, seeds))
    else:
        fitted = [one(s) for s in seeds]
    return RandomStudy(list(seeds), np.array(fitted), 1.0 / spec.env.mean_inverse_b(0))


# -- weak-convergence diagnostics -------------------------------------------------

def weak_pairings(values: np.ndarray, grid: TorusGrid, k: int, dictionary) -> np.ndarray:
    """integral of (piecewise-constant values) * phi d(x^k x W_k) for each phi in the dictionary."""
    out = []
    for _, phi in dictionary:
        out.append(float(np.sum(values * cell_integrals(phi, grid, k))))
    return np.array(out)


def averaged_flux(A: DiagonalField, u: MeshFunction, k: int, n_coarse: int) -> np.ndarray:
    """Flux a_kk dW_k u averaged against d(x^k x W_k) over the cells of a coarse grid.

    Only for d = 1 (the coarse average is a ratio of W-measures per coarse cell).
    """
    g = u.grid
    if g.d != 1 or g.N % n_coarse:
        raise ValueError("averaged_flux needs d = 1 and n_coarse dividing N")
    flux = A.coeffs[k] * _wdiff(u.values, g, k)
    cw = g.cell_weights(k)
    r = g.N // n_coarse
    return (flux * cw).reshape(n_coarse, r).sum(axis=1) / cw.reshape(n_coarse, r).sum(axis=1)
