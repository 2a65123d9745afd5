"""Exclusion process with conductances and its hydrodynamic equation.

Particles on the discrete torus swap across the bond {x, x+e_k} at rate
N^2 xi_{x,x+e_k} c_{x,x+e_k}(eta) with

    xi = a_k(x/N) / (N [W_k((x_k+1)/N) - W_k(x_k/N)])
    c  = 1 + b {eta(x-e_k) + eta(x+2e_k)}
         + b3 {eta(x-2e_k) eta(x-e_k) + eta(x-e_k) eta(x+2e_k) + eta(x+2e_k) eta(x+3e_k)}.

Time is macroscopic: the N^2 speed-up lives in the rates. The process is of
gradient type and its density solves  d_t rho = div(A grad_W Phi(rho))  with
Phi(a) = a + b a^2 + b3 a^3.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elliptic import DiagonalField, assemble_operator
from .errors import ConvergenceError, GridMismatchError, NumericalError, StepSizeError
from .mesh import MeshFunction, TorusGrid, _div_form

log = logging.getLogger(__name__)

__all__ = [
    "OccupancyConfig",
    "RateModel",
    "DensityProfile",
    "Trajectory",
    "HydroSolution",
    "HydroReport",
    "conductance",
    "swap_rate",
    "sample_initial",
    "simulate",
    "empirical_pairing",
    "solve_hydrodynamic",
    "hydrodynamic_check",
]

TREE_CHECK_INTERVAL = 10_000
TREE_CHECK_RTOL = 1e-9


# -- state types --------------------------------------------------------------------

class OccupancyConfig:
    """A {0,1} configuration on the torus with its particle count."""

    __slots__ = ("grid", "eta", "particle_count")

    def __init__(self, grid: TorusGrid, eta):
        eta = np.asarray(eta)
        if eta.size != grid.size:
            raise ValueError(f"expected {grid.size} sites, got {eta.size}")
        if not np.all((eta == 0) | (eta == 1)):
            raise ValueError("occupation variables must be 0 or 1")
        self.grid = grid
        self.eta = eta.astype(np.uint8).reshape(grid.shape)
        self.particle_count = int(self.eta.sum())

    def __repr__(self):
        return f"OccupancyConfig(N={self.grid.N}, d={self.grid.d}, particles={self.particle_count})"


@dataclass(frozen=True, eq=False)
class DensityProfile:
    grid: TorusGrid
    rho: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(rho)) or rho.min() < -1e-12 or rho.max() > 1 + 1e-12:
            raise ValueError("density profile must take values in [0, 1]")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def from_function(cls, rho0: Callable, grid: TorusGrid) -> "DensityProfile":
        return cls(grid, np.asarray(rho0(grid.points()), dtype=float))

    def as_mesh(self) -> MeshFunction:
        return MeshFunction(self.grid, self.rho)


# -- rates --------------------------------------------------------------------------

def _min_exchange_factor(b: float, b3: float) -> float:
    """Smallest c over the neighbourhood occupations (eta(x-2), eta(x-1), eta(x+2), eta(x+3))."""
    best = math.inf
    for m2, m1, p2, p3 in itertools.product((0, 1), repeat=4):
        c = 1 + b * (m1 + p2) + b3 * (m2 * m1 + m1 * p2 + p2 * p3)
        best = min(best, c)
    return best


@dataclass(frozen=True, eq=False)
class RateModel:
    """Rates of the exclusion process built from a coefficient field on the grid.

    ``b3`` switches on the cubic correction to the exchange factor, giving
    Phi(a) = a + b a^2 + b3 a^3.
    """

    field: DiagonalField
    b: float = 0.0
    b3: float = 0.0
    xi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.b3 == 0.0 and not self.b > -0.5:
            raise ValueError(f"b must exceed -1/2, got {self.b}")
        if _min_exchange_factor(self.b, self.b3) <= 0:
            raise ValueError(f"exchange factor is not strictly positive for b={self.b}, b3={self.b3}")
        g = self.field.grid
        xi = np.stack([self.field.coeffs[k] / (g.N * g.cell_weight_field(k)) for k in range(g.d)])
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid

    @property
    def w(self):
        return self.field.grid.w

    def phi(self, rho):
        return rho + self.b * rho**2 + self.b3 * rho**3

    def phi_prime(self, rho):
        return 1 + 2 * self.b * rho + 3 * self.b3 * rho**2


def _check_bond(grid: TorusGrid, x, k: int) -> tuple[int, ...]:
    grid.check_axis(k)
    x = tuple(int(i) for i in np.atleast_1d(x))
    if len(x) != grid.d or any(not 0 <= i < grid.N for i in x):
        raise IndexError(f"site {x} is not on the torus with N={grid.N}, d={grid.d}")
    return x


def conductance(model: RateModel, x, k: int) -> float:
    """xi_{x, x+e_k}."""
    x = _check_bond(model.grid, x, k)
    return float(model.xi[k][x])


def _shift(x: tuple[int, ...], k: int, s: int, N: int) -> tuple[int, ...]:
    y = list(x)
    y[k] = (y[k] + s) % N
    return tuple(y)


def swap_rate(model: RateModel, eta, x, k: int) -> float:
    """N^2 xi_{x,x+e_k} c_{x,x+e_k}(eta); the swap itself may be a no-op."""
    g = model.grid
    x = _check_bond(g, x, k)
    e = np.asarray(eta.eta if isinstance(eta, OccupancyConfig) else eta).reshape(g.shape)
    at = lambda s: float(e[_shift(x, k, s, g.N)])  # noqa: E731
    c = 1 + model.b * (at(-1) + at(2))
    if model.b3:
        c += model.b3 * (at(-2) * at(-1) + at(-1) * at(2) + at(2) * at(3))
    return g.N**2 * float(model.xi[k][x]) * c


# -- initial states -----------------------------------------------------------------

def sample_initial(rho0, grid: TorusGrid, seed) -> OccupancyConfig:
    """Product Bernoulli configuration with P(eta(x) = 1) = rho0(x/N)."""
    if isinstance(rho0, DensityProfile):
        p = rho0.rho
    elif callable(rho0):
        p = np.broadcast_to(np.asarray(rho0(grid.points()), dtype=float), grid.shape)
    else:
        p = np.full(grid.shape, float(rho0))
    if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ValueError("initial profile must take values in [0, 1]")
    rng = np.random.default_rng(seed)
    return OccupancyConfig(grid, (rng.random(grid.shape) < p).astype(np.uint8))


# -- kinetic Monte Carlo ------------------------------------------------------------

@numba.njit(cache=True)
def _bond_rate(eta, nbr, base, k, site, b, b3):
    """Rate of the bond (site, site+e_k); zero when the swap would not change eta."""
    here = eta[site]
    there = eta[nbr[k, 4, site]]
    if here == there:
        return 0.0
    m1 = eta[nbr[k, 2, site]]
    p2 = eta[nbr[k, 5, site]]
    c = 1.0 + b * (m1 + p2)
    if b3 != 0.0:
        m2 = eta[nbr[k, 1, site]]
        p3 = eta[nbr[k, 6, site]]
        c += b3 * (m2 * m1 + m1 * p2 + p2 * p3)
    return base[k * eta.size + site] * c


@numba.njit(cache=True)
def _tree_set(tree, P, i, value):
    j = i + P
    tree[j] = value
    j //= 2
    while j >= 1:
        tree[j] = tree[2 * j] + tree[2 * j + 1]
        j //= 2


@numba.njit(cache=True)
def _tree_build(tree, P, rates):
    tree[:] = 0.0
    tree[P:P + rates.size] = rates
    for j in range(P - 1, 0, -1):
        tree[j] = tree[2 * j] + tree[2 * j + 1]


@numba.njit(cache=True)
def _tree_find(tree, P, target):
    j = 1
    while j < P:
        left = tree[2 * j]
        if target < left:
            j = 2 * j
        else:
            target -= left
            j = 2 * j + 1
    return j - P


@numba.njit(cache=True)
def _all_rates(eta, nbr, base, d, b, b3):
    n = eta.size
    out = np.empty(d * n)
    for k in range(d):
        for s in range(n):
            out[k * n + s] = _bond_rate(eta, nbr, base, k, s, b, b3)
    return out


@numba.njit(cache=True, nogil=True)
def _kmc(eta, nbr, base, d, b, b3, obs_times, seed, check_every, check_rtol):
    """Event-driven simulation; returns (snapshots, n_events, status).

    status 0 is success, 1 a rate-tree desynchronisation.
    """
    np.random.seed(seed)
    n = eta.size
    nb = d * n
    P = 1
    while P < nb:
        P *= 2
    tree = np.zeros(2 * P)
    _tree_build(tree, P, _all_rates(eta, nbr, base, d, b, b3))
    n_obs = obs_times.size
    snaps = np.empty((n_obs, n), dtype=np.uint8)
    t = 0.0
    obs = 0
    events = 0
    while obs < n_obs:
        total = tree[1]
        if total <= 0.0:
            dt = np.inf
        else:
            dt = np.random.exponential(1.0 / total)
        while obs < n_obs and obs_times[obs] < t + dt:
            snaps[obs, :] = eta
            obs += 1
        if obs == n_obs:
            break
        t += dt
        bond = _tree_find(tree, P, np.random.random() * total)
        if bond >= nb:  # round-off at the right edge of the last leaf
            bond = nb - 1
        k = bond // n
        s = bond - k * n
        s2 = nbr[k, 4, s]
        tmp = eta[s]
        eta[s] = eta[s2]
        eta[s2] = tmp
        events += 1
        # bonds of axis j depend on sites at offsets -2..3 from their base
        for j in range(d):
            for z in (s, s2):
                for o in range(6):  # base sites z-3 .. z+2
                    y = nbr[j, o, z]
                    _tree_set(tree, P, j * n + y, _bond_rate(eta, nbr, base, j, y, b, b3))
        if events % check_every == 0:
            fresh = _all_rates(eta, nbr, base, d, b, b3)
            exact = fresh.sum()
            if abs(exact - tree[1]) > check_rtol * max(exact, 1.0):
                return snaps, events, 1
            _tree_build(tree, P, fresh)
    return snaps, events, 0


def _neighbours(grid: TorusGrid) -> np.ndarray:
    """nbr[k, o, s] = flat index of s + (o - 3) e_k, offsets -3..3."""
    idx = np.arange(grid.size).reshape(grid.shape)
    out = np.empty((grid.d, 7, grid.size), dtype=np.int64)
    for k in range(grid.d):
        for o in range(7):
            out[k, o] = np.roll(idx, -(o - 3), axis=k).ravel()
    return out


@dataclass
class Trajectory:
    times: np.ndarray
    snapshots: list[OccupancyConfig]
    n_events: int

    @property
    def final(self) -> OccupancyConfig:
        return self.snapshots[-1]


def _seed32(seed) -> int:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def simulate(model: RateModel, eta0: OccupancyConfig, t_end: float, seed, observe=None) -> Trajectory:
    """Exact continuous-time simulation up to t_end.

    ``observe`` lists the macroscopic times at which the configuration is
    recorded; t_end is always recorded last.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if eta0.grid != model.grid:
        raise GridMismatchError("configuration and rate model live on different grids")
    g = model.grid
    times = sorted({float(t) for t in (observe or ()) if 0 <= t <= t_end} | {float(t_end)})
    base = (g.N**2 * model.xi).reshape(-1).astype(float)
    eta = eta0.eta.ravel().copy()
    snaps, n_events, status = _kmc(
        eta, _neighbours(g), base, g.d, float(model.b), float(model.b3),
        np.asarray(times), _seed32(seed), TREE_CHECK_INTERVAL, TREE_CHECK_RTOL,
    )
    if status:
        raise NumericalError("rate tree lost synchronisation with the configuration")
    return Trajectory(np.asarray(times), [OccupancyConfig(g, s) for s in snaps], int(n_events))


def empirical_pairing(eta: OccupancyConfig, H) -> float:
    """N^{-d} sum_x H(x/N) eta(x)."""
    g = eta.grid
    if isinstance(H, MeshFunction):
        if H.grid != g:
            raise GridMismatchError("test function and configuration live on different grids")
        h = H.values
    elif callable(H):
        h = np.broadcast_to(np.asarray(H(g.points()), dtype=float), g.shape)
    else:
        h = np.asarray(H, dtype=float).reshape(g.shape)
    return float(np.sum(h * eta.eta)) / g.size


# -- hydrodynamic equation ----------------------------------------------------------

@dataclass
class HydroSolution:
    times: np.ndarray
    profiles: list[DensityProfile]
    steps: int


def _phi_prime_range(b: float, b3: float, lo: float, hi: float) -> tuple[float, float]:
    """(min, max) of Phi'(a) = 1 + 2 b a + 3 b3 a^2 over [lo, hi]."""
    cands = [lo, hi]
    if b3 != 0.0:
        crit = -b / (3 * b3)
        if lo < crit < hi:
            cands.append(crit)
    vals = [1 + 2 * b * a + 3 * b3 * a * a for a in cands]
    return min(vals), max(vals)


def solve_hydrodynamic(
    A_hom: DiagonalField,
    rho0: DensityProfile,
    b: float,
    t_list,
    *,
    b3: float = 0.0,
    method: str = "explicit",
    cfl: float = 0.45,
    dt: float | None = None,
    max_steps: int = 10_000_000,
    newton_tol: float = 1e-12,
) -> HydroSolution:
    """Method-of-lines solution of rho' = sum_k D_k(a_k dW_k Phi(rho)) at the requested times.

    ``explicit`` is forward Euler with dt <= cfl / (max row sum * max Phi'),
    recomputed every step from the current range of rho. ``implicit`` is
    backward Euler with a damped Newton solve at fixed ``dt``.
    """
    g = A_hom.grid
    if rho0.grid != g:
        raise GridMismatchError("initial profile and field live on different grids")
    if b3 == 0.0 and not b > -0.5:
        raise ValueError(f"b must exceed -1/2, got {b}")
    if _phi_prime_range(b, b3, 0.0, 1.0)[0] <= 0:
        raise ValueError("Phi must be increasing on [0, 1]")
    times = np.atleast_1d(np.asarray(t_list, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("output times must be non-negative and sorted")
    phi = lambda r: r + b * r**2 + b3 * r**3  # noqa: E731
    rho = rho0.rho.copy()
    coeffs = A_hom.coeffs
    t = 0.0
    steps = 0
    out = []

    if method == "explicit":
        L = assemble_operator(A_hom, 0.0)
        rowsum = float(np.abs(L).sum(axis=1).max())
        for t_out in times:
            while t < t_out:
                h = cfl / (rowsum * _phi_prime_range(b, b3, float(rho.min()), float(rho.max()))[1])
                h = min(h, t_out - t)
                if h <= 1e-15 * max(1.0, t_out) and t_out - t > h:
                    raise StepSizeError(f"explicit step {h:.3e} underflowed at t={t:.6g}")
                rho = rho + h * _div_form(coeffs, phi(rho), g)
                t = t_out if t_out - t <= h else t + h
                steps += 1
                if steps > max_steps:
                    raise StepSizeError(
                        f"explicit scheme needs more than {max_steps} steps; use method='implicit'"
                    )
            out.append(DensityProfile(g, np.clip(rho, 0.0, 1.0)))
    elif method == "implicit":
        L = assemble_operator(A_hom, 0.0).tocsr()
        I = sp.identity(g.size, format="csr")
        h_max = dt if dt is not None else max(float(times[-1]), 1e-3) / 200
        x = rho.ravel()
        for t_out in times:
            while t < t_out:
                h = min(h_max, t_out - t)
                x = _backward_euler_step(L, I, x, h, b, b3, newton_tol)
                t = t_out if t_out - t <= h else t + h
                steps += 1
            out.append(DensityProfile(g, np.clip(x.reshape(g.shape), 0.0, 1.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return HydroSolution(times, out, steps)


def _backward_euler_step(L, I, x_old, h, b, b3, tol, max_iter=50):
    """Solve x + h L Phi(x) = x_old (L is the positive operator -div A grad_W)."""
    phi = lambda r: r + b * r**2 + b3 * r**3  # noqa: E731
    dphi = lambda r: 1 + 2 * b * r + 3 * b3 * r**2  # noqa: E731
    x = x_old.copy()
    res = x + h * (L @ phi(x)) - x_old
    scale = max(1.0, float(np.abs(x_old).max()))
    for _ in range(max_iter):
        rn = float(np.abs(res).max())
        if rn <= tol * scale:
            return x
        J = (I + h * L @ sp.diags(dphi(x))).tocsc()
        step = spla.spsolve(J, -res)
        lam = 1.0
        while lam > 1e-6:
            x_new = x + lam * step
            res_new = x_new + h * (L @ phi(x_new)) - x_old
            if float(np.abs(res_new).max()) < (1 - 1e-4 * lam) * rn:
                break
            lam *= 0.5
        x, res = x_new, res_new
    if float(np.abs(res).max()) <= 1e3 * tol * scale:
        return x
    raise ConvergenceError("damped Newton did not converge in the backward Euler step")


# -- particle vs PDE comparison --------------------------------------------------------

@dataclass
class HydroReport:
    times: np.ndarray
    names: list[str]
    mean: np.ndarray  # (n_times, n_tests)
    stderr: np.ndarray
    pde: np.ndarray
    profile_mean: np.ndarray  # (n_times,) + grid shape
    profile_stderr: np.ndarray
    pde_profiles: np.ndarray
    replicas: int
    events: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> np.ndarray:
        return np.abs(self.mean - self.pde)

    def within(self, abs_tol: float = 0.02, n_sigma: float = 3.0) -> np.ndarray:
        return self.gap <= np.maximum(abs_tol, n_sigma * self.stderr)

    def to_rows(self) -> list[tuple]:
        rows = []
        for i, t in enumerate(self.times):
            for j, name in enumerate(self.names):
                rows.append((float(t), name, float(self.mean[i, j]), float(self.stderr[i, j]),
                             float(self.pde[i, j]), float(self.gap[i, j])))
        return rows


def hydrodynamic_check(
    model: RateModel,
    rho0,
    t_list: Sequence[float],
    replicas: int,
    dictionary: Sequence[tuple[str, Callable]],
    seed,
    A_hom: DiagonalField | None = None,
    jobs: int = 1,
    **pde_kw,
) -> HydroReport:
    """Average <pi_t, H> over independent replicas and compare with the discrete PDE.

    Without ``A_hom`` the PDE uses the model's own field on the same grid,
    which is the right comparison for deterministic fields.
    """
    if replicas < 2:
        raise ValueError("need at least two replicas for error bars")
    g = model.grid
    times = np.asarray(sorted(float(t) for t in t_list))
    A_hom = A_hom if A_hom is not None else model.field
    profile0 = rho0 if isinstance(rho0, DensityProfile) else DensityProfile.from_function(rho0, g)
    sol = solve_hydrodynamic(A_hom, profile0, model.b, times, b3=model.b3, **pde_kw)
    pde_profiles = np.stack([p.rho for p in sol.profiles])

    names = [name for name, _ in dictionary]
    H = np.stack([np.broadcast_to(np.asarray(fn(g.points()), dtype=float), g.shape) for _, fn in dictionary])
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(replicas)

    def one(ss):
        init_ss, dyn_ss = ss.spawn(2)
        eta0 = sample_initial(profile0, g, np.random.default_rng(init_ss))
        traj = simulate(model, eta0, float(times[-1]), dyn_ss, observe=list(times))
        idx = [int(np.searchsorted(traj.times, t)) for t in times]
        snaps = np.stack([traj.snapshots[i].eta for i in idx]).astype(float)
        return snaps, traj.n_events

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(c) for c in children]
    snaps = np.stack([r[0] for r in results])  # (M, n_times) + shape
    axes = tuple(range(2, snaps.ndim))
    pair = np.stack([np.sum(snaps * h, axis=axes) / g.size for h in H], axis=-1)  # (M, n_times, n_tests)
    pde = np.stack([np.sum(pde_profiles * h, axis=tuple(range(1, pde_profiles.ndim))) / g.size for h in H], axis=-1)
    sq = math.sqrt(replicas)
    return HydroReport(
        times=times,
        names=names,
        mean=pair.mean(axis=0),
        stderr=pair.std(axis=0, ddof=1) / sq,
        pde=pde,
        profile_mean=snaps.mean(axis=0),
        profile_stderr=snaps.std(axis=0, ddof=1) / sq,
        pde_profiles=pde_profiles,
        replicas=replicas,
        events=int(sum(r[1] for r in results)),
    )
