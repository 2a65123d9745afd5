"""Weight functions W_k and the Stieltjes measures they induce on the torus.

A coordinate weight is a strictly increasing càdlàg function on [0, 1) made of a
piecewise-linear absolutely continuous part plus finitely many atoms, extended
to the real line by periodic increments::

    W(x + n) = W(x) + n * W(1)   with W(0-) = 0.

Atoms are the permeable membranes: an atom at p with mass m makes W jump by m
at p, and W(p) already includes the jump.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "WCoordinate",
    "WProduct",
    "identity_weight",
    "eval",
    "increment",
    "cell_weight",
    "singular_support",
]


@dataclass(frozen=True)
class WCoordinate:
    """One-dimensional weight: piecewise-linear density part plus atoms.

    ``breakpoints[i]`` starts the interval on which the slope is ``slopes[i]``;
    the last interval runs to 1. The first breakpoint must be 0.
    """

    breakpoints: tuple[float, ...] = (0.0,)
    slopes: tuple[float, ...] = (1.0,)
    atoms: tuple[tuple[float, float], ...] = ()
    total_increment: float = field(init=False)
    _cum_density: np.ndarray = field(init=False, repr=False, compare=False)
    _atom_pos: np.ndarray = field(init=False, repr=False, compare=False)
    _atom_cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        sl = tuple(float(s) for s in self.slopes)
        at = tuple((float(p), float(m)) for p, m in self.atoms)
        if len(bp) == 0 or len(bp) != len(sl):
            raise ValueError("need one slope per breakpoint")
        if bp[0] != 0.0:
            raise ValueError(f"first breakpoint must be 0, got {bp[0]}")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])) or bp[-1] >= 1.0:
            raise ValueError("breakpoints must be strictly increasing in [0, 1)")
        if any(not (s > 0.0 and math.isfinite(s)) for s in sl):
            raise ValueError("slopes must be finite and strictly positive")
        pos = [p for p, _ in at]
        if any(not (0.0 <= p < 1.0) for p in pos):
            raise ValueError("atom positions must lie in [0, 1)")
        if any(p1 <= p0 for p0, p1 in zip(pos, pos[1:])):
            raise ValueError("atom positions must be strictly increasing")
        if any(not (m > 0.0 and math.isfinite(m)) for _, m in at):
            raise ValueError("atom masses must be finite and strictly positive")

        ends = bp[1:] + (1.0,)
        pieces = np.array([s * (e - b) for b, e, s in zip(bp, ends, sl)])
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        masses = np.array([m for _, m in at], dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        object.__setattr__(self, "atoms", at)
        object.__setattr__(self, "_cum_density", cum)
        object.__setattr__(self, "_atom_pos", np.array(pos, dtype=float))
        object.__setattr__(self, "_atom_cum", np.concatenate([[0.0], np.cumsum(masses)]))
        object.__setattr__(self, "total_increment", float(cum[-1] + masses.sum()))

    # -- construction ------------------------------------------------------
    @classmethod
    def from_dict(cls, desc: dict) -> "WCoordinate":
        """Parse ``{"slopes": [[x0, s0], ...], "atoms": [[p, m], ...]}``."""
        slopes = desc.get("slopes", [[0.0, 1.0]])
        atoms = desc.get("atoms", [])
        return cls(
            breakpoints=tuple(s[0] for s in slopes),
            slopes=tuple(s[1] for s in slopes),
            atoms=tuple((a[0], a[1]) for a in atoms),
        )

    def to_dict(self) -> dict:
        return {
            "slopes": [[b, s] for b, s in zip(self.breakpoints, self.slopes)],
            "atoms": [[p, m] for p, m in self.atoms],
        }

    @property
    def is_affine(self) -> bool:
        return not self.atoms and len(self.slopes) == 1

    # -- evaluation --------------------------------------------------------
    def density(self, x):
        """Slope of the absolutely continuous part at x (right-continuous)."""
        x = np.asarray(x, dtype=float)
        frac = x - np.floor(x)
        idx = np.searchsorted(self.breakpoints, frac, side="right") - 1
        return np.asarray(self.slopes)[idx]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        whole = np.floor(x)
        frac = x - whole
        bp = np.asarray(self.breakpoints)
        idx = np.searchsorted(bp, frac, side="right") - 1
        dens = self._cum_density[idx] + np.asarray(self.slopes)[idx] * (frac - bp[idx])
        n_atoms = np.searchsorted(self._atom_pos, frac, side="right")
        out = dens + self._atom_cum[n_atoms] + whole * self.total_increment
        return out if out.ndim else float(out)

    def increment(self, a, b):
        """Stieltjes measure of the half-open interval (a, b]."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.any(a >= b):
            raise ValueError("increment needs a < b")
        out = self(b) - self(a)
        return out

    def cell_weights(self, N: int) -> np.ndarray:
        """W((i+1)/N) - W(i/N) for i = 0..N-1."""
        nodes = self(np.arange(N + 1) / N)
        return np.diff(nodes)

    def cell_weight(self, index: int, N: int) -> float:
        if not 0 <= index < N:
            raise IndexError(f"cell index {index} out of range for N={N}")
        return float(self((index + 1) / N) - self(index / N))

    def singular_support(self) -> tuple[float, ...]:
        return tuple(p for p, _ in self.atoms)

    def atoms_in(self, a: float, b: float, closed_left: bool = False):
        """Atoms with position in (a, b], or [a, b] when ``closed_left``; a, b in [0, 1]."""
        out = []
        for p, m in self.atoms:
            if (a <= p if closed_left else a < p) and p <= b:
                out.append((p, m))
        return out

    def breakpoints_in(self, a: float, b: float) -> list[float]:
        """Slope breakpoints and atom positions strictly inside (a, b), within [0, 1]."""
        pts = [x for x in self.breakpoints if a < x < b]
        pts += [p for p, _ in self.atoms if a < p < b]
        return sorted(set(pts))


def identity_weight() -> WCoordinate:
    return WCoordinate()


@dataclass(frozen=True)
class WProduct:
    """W(x) = sum_k W_k(x_k), one coordinate weight per axis."""

    coords: tuple[WCoordinate, ...]

    def __post_init__(self):
        coords = tuple(self.coords)
        if len(coords) < 1:
            raise ValueError("dimension must be at least 1")
        if not all(isinstance(c, WCoordinate) for c in coords):
            raise TypeError("coords must be WCoordinate instances")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def identity(cls, d: int) -> "WProduct":
        return cls(tuple(WCoordinate() for _ in range(d)))

    @classmethod
    def from_json(cls, spec: Sequence[dict] | str) -> "WProduct":
        if isinstance(spec, str):
            spec = json.loads(spec)
        return cls(tuple(WCoordinate.from_dict(s) for s in spec))

    def to_json(self) -> list[dict]:
        return [c.to_dict() for c in self.coords]

    @property
    def d(self) -> int:
        return len(self.coords)

    def __getitem__(self, k: int) -> WCoordinate:
        return self.coords[k]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return sum(c(x[..., k]) for k, c in enumerate(self.coords))


# Functional aliases mirroring the operation names.
def eval(w: WCoordinate, x):  # noqa: A001 - mirrors the operation name
    return w(x)


def increment(w: WCoordinate, a, b):
    return w.increment(a, b)


def cell_weight(w: WCoordinate, x_index: int, N: int) -> float:
    return w.cell_weight(x_index, N)


def singular_support(w: WCoordinate) -> tuple[float, ...]:
    return w.singular_support()
