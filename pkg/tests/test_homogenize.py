import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsobolev.elliptic import DiagonalField, bilinear_form, solve_resolvent
from wsobolev.errors import EllipticityError, GridMismatchError
from wsobolev.homogenize import (
    CoefficientSequenceSpec,
    Law,
    RandomEnvironmentSpec,
    averaged_flux,
    build_field,
    energy_pair,
    fit_fourier_coefficient,
    fourier_reference,
    homogenized_field,
    predicted_homogenized_matrix,
    random_homogenization_study,
    run_h_convergence_study,
    slab_mask,
    trigonometric_reference,
    weak_pairings,
)
from wsobolev.interp import ContinuousFunctional, discretize_functional, test_dictionary
from wsobolev.mesh import MeshFunction, TorusGrid, inner_l2
from wsobolev.weights import WProduct

from conftest import COORDS, IDENTITY, ONE_ATOM, product

W1 = WProduct((IDENTITY,))
COS = ContinuousFunctional(lambda p: np.cos(2 * np.pi * p[..., 0]))
UNIFORM = Law("uniform", low=0.5, high=2.0)
RANDOM = CoefficientSequenceSpec.random(RandomEnvironmentSpec((UNIFORM,)), theta=2.0)


def test_law_moments():
    assert UNIFORM.mean() == pytest.approx(1.25)
    assert UNIFORM.mean_inverse() == pytest.approx(2 * math.log(4) / 3)
    law = Law("discrete", values=(1.0, 3.0), probs=(0.25, 0.75))
    assert law.mean() == pytest.approx(2.5)
    assert law.mean_inverse() == pytest.approx(0.25 + 0.25)
    for bad in (dict(kind="uniform", low=2, high=1), dict(kind="discrete", values=(1.0,), probs=(0.5,)),
                dict(kind="discrete", values=(-1.0,), probs=(1.0,)), dict(kind="beta")):
        with pytest.raises(ValueError):
            Law(**bad)


def test_spec_validation():
    with pytest.raises(EllipticityError):
        CoefficientSequenceSpec.random(RandomEnvironmentSpec((UNIFORM,)), theta=1.5)
    with pytest.raises(EllipticityError):
        CoefficientSequenceSpec.periodic([[1.0, 5.0]], theta=2.0)
    with pytest.raises(ValueError):
        CoefficientSequenceSpec("banded", 2.0)
    with pytest.raises(ValueError):
        build_field(RANDOM, TorusGrid.identity(2, 4), 0)
    with pytest.raises(ValueError):
        build_field(RANDOM, TorusGrid.identity(1, 4))  # no seed


# -- fields ------------------------------------------------------------------------------

def test_build_field_examples():
    for N in (2, 8, 32):
        A = build_field(CoefficientSequenceSpec.constant(2.5, 2), TorusGrid.identity(2, N))
        np.testing.assert_array_equal(A.coeffs, 2.5)
    A = build_field(CoefficientSequenceSpec.periodic([[1.0, 2.0]]), TorusGrid.identity(1, 4))
    np.testing.assert_array_equal(A.coeffs[0], [1, 2, 1, 2])


def test_random_field_slab_override():
    g = TorusGrid(1, 4, WProduct((ONE_ATOM,)))
    a = build_field(RANDOM, g, 7).coeffs[0]
    # the atom at 1/2 is a grid line: both cells whose closure contains it are overridden
    np.testing.assert_array_equal(a[[1, 2]], 1.25)
    assert np.all((a[[0, 3]] >= 0.5) & (a[[0, 3]] <= 2.0))
    assert np.all(a[[0, 3]] != 1.25)
    g = TorusGrid(1, 5, WProduct((ONE_ATOM,)))
    np.testing.assert_array_equal(slab_mask(g, 0), [False, False, True, False, False])


def test_random_field_two_dimensional_slabs():
    w = WProduct((ONE_ATOM, IDENTITY))
    spec = CoefficientSequenceSpec.random(RandomEnvironmentSpec((UNIFORM, UNIFORM)), theta=2.0)
    A = build_field(spec, TorusGrid(2, 8, w), 3)
    np.testing.assert_array_equal(A.coeffs[0][[3, 4], :], 1.25)
    assert np.all(A.coeffs[0][[0, 1, 2, 5, 6, 7], :] != 1.25)
    assert np.all(A.coeffs[1] != 1.25)  # W_2 has no atoms


def test_discretized_fixed_field():
    spec = CoefficientSequenceSpec.fixed([lambda p: 1.5 + 0.5 * np.cos(2 * np.pi * p[..., 0])], theta=2.0)
    A = build_field(spec, TorusGrid.identity(1, 4))
    x = np.arange(4) / 4
    exact = 1.5 + 0.5 * 4 * (np.sin(2 * np.pi * (x + 0.25)) - np.sin(2 * np.pi * x)) / (2 * np.pi)
    np.testing.assert_allclose(A.coeffs[0], exact, atol=1e-12)


def test_markov_environment():
    law = Law("discrete", values=(0.5, 2.0), probs=(0.5, 0.5))
    P = np.array([[0.9, 0.1], [0.3, 0.7]])
    env = RandomEnvironmentSpec((law,), model="markov", transition=(P,))
    np.testing.assert_allclose(env.stationary(0), [0.75, 0.25])
    assert env.mean_b(0) == pytest.approx(0.875)
    assert env.mean_inverse_b(0) == pytest.approx(0.75 * 2 + 0.25 * 0.5)
    b = env.sample(0, (20000,), np.random.default_rng(1))
    assert np.mean(b == 0.5) == pytest.approx(0.75, abs=0.03)
    # persistence along the chain: P(stay at 0.5) = 0.9
    stay = np.mean(b[1:][b[:-1] == 0.5] == 0.5)
    assert stay == pytest.approx(0.9, abs=0.02)
    with pytest.raises(ValueError):
        RandomEnvironmentSpec((UNIFORM,), model="markov", transition=(P,))


# -- predicted limits ------------------------------------------------------------------

def test_predicted_examples():
    pts = np.array([[0.1], [0.5], [0.9]])
    H = predicted_homogenized_matrix(CoefficientSequenceSpec.periodic([[1.0, 2.0]]), W1)
    np.testing.assert_allclose(H(0, pts), 4 / 3)
    H = predicted_homogenized_matrix(CoefficientSequenceSpec.constant(3.0), W1)
    np.testing.assert_allclose(H(0, pts), 3.0)
    H = predicted_homogenized_matrix(RANDOM, WProduct((ONE_ATOM,)))
    np.testing.assert_allclose(H(0, pts), [1.5 / math.log(4), 1.25, 1.5 / math.log(4)])
    assert 1.5 / math.log(4) == pytest.approx(1.08202, abs=1e-5)


def test_homogenized_field_on_grid():
    g = TorusGrid(1, 8, WProduct((ONE_ATOM,)))
    A = homogenized_field(RANDOM, g)
    np.testing.assert_allclose(A.coeffs[0][[3, 4]], 1.25)
    np.testing.assert_allclose(A.coeffs[0][[0, 1, 2, 5, 6, 7]], 1.5 / math.log(4))
    A = homogenized_field(RANDOM, g, off_slab=[1.7])
    np.testing.assert_allclose(A.coeffs[0][0], 1.7)


# -- energies ------------------------------------------------------------------------

def test_energy_pair_examples(rng):
    g = TorusGrid.identity(1, 2)
    A = DiagonalField.constant(g, 1.0)
    assert energy_pair(A, MeshFunction(g, [0, 1]), 1.0) == pytest.approx((0.5, 4.0))
    mass, energy = energy_pair(A, g.constant(3.0), 2.0)
    assert (mass, energy) == pytest.approx((18.0, 0.0))
    with pytest.raises(GridMismatchError):
        energy_pair(A, TorusGrid.identity(1, 4).zeros(), 1.0)


@given(st.sampled_from(list(COORDS)), st.sampled_from([(1, 8), (2, 4), (3, 2)]), st.integers(0, 2**32 - 1),
       st.floats(0.1, 3.0))
def test_energy_pair_is_split_bilinear_form(name, dN, seed, lam):
    d, N = dN
    rng = np.random.default_rng(seed)
    g = TorusGrid(d, N, product(COORDS[name], d))
    A = DiagonalField(g, rng.uniform(0.5, 2, size=(d,) + g.shape), 2.0)
    u = MeshFunction(g, rng.normal(size=g.shape))
    mass, energy = energy_pair(A, u, lam)
    assert mass == pytest.approx(lam * inner_l2(u, u), rel=1e-12)
    assert mass + energy == pytest.approx(bilinear_form(A, lam, u, u), rel=1e-10)


def test_analytic_reference_energies():
    ref = fourier_reference(1.0, 2.0)
    c = 1 / (1 + 8 * math.pi**2)
    mass, energy = ref.energies(W1, 1.0)
    assert mass == pytest.approx(c**2 / 2, rel=1e-10)
    assert energy == pytest.approx(2.0 * (2 * math.pi * c) ** 2 / 2, rel=1e-10)


def test_trigonometric_reference_solves_pde():
    ref = trigonometric_reference(0.5, [1.0, 2.0], [(1.0, [1, 2], "sin"), (0.3, [0, 1], "cos")], constant=1.0)
    p = np.random.default_rng(0).uniform(size=(20, 2))
    h = 1e-4

    def lap(k):
        e = np.zeros(2)
        e[k] = h
        return (ref.u0(p + e) - 2 * ref.u0(p) + ref.u0(p - e)) / h**2

    lhs = 0.5 * ref.u0(p) - lap(0) - 2.0 * lap(1)
    rhs = 1.0 + np.sin(2 * np.pi * (p[:, 0] + 2 * p[:, 1])) + 0.3 * np.cos(2 * np.pi * p[:, 1])
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)
    with pytest.raises(ValueError):
        trigonometric_reference(1.0, [1.0], [(1.0, [1], "tan")])


# -- studies -----------------------------------------------------------------------------

LADDER = [8, 16, 32, 64, 128, 256, 512]


def slope(N, err):
    return np.polyfit(np.log(N), np.log(err), 1)[0]


def test_constant_study_decays_like_one_over_N():
    res = run_h_convergence_study(CoefficientSequenceSpec.constant(1.0), W1, COS, 1.0, LADDER, fourier_reference(1.0, 1.0))
    err = res.column("l2_error")
    assert np.all(np.diff(err) < 0)
    assert slope(LADDER, err) <= -0.9
    mass = res.column("l2_mass")
    assert abs(mass[-1] - res.reference_mass) <= 0.05 * res.reference_mass
    norms = res.column("sobolev_norm")
    assert norms.max() / norms.min() <= 3


def test_periodic_study_converges_to_harmonic_mean():
    spec = CoefficientSequenceSpec.periodic([[1.0, 2.0]])
    res = run_h_convergence_study(spec, W1, COS, 1.0, LADDER, fourier_reference(1.0, 4 / 3))
    err = res.column("l2_error")
    assert err[-1] < 2e-2
    assert abs(res.column("l2_mass")[-1] - res.reference_mass) <= 0.05 * res.reference_mass
    assert abs(res.column("w_energy")[-1] - res.reference_energy) <= 0.05 * res.reference_energy
    assert res.column("sobolev_norm").max() / res.column("sobolev_norm").min() <= 3
    # fine-grid reference agrees with the analytic one
    fine = run_h_convergence_study(spec, W1, COS, 1.0, [64, 128], "fine")
    np.testing.assert_allclose(fine.column("l2_error"), res.column("l2_error")[3:5], atol=5e-3)
    assert [r for r in res.to_rows() if r[0] == 8][0][1] == "sobolev_norm"


def test_study_validation():
    spec = CoefficientSequenceSpec.constant(1.0)
    with pytest.raises(ValueError):
        run_h_convergence_study(spec, W1, COS, 1.0, [16, 8])
    with pytest.raises(ValueError):
        run_h_convergence_study(spec, W1, COS, 0.0, [8, 16])
    with pytest.raises(ValueError):
        run_h_convergence_study(RANDOM, W1, COS, 1.0, [8, 16])


def test_study_parallel_matches_serial():
    spec = CoefficientSequenceSpec.random(RandomEnvironmentSpec((UNIFORM,)), 2.0)
    a = run_h_convergence_study(spec, WProduct((ONE_ATOM,)), COS, 1.0, [8, 16, 32], seed=5)
    b = run_h_convergence_study(spec, WProduct((ONE_ATOM,)), COS, 1.0, [8, 16, 32], seed=5, jobs=3)
    assert a.records == b.records


@pytest.mark.parametrize("pattern", [(1.0, 2.0), (0.5, 1.0, 4.0, 2.0), (1.0, 3.0, 2.0)])
def test_harmonic_mean_law(pattern):
    N = 128 * len(pattern)
    g = TorusGrid.identity(1, N)
    A = build_field(CoefficientSequenceSpec.periodic([pattern]), g)
    f = discretize_functional(COS, g).to_mesh()
    a_eff = fit_fourier_coefficient(solve_resolvent(A, 1.0, f), f, 1.0)
    harmonic = 1.0 / np.mean(1.0 / np.asarray(pattern))
    assert a_eff == pytest.approx(harmonic, rel=0.02)


def test_flux_converges_in_averaged_sense():
    spec = CoefficientSequenceSpec.periodic([[1.0, 2.0]])
    ref = fourier_reference(1.0, 4 / 3)
    n_coarse = 8
    edges = np.arange(n_coarse + 1) / n_coarse
    # coarse averages of a_hom u0' are a_hom (u0(b) - u0(a)) / (b - a)
    target = 4 / 3 * np.diff(ref.u0(edges[:, None])) * n_coarse
    gaps = []
    for N in (64, 256, 1024):
        g = TorusGrid.identity(1, N)
        A = build_field(spec, g)
        u = solve_resolvent(A, 1.0, discretize_functional(COS, g).to_mesh())
        gaps.append(np.abs(averaged_flux(A, u, 0, n_coarse) - target).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[-1] < 0.02 * np.abs(target).max()


def test_weak_pairings_of_constant():
    w = WProduct((COORDS["two_atoms"],))
    g = TorusGrid(1, 16, w)
    vals = weak_pairings(np.full(16, 2.0), g, 0, test_dictionary(w))
    assert vals[0] == pytest.approx(2.0 * COORDS["two_atoms"].total_increment)
    assert len(vals) == 1 + 2 * 4 + 2


def test_random_seeds_agree():
    w = WProduct((ONE_ATOM,))
    study = random_homogenization_study(RANDOM, w, COS, 1.0, 64, seeds=range(6))
    assert study.predicted == pytest.approx(1.5 / math.log(4))
    assert abs(study.fitted[0] - study.fitted[1]) <= 3 * math.sqrt(2) * study.std
    assert abs(study.mean - study.predicted) <= 3 * study.stderr
