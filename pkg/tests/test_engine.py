import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from balayage.engine import (
    McParams,
    PathPolicy,
    StopSet,
    balayage_measure,
    balayage_point,
    hit_probability,
    mass_vector,
    reduced_measure_closed,
    shell_bias_budget,
    walker_seeds,
)
from balayage.errors import ParameterError
from balayage.geometry import Ball, BallUnion, DomainSpec, GridSpec, OpenRegion, grid_balls
from balayage.kernels import KernelSpec, ball_hit_probability
from balayage.measures import FREE, OUTER, Dictionary, PotentialSpec, WeightedMeasure, integrate_all, weak_distance

K3 = KernelSpec(3)
R2 = KernelSpec(2, 1.0)
FULL3 = DomainSpec.full(3)


def one_ball(center=(0.0, 0, 0), r=1.0, dim=3):
    return BallUnion(np.array([center[:dim]], float), [r])


def test_mc_params_validation():
    with pytest.raises(ParameterError):
        McParams(samples=0)
    with pytest.raises(ParameterError):
        McParams(shell_ratio=0.05)


def test_point_inside_stop_ball_is_kept():
    mu = balayage_point([0.2, 0, 0], StopSet(one_ball(), None, FULL3), K3, McParams(samples=100))
    assert len(mu) == 1 and mu.weights[0] == 1.0 and mu.lost_mass == 0.0
    assert np.array_equal(mu.points[0], [0.2, 0, 0]) and mu.labels[0] == 0


@pytest.mark.parametrize("R", [2.0, 4.0])
def test_classical_single_ball_mass(R):
    p, se = hit_probability([R, 0, 0], one_ball(), FULL3, K3, McParams(samples=50_000, seed=3))
    assert abs(p - 1.0 / R) <= max(2e-3, 4 * se)


def test_shell_halving_within_bias_budget():
    S = StopSet(one_ball(), None, FULL3)
    a = McParams(samples=40_000, seed=5, eps_shell=1e-3, shell_ratio=1e-3)
    b = McParams(samples=40_000, seed=5, eps_shell=5e-4, shell_ratio=5e-4)
    pa, sa = hit_probability([2.0, 0, 0], S.all_balls, FULL3, K3, a)
    pb, sb = hit_probability([2.0, 0, 0], S.all_balls, FULL3, K3, b)
    assert abs(pa - pb) <= shell_bias_budget(S, a) + 3 * np.hypot(sa, sb)


@pytest.mark.parametrize("k", [KernelSpec(3, 1.5), KernelSpec(2, 1.0), KernelSpec(3, 1.0)])
def test_riesz_single_ball_mass_matches_beta_law(k):
    d = k.dim
    x = np.zeros(d)
    x[0] = 3.0
    p, se = hit_probability(x, one_ball(dim=d), DomainSpec.full(d), k, McParams(samples=40_000, seed=9))
    exact = float(ball_hit_probability(k, 1.0, 3.0))
    assert abs(p - exact) <= 4 * se + 1e-3


def test_riesz_landing_is_exact_absorption():
    k = KernelSpec(2, 1.0)
    mu = balayage_point([3.0, 0], StopSet(one_ball(dim=2), None, DomainSpec.full(2)), k, McParams(samples=5000))
    assert np.all(np.linalg.norm(mu.points, axis=1) <= 1.0)


def test_classical_atoms_on_sphere():
    mu = balayage_point([2.5, 0, 0], StopSet(one_ball(), None, FULL3), K3, McParams(samples=5000))
    assert np.allclose(np.linalg.norm(mu.points, axis=1), 1.0, atol=1e-12)


def test_measure_inside_stop_set_is_identity():
    nu = WeightedMeasure.from_atoms([[0.1, 0, 0], [5.0, 0.2, 0]], [0.3, 0.7])
    A = BallUnion([[0.0, 0, 0], [5.0, 0, 0]], [0.5, 0.5])
    mu = balayage_measure(nu, StopSet(A, None, FULL3), K3, McParams(samples=100))
    assert np.allclose(mu.points, nu.points) and np.allclose(mu.weights, nu.weights)
    assert list(mu.labels) == [0, 1]


def test_conservation_and_mass_bound():
    nu = WeightedMeasure.from_atoms([[2.0, 0, 0], [0, 3.0, 0]], [0.4, 0.6])
    mu = balayage_measure(nu, StopSet(one_ball(), None, FULL3), K3, McParams(samples=4000))
    assert abs(mu.mass + mu.lost_mass - 1.0) <= 1e-12
    assert mu.mass <= nu.mass


def test_linearity_with_common_seeds():
    S = StopSet(BallUnion([[0.0, 0, 0], [3.0, 0, 0]], [1.0, 0.5]), None, FULL3)
    D = Dictionary([PotentialSpec("constant"), PotentialSpec("newton", (0.0, 4, 0))])
    mc = McParams(samples=20_000, seed=1)
    a = WeightedMeasure.dirac([1.5, 1.5, 0], 0.5)
    b = WeightedMeasure.dirac([-2.0, 0, 0], 1.0)
    both = WeightedMeasure.from_atoms([[1.5, 1.5, 0], [-2.0, 0, 0]], [0.5, 1.0])
    v_ab, s_ab = integrate_all(balayage_measure(both, S, K3, mc), D, K3)
    v_a, s_a = integrate_all(balayage_measure(a, S, K3, mc), D, K3)
    v_b, s_b = integrate_all(balayage_measure(b, S, K3, mc), D, K3)
    assert np.all(np.abs(v_ab - v_a - v_b) <= 3 * np.sqrt(s_ab ** 2 + s_a ** 2 + s_b ** 2))


def test_mass_vector_properties():
    A = BallUnion([[2.0, 0, 0], [-2.0, 0, 0]], [0.5, 0.5])
    S = StopSet(A, None, FULL3)
    masses, se, mu = mass_vector(WeightedMeasure.dirac([0.0, 0, 0]), S, None, K3, McParams(samples=40_000))
    assert abs(masses[0] - masses[1]) <= 3 * np.hypot(se[0], se[1])
    assert masses.sum() == pytest.approx(mu.mass, abs=1e-12)
    single, _, mu1 = mass_vector(WeightedMeasure.dirac([0.0, 3, 0]), StopSet(one_ball(), None, FULL3), None, K3,
                                 McParams(samples=1000))
    assert single[0] == pytest.approx(mu1.mass, abs=1e-12)


def test_determinism_and_worker_independence():
    S = StopSet(BallUnion([[0.0, 0, 0], [3.0, 0, 0]], [1.0, 0.5]), None, FULL3)
    nu = WeightedMeasure.dirac([1.5, 2.0, 0])
    a = balayage_measure(nu, S, K3, McParams(samples=6000, seed=4, chunk=1000, workers=1))
    b = balayage_measure(nu, S, K3, McParams(samples=6000, seed=4, chunk=1000, workers=2))
    assert np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)
    c = balayage_measure(nu, S, K3, McParams(samples=6000, seed=5, chunk=1000))
    assert not np.array_equal(a.points, c.points)


def test_walker_seeds_are_prefix_stable():
    s1 = walker_seeds(7, (1, 2), 0, 10)
    s2 = walker_seeds(7, (1, 2), 0, 20)
    assert np.array_equal(s1, s2[:10])
    assert not np.array_equal(s1, walker_seeds(7, (1, 3), 0, 10))


def test_outer_stop_labels():
    W = OpenRegion.ball((0.0, 0, 0), 2.0)
    mu = balayage_point([0.5, 0, 0], StopSet(BallUnion([[1.0, 0, 0]], [0.2]), W, FULL3), K3, McParams(samples=4000))
    assert set(np.unique(mu.labels)) <= {0, OUTER}
    out = mu.labels == OUTER
    assert np.allclose(np.linalg.norm(mu.points[out], axis=1), 2.0, atol=1e-12)
    # everything stops: W is bounded
    assert mu.mass == pytest.approx(1.0)


def test_killing_at_domain_boundary_d2():
    X = DomainSpec.open_ball((0.0, 0), 5.0)
    mu = balayage_point([2.0, 0], StopSet(BallUnion([[0.0, 0]], [1.0]), None, X), KernelSpec(2), McParams(samples=20_000))
    # harmonic measure of the inner circle in the annulus 1 < r < 5 seen from r = 2
    exact = np.log(5 / 2) / np.log(5)
    p, se = mu.estimate(np.ones(len(mu)))
    assert abs(p - exact) <= 4 * se + 2e-3
    assert mu.lost_mass == pytest.approx(1 - mu.mass, abs=1e-12)


def test_reduced_measure_closed():
    A = one_ball()
    X = FULL3
    mc = McParams(samples=5000, seed=2)
    inside = WeightedMeasure.from_atoms([[0.2, 0, 0], [0, 0.5, 0]], [0.5, 0.5])
    red = reduced_measure_closed(inside, A, X, K3, mc)
    assert np.allclose(red.points, inside.points) and np.allclose(red.weights, inside.weights)
    outside = WeightedMeasure.dirac([2.0, 0, 0])
    r1 = reduced_measure_closed(outside, A, X, K3, mc)
    r2 = balayage_measure(outside, StopSet(A, None, X), K3, mc)
    assert np.array_equal(r1.points, r2.points)
    mixed = WeightedMeasure.from_atoms([[0.2, 0, 0], [2.0, 0, 0]], [0.5, 0.5])
    D = Dictionary([PotentialSpec("newton", (0.0, 3, 0))])
    v, s = integrate_all(reduced_measure_closed(mixed, A, X, K3, mc), D, K3)
    v_in, _ = integrate_all(WeightedMeasure.dirac([0.2, 0, 0], 0.5), D, K3)
    v_out, s_out = integrate_all(balayage_measure(WeightedMeasure.dirac([2.0, 0, 0], 0.5), StopSet(A, None, X), K3, mc),
                                 D, K3)
    assert abs(v[0] - v_in[0] - v_out[0]) <= 3 * np.hypot(s[0], s_out[0]) + 1e-12


def test_superharmonic_integrals_do_not_increase():
    D = Dictionary([PotentialSpec("constant"), PotentialSpec("newton", (0.0, 0, 0)),
                    PotentialSpec("newton", (4.0, 0, 0)), PotentialSpec("newton", (2.0, 0.1, 0), cap=3.0)])
    x = np.array([2.0, 0, 0])
    mu = balayage_point(x, StopSet(one_ball(), None, FULL3), K3, McParams(samples=20_000))
    v, s = integrate_all(mu, D, K3)
    v0, _ = integrate_all(WeightedMeasure.dirac(x), D, K3)
    assert np.all(v <= v0 + 3 * s + 1e-12)


def test_hit_probability_grid_grows_with_resolution():
    x = np.array([0.0, 0, 0])
    X = FULL3
    mc = McParams(samples=4000, seed=8)
    probs = []
    for m in (2, 4, 8):
        A = grid_balls(GridSpec((0.5, 0.5, 0.5), 0.3, m), OpenRegion.ball(x, 1.0).minus([Ball(x, 0.05)]))
        probs.append(hit_probability(x, A, X, K3, mc)[0])
    assert probs[0] < probs[1] < probs[2]


def test_independent_runs_agree():
    S = StopSet(BallUnion([[0.0, 0, 0], [3.0, 0, 0]], [1.0, 0.5]), None, FULL3)
    D = Dictionary([PotentialSpec("constant"), PotentialSpec("newton", (1.5, 1, 0))])
    nu = WeightedMeasure.dirac([1.5, 2.0, 0])
    a = balayage_measure(nu, S, K3, McParams(samples=20_000, seed=1))
    b = balayage_measure(nu, S, K3, McParams(samples=20_000, seed=2))
    wd = weak_distance(a, b, D, K3)
    assert np.all(np.abs(wd.diffs) <= 3.5 * wd.stderr)


def test_path_policy_estimator_close_to_chain():
    S = StopSet(one_ball(), None, FULL3)
    p_chain, s1 = hit_probability([2.0, 0, 0], S.all_balls, FULL3, K3, McParams(samples=20_000, seed=1))
    mu = balayage_measure(WeightedMeasure.dirac([2.0, 0, 0]), S, K3, McParams(samples=20_000, seed=2), (0,),
                          policy=PathPolicy(sigma=2e-3, near=2e-2))
    p_path, s2 = mu.estimate(np.ones(len(mu)))
    assert abs(p_chain - p_path) <= 3 * np.hypot(s1, s2) + 1e-3


@settings(max_examples=10)
@given(st.floats(1.5, 6.0), st.integers(0, 2 ** 31))
def test_hit_mass_below_one_and_conserved(R, seed):
    mu = balayage_point([R, 0, 0], StopSet(one_ball(), None, FULL3), K3, McParams(samples=500, seed=seed))
    assert 0 <= mu.mass <= 1
    assert abs(mu.mass + mu.lost_mass - 1) <= 1e-12
