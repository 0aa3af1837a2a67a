import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from balayage.errors import ParameterError
from balayage.geometry import Ball
from balayage.kernels import (
    KernelSpec,
    ball_hit_probability,
    classical_poisson_density,
    delta_zero,
    harnack_bound,
    riesz_constant,
    riesz_poisson_density,
    sample_exit_classical,
    sample_exit_riesz,
)


def closed_form_riesz_constant(d, a):
    """Literature value Gamma(d/2) sin(pi a/2) / pi^(d/2+1) (independent of the quadrature)."""
    return math.gamma(d / 2) * math.sin(math.pi * a / 2) / math.pi ** (d / 2 + 1)


def test_kernel_spec_rules():
    KernelSpec(3)
    KernelSpec(1, 0.5)
    for d, a in [(1, 2.0), (1, 1.0), (2, 0.0), (3, 2.5)]:
        with pytest.raises(ParameterError):
            KernelSpec(d, a)


def test_classical_density_center_is_one():
    b = Ball(np.zeros(3), 2.0)
    z = np.array([[2.0, 0, 0], [0, -2.0, 0], [0, 0, 2.0]])
    assert classical_poisson_density(b, np.zeros(3), z) == pytest.approx(np.ones(3))


def test_classical_density_value():
    # (1 - 0.25) / 0.5^3
    v = classical_poisson_density(Ball(np.zeros(3), 1.0), [0.5, 0, 0], [[1.0, 0, 0]])
    assert v[0] == pytest.approx(6.0)


def test_classical_density_preconditions():
    b = Ball(np.zeros(3), 1.0)
    with pytest.raises(ParameterError):
        classical_poisson_density(b, [1.0, 0, 0], [[1.0, 0, 0]])
    with pytest.raises(ParameterError):
        classical_poisson_density(b, [0.1, 0, 0], [[0.9, 0, 0]])


@pytest.mark.parametrize("d", [2, 3, 4])
def test_classical_density_integrates_to_one(d):
    # axis-aligned y: integrate over the polar angle with the sphere's angular weight
    y = 0.7
    b = Ball(np.zeros(d), 1.0)

    def f(t):
        z = np.zeros(d)
        z[0], z[1] = math.cos(t), math.sin(t)
        return classical_poisson_density(b, np.eye(d)[0] * y, z)[0] * math.sin(t) ** (d - 2)

    norm = integrate.quad(lambda t: math.sin(t) ** (d - 2), 0, math.pi)[0]
    val = integrate.quad(f, 0, math.pi, epsabs=1e-12, epsrel=1e-12, limit=200)[0] / norm
    assert val == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("d,a", [(1, 0.5), (2, 1.0), (3, 1.5), (3, 1.0), (2, 1.7)])
def test_riesz_constant_matches_literature(d, a):
    assert riesz_constant(KernelSpec(d, a)) == pytest.approx(closed_form_riesz_constant(d, a), rel=1e-8)


def test_riesz_constant_frozen():
    assert riesz_constant(KernelSpec(1, 0.5)) == pytest.approx(0.22507907903927607, rel=1e-10)
    assert riesz_constant(KernelSpec(2, 1.0)) == pytest.approx(0.10132118364233776, rel=1e-10)


@pytest.mark.parametrize("radius", [1.0, 7.0])
def test_riesz_density_integrates_to_one_any_radius(radius):
    k = KernelSpec(3, 1.5)
    b = Ball(np.zeros(3), radius)
    y = np.array([0.3 * radius, 0, 0])

    def f(t, u):
        z = np.array([u * math.cos(t), u * math.sin(t), 0.0])
        return riesz_poisson_density(b, y, z, k)[0] * 2 * math.pi * u * u * math.sin(t)

    # substitute u = radius + s/(1-s) to map the exterior onto a finite range
    def g(s, t):
        u = radius * (1 + s / (1 - s))
        return f(t, u) * radius / (1 - s) ** 2

    val = integrate.dblquad(g, 0, math.pi, 0, 1, epsabs=1e-7, epsrel=1e-7)[0]
    assert val == pytest.approx(1.0, abs=1e-3)


def test_riesz_density_radial_at_center():
    k = KernelSpec(2, 1.0)
    b = Ball(np.zeros(2), 1.0)
    ang = np.linspace(0, 2 * np.pi, 7)
    z = 1.8 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    v = riesz_poisson_density(b, np.zeros(2), z, k)
    assert np.allclose(v, v[0], rtol=1e-13)


def test_riesz_density_rejects_inside():
    with pytest.raises(ParameterError):
        riesz_poisson_density(Ball(np.zeros(2), 1.0), [0.1, 0], [[0.5, 0]], KernelSpec(2, 1.0))


def test_harnack_values():
    assert harnack_bound(0.1, KernelSpec(3)) == pytest.approx(1.21 / 0.6561, rel=1e-14)
    assert harnack_bound(1e-12, KernelSpec(3)) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("d,a", [(3, 2.0), (2, 1.0), (3, 1.5)])
@pytest.mark.parametrize("eta", [1e-4, 1e-3, 1e-2])
def test_harnack_linearisation(d, a, eta):
    # remainder of the first-order expansion, bounded by 5 d^2 eta^2
    k = KernelSpec(d, a)
    assert abs(harnack_bound(eta, k) - (1 + 2 * d * eta)) <= 5 * d * d * eta * eta


def test_harnack_linearisation_needs_quadratic_dimension_factor():
    # at d = 3 the remainder exceeds 5 d eta^2, so the d^2 form above is the one that holds
    eta = 0.01
    assert abs(harnack_bound(eta, KernelSpec(3)) - (1 + 6 * eta)) > 5 * 3 * eta * eta


@pytest.mark.parametrize("d,a", [(3, 2.0), (2, 1.0), (1, 0.5)])
def test_delta_zero_property(d, a):
    d0 = delta_zero(d, a)
    assert 0 < d0 <= 0.5
    eta = d0 / (3 * d)
    assert harnack_bound(eta, KernelSpec(d, a)) <= 1 + d0 + 1e-12


@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_harnack_monotone(e1, e2):
    k = KernelSpec(3)
    lo, hi = sorted((e1, e2))
    assert harnack_bound(lo, k) <= harnack_bound(hi, k)


def test_classical_sampler_support(rng):
    b = Ball(np.array([1.0, -2.0, 0.5]), 3.0)
    z = sample_exit_classical(b, [1.5, -1.0, 0.0], rng, 5000)
    assert np.all(np.abs(np.linalg.norm(z - b.c, axis=1) - 3.0) <= 1e-12 * 3.0)


def test_classical_sampler_uniform_from_center(rng):
    # 32 equal-area caps: 8 polar bands (equal in cos) times 4 azimuth sectors
    z = sample_exit_classical(Ball(np.zeros(3), 1.0), np.zeros(3), rng, 200_000)
    band = np.minimum(((z[:, 2] + 1) / 2 * 8).astype(int), 7)
    sector = np.minimum(((np.arctan2(z[:, 1], z[:, 0]) + np.pi) / (2 * np.pi) * 4).astype(int), 3)
    counts = np.bincount(band * 4 + sector, minlength=32)
    from scipy.stats import chisquare
    assert chisquare(counts).pvalue > 1e-3


def test_classical_sampler_matches_quadrature(rng):
    b = Ball(np.zeros(3), 1.0)
    y = np.array([0.6, 0, 0])
    pole = np.array([0.0, 2.5, 0])
    z = sample_exit_classical(b, y, rng, 100_000)
    q = 1 / np.linalg.norm(z - pole, axis=1)
    # the Newton kernel is harmonic in the ball, so its exit average is its value at y
    exact = 1 / np.linalg.norm(y - pole)
    assert abs(q.mean() - exact) <= 3 * q.std() / math.sqrt(len(q))


def _riesz_shell_probs(k, y, edges):
    """P(|Z| in [edges_i, edges_i+1)) for a start on the axis, by quadrature of the density."""
    d = k.dim
    b = Ball(np.zeros(d), 1.0)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if d == 2:
            f = lambda t, u: riesz_poisson_density(b, y, [u * math.cos(t), u * math.sin(t)], k)[0] * u
            val = integrate.dblquad(f, lo, hi, 0, 2 * math.pi, epsabs=1e-9)[0]
        else:
            raise NotImplementedError
        out.append(val)
    return np.array(out)


def test_riesz_sampler_shells(rng):
    k = KernelSpec(2, 1.0)
    y = np.array([0.4, 0.0])
    z = sample_exit_riesz(Ball(np.zeros(2), 1.0), y, k, rng, 200_000)
    nz = np.linalg.norm(z, axis=1)
    assert np.all(nz > 1.0)
    edges = np.array([1.0, 1.05, 1.2, 1.5, 2.0, 3.0, 6.0])
    p = _riesz_shell_probs(k, y, edges)
    emp = np.histogram(nz, edges)[0] / len(nz)
    se = np.sqrt(p * (1 - p) / len(nz))
    assert np.all(np.abs(emp - p) <= 4 * se)


def test_riesz_sampler_distant_ball(rng):
    k = KernelSpec(3, 1.5)
    z = sample_exit_riesz(Ball(np.zeros(3), 1.0), np.zeros(3), k, rng, 400_000)
    target = np.array([3.0, 0, 0])
    hit = np.linalg.norm(z - target, axis=1) < 0.5
    # from the center the law is radial with density a r^-d (r^2-1)^(-a/2) per unit volume
    a_c = riesz_constant(k)
    f = lambda t, u: a_c * (u * u - 1) ** (-0.75) * u ** -3 * 2 * math.pi * u * u * math.sin(t)
    # volume integral over the ball B(3e1, 0.5) in spherical coordinates about the origin
    def inner(u):
        # cap of directions within the target ball at radius u
        c = (u * u + 9 - 0.25) / (6 * u)
        if c >= 1:
            return 0.0
        return integrate.quad(lambda t: f(t, u), 0, math.acos(c))[0]
    p = integrate.quad(inner, 2.5, 3.5, epsabs=1e-12)[0]
    se = math.sqrt(p * (1 - p) / len(z))
    assert abs(hit.mean() - p) <= 3 * se


def test_hit_probability_classical_and_beta():
    assert ball_hit_probability(KernelSpec(3), 1.0, 4.0) == pytest.approx(0.25)
    k = KernelSpec(2, 1.0)
    assert ball_hit_probability(k, 1.0, 2.0) == pytest.approx(special.betainc(0.5, 0.5, 0.25))
    assert ball_hit_probability(k, 1.0, 0.5) == pytest.approx(1.0)
