import numpy as np
import pytest
from hypothesis import given, strategies as st

from balayage.errors import ParameterError
from balayage.kernels import KernelSpec
from balayage.measures import (
    Dictionary,
    PotentialSpec,
    WeightedMeasure,
    combine,
    integrate,
    integrate_all,
    weak_distance,
)

K3 = KernelSpec(3)


def test_zero_measure_integrates_to_zero():
    assert integrate(WeightedMeasure.zero(3), PotentialSpec("newton", (0.0, 0, 0)), K3) == (0.0, 0.0)


def test_newton_value_at_atom():
    v, s = integrate(WeightedMeasure.dirac([3.0, 4.0, 0]), PotentialSpec("newton", (0.0, 0, 0)), K3)
    assert v == pytest.approx(0.2) and s == 0.0


def test_uncapped_pole_raises_capped_is_finite():
    mu = WeightedMeasure.dirac([1.0, 0, 0])
    with pytest.raises(ParameterError):
        integrate(mu, PotentialSpec("newton", (1.0, 0, 0)), K3)
    v, _ = integrate(mu, PotentialSpec("newton", (1.0, 0, 0), cap=7.0), K3)
    assert v == 7.0


def test_weak_distance_identity_and_linearity():
    D = Dictionary([PotentialSpec("constant"), PotentialSpec("newton", (0.0, 0, 0))])
    x = [2.0, 0, 0]
    mu = WeightedMeasure.dirac(x)
    assert weak_distance(mu, mu, D, K3).distance == 0.0
    half = WeightedMeasure.dirac(x, 0.5)
    assert weak_distance(mu, half, D, K3).distance == pytest.approx(0.5 * max(1.0, 0.5))


def test_green_ball_properties():
    k = KernelSpec(2)
    g = PotentialSpec("green_ball", (0.3, 0.1), domain_center=(0.0, 0.0), domain_radius=2.0)
    pts = np.array([[1.0, 0.5], [-1.2, 0.3], [0.0, 1.99999]])
    vals = g(pts, k)
    assert np.all(vals > 0)
    assert vals[2] < 1e-4
    # symmetry G(x, y) = G(y, x)
    g2 = PotentialSpec("green_ball", (1.0, 0.5), domain_center=(0.0, 0.0), domain_radius=2.0)
    assert g2(np.array([[0.3, 0.1]]), k)[0] == pytest.approx(vals[0], rel=1e-12)


@given(st.lists(st.floats(0, 3), min_size=1, max_size=6))
def test_estimate_is_weighted_sum(ws):
    pts = np.arange(len(ws) * 3, dtype=float).reshape(-1, 3) + 10
    mu = WeightedMeasure.from_atoms(pts, ws)
    v, s = mu.estimate(np.ones(len(ws)))
    assert v == pytest.approx(sum(ws)) and s == 0.0


def test_combine_adds_mass_and_keeps_groups():
    a = WeightedMeasure.dirac([1.0, 0, 0], 0.25)
    b = WeightedMeasure.dirac([0.0, 1, 0], 0.5)
    c = combine(a, b)
    assert c.mass == 0.75 and len(c.n_units) == 2


def test_restrict_and_scale():
    mu = WeightedMeasure.from_atoms([[1.0, 0, 0], [2.0, 0, 0]], [1.0, 3.0])
    assert mu.restrict([False, True]).mass == 3.0
    assert mu.scaled(0.5).mass == 2.0


def test_bound_ratio():
    p = PotentialSpec("newton", (0.0, 0, 0), scale=2.0, cap=0.5)
    q = PotentialSpec("newton", (0.5, 0, 0), scale=0.5, cap=2.0)
    D = Dictionary([q], reference=p)
    pts = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    assert D.bound_ratio(pts, K3) <= 1.0 + 1e-12


def test_negative_weights_rejected():
    with pytest.raises(ParameterError):
        WeightedMeasure.from_atoms([[0.0, 0, 0]], [-1.0])
