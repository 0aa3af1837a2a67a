import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from balayage.errors import ParameterError, StructuralError
from balayage.geometry import (
    Ball,
    BallUnion,
    DomainSpec,
    GridSpec,
    OpenRegion,
    grid_balls,
    mutual_distance,
    shrink_ball,
    validate_delta_family,
)
from balayage.kernels import delta_zero


def test_shrink_identity_and_collapse():
    b = Ball(np.zeros(3), 2.0)
    assert shrink_ball(b, 1.0).radius == 2.0
    p = shrink_ball(b, 0.0)
    assert p.radius == 0.0 and np.array_equal(p.c, b.c)
    h = shrink_ball(Ball((1.0, 0, 0), 2.0), 0.5)
    assert h.radius == 1.0 and np.array_equal(h.c, [1.0, 0, 0])


@pytest.mark.parametrize("gamma", [-0.1, 1.5])
def test_shrink_rejects_factor(gamma):
    with pytest.raises(ParameterError):
        shrink_ball(Ball((0.0,), 1.0), gamma)


@given(st.integers(0, 30), st.integers(0, 30), st.floats(0.01, 10))
def test_shrink_composes_exactly_for_powers_of_two(i, j, r):
    g1, g2 = 2.0 ** -i, 2.0 ** -j
    b = Ball((0.3, -1.0), r)
    assert shrink_ball(shrink_ball(b, g1), g2).radius == shrink_ball(b, g1 * g2).radius


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 10))
def test_shrink_composes_to_rounding(g1, g2, r):
    b = Ball((0.3, -1.0), r)
    lhs = shrink_ball(shrink_ball(b, g1), g2).radius
    rhs = shrink_ball(b, g1 * g2).radius
    assert abs(lhs - rhs) <= 2 * np.spacing(max(lhs, rhs, 1e-300))


def test_union_rejects_overlap():
    with pytest.raises(StructuralError):
        BallUnion([[0.0, 0, 0], [1.5, 0, 0]], [1.0, 1.0])
    # touching closed balls are not disjoint either
    with pytest.raises(StructuralError):
        BallUnion([[0.0, 0], [2.0, 0]], [1.0, 1.0])
    BallUnion([[0.0, 0], [2.0 + 1e-9, 0]], [1.0, 1.0])


def test_union_point_balls_allowed():
    u = BallUnion([[0.0, 0], [0.5, 0]], [0.0, 0.1])
    assert len(u) == 2


def test_mutual_distance_cases():
    one = BallUnion([[0.0, 0, 0]], [1.0])
    assert mutual_distance(one, 0) == math.inf
    two = BallUnion([[0.0, 0, 0], [10.0, 0, 0]], [1.0, 1.0])
    assert mutual_distance(two, 0) == pytest.approx(9.0)
    X = DomainSpec.open_ball((0.0, 0, 0), 5.0)
    three = BallUnion([[2.0, 0, 0], [-3.0, 0, 0]], [0.1, 0.1])
    assert mutual_distance(three, 0, X) == pytest.approx(3.0)


def test_delta_family_vacuous_single_ball():
    rep = validate_delta_family(BallUnion([[0.0, 0, 0]], [1e-4]), 0.1, DomainSpec.full(3))
    assert rep.valid


def test_delta_family_threshold():
    d, delta, r = 3, 0.1, 0.01
    sep = (3 * d / delta) * r + r
    u = BallUnion([[0.0, 0, 0], [sep, 0, 0]], [r, r])
    rep = validate_delta_family(u, delta, DomainSpec.full(3))
    assert rep.valid
    assert np.all(np.abs(rep.slack) < 1e-12)
    tight = BallUnion([[0.0, 0, 0], [sep * 0.999, 0, 0]], [r, r])
    assert not validate_delta_family(tight, delta, DomainSpec.full(3)).valid


def test_delta_family_rejects_large_delta():
    u = BallUnion([[0.0, 0, 0]], [1e-6])
    assert not validate_delta_family(u, delta_zero(3, 2.0) * 1.01, DomainSpec.full(3)).valid


@given(st.floats(0.01, 0.5), st.floats(1.0, 1.5))
def test_delta_family_slack_increases_with_delta(delta, factor):
    u = BallUnion([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]], [0.003, 0.002, 0.004])
    X = DomainSpec.full(3)
    lo = validate_delta_family(u, delta / factor, X).slack
    hi = validate_delta_family(u, delta, X).slack
    assert np.all(hi >= lo - 1e-15)


def test_grid_empty_when_clearance_impossible():
    assert len(grid_balls(GridSpec((0.0, 0), 0.3, 1), OpenRegion.ball((0.0, 0), 1.0))) == 0


def test_grid_radius_and_clearance():
    U = OpenRegion.ball((0.0, 0), 5.0)
    g = grid_balls(GridSpec((0.0, 0), 0.3, 4), U)
    assert len(g) > 0
    assert np.allclose(g.radii, 0.075)
    clearance = 5.0 - np.linalg.norm(g.centers, axis=1) - g.radii
    assert clearance.min() >= 0.25 - 1e-12
    # lattice membership
    assert np.allclose(g.centers * 4, np.round(g.centers * 4))


def _brute_count(R, a, m, d):
    """Independent lattice enumeration (integer loops, no numpy)."""
    import itertools
    n = 0
    span = range(-m * (int(R) + 1), m * (int(R) + 1) + 1)
    for z in itertools.product(span, repeat=d):
        r = math.sqrt(sum(v * v for v in z)) / m
        if R - r - a / m >= 1.0 / m and r + a / m <= m:
            n += 1
    return n


def test_grid_count_against_enumeration():
    assert _brute_count(2.0, 0.3, 3, 2) == 69
    assert len(grid_balls(GridSpec((0.0, 0), 0.3, 3), OpenRegion.ball((0.0, 0), 2.0))) == 69


@given(st.integers(1, 6), st.floats(0.05, 0.49), st.floats(0, 1))
def test_grid_balls_disjoint_and_inside(m, a, off):
    U = OpenRegion.union([Ball((0.0, 0), 1.5), Ball((1.0, 0.5), 1.0)])
    g = grid_balls(GridSpec((off, 0.0), a, m), U)
    if len(g):
        assert np.all(U.margin(g.centers) - g.radii >= 1.0 / m - 1e-12)
        assert not BallUnion(g.centers, g.radii, check=False).overlapping_pairs()


def test_region_margin_with_holes():
    R = OpenRegion.ball((0.0, 0), 2.0).minus([Ball((0.0, 0), 1.0)])
    m = R.margin(np.array([[1.5, 0], [0.5, 0], [3.0, 0]]))
    assert m == pytest.approx([0.5, -0.5, -1.0])
    assert list(R.contains(np.array([[1.5, 0], [0.5, 0]]))) == [True, False]


def test_domain_rules():
    with pytest.raises(ParameterError):
        DomainSpec.full(2).check_kernel(2, 2.0)
    DomainSpec.open_ball((0.0, 0), 3.0).check_kernel(2, 2.0)
    DomainSpec.full(2).check_kernel(2, 1.0)
    with pytest.raises(ParameterError):
        DomainSpec.full(1).check_kernel(1, 1.0)


def test_locate_and_nearest():
    u = BallUnion([[0.0, 0, 0], [3.0, 0, 0]], [1.0, 0.5])
    idx = u.locate(np.array([[0.2, 0, 0], [3.4, 0, 0], [1.5, 0, 0]]))
    assert list(idx) == [0, 1, -1]
