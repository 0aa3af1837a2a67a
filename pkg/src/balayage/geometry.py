"""Balls, disjoint ball unions, open regions, delta-family checks and lattice grids.

Points are numpy arrays of shape ``(d,)`` or ``(n, d)``.  All distance helpers are
vectorised over the leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError, StructuralError

# Unions larger than this are searched through a k-d tree instead of brute force.
_BRUTE_FORCE_LIMIT = 48
_KNN = 8


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball.  ``radius == 0`` is a (polar) point ball."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if not self.radius >= 0:
            raise ParameterError(f"ball radius must be >= 0, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center)

    @property
    def dim(self) -> int:
        return len(self.center)

    def shrink(self, gamma: float) -> "Ball":
        return shrink_ball(self, gamma)


def shrink_ball(ball: Ball, gamma: float) -> Ball:
    """Return the ball with the same center and radius ``gamma * radius``."""
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"shrink factor must lie in [0, 1], got {gamma}")
    return Ball(ball.center, gamma * ball.radius)


class BallUnion:
    """Ordered finite family of closed balls.

    With ``check=True`` (the default) the balls must be pairwise disjoint; a point
    ball may not lie in another ball.  ``check=False`` is used for target sets
    such as overlapping open sets approximated by their closures.
    """

    def __init__(self, centers, radii, check: bool = True):
        centers = np.asarray(centers, dtype=float)
        radii = np.asarray(radii, dtype=float).reshape(-1)
        if centers.ndim == 1:
            centers = centers.reshape(len(radii), -1) if len(radii) else centers.reshape(0, max(1, centers.size))
        if centers.shape[0] != radii.shape[0]:
            raise ParameterError("centers and radii have different lengths")
        if np.any(radii < 0) or not np.all(np.isfinite(radii)):
            raise ParameterError("ball radii must be finite and >= 0")
        self.centers = centers
        self.radii = radii
        self.disjoint = check
        self._tree = None
        if check:
            pairs = self.overlapping_pairs()
            if pairs:
                i, j = pairs[0]
                raise StructuralError(
                    f"balls {i} and {j} are not disjoint "
                    f"({len(pairs)} overlapping pair(s) in total)"
                )

    @classmethod
    def from_balls(cls, balls: Sequence[Ball], check: bool = True, dim: int | None = None) -> "BallUnion":
        balls = list(balls)
        if not balls:
            return cls.empty(dim or 1)
        return cls([b.center for b in balls], [b.radius for b in balls], check=check)

    @classmethod
    def empty(cls, dim: int) -> "BallUnion":
        return cls(np.zeros((0, dim)), np.zeros(0), check=False)

    def __len__(self) -> int:
        return len(self.radii)

    def __iter__(self) -> Iterator[Ball]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Ball:
        return Ball(self.centers[i], self.radii[i])

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_tree"] = None
        return state

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def r_max(self) -> float:
        return float(self.radii.max()) if len(self) else 0.0

    def shrink(self, factors) -> "BallUnion":
        factors = np.asarray(factors, dtype=float)
        if factors.shape != self.radii.shape:
            raise ParameterError("one shrink factor per ball is required")
        if np.any((factors < 0) | (factors > 1)):
            raise ParameterError("shrink factors must lie in [0, 1]")
        out = BallUnion(self.centers, self.radii * factors, check=False)
        out.disjoint = self.disjoint
        return out

    def subset(self, index) -> "BallUnion":
        out = BallUnion(self.centers[index], self.radii[index], check=False)
        out.disjoint = self.disjoint
        return out

    def concat(self, other: "BallUnion", check: bool = True) -> "BallUnion":
        return BallUnion(
            np.vstack([self.centers, other.centers]),
            np.concatenate([self.radii, other.radii]),
            check=check,
        )

    def overlapping_pairs(self) -> list[tuple[int, int]]:
        m = len(self)
        if m < 2:
            return []
        if m <= _BRUTE_FORCE_LIMIT:
            diff = self.centers[:, None, :] - self.centers[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            cand = [(i, j) for i in range(m) for j in range(i + 1, m)]
        else:
            tree = self.tree()
            cand = sorted(tree.query_pairs(2.0 * self.r_max + 1e-300))
            dist = None
        bad = []
        for i, j in cand:
            dij = dist[i, j] if dist is not None else float(np.linalg.norm(self.centers[i] - self.centers[j]))
            ri, rj = self.radii[i], self.radii[j]
            if ri == 0.0 and rj == 0.0:
                overlap = dij == 0.0
            elif ri == 0.0 or rj == 0.0:
                overlap = dij <= max(ri, rj)
            else:
                overlap = dij <= ri + rj
            if overlap:
                bad.append((i, j))
        return bad

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.centers)
        return self._tree

    def nearest(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gap to the nearest ball, its index, and a guaranteed lower bound for the
        distance to the whole union.

        Gaps are negative inside a ball.  For large unions only the nearest
        centers are inspected; the bound accounts for farther, larger balls.
        """
        x = _as_points(x)
        n = x.shape[0]
        if len(self) == 0:
            inf = np.full(n, np.inf)
            return inf, np.full(n, -1, dtype=np.int64), inf
        if len(self) <= _BRUTE_FORCE_LIMIT:
            dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
            gap = dc - self.radii[None, :]
            idx = np.argmin(gap, axis=1)
            best = gap[np.arange(n), idx]
            return best, idx, best
        k = min(_KNN, len(self))
        dc, ic = self.tree().query(x, k=k)
        if k == 1:
            dc, ic = dc[:, None], ic[:, None]
        gap = dc - self.radii[ic]
        j = np.argmin(gap, axis=1)
        best = gap[np.arange(n), j]
        idx = ic[np.arange(n), j]
        bound = np.minimum(best, dc[:, -1] - self.r_max) if k < len(self) else best
        return best, idx, bound

    def distance(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Lower bound for the distance to the union and the index of the nearest ball."""
        _, idx, bound = self.nearest(x)
        return bound, idx

    def locate(self, x) -> np.ndarray:
        """Index of the closed ball containing each point, ``-1`` if none."""
        x = _as_points(x)
        n = x.shape[0]
        out = np.full(n, -1, dtype=np.int64)
        if len(self) == 0:
            return out
        if len(self) <= _BRUTE_FORCE_LIMIT:
            dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
            inside = dc <= self.radii[None, :]
            hit = inside.any(axis=1)
            out[hit] = np.argmax(inside[hit], axis=1)
            return out
        k = min(_KNN, len(self))
        dc, ic = self.tree().query(x, k=k)
        if k == 1:
            dc, ic = dc[:, None], ic[:, None]
        inside = dc <= self.radii[ic]
        hit = inside.any(axis=1)
        out[hit] = ic[hit, np.argmax(inside[hit], axis=1)]
        # rows whose k nearest centers all lie within r_max may hide a containing ball
        unsure = (~hit) & (dc[:, -1] <= self.r_max) if k < len(self) else np.zeros(n, bool)
        for row in np.flatnonzero(unsure):
            for j in self.tree().query_ball_point(x[row], self.r_max):
                if np.linalg.norm(x[row] - self.centers[j]) <= self.radii[j]:
                    out[row] = j
                    break
        return out

    def project(self, x, idx) -> np.ndarray:
        """Radial projection of points onto the sphere of ball ``idx``."""
        c = self.centers[idx]
        v = x - c
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        nv[nv == 0] = 1.0
        return c + self.radii[idx][:, None] * v / nv

    def circumradius(self, origin) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.centers - origin, axis=1) + self.radii))


class OpenRegion:
    """Open set ``(union of open balls) minus (union of closed holes)``, or all of R^d.

    ``margin`` is a lower bound for the distance to the complement.  It is exact
    for a single ball and for a single ball minus concentric or disjoint holes;
    for overlapping unions it uses the largest covering-ball margin.
    """

    def __init__(self, dim: int, centers=None, radii=None, hole_centers=None, hole_radii=None):
        self.dim = int(dim)
        self.whole = centers is None
        self.centers = None if self.whole else np.asarray(centers, float).reshape(-1, self.dim)
        self.radii = None if self.whole else np.asarray(radii, float).reshape(-1)
        self.hole_centers = np.zeros((0, self.dim)) if hole_centers is None else np.asarray(hole_centers, float).reshape(-1, self.dim)
        self.hole_radii = np.zeros(0) if hole_radii is None else np.asarray(hole_radii, float).reshape(-1)
        if not self.whole and np.any(self.radii <= 0):
            raise ParameterError("open balls need a positive radius")

    @classmethod
    def everywhere(cls, dim: int) -> "OpenRegion":
        return cls(dim)

    @classmethod
    def ball(cls, center, radius) -> "OpenRegion":
        center = np.atleast_1d(np.asarray(center, float))
        return cls(len(center), [center], [radius])

    @classmethod
    def union(cls, balls: Sequence[Ball]) -> "OpenRegion":
        balls = list(balls)
        return cls(balls[0].dim, [b.center for b in balls], [b.radius for b in balls])

    def minus(self, holes: Sequence[Ball]) -> "OpenRegion":
        holes = list(holes)
        hc = np.vstack([self.hole_centers] + [np.asarray(h.center)[None, :] for h in holes])
        hr = np.concatenate([self.hole_radii, [h.radius for h in holes]])
        return OpenRegion(self.dim, self.centers, self.radii, hc, hr)

    @property
    def bounded(self) -> bool:
        return not self.whole

    def balls(self) -> list[Ball]:
        return [] if self.whole else [Ball(c, r) for c, r in zip(self.centers, self.radii)]

    def margin(self, x) -> np.ndarray:
        x = _as_points(x)
        if self.whole:
            out = np.full(x.shape[0], np.inf)
        else:
            dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
            out = np.max(self.radii[None, :] - dc, axis=1)
        if len(self.hole_radii):
            dh = np.linalg.norm(x[:, None, :] - self.hole_centers[None, :, :], axis=-1) - self.hole_radii[None, :]
            out = np.minimum(out, dh.min(axis=1))
        return out

    def contains(self, x) -> np.ndarray:
        x = _as_points(x)
        if self.whole:
            inside = np.ones(x.shape[0], bool)
        else:
            dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
            inside = np.any(dc < self.radii[None, :], axis=1)
        if len(self.hole_radii):
            dh = np.linalg.norm(x[:, None, :] - self.hole_centers[None, :, :], axis=-1)
            inside &= ~np.any(dh <= self.hole_radii[None, :], axis=1)
        return inside

    def nearest_sphere(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Center and radius of the covering ball with the smallest clearance."""
        x = _as_points(x)
        dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
        j = np.argmax(self.radii[None, :] - dc, axis=1)
        return self.centers[j], self.radii[j]

    def project_boundary(self, x) -> np.ndarray:
        """Radial projection onto the sphere (covering ball or hole) that realises the margin."""
        x = _as_points(x)
        out = np.empty_like(x)
        if self.whole:
            c_cov = np.full_like(x, np.nan)
            m_cov = np.full(x.shape[0], np.inf)
            r_cov = np.zeros(x.shape[0])
        else:
            dc = np.linalg.norm(x[:, None, :] - self.centers[None, :, :], axis=-1)
            j = np.argmax(self.radii[None, :] - dc, axis=1)
            c_cov, r_cov = self.centers[j], self.radii[j]
            m_cov = r_cov - dc[np.arange(x.shape[0]), j]
        use_hole = np.zeros(x.shape[0], bool)
        if len(self.hole_radii):
            dh = np.linalg.norm(x[:, None, :] - self.hole_centers[None, :, :], axis=-1) - self.hole_radii[None, :]
            h = np.argmin(dh, axis=1)
            use_hole = dh[np.arange(x.shape[0]), h] < m_cov
        c = np.where(use_hole[:, None], self.hole_centers[h] if len(self.hole_radii) else c_cov, c_cov)
        r = np.where(use_hole, self.hole_radii[h] if len(self.hole_radii) else r_cov, r_cov)
        v = x - c
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        nv[nv == 0] = 1.0
        out[:] = c + r[:, None] * v / nv
        return out

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.whole:
            raise ParameterError("the whole space has no bounding box")
        lo = np.min(self.centers - self.radii[:, None], axis=0)
        hi = np.max(self.centers + self.radii[:, None], axis=0)
        return lo, hi

    def circumradius(self, origin) -> float:
        if self.whole:
            return np.inf
        return float(np.max(np.linalg.norm(self.centers - origin, axis=1) + self.radii))

    def to_dict(self) -> dict:
        if self.whole:
            return {"kind": "whole", "dim": self.dim}
        out = {"balls": [{"center": c.tolist(), "radius": float(r)} for c, r in zip(self.centers, self.radii)]}
        if len(self.hole_radii):
            out["holes"] = [{"center": c.tolist(), "radius": float(r)} for c, r in zip(self.hole_centers, self.hole_radii)]
        return out


@dataclass(frozen=True)
class DomainSpec:
    """The Greenian reference set X: all of R^d or an open ball."""

    dim: int
    kind: str = "full"
    center: tuple | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("dimension must be >= 1")
        if self.kind not in ("full", "ball"):
            raise ParameterError(f"unknown domain kind {self.kind!r}")
        if self.kind == "ball":
            if self.radius is None or not self.radius > 0:
                raise ParameterError("an open-ball domain needs a positive radius")
            center = (0.0,) * self.dim if self.center is None else tuple(float(c) for c in self.center)
            if len(center) != self.dim:
                raise ParameterError("domain center has the wrong dimension")
            object.__setattr__(self, "center", center)

    @classmethod
    def full(cls, dim: int) -> "DomainSpec":
        return cls(dim, "full")

    @classmethod
    def open_ball(cls, center, radius) -> "DomainSpec":
        center = tuple(np.atleast_1d(np.asarray(center, float)))
        return cls(len(center), "ball", center, float(radius))

    def check_kernel(self, dim: int, alpha: float) -> None:
        if dim != self.dim:
            raise ParameterError("kernel and domain dimensions differ")
        if alpha == 2.0:
            if self.dim < 2:
                raise ParameterError("classical case needs d >= 2")
            if self.dim == 2 and self.kind != "ball":
                raise ParameterError("classical case in the plane needs a bounded domain (non-polar complement)")
        elif not self.dim > alpha:
            raise ParameterError("Riesz case needs d > alpha")

    def region(self) -> OpenRegion:
        if self.kind == "full":
            return OpenRegion.everywhere(self.dim)
        return OpenRegion.ball(self.center, self.radius)

    def margin(self, x) -> np.ndarray:
        return self.region().margin(x)

    def contains(self, x) -> np.ndarray:
        return self.region().contains(x)

    def to_dict(self) -> dict:
        if self.kind == "full":
            return {"kind": "full", "dim": self.dim}
        return {"kind": "ball", "dim": self.dim, "center": list(self.center), "radius": self.radius}


def _boundary_distance(points: np.ndarray, X) -> np.ndarray:
    if X is None:
        return np.full(points.shape[0], np.inf)
    region = X.region() if isinstance(X, DomainSpec) else X
    return region.margin(points)


def mutual_distances(u: BallUnion, X=None) -> np.ndarray:
    """``dist(x_B, (R^d minus X) union (A minus B))`` for every ball ``B`` of ``u``."""
    m = len(u)
    out = _boundary_distance(u.centers, X)
    if m < 2:
        return out
    if m <= _BRUTE_FORCE_LIMIT:
        dc = np.linalg.norm(u.centers[:, None, :] - u.centers[None, :, :], axis=-1)
        gap = np.maximum(dc - u.radii[None, :], 0.0)
        np.fill_diagonal(gap, np.inf)
        return np.minimum(out, gap.min(axis=1))
    k = min(_KNN + 1, m)
    dc, ic = u.tree().query(u.centers, k=k)
    gap = np.maximum(dc[:, 1:] - u.radii[ic[:, 1:]], 0.0)
    best = gap.min(axis=1)
    if k < m:
        # exact fallback where a farther, larger ball could be closer
        unsure = dc[:, -1] - u.r_max < best
        for i in np.flatnonzero(unsure):
            g = np.maximum(np.linalg.norm(u.centers - u.centers[i], axis=1) - u.radii, 0.0)
            g[i] = np.inf
            best[i] = g.min()
    return np.minimum(out, best)


def mutual_distance(u: BallUnion, i: int, X=None) -> float:
    if not 0 <= i < len(u):
        raise ParameterError(f"ball index {i} out of range")
    return float(mutual_distances(u, X)[i])


@dataclass
class DeltaReport:
    valid: bool
    delta: float
    delta0: float
    slack: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "valid": bool(self.valid),
            "delta": self.delta,
            "delta0": self.delta0,
            "min_slack": float(self.slack.min()) if len(self.slack) else None,
            "slack": [float(s) for s in self.slack],
        }


def validate_delta_family(u: BallUnion, delta: float, X, alpha: float = 2.0) -> DeltaReport:
    """Check ``r_B <= delta/(3d) * dist(x_B, X^c union (A minus B))`` for every ball.

    ``X`` is a :class:`DomainSpec` or an :class:`OpenRegion` (balayage relative
    to a subdomain).  Slack is the right side minus the radius; negative slack
    marks a violating ball.
    """
    from .kernels import delta_zero

    if not u.disjoint:
        pairs = u.overlapping_pairs()
        if pairs:
            raise StructuralError(f"balls {pairs[0]} overlap")
    if not delta > 0:
        raise ParameterError("delta must be positive")
    d = u.dim
    d0 = delta_zero(d, alpha)
    dist = mutual_distances(u, X)
    slack = delta / (3 * d) * dist - u.radii
    tol = 1e-12 * np.maximum(u.radii, 1e-300)
    valid = bool(np.all(slack >= -tol)) and delta <= d0
    return DeltaReport(valid, float(delta), d0, slack, dist)


@dataclass
class DeltaFamily:
    union: BallUnion
    delta: float
    domain: object
    alpha: float = 2.0

    def __post_init__(self):
        report = validate_delta_family(self.union, self.delta, self.domain, self.alpha)
        if not report.valid:
            raise StructuralError(
                f"not a delta-family at delta={self.delta}: min slack {report.slack.min():.3e}, delta0={report.delta0:.4f}"
            )
        self.report = report


@dataclass(frozen=True)
class GridSpec:
    """Lattice ``(x0 + Z^d)/m`` carrying balls of radius ``a/m``."""

    offset: tuple
    scale: float
    resolution: int

    def __post_init__(self):
        object.__setattr__(self, "offset", tuple(float(v) for v in np.atleast_1d(self.offset)))
        if not 0 < self.scale < 1:
            raise ParameterError("grid scale a must lie in (0, 1)")
        if int(self.resolution) < 1:
            raise ParameterError("grid resolution must be a positive integer")
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def radius(self) -> float:
        return self.scale / self.resolution


def grid_balls(g: GridSpec, U, X=None) -> BallUnion:
    """All balls ``B(z, a/m)``, ``z in (x0 + Z^d)/m``, inside ``U`` and ``B(0, m)``
    whose distance to the complement of ``U`` is at least ``1/m``."""
    m = g.resolution
    rho = g.radius
    x0 = np.asarray(g.offset)
    region = U.region() if isinstance(U, DomainSpec) else U
    d = region.dim
    if len(x0) != d:
        raise ParameterError("grid offset has the wrong dimension")
    if region.whole:
        lo, hi = np.full(d, -float(m)), np.full(d, float(m))
    else:
        lo, hi = region.bounding_box()
        lo, hi = np.maximum(lo, -m), np.minimum(hi, m)
    # lattice indices z with (x0 + z)/m inside the box
    zlo = np.ceil(lo * m - x0).astype(np.int64)
    zhi = np.floor(hi * m - x0).astype(np.int64)
    if np.any(zhi < zlo):
        return BallUnion.empty(d)
    axes = [np.arange(a, b + 1) for a, b in zip(zlo, zhi)]
    kept = []
    # enumerate slab by slab along the first axis to bound memory
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, d - 1) if d > 1 else np.zeros((1, 0))
    for z0 in axes[0]:
        z = np.hstack([np.full((rest.shape[0], 1), z0), rest])
        c = (x0 + z) / m
        ok = np.linalg.norm(c, axis=1) + rho <= m
        ok &= region.margin(c) - rho >= 1.0 / m
        if X is not None:
            ok &= _boundary_distance(c, X) > rho
        if ok.any():
            kept.append(c[ok])
    if not kept:
        return BallUnion.empty(d)
    centers = np.vstack(kept)
    out = BallUnion(centers, np.full(len(centers), rho), check=False)
    out.disjoint = True  # a < 1 separates lattice neighbours
    return out
