"""Atomic measures with Monte Carlo bookkeeping, test potentials and dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .geometry import _as_points

# Atom labels relative to the stop set that produced them.
FREE = -2
OUTER = -1


@dataclass
class WeightedMeasure:
    """Finite atomic measure, possibly a Monte Carlo estimate.

    Every atom belongs to a sampling *unit* inside a *group*.  A group with
    ``n_units[g]`` units is an average of that many i.i.d. replicates, which is
    what standard errors are computed from; deterministic atoms form groups with
    a single unit and contribute no variance.  ``labels`` record where an atom
    was absorbed: a ball index, ``OUTER`` (the complement of the working set) or
    ``FREE``.
    """

    points: np.ndarray
    weights: np.ndarray
    labels: np.ndarray
    group: np.ndarray
    unit: np.ndarray
    n_units: np.ndarray
    lost_mass: float = 0.0
    total_input: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights):
            self.points = _as_points(self.points)
        else:
            pts = np.asarray(self.points, float)
            self.points = pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 1)
        self.weights = np.asarray(self.weights, float)
        if np.any(self.weights < 0):
            raise ParameterError("atom weights must be nonnegative")
        if self.total_input is None:
            self.total_input = float(self.weights.sum() + self.lost_mass)

    @classmethod
    def from_atoms(cls, points, weights=None, dim: int | None = None) -> "WeightedMeasure":
        """Deterministic measure, one group per atom."""
        points = np.asarray(points, float)
        if points.size == 0:
            return cls.zero(dim or 1)
        points = _as_points(points)
        n = points.shape[0]
        weights = np.ones(n) if weights is None else np.asarray(weights, float).reshape(n)
        return cls(
            points, weights, np.full(n, FREE), np.arange(n), np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)
        )

    @classmethod
    def dirac(cls, x, mass: float = 1.0) -> "WeightedMeasure":
        return cls.from_atoms(_as_points(x), [mass])

    @classmethod
    def zero(cls, dim: int) -> "WeightedMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0, 0.0)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return len(self.weights)

    def restrict(self, mask) -> "WeightedMeasure":
        """Restriction to the atoms selected by ``mask``; sampling structure is kept."""
        mask = np.asarray(mask, bool)
        return WeightedMeasure(
            self.points[mask], self.weights[mask], self.labels[mask], self.group[mask], self.unit[mask],
            self.n_units.copy(), 0.0, float(self.weights[mask].sum()), dict(self.diagnostics),
        )

    def scaled(self, factor: float) -> "WeightedMeasure":
        return WeightedMeasure(
            self.points, self.weights * factor, self.labels, self.group, self.unit, self.n_units,
            self.lost_mass * factor, self.total_input * factor, dict(self.diagnostics),
        )

    def with_labels(self, labels) -> "WeightedMeasure":
        return WeightedMeasure(
            self.points, self.weights, np.asarray(labels, np.int64), self.group, self.unit, self.n_units,
            self.lost_mass, self.total_input, dict(self.diagnostics),
        )

    def ball_masses(self, n_balls: int) -> np.ndarray:
        sel = self.labels >= 0
        return np.bincount(self.labels[sel], weights=self.weights[sel], minlength=n_balls)[:n_balls]

    def conservation_error(self) -> float:
        return abs(self.weights.sum() + self.lost_mass - self.total_input)

    def estimate(self, values) -> tuple[float, float]:
        """``sum_i w_i values_i`` with its standard error from the unit structure."""
        values = np.asarray(values, float)
        if len(values) != len(self.weights):
            raise ParameterError("one value per atom is required")
        contrib = self.weights * values
        total = float(contrib.sum())
        if len(self.n_units) == 0:
            return total, 0.0
        offsets = np.concatenate([[0], np.cumsum(self.n_units)[:-1]])
        key = offsets[self.group] + self.unit
        per_unit = np.bincount(key, weights=contrib, minlength=int(self.n_units.sum()))
        var = 0.0
        for g, n in enumerate(self.n_units):
            if n <= 1:
                continue
            y = n * per_unit[offsets[g]: offsets[g] + n]
            var += y.var(ddof=1) / n
        return total, float(np.sqrt(var))

    def standard_errors(self, values) -> np.ndarray:
        """Per-column standard errors for a value matrix of shape ``(n_atoms, n_functions)``."""
        values = np.asarray(values, float)
        return np.array([self.estimate(values[:, j])[1] for j in range(values.shape[1])])

    def to_dict(self, max_atoms: int | None = 0) -> dict:
        out = {
            "mass": self.mass,
            "lost_mass": self.lost_mass,
            "total_input": self.total_input,
            "n_atoms": len(self),
            "n_units": int(self.n_units.sum()),
        }
        if max_atoms is None or len(self) <= (max_atoms or 0):
            out["atoms"] = [[*map(float, p), float(w)] for p, w in zip(self.points, self.weights)]
        return out


def combine(*measures: WeightedMeasure) -> WeightedMeasure:
    """Sum of measures with independent sampling structures."""
    measures = [m for m in measures if m is not None]
    dim = measures[0].dim
    pts, w, lab, grp, unit, nu = [], [], [], [], [], []
    offset = 0
    for m in measures:
        pts.append(m.points.reshape(-1, dim))
        w.append(m.weights)
        lab.append(m.labels)
        grp.append(m.group + offset)
        unit.append(m.unit)
        nu.append(m.n_units)
        offset += len(m.n_units)
    return WeightedMeasure(
        np.vstack(pts), np.concatenate(w), np.concatenate(lab).astype(np.int64), np.concatenate(grp).astype(np.int64),
        np.concatenate(unit).astype(np.int64), np.concatenate(nu).astype(np.int64),
        float(sum(m.lost_mass for m in measures)), float(sum(m.total_input for m in measures)),
    )


_KINDS = ("riesz", "newton", "green_ball", "bump", "constant")


@dataclass(frozen=True)
class PotentialSpec:
    """Test function: a kernel with a pole, the Green function of a ball, a bump or a constant.

    ``cap`` truncates kernels from above (``min(q, cap)``), which keeps them
    superharmonic.  ``scale`` multiplies the function.
    """

    kind: str
    point: tuple = ()
    radius: float | None = None
    domain_center: tuple | None = None
    domain_radius: float | None = None
    cap: float | None = None
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"unknown potential kind {self.kind!r}")
        object.__setattr__(self, "point", tuple(float(v) for v in np.atleast_1d(self.point)))
        if self.domain_center is not None:
            object.__setattr__(self, "domain_center", tuple(float(v) for v in self.domain_center))
        if self.kind == "bump" and not (self.radius and self.radius > 0):
            raise ParameterError("a bump needs a positive radius")
        if self.kind == "green_ball" and not (self.domain_radius and self.domain_radius > 0):
            raise ParameterError("a ball Green function needs the ball radius")

    @property
    def ident(self) -> str:
        if self.name:
            return self.name
        pt = ",".join(f"{v:g}" for v in self.point)
        return f"{self.kind}({pt})"

    def is_kernel(self) -> bool:
        return self.kind in ("riesz", "newton", "green_ball")

    def harmonic_off_pole(self) -> bool:
        return self.kind in ("riesz", "newton", "green_ball", "constant") and self.cap is None

    def raw(self, x, kernel) -> np.ndarray:
        x = _as_points(x)
        d, a = kernel.dim, kernel.alpha
        if self.kind == "constant":
            return np.full(x.shape[0], self.scale)
        z = np.asarray(self.point)
        r = np.linalg.norm(x - z, axis=1)
        if self.kind == "bump":
            t = np.clip(1.0 - (r / self.radius) ** 2, 0.0, None)
            return self.scale * t * t
        with np.errstate(divide="ignore"):
            if self.kind == "riesz":
                val = r ** (a - d)
            elif self.kind == "newton":
                if d == 2:
                    raise ParameterError("Newton kernel is not positive in the plane; use green_ball")
                val = r ** (2.0 - d)
            else:
                val = _green_ball(x, z, np.asarray(self.domain_center or (0.0,) * d), self.domain_radius, d)
        return self.scale * val

    def __call__(self, x, kernel) -> np.ndarray:
        val = self.raw(x, kernel)
        if self.cap is not None:
            return np.minimum(val, self.cap * self.scale)
        if self.is_kernel() and np.any(~np.isfinite(val)):
            raise ParameterError(f"uncapped kernel {self.ident} evaluated at its pole")
        return val

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "point": list(self.point), "id": self.ident}
        for key in ("radius", "domain_center", "domain_radius", "cap"):
            v = getattr(self, key)
            if v is not None:
                out[key] = list(v) if isinstance(v, tuple) else v
        if self.scale != 1.0:
            out["scale"] = self.scale
        return out


def _green_ball(x, y, c, R, d) -> np.ndarray:
    """Green function of the open ball ``B(c, R)`` with pole ``y``; zero outside the ball."""
    x = x - c
    y = y - c
    ny = float(np.linalg.norm(y))
    r = np.linalg.norm(x - y, axis=1)
    nx = np.linalg.norm(x, axis=1)
    if ny < 1e-14 * R:
        # pole at the center: image term is constant
        if d == 2:
            val = np.log(R / r)
        else:
            val = r ** (2.0 - d) - R ** (2.0 - d)
    else:
        ystar = y * (R / ny) ** 2
        rs = np.linalg.norm(x - ystar, axis=1)
        if d == 2:
            val = np.log(ny * rs / (R * r))
        else:
            val = r ** (2.0 - d) - (R / ny) ** (d - 2) * rs ** (2.0 - d)
    return np.where(nx < R, np.maximum(val, 0.0), 0.0)


@dataclass
class Dictionary:
    """Finite family of test functions plus a strictly positive reference potential."""

    potentials: list
    reference: PotentialSpec | None = None

    def ids(self) -> list[str]:
        return [q.ident for q in self.potentials]

    def values(self, x, kernel) -> np.ndarray:
        x = _as_points(x)
        if not self.potentials:
            return np.zeros((x.shape[0], 0))
        return np.column_stack([q(x, kernel) for q in self.potentials])

    def bound_ratio(self, points, kernel) -> float:
        """Largest ``q/p`` over the sample points (the multiple of p bounding the dictionary)."""
        if self.reference is None:
            return np.inf
        p = self.reference(points, kernel)
        qs = np.abs(self.values(points, kernel))
        return float(np.max(qs / p[:, None])) if qs.size else 0.0

    def to_dict(self) -> dict:
        return {
            "potentials": [q.to_dict() for q in self.potentials],
            "reference": None if self.reference is None else self.reference.to_dict(),
        }


def integrate(mu: WeightedMeasure, q: PotentialSpec, kernel) -> tuple[float, float]:
    """``int q dmu`` and its standard error."""
    if len(mu) == 0:
        return 0.0, 0.0
    return mu.estimate(q(mu.points, kernel))


def integrate_all(mu: WeightedMeasure, D: Dictionary, kernel) -> tuple[np.ndarray, np.ndarray]:
    if len(mu) == 0:
        return np.zeros(len(D.potentials)), np.zeros(len(D.potentials))
    vals = D.values(mu.points, kernel)
    est = np.array([mu.estimate(vals[:, j]) for j in range(vals.shape[1])])
    return est[:, 0], est[:, 1]


@dataclass
class WeakDistance:
    distance: float
    values1: np.ndarray
    values2: np.ndarray
    stderr: np.ndarray
    ids: list

    @property
    def diffs(self) -> np.ndarray:
        return self.values1 - self.values2

    @property
    def sigma(self) -> float:
        """Standard error attached to the maximising test function."""
        if not len(self.ids):
            return 0.0
        return float(self.stderr[int(np.argmax(np.abs(self.diffs)))])

    def to_dict(self) -> dict:
        return {
            "distance": self.distance,
            "sigma": self.sigma,
            "per_function": [
                {"id": i, "value1": float(a), "value2": float(b), "diff": float(a - b), "stderr": float(s)}
                for i, a, b, s in zip(self.ids, self.values1, self.values2, self.stderr)
            ],
        }


def weak_distance(mu1: WeightedMeasure, mu2: WeightedMeasure, D: Dictionary, kernel) -> WeakDistance:
    """Max over the dictionary of ``|int q dmu1 - int q dmu2|`` with combined standard errors."""
    v1, s1 = integrate_all(mu1, D, kernel)
    v2, s2 = integrate_all(mu2, D, kernel)
    if mu1 is mu2:
        s = np.zeros_like(s1)
    else:
        s = np.sqrt(s1 ** 2 + s2 ** 2)
    diff = np.abs(v1 - v2)
    return WeakDistance(float(diff.max()) if len(diff) else 0.0, v1, v2, s, D.ids())
