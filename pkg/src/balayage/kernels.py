"""Exit laws of balls for Brownian motion (alpha = 2) and isotropic alpha-stable
processes (0 < alpha < 2): densities, samplers, the normalising constant and the
Harnack-type ratio bound."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import NumericalError, ParameterError
from .geometry import Ball, _as_points


@dataclass(frozen=True)
class KernelSpec:
    dim: int
    alpha: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.dim < 1:
            raise ParameterError("dimension must be >= 1")
        if self.alpha == 2.0:
            if self.dim < 2:
                raise ParameterError("classical kernel needs d >= 2")
        elif not (0.0 < self.alpha < 2.0 and self.dim > self.alpha):
            raise ParameterError(f"Riesz kernel needs 0 < alpha < 2 and d > alpha (got d={self.dim}, alpha={self.alpha})")

    @property
    def classical(self) -> bool:
        return self.alpha == 2.0

    def to_dict(self) -> dict:
        return {"dim": self.dim, "alpha": self.alpha}


def harnack_bound(eta: float, k: KernelSpec) -> float:
    """Upper bound for the density ratio of two starting points within ``eta*r`` of the center."""
    if not 0.0 < eta < 1.0:
        raise ParameterError("eta must lie in (0, 1)")
    d, a = k.dim, k.alpha
    return (1 + eta) ** (d - a / 2) / (1 - eta) ** (d + a / 2)


@functools.lru_cache(maxsize=None)
def delta_zero(d: int, alpha: float) -> float:
    """Largest delta <= 0.5 with ``harnack_bound(delta/(3d)) <= 1 + delta`` (bisection to 1e-12)."""
    def excess(delta):
        eta = delta / (3 * d)
        b = (1 + eta) ** (d - alpha / 2) / (1 - eta) ** (d + alpha / 2)
        return b - 1 - delta

    grid = np.linspace(0, 0.5, 2001)[1:]
    vals = np.array([excess(t) for t in grid])
    bad = np.flatnonzero(vals > 0)
    if len(bad) == 0:
        return 0.5
    hi = grid[bad[0]]
    lo = grid[bad[0] - 1] if bad[0] > 0 else 0.0
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


@functools.lru_cache(maxsize=None)
def riesz_constant(k: KernelSpec) -> float:
    """Constant ``a_alpha`` normalising the exterior exit density to total mass one.

    Computed from the center of the unit ball, where the density is radial:
    ``1 = a * |S^{d-1}| * int_1^inf (u^2 - 1)^(-alpha/2) u^(-1) du``.
    """
    if k.classical:
        raise ParameterError("the normalising constant is only defined for alpha < 2")
    a = k.alpha
    near, err1 = integrate.quad(
        lambda u: (u + 1) ** (-a / 2) / u, 1.0, 2.0, weight="alg", wvar=(-a / 2, 0.0), epsabs=1e-13, epsrel=1e-12
    )
    far, err2 = integrate.quad(lambda u: (u * u - 1) ** (-a / 2) / u, 2.0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    total = near + far
    if err1 + err2 > 1e-8 * total:
        raise NumericalError("radial normalisation quadrature did not converge", {"abserr": err1 + err2})
    return 1.0 / (_sphere_area(k.dim) * total)


def _check_ball_point(ball: Ball, y) -> tuple[np.ndarray, float, float]:
    y = np.asarray(y, float)
    c = ball.c
    if y.shape[-1] != len(c):
        raise ParameterError("point and ball dimensions differ")
    r = ball.radius
    if r <= 0:
        raise ParameterError("exit laws need a ball of positive radius")
    dy = float(np.linalg.norm(y - c))
    if not dy < r:
        raise ParameterError("starting point must lie in the open ball")
    return y, r, dy


def classical_poisson_density(ball: Ball, y, z) -> np.ndarray:
    """Poisson kernel w.r.t. normalised surface measure on the sphere ``∂ball``."""
    y, r, dy = _check_ball_point(ball, y)
    z = _as_points(z)
    d = len(ball.center)
    nz = np.linalg.norm(z - ball.c, axis=1)
    if np.any(np.abs(nz - r) > 1e-9 * r):
        raise ParameterError("z must lie on the sphere")
    return r ** (d - 2) * (r * r - dy * dy) * np.linalg.norm(y - z, axis=1) ** (-d)


def riesz_poisson_density(ball: Ball, y, z, k: KernelSpec) -> np.ndarray:
    """Exit density of the alpha-stable process w.r.t. Lebesgue measure on the exterior."""
    if k.classical:
        raise ParameterError("use classical_poisson_density for alpha = 2")
    y, r, dy = _check_ball_point(ball, y)
    z = _as_points(z)
    nz = np.linalg.norm(z - ball.c, axis=1)
    if np.any(nz <= r):
        raise ParameterError("z must lie outside the closed ball")
    a = k.alpha
    return (
        riesz_constant(k)
        * ((r * r - dy * dy) / (nz * nz - r * r)) ** (a / 2)
        * np.linalg.norm(z - y, axis=1) ** (-k.dim)
    )


def uniform_directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if d == 1:
        return np.where(rng.random((n, 1)) < 0.5, -1.0, 1.0)
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def directions_from_normals(g: np.ndarray) -> np.ndarray:
    """Map standard normal rows to uniform unit vectors (sign for d = 1)."""
    if g.shape[1] == 1:
        return np.where(g >= 0, 1.0, -1.0)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def stable_radius_factor(u: np.ndarray, alpha: float) -> np.ndarray:
    """Inverse-CDF map from uniforms to ``|Z - c|/r`` for exit from the center.

    ``r^2/|Z - c|^2`` is Beta(alpha/2, 1 - alpha/2) distributed.
    """
    t = special.betaincinv(alpha / 2, 1 - alpha / 2, u)
    return 1.0 / np.sqrt(np.maximum(t, 1e-300))


def _rejection(rng, n, propose, accept_ratio):
    out = None
    filled = 0
    while filled < n:
        m = max(16, int(1.3 * (n - filled)) + 8)
        cand = propose(m)
        keep = rng.random(m) < accept_ratio(cand)
        cand = cand[keep][: n - filled]
        out = cand if out is None else np.vstack([out, cand])
        filled = out.shape[0]
    return out


def sample_exit_classical(ball: Ball, y, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Points of ``∂ball`` distributed as the exit position of Brownian motion from ``y``.

    Uniform from the center; otherwise exact rejection from the uniform law with
    envelope ``(1 + eta)/(1 - eta)^(d-1)``, ``eta = |y - c|/r``.
    """
    y, r, dy = _check_ball_point(ball, y)
    c = ball.c
    d = len(c)
    if dy == 0.0:
        return c + r * uniform_directions(rng, size, d)
    eta = dy / r
    envelope = (1 + eta) / (1 - eta) ** (d - 1)

    def propose(m):
        return c + r * uniform_directions(rng, m, d)

    def ratio(z):
        return classical_poisson_density(ball, y, z) / envelope

    return _rejection(rng, size, propose, ratio)


def sample_exit_classical_many(center, radius: float, ys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_exit_classical` for many starting points in one ball."""
    c = np.asarray(center, float)
    ys = _as_points(ys)
    n, d = ys.shape
    r = float(radius)
    dy = np.linalg.norm(ys - c, axis=1)
    if np.any(dy >= r):
        raise ParameterError("starting points must lie in the open ball")
    eta = dy / r
    envelope = (1 + eta) / (1 - eta) ** (d - 1)
    out = np.empty((n, d))
    todo = np.arange(n)
    while todo.size:
        z = c + r * uniform_directions(rng, todo.size, d)
        dens = r ** (d - 2) * (r * r - dy[todo] ** 2) * np.linalg.norm(ys[todo] - z, axis=1) ** (-d)
        ok = rng.random(todo.size) * envelope[todo] < dens
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def sample_exit_riesz(ball: Ball, y, k: KernelSpec, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Exterior points distributed as the first position of the stable process outside ``ball``.

    Exact radial inversion from the center; off-center points use rejection from
    the centered law with envelope ``(1 - eta^2)^(alpha/2) / (1 - eta)^d``.
    """
    if k.classical:
        raise ParameterError("use sample_exit_classical for alpha = 2")
    y, r, dy = _check_ball_point(ball, y)
    c = ball.c
    d, a = k.dim, k.alpha

    def propose(m):
        rad = r * stable_radius_factor(rng.random(m), a)
        return c + rad[:, None] * uniform_directions(rng, m, d)

    if dy == 0.0:
        return propose(size)
    eta = dy / r
    log_env = (a / 2) * math.log1p(-eta * eta) - d * math.log1p(-eta)

    def ratio(z):
        nz = np.linalg.norm(z - c, axis=1)
        log_ratio = (a / 2) * math.log1p(-eta * eta) + d * (np.log(nz) - np.log(np.linalg.norm(z - y, axis=1)))
        return np.exp(log_ratio - log_env)

    return _rejection(rng, size, propose, ratio)


def ball_hit_probability(k: KernelSpec, radius: float, distance) -> np.ndarray:
    """Probability that the process started at ``distance`` from the center ever hits the ball.

    ``I_{(r/|x|)^2}((d - alpha)/2, alpha/2)`` (regularised incomplete beta); reduces
    to ``(r/|x|)^(d-2)`` in the classical case.
    """
    distance = np.asarray(distance, float)
    t = np.clip((radius / np.maximum(distance, radius)) ** 2, 0.0, 1.0)
    return special.betainc((k.dim - k.alpha) / 2, k.alpha / 2, t)
