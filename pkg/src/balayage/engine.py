"""Balayage of atomic measures by exact exit-law Markov chains.

Brownian motion (alpha = 2) is simulated by walk-on-spheres with an absorption
shell; the alpha-stable process by its exact ball-exit skeleton, which lands
inside stop balls with positive probability and needs no shell.  Walks are
processed in fixed-size chunks; every walker owns a random stream derived from
``(seed, stream, chunk, position)``, so results do not depend on the number of
workers and two runs with the same seed on different geometries use common
random numbers walker by walker.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .errors import ParameterError
from .geometry import BallUnion, DomainSpec, OpenRegion, _as_points
from ._chains import ABSORBED, LOST, OVERRUN, STOPPED_OUTER, BallIndex, walk_classical, walk_stable
from .kernels import KernelSpec, ball_hit_probability
from .measures import FREE, OUTER, WeightedMeasure

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class McParams:
    """Monte Carlo budget and chain controls.

    ``eps_shell`` is the absolute absorption shell of the classical walk; each
    stop ball additionally caps it at ``shell_ratio`` times its radius, so the
    shell never exceeds 1/50 of a target radius.  ``escape_radius`` of ``None``
    is chosen automatically from the stop geometry.
    """

    samples: int = 100_000
    eps_shell: float = 1e-4
    shell_ratio: float = 1e-3
    escape_radius: float | None = None
    max_steps: int = 100_000
    seed: int = 0
    workers: int = 1
    chunk: int = 8192
    escape_tolerance: float = 1e-4

    def __post_init__(self):
        if self.samples < 1:
            raise ParameterError("samples must be positive")
        if not self.eps_shell > 0:
            raise ParameterError("eps_shell must be positive")
        if not 0 < self.shell_ratio <= 1 / 50:
            raise ParameterError("shell_ratio must lie in (0, 1/50]")
        if self.max_steps < 1 or self.chunk < 1 or self.workers < 1:
            raise ParameterError("max_steps, chunk and workers must be positive")

    def with_seed(self, seed: int) -> "McParams":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "eps_shell": self.eps_shell,
            "shell_ratio": self.shell_ratio,
            "escape_radius": self.escape_radius,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "chunk": self.chunk,
        }


class StopSet:
    """``A union (X minus W)`` with killing outside ``X``.

    ``balls`` is the A part (closed balls; radius-zero balls are polar and
    ignored).  ``outer`` is the open set ``W``; ``None`` means ``W = X``.
    """

    def __init__(self, balls: BallUnion | None, outer: OpenRegion | None, domain: DomainSpec):
        dim = domain.dim
        self.all_balls = balls if balls is not None else BallUnion.empty(dim)
        if len(self.all_balls) and self.all_balls.dim != dim:
            raise ParameterError("stop balls and domain dimensions differ")
        keep = np.flatnonzero(self.all_balls.radii > 0)
        self.index = keep
        self.balls = self.all_balls.subset(keep)
        if outer is not None and outer.whole:
            if outer.hole_radii.size:
                raise ParameterError("the working set W must be bounded or the whole domain")
            outer = None
        self.outer = outer
        self.domain = domain
        self._domain_region = domain.region()

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def empty(self) -> bool:
        return len(self.balls) == 0 and self.outer is None and self.domain.kind == "full"

    def classify(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Status and label of points that are already stopped; ``FREE`` otherwise."""
        x = _as_points(x)
        n = x.shape[0]
        status = np.full(n, -1)
        labels = np.full(n, FREE, dtype=np.int64)
        out_x = ~self._domain_region.contains(x)
        status[out_x] = LOST
        loc = self.balls.locate(x)
        in_a = (loc >= 0) & ~out_x
        status[in_a] = ABSORBED
        labels[in_a] = self.index[loc[in_a]]
        if self.outer is not None:
            out_w = ~self.outer.contains(x) & ~out_x & ~in_a
            status[out_w] = STOPPED_OUTER
            labels[out_w] = OUTER
        return status, labels

    def origin_and_radius(self) -> tuple[np.ndarray, float]:
        """Center and radius of a ball enclosing every stop ball and the set ``W``."""
        parts_c, parts_r = [], []
        if len(self.balls):
            parts_c.append(self.balls.centers)
            parts_r.append(self.balls.radii)
        if self.outer is not None and not self.outer.whole:
            parts_c.append(self.outer.centers)
            parts_r.append(self.outer.radii)
        if not parts_c:
            return np.zeros(self.dim), 0.0
        c = np.vstack(parts_c)
        r = np.concatenate(parts_r)
        lo = np.min(c - r[:, None], axis=0)
        hi = np.max(c + r[:, None], axis=0)
        o = 0.5 * (lo + hi)
        return o, float(np.max(np.linalg.norm(c - o, axis=1) + r))


def _escape_radius(stop: StopSet, k: KernelSpec, mc: McParams, starts: np.ndarray) -> tuple[np.ndarray, float, float]:
    o, r_enc = stop.origin_and_radius()
    r_enc = max(r_enc, 1e-12)
    far = float(np.max(np.linalg.norm(starts - o, axis=1))) if len(starts) else 0.0
    esc = max(mc.escape_radius or 0.0, 10.0 * r_enc)
    if not k.classical:
        esc = max(esc, 4.0 * far)
        # smallest radius whose single-ball hit probability is below the tolerance
        if ball_hit_probability(k, r_enc, esc) > mc.escape_tolerance:
            f = lambda s: float(ball_hit_probability(k, r_enc, esc * s)) - mc.escape_tolerance
            hi = 2.0
            while f(hi) > 0:
                hi *= 2.0
            esc *= optimize.brentq(f, 1.0, hi, xtol=1e-6)
    return o, r_enc, esc


@dataclass(frozen=True)
class PathPolicy:
    """Alternative chain used by the path-following estimators.

    Classical: Gaussian increments of size ``sigma`` once the walker is within
    ``near`` of the stop balls.  Stable: ball exits from ``B(x, factor * rho)``.
    """

    sigma: float = 0.0
    near: float = 0.0
    factor: float = 1.0


STANDARD = PathPolicy()


@dataclass
class _ChunkTask:
    stop: StopSet
    kernel: KernelSpec
    mc: McParams
    starts: np.ndarray
    seeds: np.ndarray
    origin: np.ndarray
    r_enc: float
    escape: float
    policy: PathPolicy


def _geometry_arrays(stop: StopSet):
    d = stop.dim
    index = BallIndex(stop.balls.centers.reshape(-1, d), stop.balls.radii)
    outer = stop.outer
    if outer is not None:
        oc, orad = outer.centers, outer.radii
        hc, hrad = outer.hole_centers, outer.hole_radii
    else:
        oc, orad = np.zeros((0, d)), np.zeros(0)
        hc, hrad = np.zeros((0, d)), np.zeros(0)
    if stop.domain.kind == "ball":
        dc, dr = np.asarray(stop.domain.center, float), float(stop.domain.radius)
    else:
        dc, dr = np.zeros(d), np.inf
    region = tuple(np.ascontiguousarray(v, float) for v in (oc, orad, hc, hrad))
    return index.arrays(), (*region, outer is not None), (dc, dr, stop.domain.kind == "ball")


def _walk_chunk(task: _ChunkTask) -> dict:
    stop, k, mc, pol = task.stop, task.kernel, task.mc, task.policy
    n = task.starts.shape[0]
    grid, region, (dc, dr, has_dom) = _geometry_arrays(stop)
    free = stop.outer is None and not has_dom
    starts = np.ascontiguousarray(task.starts, float)
    bound = np.zeros(n)
    if k.classical:
        pos, status, labels, steps, returns = walk_classical(
            starts, task.seeds, *grid, *region, dc, dr, has_dom,
            mc.eps_shell, mc.shell_ratio, mc.max_steps, task.origin, 2.0 * task.r_enc, max(task.escape, 4.0 * task.r_enc), free,
            pol.sigma, pol.near)
    else:
        pos, status, labels, steps, esc = walk_stable(
            starts, task.seeds, k.alpha, *grid, *region, dc, dr, has_dom,
            mc.max_steps, task.origin, task.escape, free, pol.factor)
        gone = esc > 0
        if gone.any():
            bound[gone] = ball_hit_probability(k, task.r_enc, esc[gone])
        returns = 0
    hit = status == ABSORBED
    labels[hit] = stop.index[labels[hit]]
    labels[status == STOPPED_OUTER] = OUTER
    labels[(status == LOST) | (status == OVERRUN)] = FREE
    return {"pos": pos, "status": status, "labels": labels, "steps": steps, "bound": bound, "returns": int(returns)}


def walker_seeds(seed: int, stream, chunk: int, n: int) -> np.ndarray:
    """One 32-bit Mersenne-Twister seed per walker of a chunk."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in (*stream, chunk)))
    return ss.generate_state(max(n, 1), dtype=np.uint32)[:n]


def _run_walks(stop: StopSet, k: KernelSpec, mc: McParams, starts: np.ndarray, stream,
               policy: PathPolicy = STANDARD) -> dict:
    o, r_enc, esc = _escape_radius(stop, k, mc, starts)
    n = starts.shape[0]
    tasks = [
        _ChunkTask(stop, k, mc, starts[i: i + mc.chunk], walker_seeds(mc.seed, stream, c, min(mc.chunk, n - i)),
                   np.asarray(o, float), r_enc, esc, policy)
        for c, i in enumerate(range(0, n, mc.chunk))
    ]
    if mc.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=mc.workers) as pool:
            parts = list(pool.map(_walk_chunk, tasks))
    else:
        parts = [_walk_chunk(t) for t in tasks]
    if n == 0:
        out = {"pos": np.zeros((0, stop.dim)), "status": np.zeros(0, int), "labels": np.zeros(0, np.int64),
               "steps": np.zeros(0, np.int64), "bound": np.zeros(0)}
    else:
        out = {key: np.concatenate([p[key] for p in parts]) for key in ("pos", "status", "labels", "steps", "bound")}
    out["returns"] = sum(p["returns"] for p in parts)
    out["escape_radius"] = esc
    return out


def _check_mc(stop: StopSet, k: KernelSpec, mc: McParams) -> None:
    stop.domain.check_kernel(k.dim, k.alpha)


def balayage_measure(nu: WeightedMeasure, S: StopSet, k: KernelSpec, mc: McParams, stream=(0,),
                     policy: PathPolicy = STANDARD) -> WeightedMeasure:
    """Monte Carlo estimate of the swept measure ``nu^S``.

    Atoms already in the stop set are kept verbatim; every other atom launches
    a number of walks proportional to its weight.  Mass that is killed, escapes
    or exceeds ``max_steps`` is booked as ``lost_mass``.
    """
    _check_mc(S, k, mc)
    if nu.dim != S.dim:
        raise ParameterError("measure and stop set dimensions differ")
    stream = tuple(stream) if isinstance(stream, (tuple, list)) else (int(stream),)
    status0, labels0 = S.classify(nu.points) if len(nu) else (np.zeros(0, int), np.zeros(0, np.int64))
    keep = (status0 == ABSORBED) | (status0 == STOPPED_OUTER)
    killed0 = status0 == LOST
    walk = status0 < 0
    total = float(nu.weights[walk].sum())
    reps = np.zeros(len(nu), dtype=np.int64)
    if total > 0:
        reps[walk] = np.maximum(1, np.ceil(mc.samples * nu.weights[walk] / total - 1e-9)).astype(np.int64)
        reps[walk & (nu.weights == 0)] = 0
    src = np.repeat(np.arange(len(nu)), reps)
    starts = nu.points[src]
    w_walk = (nu.weights / np.maximum(reps, 1))[src]
    warnings = []
    escape_bound = 0.0
    mass_in = float(nu.weights[walk].sum())
    res = None
    mc_run = mc
    for attempt in range(4):
        res = _run_walks(S, k, mc_run, starts, stream, policy)
        escape_bound = float((w_walk * res["bound"]).sum())
        if mass_in == 0 or escape_bound <= mc.escape_tolerance * mass_in or S.domain.kind == "ball":
            break
        if attempt == 3:
            warnings.append(f"escape bound {escape_bound:.2e} exceeds tolerance after 3 doublings")
            break
        mc_run = replace(mc_run, escape_radius=2.0 * res["escape_radius"])
    st = res["status"]
    overrun = int((st == OVERRUN).sum())
    if len(st) and overrun > 1e-3 * len(st):
        warnings.append(f"{overrun} of {len(st)} walks exceeded max_steps={mc.max_steps}")

    # sampling units: deterministic source groups turn each walk into a unit
    n_units = nu.n_units.copy()
    unit_walk = nu.unit[src].copy()
    group_walk = nu.group[src].copy()
    det_groups = np.flatnonzero(nu.n_units <= 1)
    for g in det_groups:
        sel = group_walk == g
        cnt = int(sel.sum())
        if cnt:
            unit_walk[sel] = np.arange(cnt)
            n_units[g] = cnt
    # verbatim atoms of a deterministic group that also launched walks get their own group
    v_group = nu.group[keep].copy()
    v_unit = nu.unit[keep].copy()
    extra = []
    for j, g in enumerate(v_group):
        if nu.n_units[g] <= 1 and n_units[g] > 1:
            extra.append(j)
    n_extra = len(extra)
    if n_extra:
        v_group[extra] = len(n_units) + np.arange(n_extra)
        v_unit[extra] = 0
        n_units = np.concatenate([n_units, np.ones(n_extra, dtype=np.int64)])

    ok = (st == ABSORBED) | (st == STOPPED_OUTER)
    lost_walk = float(w_walk[~ok].sum())
    points = np.vstack([nu.points[keep], res["pos"][ok]])
    weights = np.concatenate([nu.weights[keep], w_walk[ok]])
    labels = np.concatenate([labels0[keep], res["labels"][ok]])
    group = np.concatenate([v_group, group_walk[ok]])
    unit = np.concatenate([v_unit, unit_walk[ok]])
    steps = res["steps"]
    diag = {
        "walks": int(len(st)),
        "absorbed_balls": int((st == ABSORBED).sum()),
        "stopped_outer": int((st == STOPPED_OUTER).sum()),
        "lost_walks": int((st == LOST).sum()),
        "overrun_walks": overrun,
        "mean_steps": float(steps.mean()) if len(steps) else 0.0,
        "max_steps_used": int(steps.max()) if len(steps) else 0,
        "escape_radius": float(res["escape_radius"]),
        "escape_bound": escape_bound,
        "escape_returns": int(res["returns"]),
        "eps_shell": mc.eps_shell if k.classical else None,
        "warnings": warnings,
    }
    for w in warnings:
        log.warning(w)
    return WeightedMeasure(
        points, weights, labels, group, unit, n_units,
        lost_mass=float(nu.lost_mass + nu.weights[killed0].sum() + lost_walk),
        total_input=float(nu.total_input),
        diagnostics=diag,
    )


def balayage_point(x, S: StopSet, k: KernelSpec, mc: McParams, stream=(0,)) -> WeightedMeasure:
    """Monte Carlo estimate of ``epsilon_x^S``."""
    x = np.asarray(x, float).reshape(-1)
    if not S.domain.contains(x)[0]:
        raise ParameterError("starting point must lie in the domain X")
    return balayage_measure(WeightedMeasure.dirac(x), S, k, mc, stream)


def ball_mass_estimates(mu: WeightedMeasure, n_balls: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-ball masses ``mu(B_i)`` (by absorption label) and their standard errors."""
    masses = mu.ball_masses(n_balls)
    var = np.zeros(n_balls)
    sel = mu.labels >= 0
    for g in np.unique(mu.group[sel]):
        n = int(mu.n_units[g])
        if n <= 1:
            continue
        rows = sel & (mu.group == g)
        key = mu.labels[rows].astype(np.int64) * n + mu.unit[rows]
        uk, inv = np.unique(key, return_inverse=True)
        s = np.bincount(inv, weights=mu.weights[rows])
        ball = uk // n
        s1 = np.bincount(ball, weights=s, minlength=n_balls)[:n_balls]
        s2 = np.bincount(ball, weights=s * s, minlength=n_balls)[:n_balls]
        # Y = n * S over n units, zeros included
        var += n * (s2 - s1 * s1 / n) / (n - 1)
    return masses, np.sqrt(np.maximum(var, 0.0))


def mass_vector(nu: WeightedMeasure, S: StopSet, balls=None, k: KernelSpec | None = None, mc: McParams | None = None,
                stream=(0,), swept: WeightedMeasure | None = None) -> tuple[np.ndarray, np.ndarray, WeightedMeasure]:
    """Estimated ``nu^S(B_i)`` for the stop balls (all, or the given indices) with standard errors."""
    mu = swept if swept is not None else balayage_measure(nu, S, k, mc, stream)
    m = len(S.all_balls)
    masses, se = ball_mass_estimates(mu, m)
    if balls is not None:
        idx = np.asarray(balls, dtype=np.int64)
        return masses[idx], se[idx], mu
    return masses, se, mu


def hit_probability(x, A: BallUnion, X: DomainSpec, k: KernelSpec, mc: McParams, stream=(0,)) -> tuple[float, float]:
    """``epsilon_x^A(1)`` (the regularised reduced function of 1 at ``x``) and its standard error."""
    mu = balayage_point(x, StopSet(A, None, X), k, mc, stream)
    return mu.estimate(np.ones(len(mu)))


def reduced_measure_closed(nu: WeightedMeasure, A: BallUnion, X: DomainSpec, k: KernelSpec, mc: McParams,
                           stream=(0,)) -> WeightedMeasure:
    """``nu|_A + (nu|_{A^c})^A`` for a closed ball union ``A``."""
    from .measures import combine

    S = StopSet(A, None, X)
    status, labels = S.classify(nu.points)
    inside = status == ABSORBED
    kept = nu.restrict(inside).with_labels(labels[inside])
    rest = nu.restrict(~inside)
    if len(rest) == 0:
        return kept
    swept = balayage_measure(rest, S, k, mc, stream)
    if len(kept) == 0:
        return swept
    return combine(kept, swept)


def shell_bias_budget(S: StopSet, mc: McParams) -> float:
    """First-order relative bias of the classical shell: ``max shell/radius`` over stop balls."""
    if not len(S.balls):
        return mc.eps_shell
    shell = np.minimum(mc.eps_shell, mc.shell_ratio * S.balls.radii)
    return float(np.max(shell / S.balls.radii))


__all__ = [
    "McParams", "StopSet", "PathPolicy", "balayage_point", "balayage_measure", "mass_vector", "hit_probability",
    "reduced_measure_closed", "ball_mass_estimates", "shell_bias_budget", "ABSORBED", "STOPPED_OUTER", "LOST",
    "OVERRUN",
]
