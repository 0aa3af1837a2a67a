"""Per-ball shrink factors realising prescribed swept masses.

For a family of disjoint closed balls ``B_1..B_m`` and a source ``nu`` off
their union, ``A_s`` denotes the union of the shrunken balls ``B_i^{s_i}``.
The mass ``nu^{A_s}(B_i^{s_i})`` grows with ``s_i`` and falls when any other
coordinate grows, so the set of vectors meeting upper bounds ``gamma`` is a
lattice with a largest element.  Gauss-Seidel sweeps of coordinate bisection,
started from ``s = 1``, decrease monotonically towards it.

Every mass evaluation inside one solve reuses the same random stream (common
random numbers), which turns ``s -> masses`` into a deterministic surrogate;
the result is then re-estimated with an independent seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import McParams, StopSet, mass_vector
from .errors import ParameterError, SolverFailure, StructuralError
from .geometry import BallUnion, DomainSpec, OpenRegion, validate_delta_family
from .kernels import KernelSpec
from .measures import WeightedMeasure

log = logging.getLogger(__name__)

CAPS, FRACTIONS, JOINT, JOINT_SCALED = "caps", "fractions", "joint", "joint_scaled"


@dataclass
class ShrinkOptions:
    """Solver budgets.  ``mode`` is ``auto``, ``gauss-seidel`` or ``jacobi``;
    ``auto`` picks Gauss-Seidel up to ``jacobi_above`` balls."""

    tau_s: float = 1e-3
    tau_mass: float = 2e-3
    depth: int = 20
    max_sweeps: int = 12
    mode: str = "auto"
    jacobi_above: int = 8
    jacobi_iterations: int = 40
    jacobi_damping: float = 0.8
    revalidate: bool = True
    solve_stream: int = 101
    target_stream: int = 102

    def __post_init__(self):
        if self.mode not in ("auto", "gauss-seidel", "jacobi"):
            raise ParameterError(f"unknown solver mode {self.mode!r}")
        if not (0 < self.tau_s < 1 and self.tau_mass > 0 and self.depth >= 1 and self.max_sweeps >= 1):
            raise ParameterError("solver tolerances and budgets must be positive")

    def to_dict(self) -> dict:
        return {
            "tau_s": self.tau_s, "tau_mass": self.tau_mass, "depth": self.depth, "max_sweeps": self.max_sweeps,
            "mode": self.mode, "jacobi_above": self.jacobi_above,
        }


@dataclass
class ShrinkProblem:
    """Balls, source and (for the joint modes) partition and simplex weights.

    ``outer`` is the working set ``W``; the stop set is then ``A_s`` together
    with the complement of ``W``, which realises balayage relative to ``W``.
    """

    balls: BallUnion
    nu: WeightedMeasure
    domain: DomainSpec
    outer: OpenRegion | None = None
    partition: np.ndarray | None = None
    lam: np.ndarray | None = None
    delta: float | None = None
    alpha: float = 2.0
    blocks: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.balls)
        if m == 0:
            raise ParameterError("the ball family is empty")
        if not self.balls.disjoint:
            pairs = self.balls.overlapping_pairs()
            if pairs:
                raise StructuralError(f"balls {pairs[0]} overlap")
        if len(self.nu) and np.any(self.balls.locate(self.nu.points) >= 0):
            raise ParameterError("the source must not charge the ball family")
        if self.partition is not None:
            self.partition = np.asarray(self.partition, dtype=np.int64).reshape(-1)
            if len(self.partition) != m:
                raise ParameterError("the partition must assign every ball to a group")
            k = int(self.partition.max()) + 1
            if self.partition.min() < 0:
                raise ParameterError("group indices must be nonnegative")
            if self.lam is None:
                raise ParameterError("a partition needs simplex weights")
            self.lam = np.asarray(self.lam, float).reshape(-1)
            if len(self.lam) < k:
                raise ParameterError("one weight per group is required")
            check_simplex(self.lam)

    @property
    def m(self) -> int:
        return len(self.balls)

    @property
    def k(self) -> int:
        return 0 if self.lam is None else len(self.lam)

    def stop_set(self, s=None) -> StopSet:
        balls = self.balls if s is None else self.balls.shrink(s)
        return StopSet(balls, self.outer, self.domain)

    def delta_domain(self):
        return self.outer if self.outer is not None else self.domain


def check_simplex(lam, tol: float = 1e-9) -> None:
    lam = np.asarray(lam, float)
    if np.any(lam < -tol) or abs(lam.sum() - 1.0) > tol:
        raise ParameterError(f"weights {lam.tolist()} are not in the simplex (sum {lam.sum():.6g})")


@dataclass
class ShrinkSolution:
    s: np.ndarray
    achieved: np.ndarray
    achieved_se: np.ndarray
    targets: np.ndarray
    target_se: np.ndarray
    residuals: np.ndarray
    tolerance: np.ndarray
    trace: list = field(default_factory=list)
    evaluations: int = 0
    method: str = ""
    revalidation: dict | None = None
    checks: dict = field(default_factory=dict)
    group_sweeps: dict = field(default_factory=dict, repr=False)

    @property
    def converged(self) -> bool:
        return bool(self.checks.get("residuals_ok", False))

    def to_dict(self) -> dict:
        out = {
            "s": self.s.tolist(),
            "achieved": self.achieved.tolist(),
            "achieved_stderr": self.achieved_se.tolist(),
            "targets": self.targets.tolist(),
            "target_stderr": self.target_se.tolist(),
            "residuals": self.residuals.tolist(),
            "tolerance": self.tolerance.tolist(),
            "evaluations": self.evaluations,
            "method": self.method,
            "checks": self.checks,
            "trace_length": len(self.trace),
        }
        if self.revalidation is not None:
            out["revalidation"] = self.revalidation
        return out


class MassOracle:
    """``s -> (nu^{A_s}(B_i^{s_i}))_i`` with one fixed random stream; results are memoised."""

    def __init__(self, prob: ShrinkProblem, k: KernelSpec, mc: McParams, stream: int):
        self.prob, self.k, self.mc, self.stream = prob, k, mc, (int(stream),)
        self.cache: dict = {}
        self.calls = 0

    def __call__(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.clip(np.asarray(s, float), 0.0, 1.0)
        key = tuple(np.round(s, 12))
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        self.calls += 1
        if len(self.prob.nu) == 0:
            out = (np.zeros(self.prob.m), np.zeros(self.prob.m))
        else:
            masses, se, _ = mass_vector(self.prob.nu, self.prob.stop_set(s), None, self.k, self.mc, self.stream)
            out = (masses, se)
        self.cache[key] = out
        return out


def _tolerance(prob: ShrinkProblem, opts: ShrinkOptions, se_a, se_t) -> np.ndarray:
    return np.maximum(opts.tau_mass * prob.nu.mass, 3.0 * np.sqrt(se_a ** 2 + se_t ** 2))


def _gauss_seidel(oracle: MassOracle, gamma: np.ndarray, s: np.ndarray, free: np.ndarray, opts: ShrinkOptions, trace,
                  tol: np.ndarray):
    for sweep in range(opts.max_sweeps):
        moved = 0.0
        for i in np.flatnonzero(free):
            f, _ = oracle(s)
            if f[i] <= gamma[i]:
                continue
            lo, hi = 0.0, s[i]
            flo, fhi = -gamma[i], f[i] - gamma[i]
            side = 0
            for it in range(opts.depth):
                if hi - lo <= opts.tau_s * 0.5 or (lo > 0 and -flo <= 0.5 * tol[i]):
                    break
                # Illinois false position, with plain bisection every third step
                if it % 3 == 2 or fhi <= flo:
                    mid = 0.5 * (lo + hi)
                else:
                    mid = hi - fhi * (hi - lo) / (fhi - flo)
                    mid = min(max(mid, lo + 0.05 * (hi - lo)), hi - 0.05 * (hi - lo))
                t = s.copy()
                t[i] = mid
                g = oracle(t)[0][i] - gamma[i]
                if g <= 0:
                    lo, flo = mid, g
                    if side == -1:
                        fhi *= 0.5
                    side = -1
                else:
                    hi, fhi = mid, g
                    if side == 1:
                        flo *= 0.5
                    side = 1
            moved = max(moved, s[i] - lo)
            s[i] = lo
            fs, _ = oracle(s)
            trace.append({"sweep": sweep, "ball": int(i), "s": s.tolist(), "masses": fs.tolist(),
                          "feasible": bool(np.all(fs <= gamma + 1e-15))})
        f, se = oracle(s)
        res = f - gamma
        settled = np.where(s < 1.0, np.abs(res) <= tol, res <= tol) | ~free
        if moved < opts.tau_s or settled.all():
            break
    return s


def _block_check(blocks, s, free, f, se, gamma, target_se, floor):
    """Pooled residuals per block with their tolerances and pass flags."""
    nb = int(blocks.max()) + 1
    agg = lambda v: np.bincount(blocks, weights=v, minlength=nb)
    res_b = agg(f) - agg(gamma)
    tol_b = np.maximum(floor, 3.0 * np.sqrt(agg(se ** 2) + agg(target_se ** 2)))
    full_b = agg((s >= 1.0).astype(float)) > 0
    free_b = agg(free.astype(float)) > 0
    ok_b = np.where(full_b, res_b <= tol_b, np.abs(res_b) <= tol_b) | ~free_b
    return res_b, tol_b, ok_b


def _jacobi(oracle: MassOracle, gamma: np.ndarray, s: np.ndarray, free: np.ndarray, opts: ShrinkOptions, trace,
            expo: float, tol: np.ndarray, blocks: np.ndarray | None = None):
    """Simultaneous capacity-scaling updates ``s_b <- s_b (gamma_b/F_b)^(1/(d-alpha))``.

    ``blocks`` groups balls whose masses are pooled (one common factor per
    block); without it every ball is its own block.
    """
    m = len(s)
    blocks = np.arange(m) if blocks is None else np.asarray(blocks, dtype=np.int64)
    nb = int(blocks.max()) + 1
    g_b = np.bincount(blocks, weights=gamma, minlength=nb)
    best = None
    for it in range(opts.jacobi_iterations):
        f, se = oracle(s)
        f_b = np.bincount(blocks, weights=f, minlength=nb)
        res_b, tol_b, ok_b = _block_check(blocks, s, free, f, se, gamma, np.zeros(m), opts.tau_mass * oracle.prob.nu.mass)
        res = f - gamma
        ok = np.where(s < 1.0, np.abs(res) <= tol, res <= tol) | ~free
        trace.append({"sweep": it, "s": s.tolist(), "masses": f.tolist(), "max_residual": float(np.max(np.abs(res))),
                      "max_block_residual": float(np.max(np.abs(res_b))),
                      "feasible": bool(np.all(f <= gamma + 1e-15))})
        score = float(np.max(np.abs(res_b) - tol_b, initial=-np.inf))
        if best is None or score < best[0]:
            best = (score, s.copy())
        if ok.all() and ok_b.all():
            return s
        ratio = np.where(f_b > 0, g_b / np.maximum(f_b, 1e-300), 2.0)
        step = np.clip(ratio, 0.25, 4.0) ** (opts.jacobi_damping * expo)
        new = np.where(free, np.clip(s * step[blocks], 0.0, 1.0), s)
        if np.max(np.abs(new - s)) < opts.tau_s * 1e-2:
            break
        s = new
    return best[1]


def solve_max_shrink(prob: ShrinkProblem, gamma, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None,
                     target_se=None) -> ShrinkSolution:
    """Largest ``s`` in ``[0,1]^m`` with ``nu^{A_s}(B_i^{s_i}) <= gamma_i`` for every ``i``.

    ``gamma_i = 0`` pins ``s_i = 0`` (points are polar).  Raises
    :class:`SolverFailure` when a free coordinate misses its target by more than
    ``max(tau_mass * mass, 3 sigma)``.
    """
    opts = opts or ShrinkOptions()
    gamma = np.asarray(gamma, float).reshape(-1)
    if len(gamma) != prob.m:
        raise ParameterError("one target per ball is required")
    if np.any(gamma < 0):
        raise ParameterError("targets must be nonnegative")
    target_se = np.zeros(prob.m) if target_se is None else np.asarray(target_se, float)
    oracle = MassOracle(prob, k, mc, opts.solve_stream)
    s = np.ones(prob.m)
    free = gamma > 0
    if prob.blocks is not None:
        # an unsampled ball inside a block with positive target is not a zero-target ball
        blk = np.asarray(prob.blocks, np.int64)
        free = np.bincount(blk, weights=gamma)[blk] > 0
    s[~free] = 0.0
    trace: list = []
    f1, se1 = oracle(s)
    method = opts.mode
    if method == "auto":
        method = "gauss-seidel" if prob.m <= opts.jacobi_above else "jacobi"
    tol0 = _tolerance(prob, opts, se1, target_se)
    if method == "gauss-seidel":
        s = _gauss_seidel(oracle, gamma, s, free, opts, trace, tol0)
    else:
        s = _jacobi(oracle, gamma, s, free, opts, trace, 1.0 / (k.dim - k.alpha), tol0, prob.blocks)
    achieved, se = oracle(s)
    tol = _tolerance(prob, opts, se, target_se)
    res = achieved - gamma
    # equality where the ball is shrunk, upper bound where it is kept whole
    ok = np.where(s < 1.0, np.abs(res) <= tol, res <= tol)
    ok |= ~free & (achieved <= tol)
    sol = ShrinkSolution(
        s=s, achieved=achieved, achieved_se=se, targets=gamma, target_se=target_se, residuals=res,
        tolerance=tol, trace=trace, evaluations=oracle.calls, method=method,
    )
    sol.checks["residuals_ok"] = bool(ok.all())
    if prob.blocks is not None:
        # per-ball masses are below Monte Carlo resolution; pooled blocks carry the test
        res_b, tol_b, ok_b = _block_check(np.asarray(prob.blocks, np.int64), s, free, achieved, se, gamma, target_se,
                                          opts.tau_mass * prob.nu.mass)
        sol.checks["block_residuals_ok"] = bool(ok_b.all())
        sol.checks["max_block_excess"] = float(np.max(np.abs(res_b) - tol_b))
        ok = ok & ok_b[np.asarray(prob.blocks, np.int64)]
    sol.checks["lipschitz_estimate"] = _lipschitz(trace)
    if opts.revalidate:
        sol.revalidation = revalidate(prob, sol, k, mc.with_seed(mc.seed + 7919), opts)
    if not ok.all():
        bad = np.flatnonzero(~ok)
        raise SolverFailure(
            f"shrink residuals exceed tolerance on balls {bad.tolist()}",
            {"solution": sol.to_dict(), "trace": trace},
        )
    return sol


def _lipschitz(trace: list) -> float | None:
    """Largest observed ``|delta mass| / |delta s|`` between consecutive sweeps."""
    best = None
    for a, b in zip(trace, trace[1:]):
        ds = np.max(np.abs(np.subtract(a["s"], b["s"])))
        if ds > 0:
            dm = np.max(np.abs(np.subtract(a["masses"], b["masses"])))
            best = max(best or 0.0, float(dm / ds))
    return best


def revalidate(prob: ShrinkProblem, sol: ShrinkSolution, k: KernelSpec, mc: McParams,
               opts: ShrinkOptions | None = None) -> dict:
    """Re-estimate the achieved masses with an independent stream and compare with the targets."""
    opts = opts or ShrinkOptions()
    masses, se, _ = mass_vector(prob.nu, prob.stop_set(sol.s), None, k, mc, (opts.solve_stream + 1,))
    # s was fitted on the solve stream, so its error enters as well
    sigma = np.sqrt(se ** 2 + sol.target_se ** 2 + sol.achieved_se ** 2)
    tol = np.maximum(opts.tau_mass * prob.nu.mass, 3.0 * sigma)
    diff = masses - sol.targets
    ok = np.where(sol.s < 1.0, np.abs(diff) <= tol, diff <= tol)
    if prob.blocks is not None:
        blocks = np.asarray(prob.blocks, np.int64)
        _, _, ok_b = _block_check(blocks, sol.s, sol.targets > 0, masses, se, sol.targets, sol.target_se,
                                  opts.tau_mass * prob.nu.mass)
        ok = ok & ok_b[blocks]
    return {
        "seed": mc.seed,
        "masses": masses.tolist(),
        "stderr": se.tolist(),
        "diff": diff.tolist(),
        "z": (diff / np.where(sigma > 0, sigma, np.inf)).tolist(),
        "ok": bool(ok.all()),
    }


def join_closure_check(prob: ShrinkProblem, sol: ShrinkSolution, k: KernelSpec, mc: McParams,
                       opts: ShrinkOptions | None = None, pairs: int = 3) -> dict:
    """The componentwise max of feasible trace vectors is feasible again (to 3 sigma)."""
    opts = opts or ShrinkOptions()
    feas = [np.asarray(t["s"]) for t in sol.trace if t.get("feasible")]
    oracle = MassOracle(prob, k, mc, opts.solve_stream)
    results = []
    rng = np.random.default_rng(mc.seed)
    for _ in range(pairs if len(feas) >= 2 else 0):
        a, b = rng.choice(len(feas), 2, replace=False)
        j = np.maximum(feas[a], feas[b])
        f, se = oracle(j)
        ok = bool(np.all(f <= sol.targets + np.maximum(3 * se, 1e-15)))
        results.append({"s": j.tolist(), "ok": ok})
    return {"checked": len(results), "ok": all(r["ok"] for r in results), "pairs": results}


def fraction_shrink(prob: ShrinkProblem, beta, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None
                    ) -> ShrinkSolution:
    """Shrink so that each ball keeps the fraction ``beta_i`` of its full swept mass."""
    opts = opts or ShrinkOptions()
    beta = np.asarray(beta, float).reshape(-1)
    if len(beta) != prob.m or np.any(beta < 0) or np.any(beta > 1):
        raise ParameterError("fractions must lie in [0, 1], one per ball")
    # common random numbers with the solver: beta_i = 1 keeps the ball whole exactly
    full, se = MassOracle(prob, k, mc, opts.solve_stream)(np.ones(prob.m))
    return solve_max_shrink(prob, beta * full, k, mc, opts, target_se=beta * se)


def group_sweeps(prob: ShrinkProblem, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None
                 ) -> tuple[np.ndarray, np.ndarray, dict]:
    """``nu^{K_n}(B_i)`` for ``i`` in group ``n`` (``K_n`` the union of group ``n``), relative to ``W``,
    together with the swept measures (labels refer to positions inside each group)."""
    opts = opts or ShrinkOptions()
    masses = np.zeros(prob.m)
    se = np.zeros(prob.m)
    sweeps = {}
    for n in range(prob.k):
        idx = np.flatnonzero(prob.partition == n)
        if len(idx) == 0 or prob.lam[n] == 0:
            continue
        sub = StopSet(prob.balls.subset(idx), prob.outer, prob.domain)
        mm, ss, mu = mass_vector(prob.nu, sub, None, k, mc, (opts.target_stream, n))
        masses[idx], se[idx] = mm, ss
        sweeps[n] = mu
    return masses, se, sweeps


def group_masses(prob: ShrinkProblem, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    masses, se, _ = group_sweeps(prob, k, mc, opts)
    return masses, se


def joint_targets(prob: ShrinkProblem, beta, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None):
    if prob.partition is None or prob.delta is None:
        raise ParameterError("joint shrinking needs a partition, weights and delta")
    rep = validate_delta_family(prob.balls, prob.delta, prob.delta_domain(), prob.alpha)
    if not rep.valid:
        raise StructuralError(
            f"not a delta-family at delta={prob.delta}: min slack {rep.slack.min():.3e}, delta0={rep.delta0:.4f}"
        )
    masses, se, sweeps = group_sweeps(prob, k, mc, opts)
    w = (1.0 - prob.delta) * prob.lam[prob.partition] * beta
    return w * masses, w * se, rep, sweeps


def joint_shrink(prob: ShrinkProblem, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None
                 ) -> ShrinkSolution:
    """``nu^C(B_i) = (1 - delta) lambda_n nu^{K_n}(B_i)`` for ``i`` in group ``n``."""
    return joint_shrink_scaled(prob, np.ones(prob.m), k, mc, opts)


def joint_shrink_scaled(prob: ShrinkProblem, beta, k: KernelSpec, mc: McParams, opts: ShrinkOptions | None = None
                        ) -> ShrinkSolution:
    """Joint shrinking with the per-ball targets further multiplied by ``beta_i``."""
    opts = opts or ShrinkOptions()
    beta = np.asarray(beta, float).reshape(-1)
    if len(beta) != prob.m or np.any(beta < 0) or np.any(beta > 1):
        raise ParameterError("fractions must lie in [0, 1], one per ball")
    gamma, gse, rep, sweeps = joint_targets(prob, beta, k, mc, opts)
    sol = solve_max_shrink(prob, gamma, k, mc, opts, target_se=gse)
    sol.group_sweeps = sweeps
    positive = gamma > sol.tolerance
    sol.checks["boundary_clause_ok"] = bool(np.all(sol.s[positive] < 1.0))
    sol.checks["delta_family"] = rep.to_dict()
    if not sol.checks["boundary_clause_ok"]:
        log.warning("a ball with positive target kept its full radius")
    return sol


__all__ = [
    "ShrinkOptions", "ShrinkProblem", "ShrinkSolution", "MassOracle", "solve_max_shrink", "fraction_shrink",
    "joint_shrink", "joint_shrink_scaled", "group_masses", "group_sweeps", "revalidate", "join_closure_check", "check_simplex",
]
