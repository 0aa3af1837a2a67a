"""Command-line runner: JSON configs in, JSON/CSV reports out.

Exit status is 0 on success, 2 for schema or precondition errors and 3 when a
solver or Monte Carlo stage fails.  Reports are written as ``<name>.json``,
``<name>.csv`` and ``<name>.txt`` (summary) in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import pipeline as pl
from .engine import McParams, StopSet, ball_mass_estimates, balayage_measure
from .errors import NumericalError, ParameterError, StructuralError
from .geometry import Ball, BallUnion, DomainSpec, OpenRegion, validate_delta_family
from .kernels import KernelSpec
from .measures import Dictionary, PotentialSpec, WeightedMeasure
from .shrink import ShrinkOptions, ShrinkProblem, check_simplex, fraction_shrink, joint_shrink

log = logging.getLogger("balayage")

EXIT_OK, EXIT_PRECONDITION, EXIT_SOLVER = 0, 2, 3
COMMANDS = ("balayage", "shrink", "theorem", "grid-approx", "jensen", "skorokhod", "harnack", "corollary",
            "inequalities")


def load_schema() -> dict:
    return json.loads(resources.files("balayage").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _line_of(text: str, path) -> int | None:
    """Best-effort source line of a JSON path (first occurrence of the last key)."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for no, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return no
    return None


def read_config(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
            no = _line_of(text, list(e.absolute_path))
            lines.append(f"{path}:{no or '?'}: {loc}: {e.message}")
        raise ParameterError("schema violation\n" + "\n".join(lines))
    return cfg


# ---------------------------------------------------------------------------
# config -> objects


def _ball(b) -> Ball:
    return Ball(np.asarray(b["center"], float), float(b["radius"]))


def _region(spec, dim: int) -> OpenRegion:
    balls = [_ball(b) for b in spec["balls"]]
    reg = OpenRegion.union(balls)
    if reg.dim != dim:
        raise ParameterError("region dimension does not match the kernel")
    holes = [_ball(b) for b in spec.get("holes", [])]
    return reg.minus(holes) if holes else reg


def _ball_union(items, dim: int) -> BallUnion:
    if not items:
        return BallUnion.empty(dim)
    centers = np.array([b["center"] for b in items], float)
    if centers.shape[1] != dim:
        raise ParameterError("ball dimension does not match the kernel")
    return BallUnion(centers, [b["radius"] for b in items])


def _potential(spec) -> PotentialSpec:
    return PotentialSpec(**spec)


class Built:
    """Objects assembled from a validated config."""

    def __init__(self, cfg: dict, overrides: dict | None = None):
        overrides = overrides or {}
        self.cfg = cfg
        self.kind = cfg["experiment"]
        kc = cfg["kernel"]
        self.kernel = KernelSpec(int(kc["dim"]), float(kc.get("alpha", 2.0)))
        d = self.kernel.dim
        dom = cfg.get("domain", {"kind": "full"})
        self.domain = DomainSpec.full(d) if dom["kind"] == "full" else DomainSpec.open_ball(
            dom.get("center", [0.0] * d), dom["radius"])
        self.domain.check_kernel(d, self.kernel.alpha)
        mc = dict(cfg.get("mc", {}))
        mc.update({k: v for k, v in overrides.items() if v is not None})
        self.mc = McParams(**mc)
        m = cfg.get("measure")
        if m is not None:
            pts = np.array(m["points"], float)
            if pts.ndim != 2 or pts.shape[1] != d:
                raise ParameterError("measure points must have the kernel dimension")
            self.nu = WeightedMeasure.from_atoms(pts, m.get("weights"))
        else:
            self.nu = None
        dc = cfg.get("dictionary")
        if dc is not None:
            ref = _potential(dc["reference"]) if "reference" in dc else None
            self.D = Dictionary([_potential(p) for p in dc["potentials"]], reference=ref)
        else:
            self.D = Dictionary([PotentialSpec("constant")])
        g = cfg.get("geometry", {})
        self.balls = _ball_union(g["balls"], d) if "balls" in g else None
        self.outer = _region(g["outer"], d) if "outer" in g else None
        self.W = _region(g["W"], d) if "W" in g else None
        self.U = [_region(u, d) for u in g.get("U", [])]
        self.omega = _region(g["omega"], d) if "omega" in g else None
        self.x = np.asarray(g["x"], float) if "x" in g else None
        self.partition = np.asarray(g["partition"], np.int64) if "partition" in g else None
        self.lam = np.asarray(cfg["lambda"], float) if "lambda" in cfg else None
        if self.lam is not None:
            check_simplex(self.lam)
        self.pipe = cfg.get("pipeline", {})
        self.opts = ShrinkOptions(**cfg.get("solver", {}))

    def need(self, *names):
        missing = [n for n in names if getattr(self, n, None) is None]
        if missing:
            raise ParameterError(f"experiment {self.kind!r} needs {', '.join(missing)}")


def _validation_notes(b: Built) -> dict:
    """Geometry checks that do not run any walk."""
    notes: dict = {}
    if b.lam is not None:
        notes["lambda_sum"] = float(b.lam.sum())
    if b.kind == "shrink" and b.balls is not None:
        delta = b.cfg.get("delta")
        if delta is not None:
            rep = validate_delta_family(b.balls, float(delta), b.outer or b.domain, b.kernel.alpha)
            notes["delta_family"] = {"valid": rep.valid, "delta0": rep.delta0,
                                     "slack": [float(s) for s in rep.slack]}
    if b.nu is not None and b.W is not None:
        notes["measure_in_W"] = bool(np.all(b.W.contains(b.nu.points)))
    if b.U and b.W is not None:
        notes["U_inside_W"] = [pl._check_inside(b.W, u) for u in b.U]
    if b.kind == "jensen" and b.balls is not None and b.x is not None:
        notes["x_inside_A"] = bool(b.balls.locate(b.x[None, :])[0] >= 0)
    return notes


# ---------------------------------------------------------------------------
# experiments


def _one_shot_balayage(b: Built) -> pl.ExperimentReport:
    b.need("nu")
    t0 = time.perf_counter()
    rep = pl.ExperimentReport("balayage", params={"kernel": b.kernel.to_dict(), "mc": b.mc.to_dict(),
                                                  "domain": b.domain.to_dict()})
    S = StopSet(b.balls, b.outer, b.domain)
    mu = balayage_measure(b.nu, S, b.kernel, b.mc)
    pl._measure_row(rep, "source", b.nu, b.D, b.kernel, 0)
    pl._measure_row(rep, "swept", mu, b.D, b.kernel, b.mc.samples)
    rep.potential_gate("swept", b.D, b.kernel, b.nu, mu)
    if b.balls is not None and len(b.balls):
        masses, se = ball_mass_estimates(mu, len(b.balls))
        rep.add_values("ball_mass", [f"B{i}" for i in range(len(masses))], masses, se, b.mc.samples)
    total, tse = mu.estimate(np.ones(len(mu)))
    rep.add_values("total_mass", ["mass"], [total], [tse], b.mc.samples)
    rep.extra["lost_mass"] = mu.lost_mass
    rep.extra["diagnostics"] = {k: v for k, v in mu.diagnostics.items() if k != "warnings"}
    for w in mu.diagnostics.get("warnings", []):
        rep.warn(w)
    return rep.finish(t0)


def _one_shot_shrink(b: Built) -> pl.ExperimentReport:
    b.need("nu", "balls")
    t0 = time.perf_counter()
    rep = pl.ExperimentReport("shrink", params={"kernel": b.kernel.to_dict(), "mc": b.mc.to_dict(),
                                                "solver": b.opts.to_dict()})
    if b.partition is not None:
        b.need("lam")
        prob = ShrinkProblem(b.balls, b.nu, b.domain, outer=b.outer, partition=b.partition, lam=b.lam,
                             delta=float(b.cfg.get("delta", 0.05)), alpha=b.kernel.alpha)
        sol = joint_shrink(prob, b.kernel, b.mc, b.opts)
    else:
        beta = np.asarray(b.cfg.get("beta", [0.5] * len(b.balls)), float)
        prob = ShrinkProblem(b.balls, b.nu, b.domain, outer=b.outer, alpha=b.kernel.alpha)
        sol = fraction_shrink(prob, beta, b.kernel, b.mc, b.opts)
    ids = [f"B{i}" for i in range(prob.m)]
    rep.add_values("target", ids, sol.targets, sol.target_se, b.mc.samples)
    rep.add_values("achieved", ids, sol.achieved, sol.achieved_se, b.mc.samples)
    rep.add_values("shrink_factor", ids, sol.s, np.zeros(prob.m), b.mc.samples)
    rep.check("residuals", sol.converged, max_abs=float(np.max(np.abs(sol.residuals))))
    if sol.revalidation is not None:
        rep.check("revalidation", bool(sol.revalidation.get("ok", True)), **{
            k: v for k, v in sol.revalidation.items() if k != "ok"})
    rep.extra["solver"] = {k: v for k, v in sol.to_dict().items() if k not in ("s", "achieved", "targets")}
    return rep.finish(t0)


def execute(b: Built) -> pl.ExperimentReport:
    p = b.pipe
    if b.kind == "balayage":
        return _one_shot_balayage(b)
    if b.kind == "shrink":
        return _one_shot_shrink(b)
    if b.kind == "theorem":
        b.need("nu", "W", "lam")
        if b.cfg.get("eta") is None:
            raise ParameterError("experiment 'theorem' needs eta")
        rep, _ = pl.run_theorem_pipeline(
            b.nu, b.W, b.U, b.lam, float(b.cfg["eta"]), b.kernel, b.mc, b.D, b.domain, N=p.get("N"), a=p.get("a"),
            M0=p.get("M0", 8), max_balls=p.get("max_balls", 1_000_000), opts=b.opts,
            blocks_per_group=p.get("blocks_per_group", 24), max_M=p.get("max_M"))
        return rep
    if b.kind == "corollary":
        b.need("nu", "lam")
        if b.cfg.get("eta") is None:
            raise ParameterError("experiment 'corollary' needs eta")
        return pl.run_corollary_1_4(b.nu, b.U, b.lam, float(b.cfg["eta"]), b.kernel, b.mc, b.D,
                                    ladder=p.get("ladder", (1, 2, 3)), M_factor=p.get("M_factor", 8), X=b.domain,
                                    N=p.get("N"), a=p.get("a"), opts=b.opts)
    if b.kind == "grid-approx":
        b.need("nu")
        if len(b.U) != 1:
            raise ParameterError("experiment 'grid-approx' needs exactly one set U")
        return pl.approximate_open_balayage(b.nu, b.U[0], b.W, b.domain, p.get("ladder", (8, 16, 32)), b.kernel,
                                            b.mc, b.D, a=p.get("a", 0.45), offset=p.get("offset"))
    if b.kind == "jensen":
        b.need("x", "omega", "balls")
        return pl.jensen_demo(b.x, b.omega, b.balls, b.D, b.kernel, b.mc)
    if b.kind == "skorokhod":
        b.need("nu", "balls")
        return pl.skorokhod_demo(b.nu, b.balls, b.domain, b.kernel, b.mc, b.D, step=p.get("step"),
                                 near=p.get("near"), factor=p.get("factor", 0.5))
    if b.kind == "harnack":
        return pl.harnack_audit(b.kernel, etas=p.get("etas", (0.01, 0.05)), deltas=p.get("deltas"),
                                triples=p.get("triples", 100_000), seed=b.mc.seed, mc=b.mc,
                                D=b.D if "dictionary" in b.cfg else None)
    if b.kind == "inequalities":
        return pl.inequality_audit(b.kernel, sizes=p.get("sizes", (2, 4)), geometries=p.get("geometries", 20),
                                   mc=b.mc, seed=b.mc.seed)
    raise ParameterError(f"unknown experiment {b.kind!r}")


def write_report(rep: pl.ExperimentReport, out_dir: Path, name: str, fmt: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if fmt in ("json", "both"):
        p = out_dir / f"{name}.json"
        p.write_text(rep.to_json(), encoding="utf-8", newline="\n")
        paths.append(p)
    if fmt in ("csv", "both"):
        p = out_dir / f"{name}.csv"
        p.write_text(rep.to_csv(), encoding="utf-8", newline="\n")
        paths.append(p)
    p = out_dir / f"{name}.txt"
    p.write_text(rep.summary(), encoding="utf-8", newline="\n")
    paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="balayage", description="Monte Carlo balayage experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("config", help="JSON run configuration")
        if run:
            p.add_argument("--seed", type=int)
            p.add_argument("--samples", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--out-dir", type=Path)
            p.add_argument("--format", choices=("json", "csv", "both"))
        return p

    common(sub.add_parser("run", help="run the experiment named in the config"))
    common(sub.add_parser("validate", help="check a config without running it"), run=False)
    for name in COMMANDS:
        common(sub.add_parser(name, help=f"run a {name} config"))
    return ap


def _echo(b: Built) -> dict:
    return pl._plain({
        "experiment": b.kind, "kernel": b.kernel.to_dict(), "domain": b.domain.to_dict(), "mc": b.mc.to_dict(),
        "atoms": 0 if b.nu is None else len(b.nu), "dictionary": b.D.ids(),
        "balls": 0 if b.balls is None else len(b.balls), "sets": len(b.U),
        "lambda": None if b.lam is None else b.lam,
    })


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        if args.command == "validate":
            b = Built(cfg)
            notes = _validation_notes(b)
            print("ok")
            print(json.dumps({"parameters": _echo(b), "checks": pl._plain(notes)}, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command != "run" and args.command != cfg["experiment"]:
            raise ParameterError(f"config describes {cfg['experiment']!r}, not {args.command!r}")
        b = Built(cfg, {"seed": args.seed, "samples": args.samples, "workers": args.workers})
        rep = execute(b)
    except (ParameterError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = cfg.get("output", {})
    out_dir = args.out_dir or Path(out.get("dir", "."))
    fmt = args.format or out.get("format", "both")
    name = cfg.get("name", cfg["experiment"])
    for p in write_report(rep, out_dir, name, fmt):
        print(p)
    sys.stdout.write(rep.summary())
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
