"""Command-line driver: ``biot-estimate <solve|study|check> --config <path>``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 invariant violation (``check``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .adapt import AdaptConfig, ConvergenceHistory, mark_dorfler, run_loop
from .bench import (
    IncompressibleCase,
    LShapedCase,
    ManufacturedCase,
    norm_identities_check,
    taylor_hood_ready,
)
from .biot import BiotParameters, SourceData, constraint_residual, solve_biot
from .equilibrate import (
    equilibrate_flux,
    equilibrate_stress,
    patch_compatibility,
    verify_flux,
    verify_stress,
)
from .estimate import ReliabilityConstants, compute_estimators, energy_norm_error, total_bound
from .fem import FieldView, RT1Space, interpolate_rt1
from .mesh import MeshError, read_mesh, refine_uniform

log = logging.getLogger("biot_estimate")

__all__ = ["main", "load_config", "ConfigError", "InvariantViolation",
           "cmd_solve", "cmd_study", "cmd_check", "write_vtk", "LAMBDA_SWEEP", "DORFLER_SWEEP"]

LAMBDA_SWEEP = (1.0, 1e2, 1e4, 1e8)
DORFLER_SWEEP = (0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0)

_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["manufactured", "lshape", "external"]},
                "mesh": {"type": "string"},
                "refinements": {"type": "integer", "minimum": 0},
                "f": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                      "maxItems": 2},
                "g": {"type": "number"},
            },
            "required": ["type"],
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mu": _POS,
                "tau": _POS,
                "lambda_inv": {"type": "number", "minimum": 0},
            },
        },
        "constants": {
            "oneOf": [
                {"const": "default"},
                {"type": "object", "additionalProperties": False,
                 "properties": {"C_K": _POS, "C_D": _POS, "C_F": _POS}},
            ]
        },
        "adapt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["uniform", "adaptive"]},
                "dorfler_theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_levels": {"type": "integer", "minimum": 1},
                "max_dofs": {"type": "integer", "minimum": 1},
                "reference": {"enum": ["auto", "exact", "overkill", "none"]},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "csv": {"type": "boolean"},
                "vtk": {"type": "boolean"},
                "indicators": {"type": "boolean"},
                "timing": {"type": "boolean"},
            },
        },
        "check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"inject_fault": {"type": "boolean"}},
        },
    },
    "required": ["problem"],
}


class ConfigError(ValueError):
    """Invalid configuration (exit code 1)."""


class InvariantViolation(RuntimeError):
    """A checked invariant failed (exit code 3)."""

    def __init__(self, name, detail):
        super().__init__(f"invariant violated: {name}: {detail}")
        self.name = name


@dataclass
class RunConfig:
    raw: dict
    problem: object
    params: BiotParameters
    constants: dict | None
    adapt: AdaptConfig
    out_dir: Path
    csv: bool = True
    vtk: bool = False
    indicators: bool = False
    inject_fault: bool = False

    def initial_mesh(self):
        return self.problem.initial_mesh()


class ExternalProblem:
    """Mesh read from file with constant sources."""

    def __init__(self, mesh_path, f, g, params, refinements=0):
        self.mesh_path = mesh_path
        self.f, self.g = f, g
        self.params = params
        self.refinements = refinements

    def initial_mesh(self):
        mesh = refine_uniform(read_mesh(self.mesh_path), self.refinements)
        return taylor_hood_ready(mesh)

    def sources(self):
        return SourceData.constant(self.f, self.g)


def _path(err):
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def load_config(source, out_dir=None):
    """Parse and validate a JSON config (path or dict) into a :class:`RunConfig`."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field '{_path(e)}': {e.message}")

    prm = raw.get("params", {})
    try:
        params = BiotParameters(mu=prm.get("mu", 1.0), lambda_inv=prm.get("lambda_inv", 1.0),
                                tau=prm.get("tau", 1.0))
    except ValueError as exc:
        raise ConfigError(f"config field 'params': {exc}") from exc

    pr = raw["problem"]
    kind = pr["type"]
    if kind == "manufactured":
        if params.lambda_inv == 0:
            problem = IncompressibleCase(mu=params.mu, tau=params.tau)
        else:
            problem = ManufacturedCase(mu=params.mu, lam=1.0 / params.lambda_inv,
                                       tau=params.tau)
        refs = pr.get("refinements", 1)
        problem.initial_mesh = _with_refinements(problem.initial_mesh, refs)
    elif kind == "lshape":
        problem = LShapedCase(mu=params.mu, tau=params.tau,
                              lam=np.inf if params.lambda_inv == 0 else 1.0 / params.lambda_inv)
        problem.initial_mesh = _with_refinements(problem.initial_mesh, pr.get("refinements", 2))
        if "f" in pr or "g" in pr:
            f, g = pr.get("f", [1.0, 1.0]), pr.get("g", 1.0)
            problem.sources = lambda: SourceData.constant(f, g)
    else:
        if "mesh" not in pr:
            raise ConfigError("config field 'problem/mesh': required for external problems")
        problem = ExternalProblem(pr["mesh"], pr.get("f", [0.0, 0.0]), pr.get("g", 0.0),
                                  params, pr.get("refinements", 0))

    consts = raw.get("constants", "default")
    consts = None if consts == "default" else consts
    ad = raw.get("adapt", {})
    out = raw.get("output", {})
    adapt = AdaptConfig(mode=ad.get("mode", "uniform"),
                        dorfler_theta=ad.get("dorfler_theta", 0.5),
                        max_levels=ad.get("max_levels", 4),
                        max_dofs=ad.get("max_dofs", 10 ** 6),
                        constants=consts, params=params,
                        reference=ad.get("reference", "auto"),
                        timing=out.get("timing", False))
    out_dir = Path(out_dir or out.get("dir", "out"))
    return RunConfig(raw, problem, params, consts, adapt, out_dir,
                     csv=out.get("csv", True), vtk=out.get("vtk", False),
                     indicators=out.get("indicators", False),
                     inject_fault=raw.get("check", {}).get("inject_fault", False))


def _with_refinements(factory, n):
    return lambda: factory(n)


# --------------------------------------------------------------------------
# commands

def _single_pass(cfg):
    mesh = cfg.initial_mesh()
    src = cfg.problem.sources().project(mesh)
    sol = solve_biot(mesh, cfg.params, src)
    srec = equilibrate_stress(mesh, sol, src)
    frec = equilibrate_flux(mesh, sol, src)
    consts = ReliabilityConstants.default_for(mesh, **(cfg.constants or {}))
    br = compute_estimators(sol, srec, frec, consts, sources=src)
    return mesh, src, sol, srec, frec, consts, br


def cmd_solve(cfg):
    """One solve/equilibrate/estimate pass; writes ``report.json``."""
    mesh, src, sol, srec, frec, consts, br = _single_pass(cfg)
    report = {
        "problem": cfg.raw["problem"]["type"],
        "params": {"mu": cfg.params.mu, "lambda_inv": cfg.params.lambda_inv,
                   "tau": cfg.params.tau},
        "constants": {"C_K": consts.C_K, "C_D": consts.C_D, "C_F": consts.C_F,
                      "provenance": consts.provenance},
        "num_elements": int(mesh.num_triangles),
        "N": int(sol.num_dofs),
        "estimators": {k: float(v) for k, v in br.as_dict().items()},
        "bound": float(br.bound),
        "oscillation": br.oscillation,
        "residual_norm": float(sol.residual_norm),
        "equilibration": {"stress": verify_stress(srec), "flux": verify_flux(frec)},
    }
    if hasattr(cfg.problem, "evaluate"):
        total, parts = energy_norm_error(sol, cfg.problem)
        report["error"] = {"total": total, "squared_parts": list(parts),
                           "effectivity": float(np.sqrt(br.bound) / total)}
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg.vtk:
        write_vtk(cfg.out_dir / "solution.vtk", sol, srec, frec, br)
    if cfg.indicators:
        _write_indicators(cfg.out_dir / "indicators.csv", br)
    return 0


def _write_indicators(path, br):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("element,eta_S2,eta_A2,eta_C2,eta_F2,eta_P2,indicator\n")
        for t, (row, ind) in enumerate(zip(br.per_element, br.indicator)):
            fh.write(",".join([str(t)] + [repr(float(v)) for v in row] + [repr(float(ind))])
                     + "\n")


def _study_one(cfg, name, problem=None, adapt=None):
    hist = run_loop(problem or cfg.problem, adapt or cfg.adapt)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / name
    if cfg.csv:
        hist.write_csv(path)
    return hist, path


def cmd_study(cfg, sweep=None):
    """Run the refinement loop (optionally a parameter sweep); writes CSVs."""
    if sweep is None:
        _study_one(cfg, "history.csv")
    elif sweep == "lambda":
        base = cfg.raw["problem"]["type"]
        for lam in LAMBDA_SWEEP:
            params = BiotParameters(cfg.params.mu, 1.0 / lam, cfg.params.tau)
            if base == "manufactured":
                problem = ManufacturedCase(mu=params.mu, lam=lam, tau=params.tau)
                problem.initial_mesh = _with_refinements(
                    problem.initial_mesh, cfg.raw["problem"].get("refinements", 1))
            elif base == "lshape":
                problem = LShapedCase(mu=params.mu, lam=lam, tau=params.tau)
                problem.initial_mesh = _with_refinements(
                    problem.initial_mesh, cfg.raw["problem"].get("refinements", 2))
            else:
                problem = cfg.problem
            adapt = _replace(cfg.adapt, params=params)
            _study_one(cfg, f"history_lambda_1e{int(round(np.log10(lam)))}.csv", problem, adapt)
    elif sweep == "dorfler":
        for theta in DORFLER_SWEEP:
            adapt = _replace(cfg.adapt, mode="adaptive", dorfler_theta=theta)
            _study_one(cfg, f"history_dorfler_{theta:.1f}.csv", adapt=adapt)
    else:
        raise ConfigError(f"unknown sweep {sweep!r}")
    return 0


def _replace(adapt, **kw):
    from dataclasses import replace
    return replace(adapt, **kw)


def _expect(name, ok, detail):
    if not ok:
        raise InvariantViolation(name, detail)
    log.info("ok  %s", name)


def cmd_check(cfg=None, inject_fault=None):
    """Run the invariant suite on small fixtures; raise on the first failure."""
    fault = inject_fault if inject_fault is not None else bool(cfg and cfg.inject_fault)
    case = ManufacturedCase()
    mesh = case.initial_mesh(2)
    _expect("mesh.euler_characteristic", mesh.euler_characteristic() == 1,
            mesh.euler_characteristic())
    _expect("mesh.taylor_hood_stable", mesh.has_two_boundary_edges().size == 0, "")

    ident = norm_identities_check(8, mesh)
    _expect("bench.norm_identities",
            abs(ident["phi_norm"] - 1 / 30) < 1e-12 and abs(ident["grad_ratio"] - 20) < 1e-10
            and abs(ident["eps_ratio"] - 1.5) < 1e-10, ident)

    rt = RT1Space(mesh, broken=True)
    field = interpolate_rt1(rt, lambda ref: mesh.map_points(ref))
    div = field.divergence(np.array([[0.2, 0.3]]))
    _expect("fem.rt1_interpolation_divergence", np.abs(div - 2).max() < 1e-12, div.max())

    src = case.sources().project(mesh)
    sol = solve_biot(mesh, case.params, src)
    a = sol.system.matrix
    asym = abs(a - a.T).max() if a.nnz else 0.0
    _expect("biot.matrix_symmetry", asym <= 1e-13, asym)
    rel = sol.residual_norm / max(np.linalg.norm(sol.system.rhs), 1e-300)
    _expect("biot.algebraic_residual", rel <= 1e-10, rel)
    cr = constraint_residual(sol)
    _expect("biot.constraint_orthogonality", cr <= 1e-9, cr)

    for which in ("stress", "flux"):
        pc = patch_compatibility(sol, src, which)
        _expect(f"equilibrate.{which}_patch_compatibility", pc <= 1e-9, pc)

    srec = equilibrate_stress(mesh, sol, src)
    frec = equilibrate_flux(mesh, sol, src)
    if fault:
        c = srec.theta_R.coefficients.copy()
        c[0, -1] += 1e-3
        srec.theta_R = FieldView(srec.theta_R.space, c)
    vs, vf = verify_stress(srec), verify_flux(frec)
    _expect("equilibrate.stress_divergence", vs["divergence"] <= 1e-9, vs["divergence"])
    _expect("equilibrate.stress_jump", vs["jump"] <= 1e-10, vs["jump"])
    _expect("equilibrate.stress_weak_symmetry", vs["symmetry"] <= 1e-10, vs["symmetry"])
    _expect("equilibrate.flux_divergence", vf["divergence"] <= 1e-9, vf["divergence"])
    _expect("equilibrate.flux_jump", vf["jump"] <= 1e-10, vf["jump"])

    consts = ReliabilityConstants.default_for(mesh)
    br = compute_estimators(sol, srec, frec, consts)
    sq = br.per_element.sum(axis=0)
    dev = np.abs(sq - br.values ** 2).max() / max(br.values.max() ** 2, 1e-300)
    _expect("estimate.elementwise_decomposition", dev <= 1e-12, dev)
    tb = total_bound(br.values, consts, sol.params)
    _expect("estimate.bound_consistency", abs(tb - br.bound) <= 1e-12 * max(tb, 1e-300),
            (tb, br.bound))
    err, _ = energy_norm_error(sol, case)
    _expect("estimate.bound_above_error", br.bound >= err ** 2, (br.bound, err ** 2))

    ex = [9.0, 4.0, 1.0, 1.0]
    _expect("adapt.dorfler_examples",
            list(mark_dorfler(ex, 0.5)) == [0] and list(mark_dorfler(ex, 0.8)) == [0, 1]
            and list(mark_dorfler(ex, 1.0)) == [0, 1, 2, 3], "")
    return 0


# --------------------------------------------------------------------------
# VTK

def write_vtk(path, solution, stress_rec=None, flux_rec=None, breakdown=None):
    """Legacy ASCII VTK: vertex values of u, p, phi; element data at centroids."""
    mesh = solution.mesh
    nv, nt = mesh.num_vertices, mesh.num_triangles
    lines = ["# vtk DataFile Version 3.0", "biot-estimate solution", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    u = solution.u.coefficients[:, :nv]
    lines += [f"POINT_DATA {nv}", "VECTORS u double"]
    lines += [f"{a!r} {b!r} 0.0" for a, b in u.T]
    for name, fld in (("p", solution.p), ("phi", solution.phi)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(v)) for v in fld.coefficients[:nv]]
    lines.append(f"CELL_DATA {nt}")
    mid = np.array([[1 / 3, 1 / 3]])
    if breakdown is not None:
        names = ("eta_S2", "eta_A2", "eta_C2", "eta_F2", "eta_P2")
        cols = list(zip(names, breakdown.per_element.T)) + [("indicator", breakdown.indicator)]
        for name, col in cols:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in col]
    if flux_rec is not None:
        w = flux_rec.w_R.values(mid)[:, 0]
        lines.append("VECTORS w_R double")
        lines += [f"{a!r} {b!r} 0.0" for a, b in w]
    if stress_rec is not None:
        th = stress_rec.theta_R.values(mid)[:, 0]
        lines.append("TENSORS theta_R double")
        for t in th:
            lines += [f"{t[0, 0]!r} {t[0, 1]!r} 0.0", f"{t[1, 0]!r} {t[1, 1]!r} 0.0",
                      "0.0 0.0 0.0"]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="biot-estimate",
        description="Taylor-Hood Biot solver with equilibrated a posteriori error bounds.")
    ap.add_argument("command", choices=["solve", "study", "check"])
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--sweep", choices=["lambda", "dorfler"], help="parameter sweep (study)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        if args.command == "check":
            cfg = load_config(args.config, args.out) if args.config else None
            code = cmd_check(cfg)
            print(f"check passed in {time.perf_counter() - t0:.1f} s")
            return code
        if not args.config:
            raise ConfigError("--config is required for solve and study")
        cfg = load_config(args.config, args.out)
        if args.command == "solve":
            return cmd_solve(cfg)
        return cmd_study(cfg, args.sweep)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MeshError as exc:
        # the initial mesh comes from the config, so this is a config error
        print(f"error: config field 'problem': mesh: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
