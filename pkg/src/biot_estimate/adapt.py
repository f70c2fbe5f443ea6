"""Dörfler marking and the solve-estimate-mark-refine loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .biot import BiotParameters, solve_biot
from .equilibrate import equilibrate_flux, equilibrate_stress
from .estimate import ReliabilityConstants, compute_estimators, energy_norm_error
from .mesh import refine

log = logging.getLogger(__name__)

__all__ = [
    "AdaptConfig",
    "LevelRecord",
    "ConvergenceHistory",
    "LoopError",
    "mark_dorfler",
    "run_loop",
    "CSV_COLUMNS",
    "loglog_slope",
]

CSV_COLUMNS = ("level", "N", "h", "eta_S", "eta_A", "eta_C", "eta_F", "eta_P", "bound",
               "err_u", "err_p", "err_phi", "err_total", "effectivity", "marked", "seconds")


class LoopError(RuntimeError):
    """A stage of the adaptive loop failed; the message names the level."""


def mark_dorfler(indicators, theta):
    """Smallest greedy set carrying a ``theta`` fraction of the total.

    Elements are taken by descending indicator (ties by ascending id) until
    the accumulated sum reaches ``theta * sum(indicators)``.  Returns sorted
    element ids; all-zero indicators give an empty set.
    """
    eta = np.asarray(indicators, dtype=float)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and nonnegative")
    if not 0 < theta <= 1:
        raise ValueError(f"Dörfler parameter must lie in (0, 1], got {theta}")
    order = np.lexsort((np.arange(eta.size), -eta))
    cum = np.cumsum(eta[order])
    if eta.size == 0 or cum[-1] == 0:
        return np.zeros(0, dtype=np.int64)
    k = int(np.searchsorted(cum, theta * cum[-1], side="left")) + 1
    if theta == 1:
        # every nonzero contribution is needed; skip trailing zeros
        k = int(np.count_nonzero(eta))
    return np.sort(order[:min(k, eta.size)])


@dataclass
class AdaptConfig:
    mode: str = "uniform"
    dorfler_theta: float = 0.5
    max_levels: int = 4
    max_dofs: int = 10 ** 6
    constants: ReliabilityConstants | dict | None = None
    params: BiotParameters | None = None
    reference: str = "auto"
    timing: bool = False

    def __post_init__(self):
        if self.mode not in ("uniform", "adaptive"):
            raise ValueError(f"mode must be 'uniform' or 'adaptive', got {self.mode!r}")
        if not 0 < self.dorfler_theta <= 1:
            raise ValueError(f"dorfler_theta must lie in (0, 1], got {self.dorfler_theta}")
        if self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")
        if self.reference not in ("auto", "exact", "overkill", "none"):
            raise ValueError(f"unknown reference mode {self.reference!r}")


@dataclass
class LevelRecord:
    level: int
    N: int
    h: float
    eta_S: float
    eta_A: float
    eta_C: float
    eta_F: float
    eta_P: float
    bound: float
    err_u: float | None = None
    err_p: float | None = None
    err_phi: float | None = None
    err_total: float | None = None
    effectivity: float | None = None
    marked: int = 0
    seconds: float | None = None


@dataclass
class ConvergenceHistory:
    records: list = field(default_factory=list)
    meshes: list = field(default_factory=list, repr=False)
    breakdowns: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path):
        with open(path, encoding="ascii", newline="") as fh:
            rows = list(csv.DictReader(fh))
        types = {f.name: f.type for f in fields(LevelRecord)}
        records = []
        for row in rows:
            kw = {}
            for name, raw in row.items():
                if raw == "":
                    kw[name] = None
                elif types[name] == "int":
                    kw[name] = int(raw)
                else:
                    kw[name] = float(raw)
            records.append(LevelRecord(**kw))
        return cls(records)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def _constants_for(config, mesh):
    c = config.constants
    if isinstance(c, ReliabilityConstants):
        return c
    return ReliabilityConstants.default_for(mesh, **(c or {}))


def run_loop(problem, config, initial_mesh=None, keep_solutions=False):
    """Solve, equilibrate, estimate, mark and refine level by level.

    ``problem`` supplies ``params``, ``sources()`` and ``initial_mesh()``;
    if it also has ``evaluate`` it serves as the exact reference.  With
    ``config.reference == "overkill"`` (or ``auto`` without an exact
    solution) the errors are measured against a cubic solve on the finest
    mesh refined once, after the loop finishes.
    """
    params = config.params or problem.params
    if config.params is not None and hasattr(problem, "mu"):
        log.debug("config parameters override the problem defaults")
    mesh = initial_mesh or problem.initial_mesh()
    base_sources = problem.sources()
    constants = _constants_for(config, mesh)
    exact = hasattr(problem, "evaluate")
    ref_mode = config.reference
    if ref_mode == "auto":
        ref_mode = "exact" if exact else "overkill"
    if ref_mode == "exact" and not exact:
        raise ValueError("problem has no exact solution; use reference 'overkill' or 'none'")

    hist = ConvergenceHistory()
    solutions = []
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        try:
            src = base_sources.project(mesh)
            sol = solve_biot(mesh, params, src)
        except Exception as exc:
            raise LoopError(f"level {level}: solve failed: {exc}") from exc
        if hist.records and sol.num_dofs > config.max_dofs:
            log.info("level %d exceeds max_dofs (%d > %d); stopping", level,
                     sol.num_dofs, config.max_dofs)
            break
        try:
            srec = equilibrate_stress(mesh, sol, src)
            frec = equilibrate_flux(mesh, sol, src)
        except Exception as exc:
            raise LoopError(f"level {level}: equilibration failed: {exc}") from exc
        br = compute_estimators(sol, srec, frec, constants, sources=src)
        if config.mode == "uniform":
            marked = np.arange(mesh.num_triangles)
        else:
            marked = mark_dorfler(br.indicator, config.dorfler_theta)
        rec = LevelRecord(level, int(sol.num_dofs), float(mesh.h),
                          *(float(v) for v in br.values), float(br.bound),
                          marked=int(marked.size))
        if ref_mode == "exact":
            _attach_error(rec, sol, problem)
        hist.records.append(rec)
        hist.meshes.append(mesh)
        hist.breakdowns.append(br)
        solutions.append(sol)
        if level + 1 < config.max_levels:
            mesh = refine(mesh, marked)
        if config.timing:
            rec.seconds = time.perf_counter() - t0
        log.info("level %d: N=%d bound=%.4e", level, rec.N, rec.bound)

    if ref_mode == "overkill":
        from .bench import build_overkill
        ref = build_overkill(problem, hist.meshes[-1])
        for rec, sol in zip(hist.records, solutions):
            _attach_error(rec, sol, ref)
        hist.reference = ref
    if keep_solutions:
        hist.solutions = solutions
    return hist


def _attach_error(rec, sol, reference):
    total, (eu, ep, ephi) = energy_norm_error(sol, reference)
    rec.err_u, rec.err_p, rec.err_phi = (math.sqrt(max(v, 0.0)) for v in (eu, ep, ephi))
    rec.err_total = total
    rec.effectivity = math.sqrt(rec.bound) / total if total > 0 else None
