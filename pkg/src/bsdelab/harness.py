"""Experiment orchestration: spec files, seeded runs, persisted results.

A run is a pure function of (spec, seed): the spec is hashed canonically,
outputs land in a per-run directory named by that hash, and every file is
written atomically (temp file + rename) so a killed run leaves nothing at
a final path.  CSV holds arrays; scalar reports go to structured text.
Timestamps live only in the manifest, keeping result CSVs byte-comparable
across reruns.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import bmo as bmo_mod
from .bsde import (RegressionBasis, solve_lsmc, y0_standard_error,
                   martingale_standard_error)
from .errors import ConfigError, EmptyInput
from .fixtures import config_for_fixture, fixture_names, get_fixture
from .forward import simulate
from .malliavin import malliavin_derivative, representation_from_variational, trace_check
from .sensitivity import SensitivityReport, SensitivityRow, convergence_study, solve_variational_bsde

try:
    from importlib.metadata import version as _pkg_version
    CODE_VERSION = _pkg_version("bsdelab")
except Exception:  # pragma: no cover - metadata absent in odd installs
    CODE_VERSION = "0.1.0"

TASKS = ("solve", "sensitivity", "malliavin", "bmo", "full-verify")


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one run; hashable canonically."""

    fixture: str
    task: str
    name: str = ""
    horizon: float = 1.0
    steps: int = 50
    paths: int = 20000
    seed: int = 1234
    basis_degree: int = 3
    picard_iters: int = 3
    truncation_level: Optional[float] = None
    h_list: tuple = (1e-1, 1e-2, 1e-3)
    axis: int = 0
    sup_tolerance: float = 0.05
    theta_list: tuple = (0, 10, 25, 40)
    trace_tolerance: float = 0.05
    percentile: float = 99.9
    r_cap: float = 2.0
    moment_p: float = 1.0
    out_root: str = "runs"

    def __post_init__(self):
        fx = get_fixture(self.fixture)  # raises UnknownFixture
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; known: {TASKS}")
        if self.horizon != fx.horizon:
            raise ConfigError(
                f"fixture {self.fixture!r} references assume horizon "
                f"{fx.horizon}, got {self.horizon}")
        if not self.name:
            object.__setattr__(self, "name", f"{self.fixture}-{self.task}")
        object.__setattr__(self, "h_list",
                           tuple(float(h) for h in self.h_list))
        object.__setattr__(self, "theta_list",
                           tuple(int(t) for t in self.theta_list))
        if self.task == "sensitivity" and not self.h_list:
            raise ConfigError("task 'sensitivity' needs a nonempty h list")
        if self.task == "malliavin":
            if not self.theta_list:
                raise ConfigError("task 'malliavin' needs theta nodes")
            bad = [t for t in self.theta_list if not 0 <= t <= self.steps]
            if bad:
                raise ConfigError(f"theta nodes {bad} outside 0..{self.steps}")


def spec_hash(spec: ExperimentSpec) -> str:
    """First 12 hex digits of the sha256 of the canonical JSON encoding.

    Keys are sorted, so the hash is invariant under field reordering of
    any dict the spec was built from.
    """
    payload = json.dumps(asdict(spec), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


_SCHEMA = {
    "experiment": {"name", "fixture", "task", "seed", "paths"},
    "grid": {"horizon", "steps"},
    "solver": {"basis_degree", "picard_iters", "truncation_level"},
    "sensitivity": {"h", "axis", "tolerance"},
    "malliavin": {"theta", "tolerance"},
    "bmo": {"percentile", "r_cap", "p"},
    "output": {"dir"},
}


def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    """Parse a spec file (TOML tables per _SCHEMA); unknown keys are errors."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for table, entries in raw.items():
        if table not in _SCHEMA:
            raise ConfigError(f"{path}: unknown table [{table}]")
        if not isinstance(entries, dict):
            raise ConfigError(f"{path}: [{table}] must be a table")
        for key in entries:
            if key not in _SCHEMA[table]:
                raise ConfigError(f"{path}: unknown key {table}.{key}")
    exp = raw.get("experiment", {})
    if "fixture" not in exp or "task" not in exp:
        raise ConfigError(f"{path}: [experiment] needs fixture and task")
    grid = raw.get("grid", {})
    solver = raw.get("solver", {})
    sens = raw.get("sensitivity", {})
    mall = raw.get("malliavin", {})
    bmo_t = raw.get("bmo", {})
    out = raw.get("output", {})
    kwargs = dict(
        fixture=exp["fixture"],
        task=exp["task"],
        name=exp.get("name", ""),
        seed=int(exp.get("seed", 1234)),
        paths=int(exp.get("paths", 20000)),
        horizon=float(grid.get("horizon", 1.0)),
        steps=int(grid.get("steps", 50)),
        basis_degree=int(solver.get("basis_degree", 3)),
        picard_iters=int(solver.get("picard_iters", 3)),
        truncation_level=solver.get("truncation_level"),
        axis=int(sens.get("axis", 0)),
        sup_tolerance=float(sens.get("tolerance", 0.05)),
        trace_tolerance=float(mall.get("tolerance", 0.05)),
        percentile=float(bmo_t.get("percentile", 99.9)),
        r_cap=float(bmo_t.get("r_cap", 2.0)),
        moment_p=float(bmo_t.get("p", 1.0)),
        out_root=str(out.get("dir", "runs")),
    )
    if "h" in sens:
        kwargs["h_list"] = tuple(sens["h"])
    if "theta" in mall:
        kwargs["theta_list"] = tuple(mall["theta"])
    return ExperimentSpec(**kwargs)


@dataclass
class RunManifest:
    """What a run produced: hash, verdicts, and the full file inventory."""

    spec_hash: str
    code_version: str
    seed: int
    started_at: str
    finished_at: str
    results: dict
    files: tuple
    run_dir: str

    @property
    def passed(self) -> bool:
        return all(self.results.values())


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _atomic_write(path, buf.getvalue())


def emit_convergence_table(reports, out_dir: Union[str, Path],
                           stem: str = "convergence"):
    """Write the h-ladder error table plus a log10 companion for plotting.

    Accepts a SensitivityReport or an iterable of rows with attributes
    (h, e_sup, e_l2_z).  Columns: h, E_sup, E_L2, slope_cum where
    slope_cum[i] is the root-error order fitted over rows 0..i (blank on
    the first row).  The companion file holds two columns, log10 |h| and
    log10 E_sup.
    """
    exponent_p = 1.0
    if isinstance(reports, SensitivityReport):
        rows = list(reports.rows)
        exponent_p = reports.exponent_p
    else:
        rows = list(reports)
    if not rows:
        raise EmptyInput("no convergence rows to emit")
    for i, row in enumerate(rows):
        for col in ("h", "e_sup", "e_l2_z"):
            val = getattr(row, col)
            if not np.isfinite(val):
                raise EmptyInput(
                    f"non-finite value at row {i}, column {col!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_h = np.log10([abs(r.h) for r in rows])
    log_e = np.log10([max(r.e_sup, 1e-300) for r in rows])
    log_root = log_e / (2.0 * exponent_p)
    table = []
    for i, row in enumerate(rows):
        if i == 0:
            slope = ""
        else:
            slope = repr(float(np.polyfit(log_h[:i + 1],
                                          log_root[:i + 1], 1)[0]))
        table.append([repr(float(row.h)), repr(float(row.e_sup)),
                      repr(float(row.e_l2_z)), slope])
    csv_path = out_dir / f"{stem}.csv"
    _write_csv(csv_path, ["h", "E_sup", "E_L2", "slope_cum"], table)
    lines = [f"{float(lh)!r} {float(le)!r}" for lh, le in zip(log_h, log_e)]
    log_path = out_dir / f"{stem}_log10.dat"
    _atomic_write(log_path, "\n".join(lines) + "\n")
    return csv_path, log_path


def list_fixtures() -> list:
    """Registry table: one dict per fixture with its headline parameters."""
    rows = []
    for name in fixture_names():
        fx = get_fixture(name)
        rows.append({
            "name": name,
            "dim_x": fx.model.dim_x,
            "dim_w": fx.model.dim_w,
            "alpha": fx.generator.alpha,
            "lipschitz": fx.generator.lipschitz_bound,
            "closed_form": fx.closed_form,
        })
    return rows


def _solution_table(sol, paths):
    steps = paths.grid.n_steps
    rows = []
    for k in range(steps + 1):
        rows.append([k, float(paths.grid.nodes[k]),
                     float(sol.y[:, k].mean()), float(sol.y[:, k].std()),
                     float(sol.z[:, k].mean()),
                     float(np.sqrt(np.mean(sol.z[:, k] ** 2)))])
    return rows


def _task_solve(spec, run_dir):
    cfg = config_for_fixture(spec.fixture, n_paths=spec.paths,
                             steps=spec.steps, seed=spec.seed,
                             basis_degree=spec.basis_degree,
                             picard_iters=spec.picard_iters,
                             truncation_level=spec.truncation_level)
    fx = get_fixture(spec.fixture)
    paths = simulate(cfg)
    basis = RegressionBasis(cfg.model.dim_x, cfg.basis_degree)
    sol = solve_lsmc(cfg.generator, cfg.terminal, paths, basis,
                     picard_iters=cfg.picard_iters)
    files = []
    path = Path(run_dir) / "solution.csv"
    _write_csv(path, ["node", "t", "y_mean", "y_std", "z_mean", "z_rms"],
               _solution_table(sol, paths))
    files.append(path)
    results = {}
    se = y0_standard_error(sol, paths)
    lines = [f"fixture: {spec.fixture}", f"paths: {spec.paths}",
             f"seed: {spec.seed}", f"y0: {sol.y0!r}", f"y0_se: {se!r}"]
    if "y0" in fx.references:
        ref = fx.references["y0"]
        err = abs(sol.y0 - ref.value)
        ok = err <= 3.0 * se
        results["y0_vs_reference"] = bool(ok)
        lines += [f"y0_reference: {ref.value!r} ({ref.oracle})",
                  f"y0_abs_error: {err!r}",
                  f"y0_check: {'PASS' if ok else 'FAIL'} (3 SE = {3 * se!r})"]
    else:
        results["solution_finite"] = bool(np.isfinite(sol.y).all())
    summary = Path(run_dir) / "summary.txt"
    _atomic_write(summary, "\n".join(lines) + "\n")
    files.append(summary)
    return results, files


def _task_sensitivity(spec, run_dir):
    cfg = config_for_fixture(spec.fixture, n_paths=spec.paths,
                             steps=spec.steps, seed=spec.seed,
                             basis_degree=spec.basis_degree,
                             picard_iters=spec.picard_iters,
                             fd_steps=spec.h_list)
    report = convergence_study(cfg, spec.h_list, axis=spec.axis,
                               sup_tolerance=spec.sup_tolerance)
    csv_path, log_path = emit_convergence_table(report, run_dir)
    slope_txt = Path(run_dir) / "slope.txt"
    _atomic_write(slope_txt,
                  f"slope: {report.slope!r}\n"
                  f"r_squared: {report.r_squared!r}\n"
                  f"tolerance: {report.tolerance!r}\n"
                  f"verdict: {'PASS' if report.passed else 'FAIL'}\n")
    return ({"convergence": bool(report.passed)},
            [csv_path, log_path, slope_txt])


def _task_malliavin(spec, run_dir):
    cfg = config_for_fixture(spec.fixture, n_paths=spec.paths,
                             steps=spec.steps, seed=spec.seed,
                             basis_degree=spec.basis_degree,
                             picard_iters=spec.picard_iters)
    fx = get_fixture(spec.fixture)
    paths = simulate(cfg)
    basis = RegressionBasis(cfg.model.dim_x, cfg.basis_degree)
    sol = solve_lsmc(cfg.generator, cfg.terminal, paths, basis,
                     picard_iters=cfg.picard_iters)
    mall = malliavin_derivative(sol, paths, cfg.model, cfg.generator,
                                cfg.terminal, basis, spec.theta_list,
                                picard_iters=cfg.picard_iters)
    varsol = solve_variational_bsde(sol, paths, cfg.generator, cfg.terminal,
                                    basis, picard_iters=cfg.picard_iters)
    rep = representation_from_variational(varsol, paths, cfg.model,
                                          spec.theta_list)
    trace = trace_check(sol, mall, dxi_bound=fx.grad_bound)
    num = float(np.sqrt(np.mean((mall.dy - rep.dy) ** 2)))
    den = float(np.sqrt(np.mean(mall.dy ** 2)))
    route_rel = num / (den + 1e-8)
    rows = []
    for j, theta in enumerate(trace.theta_nodes):
        rows.append([theta, float(trace.per_node[j]),
                     float(trace.z_node_max[j])])
    path = Path(run_dir) / "malliavin.csv"
    _write_csv(path, ["theta", "trace_rel_l2", "z_max"], rows)
    txt = Path(run_dir) / "malliavin.txt"
    _atomic_write(txt,
                  f"trace_aggregate: {trace.aggregate!r}\n"
                  f"route_rel_l2: {route_rel!r}\n"
                  f"tolerance: {spec.trace_tolerance!r}\n")
    ok_trace = trace.aggregate <= spec.trace_tolerance
    ok_routes = route_rel <= spec.trace_tolerance
    return ({"trace_identity": bool(ok_trace),
             "route_agreement": bool(ok_routes)}, [path, txt])


def _task_bmo(spec, run_dir):
    cfg = config_for_fixture(spec.fixture, n_paths=spec.paths,
                             steps=spec.steps, seed=spec.seed,
                             basis_degree=spec.basis_degree,
                             picard_iters=spec.picard_iters)
    paths = simulate(cfg)
    basis = RegressionBasis(cfg.model.dim_x, cfg.basis_degree)
    sol = solve_lsmc(cfg.generator, cfg.terminal, paths, basis,
                     picard_iters=cfg.picard_iters)
    est = bmo_mod.estimate_bmo2(sol.z, paths, basis,
                                percentile=spec.percentile)
    exps = bmo_mod.find_r(cfg.generator.alpha, est.d_value, r_cap=spec.r_cap)
    h = 2.0 * cfg.generator.alpha * sol.z
    weights = bmo_mod.girsanov_weights(h, paths)
    moment = bmo_mod.moment_bound_diagnostic(
        sol, exps, p=spec.moment_p,
        lipschitz_bound=cfg.generator.lipschitz_bound)
    rows = [[k, float(np.sqrt(max(v, 0.0)))]
            for k, v in enumerate(est.node_sup)]
    path = Path(run_dir) / "bmo.csv"
    _write_csv(path, ["node", "tail_energy_sqrt"], rows)
    beta = moment.beta
    txt = Path(run_dir) / "bmo.txt"
    _atomic_write(txt, "\n".join([
        f"beta = M^2 + 2M = {beta!r}",
        f"D: {est.d_value!r}",
        f"r: {exps.r!r}", f"q: {exps.q!r}", f"slack: {exps.slack!r}",
        f"weight_mean: {weights.mean!r} +/- {weights.se!r}",
        f"moment_lhs: {moment.lhs!r}", f"moment_rhs: {moment.rhs!r}",
        f"moment_ratio: {moment.ratio!r}",
    ]) + "\n")
    unit_mass = abs(weights.mean - 1.0) <= 3.0 * weights.se + 1e-12
    return ({"weights_unit_mass": bool(unit_mass),
             "moment_ratio_finite": bool(moment.passed)}, [path, txt])


def _task_full_verify(spec, run_dir):
    from .verify import verify_all
    results = verify_all(seed=spec.seed, out_dir=Path(run_dir) / "work")
    rows = [[r.index, r.name, "PASS" if r.passed else "FAIL", r.detail]
            for r in results]
    path = Path(run_dir) / "verify.csv"
    _write_csv(path, ["criterion", "name", "verdict", "detail"], rows)
    txt = Path(run_dir) / "verify.txt"
    _atomic_write(txt, "".join(
        f"[{'PASS' if r.passed else 'FAIL'}] criterion {r.index}: "
        f"{r.name} - {r.detail}\n" for r in results))
    return ({f"criterion-{r.index}": bool(r.passed) for r in results},
            [path, txt])


_TASK_RUNNERS = {
    "solve": _task_solve,
    "sensitivity": _task_sensitivity,
    "malliavin": _task_malliavin,
    "bmo": _task_bmo,
    "full-verify": _task_full_verify,
}


def run(spec: ExperimentSpec) -> RunManifest:
    """Execute the spec's task pipeline and persist results atomically."""
    digest = spec_hash(spec)
    run_dir = Path(spec.out_root) / f"{spec.name}-{digest}"
    run_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        results, files = _TASK_RUNNERS[spec.task](spec, run_dir)
    except Exception as exc:
        raise type(exc)(
            f"[fixture={spec.fixture} task={spec.task}] {exc}") from exc
    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
    spec_path = run_dir / "spec.json"
    _atomic_write(spec_path, json.dumps(asdict(spec), sort_keys=True,
                                        indent=2, default=str) + "\n")
    files = [Path(f) for f in files] + [spec_path]
    manifest = RunManifest(
        spec_hash=digest, code_version=CODE_VERSION, seed=spec.seed,
        started_at=started, finished_at=finished, results=results,
        files=tuple(str(f.relative_to(run_dir)) for f in files),
        run_dir=str(run_dir))
    manifest_path = run_dir / "manifest.json"
    payload = dict(asdict(manifest))
    payload["files"] = sorted(payload["files"]) + ["manifest.json"]
    _atomic_write(manifest_path, json.dumps(payload, sort_keys=True,
                                            indent=2) + "\n")
    manifest.files = tuple(payload["files"])
    return manifest
