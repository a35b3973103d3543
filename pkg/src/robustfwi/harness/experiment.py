"""Experiment execution, artifacts and run comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import helmholtz as hz
from .. import misfit
from ..optimize import (
    RunRecord,
    StepPolicy,
    growing_sample,
    incremental_gradient,
    lbfgs,
    read_run_csv,
    stochastic_gradient,
)
from ..sampling import (
    RANDOM_WITHOUT,
    RandomStream,
    SamplePlan,
    ScheduleParams,
    schedule,
    schedule_table,
    write_schedule_csv,
)
from .config import AUTO, ExperimentConfig, dumps
from .data import CorruptionMask, Diagnostics, make_data
from .models import ModelPair, make_acquisition, make_grid, make_models
from .objective import FWIObjective, predict

SOLVER_STREAM = (2,)
MANIFEST = "manifest.json"


class ExperimentError(RuntimeError):
    pass


class CompareError(ValueError):
    pass


@dataclass
class Setup:
    cfg: ExperimentConfig
    grid: hz.Grid2D
    models: ModelPair
    observed: hz.Acquisition
    diagnostics: Diagnostics
    initial_residual: np.ndarray
    penalty: misfit.Penalty
    objective: FWIObjective


def components(r) -> np.ndarray:
    r = np.asarray(r).ravel()
    return np.concatenate([r.real, r.imag])


def residual_scale(residual, factor: float) -> float:
    """``factor`` times the median nonzero |component| of a residual."""
    c = np.abs(components(residual))
    c = c[c > 0]
    if c.size == 0:
        raise ExperimentError("residual at the initial model is identically zero; set penalty.mu/nu explicitly")
    return factor * float(np.median(c))


def resolve_penalty(cfg: ExperimentConfig, initial_residual) -> misfit.Penalty:
    """Penalty with ``auto`` parameters tied to the initial residual scale.

    With ``c(f)`` the scale from :func:`residual_scale`, ``mu = c(mu_scale)``
    and ``nu = 2 c(nu_scale)^2``, i.e. nu = 2 in units of ``c``.
    """
    kind = cfg["penalty.kind"]
    if kind == "least-squares":
        return misfit.Penalty.least_squares()
    key = "penalty.mu" if kind == "huber" else "penalty.nu"
    value = cfg[key]
    if value == AUTO:
        c = residual_scale(initial_residual, cfg[key + "_scale"])
        value = c if kind == "huber" else 2.0 * c * c
    return misfit.Penalty.huber(value) if kind == "huber" else misfit.Penalty.students_t(value)


def build(cfg: ExperimentConfig) -> Setup:
    grid = make_grid(cfg)
    models = make_models(cfg)
    acq = make_acquisition(cfg, grid)
    mask = CorruptionMask.draw(acq.data_shape, cfg["corruption.fraction"], cfg["seed"])
    observed, diagnostics = make_data(models.true, acq, mask)
    r0 = observed.data - predict(models.initial, observed)
    penalty = resolve_penalty(cfg, r0)
    objective = FWIObjective(
        observed,
        penalty,
        granularity=cfg["sampling.granularity"],
        workers=cfg["parallel.workers"],
        active=models.active,
    )
    return Setup(cfg, grid, models, observed, diagnostics, r0, penalty, objective)


def model_error(x, reference) -> float:
    reference = np.asarray(reference)
    return float(np.linalg.norm(np.asarray(x) - reference) / np.linalg.norm(reference))


def growing_sizes(cfg: ExperimentConfig, m: int):
    """Sample sizes for the growing-sample solver, or None for the +1 rule."""
    if cfg["solver.schedule"] == "increment":
        return None
    params = ScheduleParams(m=m, rate=cfg["solver.rate"], iterations=max(cfg["solver.max_iter"], 1) + 1)
    return schedule(params, RANDOM_WITHOUT).sizes


def solve(setup: Setup) -> RunRecord:
    cfg, obj = setup.cfg, setup.objective
    oracle = obj.oracle()
    x0 = np.array(setup.models.initial.values)
    xt = setup.models.true.values
    kind = cfg["solver.kind"]
    all_idx = np.arange(obj.m)

    def monitor(x):
        out = {"model_error": model_error(x, xt)}
        if kind != "lbfgs":
            out["phi_full"] = obj.batch(all_idx, x)[0]
        return out

    step0 = cfg["solver.step0"] * float(np.linalg.norm(x0))
    rng = RandomStream(cfg["seed"], SOLVER_STREAM)
    if kind == "lbfgs":
        return lbfgs(oracle, x0, cfg["solver.max_iter"], cfg["solver.gtol"], cfg["solver.memory"], step0, monitor)
    if kind == "growing-sample":
        return growing_sample(
            oracle,
            x0,
            rng,
            max_iter=cfg["solver.max_iter"],
            s0=min(cfg["solver.s0"], obj.m),
            schedule=growing_sizes(cfg, obj.m),
            memory=cfg["solver.memory"],
            step0=step0,
            gtol=cfg["solver.gtol"],
            monitor=monitor,
        )
    policy = StepPolicy(cfg["solver.step_policy"], cfg["solver.alpha"])
    if kind == "stochastic-gradient":
        plan = SamplePlan(cfg["sampling.kind"], cfg["sampling.size"], cfg["sampling.weights"])
        return stochastic_gradient(oracle, x0, plan, policy, cfg["solver.max_iter"], rng, monitor)
    return incremental_gradient(oracle, x0, policy, cfg["solver.max_iter"], rng, cfg["solver.cyclic"], monitor)


# ---------------------------------------------------------------------------
# artifacts

HIST_COLUMNS = ("bin", "lower", "upper", "initial", "final", "true")


def histogram_edges(bins: int, limit: float) -> np.ndarray:
    if bins % 2 == 0:
        raise ValueError("histogram needs an odd number of bins")
    return np.linspace(-limit, limit, bins + 1)


def histogram_masses(values, edges) -> np.ndarray:
    """Bin masses of real values; values beyond the range fall in the edge bins."""
    values = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(values, bins=edges)
    return counts / counts.sum()


def residual_histograms(setup: Setup, x_final) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    cfg = setup.cfg
    limit = cfg["histogram.limit"]
    if limit == AUTO:
        limit = float(np.max(np.abs(components(setup.diagnostics.clean))))
        if limit == 0:
            limit = 1.0
    edges = histogram_edges(cfg["histogram.bins"], limit)
    data = setup.observed.data
    final = data - predict(setup.models.true.with_values(x_final), setup.observed)
    residuals = {
        "initial": setup.initial_residual,
        "final": final,
        "true": data - setup.diagnostics.clean,
    }
    return edges, {k: histogram_masses(components(v), edges) for k, v in residuals.items()}


def zero_bin_mass(masses: np.ndarray) -> float:
    """Mass of the central bin, the one containing zero."""
    return float(masses[masses.size // 2])


def write_histograms(path, edges, masses):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(HIST_COLUMNS)
        for b in range(edges.size - 1):
            row = [b, edges[b], edges[b + 1]] + [masses[k][b] for k in ("initial", "final", "true")]
            out.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def write_model(path, grid: hz.Grid2D, final, initial, true):
    final, initial, true = (grid.to_array(v) for v in (final, initial, true))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("iz", "ix", "final", "initial", "true"))
        for iz in range(grid.nz):
            for ix in range(grid.nx):
                out.writerow([iz, ix, repr(float(final[iz, ix])), repr(float(initial[iz, ix])), repr(float(true[iz, ix]))])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_float(v):
    return None if v is None or not math.isfinite(v) else float(v)


def _write_manifest(outdir: Path, manifest: dict):
    with open(outdir / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunResult:
    outdir: Path
    manifest: dict
    record: RunRecord
    setup: Setup


def run(cfg: ExperimentConfig, outdir=None) -> RunResult:
    """Run one experiment and write its artifacts plus ``manifest.json``.

    On failure a manifest with ``status = "error"`` is still written and
    :class:`ExperimentError` is raised.
    """
    outdir = Path(outdir if outdir is not None else cfg["output.dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seed": cfg["seed"], "status": "running", "artifacts": {}}
    written = []
    try:
        setup = build(cfg)
        manifest["penalty"] = {"kind": setup.penalty.kind, "mu": setup.penalty.mu, "nu": setup.penalty.nu}
        manifest["population"] = setup.objective.m
        record = solve(setup)

        record.to_csv(outdir / "run.csv", wall_time=cfg["output.wall_time"])
        written.append("run.csv")
        edges, masses = residual_histograms(setup, record.x)
        write_histograms(outdir / "residual_hist.csv", edges, masses)
        written.append("residual_hist.csv")
        m = setup.models
        write_model(outdir / "model_final.csv", setup.grid, record.x, m.initial.values, m.true.values)
        written.append("model_final.csv")
        if cfg["solver.kind"] == "growing-sample" and setup.objective.m >= 2:
            params = ScheduleParams(m=setup.objective.m, rate=cfg["solver.rate"], iterations=max(cfg["solver.max_iter"], 1))
            write_schedule_csv(outdir / "schedule.csv", schedule_table(params))
            written.append("schedule.csv")
        with open(outdir / "config.toml", "w") as fh:
            fh.write(dumps(cfg))
        written.append("config.toml")

        rows = record.rows
        manifest["status"] = "ok"
        manifest["solver"] = {"name": record.solver, "status": record.status, "message": record.message}
        manifest["summary"] = {
            "iterations": rows[-1]["iter"],
            "cum_evals": rows[-1]["cum_evals"],
            "final_phi": _json_float(rows[-1]["phi"]),
            "initial_model_error": _json_float(rows[0]["model_error"]),
            "final_model_error": _json_float(rows[-1]["model_error"]),
            "zero_bin_mass_final": zero_bin_mass(masses["final"]),
            "zero_bin_mass_true": zero_bin_mass(masses["true"]),
            "mask_zeroed_fraction": setup.diagnostics.mask.zeroed_fraction,
        }
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["artifacts"] = {name: sha256(outdir / name) for name in written}
        _write_manifest(outdir, manifest)
        raise ExperimentError(manifest["error"]) from exc
    manifest["artifacts"] = {name: sha256(outdir / name) for name in written}
    _write_manifest(outdir, manifest)
    return RunResult(outdir, manifest, record, setup)


def load_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path) as fh:
        return path.parent, json.load(fh)


def verify_manifest(path) -> list[str]:
    """Names of artifacts that are missing or whose checksum changed."""
    outdir, manifest = load_manifest(path)
    bad = []
    for name, digest in manifest.get("artifacts", {}).items():
        f = outdir / name
        if not f.exists() or sha256(f) != digest:
            bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# comparison

SHARED_PREFIXES = ("grid.", "frequencies.", "sources.", "receivers.")


def full_misfit(row: dict):
    """Full-objective value of a run row, when known."""
    if row.get("phi_full") is not None:
        return row["phi_full"]
    return row["phi"] if row.get("phi_kind") == "full" else None


def _labels(dirs, manifests):
    labels, seen = [], {}
    for d, man in zip(dirs, manifests):
        base = re.sub(r"[^A-Za-z0-9_-]+", "_", d.name) or man.get("solver", {}).get("name", "run")
        n = seen.get(base, 0)
        seen[base] = n + 1
        labels.append(base if n == 0 else f"{base}_{n}")
    return labels


def _at_or_before(rows, key, value):
    best = None
    for r in rows:
        if r[key] <= value:
            best = r
    return best


def compare(manifest_paths, out_path) -> list[dict]:
    """Merge runs on iteration count and on cumulative evaluations.

    The table has one block per alignment axis (``axis`` is ``iter`` or
    ``cum_evals``). On the evaluation axis each run contributes its latest
    row at or before that cost.
    """
    if not manifest_paths:
        raise CompareError("nothing to compare")
    loaded = [load_manifest(p) for p in manifest_paths]
    dirs = [d for d, _ in loaded]
    manifests = [m for _, m in loaded]
    for d, man in loaded:
        if man.get("status") != "ok":
            raise CompareError(f"{d}: run did not complete ({man.get('error', man.get('status'))})")
    ref = manifests[0]["config"]
    for d, man in zip(dirs[1:], manifests[1:]):
        diff = sorted(
            k for k in set(ref) | set(man["config"])
            if k.startswith(SHARED_PREFIXES) and ref.get(k) != man["config"].get(k)
        )
        if diff:
            raise CompareError(f"{d}: incompatible with {dirs[0]} (differs in {', '.join(diff)})")
    labels = _labels(dirs, manifests)
    runs = [read_run_csv(d / "run.csv") for d in dirs]

    columns = ["axis", "value"]
    for lab in labels:
        columns += [f"{lab}.iter", f"{lab}.cum_evals", f"{lab}.phi", f"{lab}.phi_full", f"{lab}.model_error"]
    table = []
    for axis in ("iter", "cum_evals"):
        values = sorted({r[axis] for rows in runs for r in rows})
        for v in values:
            row = {"axis": axis, "value": v}
            for lab, rows in zip(labels, runs):
                if axis == "iter":
                    hit = next((r for r in rows if r["iter"] == v), None)
                else:
                    hit = _at_or_before(rows, "cum_evals", v)
                row[f"{lab}.iter"] = None if hit is None else hit["iter"]
                row[f"{lab}.cum_evals"] = None if hit is None else hit["cum_evals"]
                row[f"{lab}.phi"] = None if hit is None else hit["phi"]
                row[f"{lab}.phi_full"] = None if hit is None else full_misfit(hit)
                row[f"{lab}.model_error"] = None if hit is None else hit["model_error"]
            table.append(row)
    with open(out_path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for row in table:
            out.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])
    return table


def evaluations_to_reach(reference_rows, candidate_rows, rel_tol: float = 0.05):
    """Fewest cumulative evaluations after which the candidate's full misfit
    is within ``rel_tol`` of the reference run's final full misfit, or None."""
    target = full_misfit(reference_rows[-1])
    if target is None:
        raise ValueError("reference run has no full misfit on its last row")
    for r in candidate_rows:
        f = full_misfit(r)
        if f is not None and f <= (1.0 + rel_tol) * target:
            return r["cum_evals"]
    return None
