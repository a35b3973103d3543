"""Acceptance criteria 1-10, one test per criterion.

Each test records a PASS/FAIL line in ``RESULTS``; ``conftest.py`` prints
them in the terminal summary.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from robustfwi import helmholtz as hz
from robustfwi import misfit
from robustfwi import sampling as sa
from robustfwi.harness import experiment as ex
from robustfwi.harness.config import ExperimentConfig
from robustfwi.optimize import read_run_csv
from robustfwi.sampling import DATA_AVERAGING, WITH_REPLACEMENT, WITHOUT_REPLACEMENT, RandomStream, SamplePlan

from .conftest import ToyPopulation, small_problem
from .test_helmholtz import central_differences, jacobian_apply, penalties_for, random_model, total_gradient, total_misfit

DATA = Path(__file__).parent / "data"
LOCK = DATA / "acceptance_lock.json"
SEEDS = (0, 1, 2)
PENALTIES = ("least-squares", "huber", "students-t")
RESULTS: dict[int, str] = {}


def record(criterion, ok, detail):
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[criterion] = line
    print(line)
    assert ok, line


class Runs:
    """Desk-scale runs shared by criteria 7-10, computed on first use."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def get(self, penalty="students-t", seed=0, solver="lbfgs", **extra):
        key = (penalty, seed, solver, tuple(sorted(extra.items())))
        if key not in self.cache:
            cfg = ExperimentConfig().replace(seed=seed, penalty__kind=penalty, solver__kind=solver, **extra)
            name = f"{solver}_{penalty}_s{seed}" + "".join(f"_{k}{v}" for k, v in sorted(extra.items()))
            self.cache[key] = ex.run(cfg, self.root / name)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def test_criterion_01_adjoint_correctness():
    rng = np.random.default_rng(2024)
    worst_dot = 0.0
    for seed in range(5):
        model = random_model(21, seed=seed)
        g = model.grid
        acq = hz.Acquisition(g, [g.index(1, 10)], 1.0, [g.index(0, i) for i in range(21)], [2 * np.pi * 5.0])
        system = hz.assemble(model, acq.frequencies[0])
        dx = rng.standard_normal(g.size) * model.values
        y = rng.standard_normal(21) + 1j * rng.standard_normal(21)
        Jdx = jacobian_apply(system, acq, 0, 0, dx)
        lhs = np.real(np.vdot(y, Jdx))
        rhs = float(dx @ -hz.gradient_contribution(model, acq, 0, 0, y, system))
        worst_dot = max(worst_dot, abs(lhs - rhs) / (np.linalg.norm(Jdx) * np.linalg.norm(y)))

    model, acq = small_problem(n=11)
    worst_fd = 0.0
    for penalty in penalties_for(acq, model):
        grad = total_gradient(penalty, model, acq)
        fd = central_differences(lambda x: total_misfit(penalty, model.with_values(x), acq), model.values.copy())
        worst_fd = max(worst_fd, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    record(1, worst_dot <= 1e-10 and worst_fd <= 1e-5, f"dot-product {worst_dot:.2e} <= 1e-10, gradient vs FD {worst_fd:.2e} <= 1e-5")


def test_criterion_02_penalty_point_values():
    errors = [
        abs(misfit.value(misfit.Penalty.huber(1.0), np.array([3.0])) - 2.5),
        abs(misfit.value(misfit.Penalty.students_t(1.0), np.array([1.0])) - math.log(2.0)),
        abs(misfit.influence(misfit.Penalty.students_t(1.0), np.array([1.0]))[0] - 1.0),
    ]
    record(2, max(errors) <= 1e-12, f"max deviation {max(errors):.1e} <= 1e-12")


def test_criterion_03_log_concave_tail_bound():
    grid = [(t1, t2) for t1 in np.linspace(0.25, 5.0, 10) for t2 in t1 + np.linspace(0.25, 5.0, 10)]
    worst_excess = -np.inf
    for d in (misfit.gaussian(), misfit.laplace(1.5)):
        for t1, t2 in grid:
            rep = misfit.theorem1_bound_check(misfit.TailQuery.at(d, t1, t1, t2), d)
            worst_excess = max(worst_excess, rep.lhs - rep.rhs)
    lap = misfit.laplace(1.5)
    equality = max(
        abs(r.lhs - r.rhs) for r in (misfit.theorem1_bound_check(misfit.TailQuery.at(lap, t1, t1, t2), lap) for t1, t2 in grid)
    )
    cauchy = misfit.cauchy()
    limit_gap = max(abs(misfit.conditional_tail(cauchy, t, 2 * t) - 0.5) for t in (1e3, 1e4, 1e6))
    violated = all(not misfit.theorem1_bound_check(misfit.TailQuery.at(cauchy, t, t, 2 * t), cauchy).satisfied for t in (5, 10, 50, 1e3))
    ok = worst_excess <= 1e-8 and equality <= 1e-10 and limit_gap <= 1e-3 and violated
    record(
        3,
        ok,
        f"bound excess {worst_excess:.1e} <= 1e-8, Laplace equality {equality:.1e}, "
        f"Cauchy |tail - 0.5| {limit_gap:.1e} <= 1e-3, violated for t1 >= 5: {violated}",
    )


def test_criterion_04_unbiasedness():
    toy = ToyPopulation(m=20, seed=4)
    pop = toy.population()
    x = np.array([0.3, -0.2, 0.1])
    phi = toy.phi(x)
    gen = RandomStream(40).generator()
    zscores = {}
    plans = {
        "rademacher": SamplePlan(DATA_AVERAGING, 2, "rademacher"),
        "gaussian": SamplePlan(DATA_AVERAGING, 2, "gaussian"),
        "without": SamplePlan(WITHOUT_REPLACEMENT, 4),
        "with": SamplePlan(WITH_REPLACEMENT, 4),
    }
    for name, plan in plans.items():
        vals = np.array([sa.sample_misfit(pop, plan, x, gen).value for _ in range(20_000)])
        zscores[name] = abs(vals.mean() - phi) / (vals.std(ddof=1) / math.sqrt(vals.size))
    small = ToyPopulation(m=3, seed=5)
    R = small.R(x)
    enum = np.mean([small.averaged(x, np.array(w, float)[:, None])[0] for w in itertools.product([-1, 1], repeat=3)])
    enum_err = abs(enum - np.trace(R.T @ R) / 3) / abs(enum)
    ok = max(zscores.values()) <= 4 and enum_err <= 1e-12
    zs = ", ".join(f"{k} {v:.2f}" for k, v in zscores.items())
    record(4, ok, f"|z| <= 4 ({zs}); m=3 enumeration rel. error {enum_err:.1e}")


def test_criterion_05_variance_laws():
    toy = ToyPopulation(m=6, seed=6)
    x = np.array([0.2, 0.3, -0.1])
    G = np.stack([toy.evaluate(i, x)[1] for i in range(6)])
    sigma2 = sa.population_gradient_variance(toy.population(), x)
    errs = [np.sum((G[list(S)].mean(axis=0) - G.mean(axis=0)) ** 2) for S in itertools.combinations(range(6), 3)]
    exact = sa.predicted_error(SamplePlan(WITHOUT_REPLACEMENT, 3), 6, sigma2)
    enum_err = abs(np.mean(errs) - exact) / exact

    # m large so the with-replacement law sigma^2/s is accurate to (m-1)/m
    big = ToyPopulation(m=400, seed=7)
    G = np.stack([big.evaluate(i, x)[1] for i in range(big.m)])
    g = G.mean(axis=0)
    sigma2 = sa.population_gradient_variance(big.population(), x, gradients=G)
    gen = RandomStream(50).generator()
    s = 8
    mc = {}
    for kind in (WITHOUT_REPLACEMENT, WITH_REPLACEMENT):
        plan = SamplePlan(kind, s)
        e = [np.sum((G[sa.draw(plan, big.m, gen)].mean(axis=0) - g) ** 2) for _ in range(100_000)]
        mc[kind] = abs(np.mean(e) / sa.predicted_error(plan, big.m, sigma2) - 1)
    ratio_err = max(
        abs(sa.predicted_error(SamplePlan(WITHOUT_REPLACEMENT, k), 50, 1.7) / sa.predicted_error(SamplePlan(WITH_REPLACEMENT, k), 50, 1.7) - (1 - k / 50))
        for k in range(1, 51)
    )
    ok = enum_err <= 1e-12 and max(mc.values()) <= 0.03 and ratio_err <= 1e-12
    record(
        5,
        ok,
        f"enumeration {enum_err:.1e} <= 1e-12; Monte-Carlo without {mc[WITHOUT_REPLACEMENT]:.2%}, "
        f"with {mc[WITH_REPLACEMENT]:.2%} <= 3%; ratio {ratio_err:.1e}",
    )


def test_criterion_06_schedule_reproduction():
    import csv

    table = sa.schedule_table(sa.ScheduleParams(m=1000, rate=0.9, iterations=60))
    w, r, d = (table[k] for k in sa.STRATEGIES)
    monotone = all(np.all(np.diff(t.sizes) >= 0) for t in (w, r, d))
    ordered = bool(np.all(w.cumulative <= r.cumulative) and np.all(r.cumulative <= d.cumulative))
    with open(DATA / "schedule_m1000_r0.9.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    locked = len(rows) == 60 and all(
        int(row["cum_without"]) == w.cumulative[k] and int(row["cum_with"]) == r.cumulative[k] and int(row["cum_deterministic"]) == d.cumulative[k]
        for k, row in enumerate(rows)
    )
    record(
        6,
        monotone and ordered and locked,
        f"monotone {monotone}, cumulative without <= with <= deterministic {ordered} "
        f"(final {w.cumulative[-1]}, {r.cumulative[-1]}, {d.cumulative[-1]}), regression lock {locked}",
    )


def final_error_ratio(run):
    s = run.manifest["summary"]
    return s["final_model_error"] / s["initial_model_error"]


def test_criterion_07_robust_inversion_ordering(runs):
    ratios = {(p, seed): final_error_ratio(runs.get(p, seed)) for p in PENALTIES for seed in SEEDS}
    ls_ok = all(ratios["least-squares", s] >= 0.95 for s in SEEDS)
    st_ok = all(ratios["students-t", s] <= 0.7 for s in SEEDS)
    order_ok = all(ratios["students-t", s] < ratios["huber", s] < ratios["least-squares", s] for s in SEEDS)
    detail = "; ".join(
        f"seed {s}: t {ratios['students-t', s]:.3f} < Huber {ratios['huber', s]:.3f} < LS {ratios['least-squares', s]:.3f}" for s in SEEDS
    )
    record(7, ls_ok and st_ok and order_ok, f"final/initial model error, {detail}")


def test_criterion_08_residual_shape(runs):
    masses = {}
    for seed in SEEDS:
        for p in ("students-t", "least-squares"):
            s = runs.get(p, seed).manifest["summary"]
            masses[f"{p}/{seed}"] = s["zero_bin_mass_final"]
        masses[f"true/{seed}"] = s["zero_bin_mass_true"]
    ratio = masses["students-t/0"] / masses["least-squares/0"]
    all_seeds = all(masses[f"students-t/{s}"] >= 2 * masses[f"least-squares/{s}"] for s in SEEDS)
    if not LOCK.exists():
        LOCK.write_text(json.dumps({"zero_bin_mass": masses}, indent=2, sort_keys=True) + "\n")
    locked = json.loads(LOCK.read_text())["zero_bin_mass"]
    # bin masses move in steps of 1/(2 * data size); allow a few steps of platform drift
    drift = max(abs(locked[k] - masses[k]) for k in locked)
    record(
        8,
        ratio >= 2 and all_seeds and drift <= 0.01,
        f"zero-bin mass t {masses['students-t/0']:.3f} vs LS {masses['least-squares/0']:.3f} (ratio {ratio:.2f} >= 2, "
        f"all seeds {all_seeds}), true-model {masses['true/0']:.3f}; lock drift {drift:.1e}",
    )


def test_criterion_09_sampling_efficiency(runs):
    details, ok = [], True
    for seed in SEEDS:
        full = runs.get("students-t", seed)
        grow = runs.get("students-t", seed, solver="growing-sample")
        full_rows = read_run_csv(full.outdir / "run.csv")
        grow_rows = read_run_csv(grow.outdir / "run.csv")
        budget = full_rows[-1]["cum_evals"]
        reached = ex.evaluations_to_reach(full_rows, grow_rows, rel_tol=0.05)
        final_ratio = ex.full_misfit(grow_rows[-1]) / ex.full_misfit(full_rows[-1])
        ok &= reached is not None and reached <= 0.5 * budget
        details.append(f"seed {seed}: {reached} of {budget} evaluations (final misfit ratio {final_ratio:.3f})")
    record(9, ok, "growing-sample within 5% of full final misfit at <= 50% cost; " + "; ".join(details))


def test_criterion_10_determinism(runs, tmp_path):
    base = ExperimentConfig().replace(
        grid__nz=16, grid__nx=21, frequencies__hz=[3.0, 5.0], sources__count=4, receivers__count=21,
        model__water_rows=2, model__anomalies=[[180.0, 200.0, 60.0, 250.0]], model__smoothing=3.0, solver__max_iter=6,
    )
    solvers = {
        "lbfgs": {},
        "growing-sample": {"solver.schedule": "bound"},
        "stochastic-gradient": {"solver.alpha": 1e-18, "sampling.size": 3, "sampling.kind": "with-replacement"},
        "incremental-gradient": {"solver.alpha": 1e-18, "solver.step_policy": "harmonic"},
    }
    csvs = ("run.csv", "residual_hist.csv", "model_final.csv")
    mismatched = []
    for name, extra in solvers.items():
        cfg = base.replace(solver__kind=name, **{k.replace(".", "__"): v for k, v in extra.items()})
        ex.run(cfg, tmp_path / name / "ref")
        for tag, c in (("again", cfg), ("threads", cfg.replace(parallel__workers=3))):
            out = ex.run(c, tmp_path / name / tag).outdir
            mismatched += [f"{name}/{tag}/{f}" for f in csvs if (tmp_path / name / "ref" / f).read_bytes() != (out / f).read_bytes()]
    # the full desk-scale harness, repeated with a threaded oracle
    ref = runs.get("students-t", 0)
    again = ex.run(ref.setup.cfg.replace(parallel__workers=3), tmp_path / "desk")
    mismatched += [f"desk/{f}" for f in csvs if (ref.outdir / f).read_bytes() != (again.outdir / f).read_bytes()]
    record(10, not mismatched, f"4 solvers + desk harness, repeat and 3 workers: mismatches {mismatched or 'none'}")
