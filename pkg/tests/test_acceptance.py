"""Acceptance gate: one test per criterion, each recorded for the end-of-run table.

The statistical criteria (9 to 12) run full-size ensembles and take about 22
minutes on one core; the seed below is not the one used to calibrate them.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate, optimize

from polymer import cli
from polymer.ensemble import lemma4_report, run_ensemble, scaling_trend
from polymer.integrator import SimConfig, simulate
from polymer.kernels import Kernel, check_kernel_properties, eval_f
from polymer.lemmalab import verify_exponential_inequality, verify_lemma2, verify_lemma7
from polymer.occupation import DriftQuerySpec, OccupationMeasure
from polymer.scaling import compute_constants, sequence_report

SEED = 20261015
BETAS = (0.1, 0.25, 0.5, 0.75, 0.9)
# production settings for the ensembles: drift error <= 1 per query, far below
# the drift itself (order t^(alpha-1)) at every horizon that matters
FAST = dict(drift_spec=DriftQuerySpec("coarsened", 1.0, 0.5), dt_safety=0.25, bin_width=0.25)


def c0_oracle(beta, l=1.0):
    """Solve alpha c^(1+beta) = integral_0^1 l (1-u)^-beta du by quadrature and bisection."""
    alpha = 2.0 / (1.0 + beta)
    integral, _ = integrate.quad(lambda u: l, 0.0, 1.0, weight="alg", wvar=(0.0, -beta), epsabs=1e-14, epsrel=1e-14)
    return optimize.bisect(lambda c: alpha * c ** (1.0 + beta) - integral, 1e-6, 100.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


# -- 1 -------------------------------------------------------------------------------


def test_criterion_01_constants(criterion):
    t0 = time.perf_counter()
    errs = {b: abs(compute_constants(b, 1.0).c0 - c0_oracle(b)) for b in BETAS}
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-10 and dt < 1.0
    assert criterion(1, ok, f"max |c0 - oracle| = {max(errs.values()):.2e} over {len(BETAS)} betas, {dt:.2f} s"), errs


# -- 2 -------------------------------------------------------------------------------


def test_criterion_02_kernel_properties(criterion):
    t0 = time.perf_counter()
    reps = [check_kernel_properties(Kernel.durrett_rogers(b), 1e-3, -2.0, 50.0, 10**5, seed=SEED) for b in BETAS]
    dt = time.perf_counter() - t0
    failed = [(r.beta, c.name) for r in reps for c in r.checks if not c.passed]
    n_checks = sum(len(r.checks) for r in reps)
    ok = not failed and n_checks == 5 * len(BETAS) and dt < 30.0
    assert criterion(2, ok, f"{n_checks} property checks, failures {failed}, {dt:.1f} s"), failed


# -- 3 -------------------------------------------------------------------------------


def test_criterion_03_a_sequence(criterion):
    t0 = time.perf_counter()
    problems = []
    for b in BETAS:
        r = sequence_report(b, 10**7, threshold=1e3)
        if not r.passed:
            problems.append(f"beta={b}: structural or growth check failed")
        if r.first_index_above is None:
            problems.append(f"beta={b}: a_n stays below 1e3 up to n=1e7 (a_1e7 = {r.last_value:.1f})")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 10.0
    assert criterion(3, ok, f"{dt:.1f} s; " + ("; ".join(problems) if problems else "all betas pass")), problems


# -- 4 -------------------------------------------------------------------------------


def _random_measure(rng, i):
    n = 10**6 if i == 0 else int(10 ** rng.uniform(0.0, 6.0))
    spread = ("cauchy", "pareto", "normal", "walk")[i % 4]
    if spread == "normal":
        xs = rng.normal(0.0, 5.0, n)
    elif spread == "cauchy":
        xs = rng.standard_cauchy(n) * 3.0
    elif spread == "pareto":
        xs = (rng.pareto(0.8, n) + 1.0) * rng.choice([-1.0, 1.0], n)
    else:
        xs = np.cumsum(rng.normal(0.05, 0.3, n))
    xs = np.clip(xs, -1e7, 1e7)
    dts = rng.exponential(0.01, n)
    width = (0.05, 0.1, 0.25)[i % 3]
    m = OccupationMeasure(width)
    m.deposit_many(xs, dts)
    return m, xs, dts, width


def test_criterion_04_drift_engine(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    dr, npk = Kernel.durrett_rogers(0.5), Kernel.nonneg_power(0.5)
    g = np.linspace(-10.0, 10.0, 200001)
    f2max = float(np.max(np.abs(np.diff(eval_f(dr, g), 2))) / (g[1] - g[0]) ** 2) * 1.001
    worst_coarse = 0.0
    worst_bin = 0.0
    n_queries = 0
    bad = []
    for i in range(1000):
        m, xs, dts, width = _random_measure(rng, i)
        tol = (1e-3, 1e-2, 0.1, 1.0)[i % 4]
        spec = DriftQuerySpec("coarsened", tol, 0.5)
        queries = np.concatenate([rng.normal(0.0, 10.0, 2), rng.choice(xs, 2), [xs.max() + 1.0]])
        for kernel in (dr, npk):
            for x in queries:
                err = abs(m.drift_at(kernel, x, spec) - m.drift_at(kernel, x))
                n_queries += 1
                worst_coarse = max(worst_coarse, err / tol)
                if err > tol:
                    bad.append(("coarse", i, float(x)))
        bound = m.total_mass * f2max * width**2 / 8.0
        for x in queries[:3]:
            err = abs(m.drift_at(dr, x) - float(np.sum(dts * eval_f(dr, x - xs))))
            worst_bin = max(worst_bin, err / bound)
            if err > bound:
                bad.append(("binning", i, float(x)))
    dt = time.perf_counter() - t0
    ok = not bad and dt < 300.0
    detail = f"{n_queries} coarsened queries, worst err/tol = {worst_coarse:.3f}, worst binning err/bound = {worst_bin:.3f}, {dt:.0f} s"
    assert criterion(4, ok, detail), bad[:5]


# -- 5 -------------------------------------------------------------------------------


def test_criterion_05_integrator_oracles(criterion):
    t0 = time.perf_counter()
    s = run_ensemble(SimConfig(Kernel.zero(), t_end=1.0, dt_base=0.01, seed=SEED), 10**4)
    x = s.column("terminal_x")
    mean, var = float(x.mean()), float(x.var(ddof=1))
    ok_a = abs(mean) <= 0.04 and 0.95 <= var <= 1.05 and len(x) == 10**4
    ramp = []
    for dtb in (0.1, 0.01, 0.001):
        st = simulate(SimConfig(Kernel.constant(1.0), t_end=2.0, dt_base=dtb, noise_on=False))
        T1 = st.hittings()[1.0]
        ramp.append(abs(st.x - 2.0) <= 2 * dtb and abs(T1 - math.sqrt(2.0)) <= dtb)
    dt = time.perf_counter() - t0
    ok = ok_a and all(ramp) and dt < 120.0
    detail = f"BM mean {mean:+.4f}, variance {var:.4f}; ramp checks {ramp}; {dt:.1f} s"
    assert criterion(5, ok, detail)


# -- 6 to 8 --------------------------------------------------------------------------


def test_criterion_06_lemma7(criterion):
    t0 = time.perf_counter()
    reps = [verify_lemma7(1.0, ah, 10**5, seed=SEED + j) for j, ah in enumerate((6.0, 8.0, 12.0, 20.0))]
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in reps) and dt < 300.0
    detail = ", ".join(f"ah={r.a * r.h:g}: p={r.p_hat:.5f} vs {r.bound:.5f}" for r in reps) + f"; {dt:.0f} s"
    assert criterion(6, ok, detail)


def test_criterion_07_lemma2(criterion):
    t0 = time.perf_counter()
    reps = [verify_lemma2(b, 10**4, seed=SEED + j) for j, b in enumerate((0.25, 0.5, 0.75))]
    dt = time.perf_counter() - t0
    ok = all(r.passed and r.kept == 10**4 for r in reps) and dt < 300.0
    detail = ", ".join(f"beta={r.beta}: kept {r.kept}, violations {r.violations}" for r in reps) + f"; {dt:.0f} s"
    assert criterion(7, ok, detail)


def test_criterion_08_exponential_inequality(criterion):
    t0 = time.perf_counter()
    reps = [verify_exponential_inequality(t, a, 10**5, seed=SEED + j) for j, (t, a) in enumerate(((1.0, 1.0), (1.0, 2.0), (4.0, 2.0)))]
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in reps) and dt < 60.0
    detail = ", ".join(f"(t={r.t:g},a={r.a:g}): {r.estimate:.4f} vs exact {r.exact:.4f}, bound {r.bound:.4f}" for r in reps) + f"; {dt:.0f} s"
    assert criterion(8, ok, detail)


# -- 9 to 12: shared ensembles -------------------------------------------------------


@pytest.fixture(scope="session")
def nonneg_runs():
    cfg = SimConfig(Kernel.nonneg_power(0.5), t_end=1.0, seed=SEED, **FAST)
    t0 = time.perf_counter()
    runs = [run_ensemble(cfg.with_(t_end=T), 100) for T in (1e2, 1e3, 1e4)]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def dr_runs():
    cfg = SimConfig(Kernel.durrett_rogers(0.5), t_end=1.0, seed=SEED, **FAST)
    runs, times = [], []
    for T in (1e2, 1e3):
        t0 = time.perf_counter()
        runs.append(run_ensemble(cfg.with_(t_end=T), 10**4))
        times.append(time.perf_counter() - t0)
    return runs, times


def test_criterion_09_limit_shape(criterion, nonneg_runs):
    runs, dt = nonneg_runs
    tr = scaling_trend(runs)
    complete = all(len(s.per_path) == 100 for s in runs)
    positive = all(bool(np.all(s.column("terminal_x") > 0.0)) for s in runs)
    ok = bool(tr.dist_decreasing) and complete and positive
    dist = ", ".join(f"{d:.4f}" for d in tr.median_dist_c0)
    detail = f"median |X_T/T^alpha - c0| = [{dist}], all positive {positive}, complete {complete}; {dt / 60:.1f} min (target 30)"
    assert criterion(9, ok, detail)


def test_criterion_10_symmetry(criterion, dr_runs):
    runs, times = dr_runs
    s = runs[1]
    ok = len(s.per_path) == 10**4 and 0.485 <= s.sign_balance <= 0.515 and s.ks_pvalue > 0.01
    detail = f"sign balance {s.sign_balance:.4f} over {s.n_committed} committed paths, KS p = {s.ks_pvalue:.3f}; {times[1] / 60:.1f} min (target 60)"
    assert criterion(10, ok, detail)


def test_criterion_11_upper_bound_trend(criterion, dr_runs):
    runs, _ = dr_runs
    tr = scaling_trend(runs)
    ok = tr.thmA_nonincreasing and all(len(s.per_path) == 10**4 for s in runs)
    detail = f"fraction with late max > 1.5 c0: {tr.frac_thmA_above} at horizons {tr.horizons}"
    assert criterion(11, ok, detail)


def test_criterion_12_fast_advances(criterion, nonneg_runs):
    runs, _ = nonneg_runs
    consts = compute_constants(0.5)
    reps = [lemma4_report(s, consts) for s in runs]
    n_A = [r["n_A_mean"] for r in reps]
    frac = [r["frac_below_half_floor"] for r in reps]
    ok = all(b > a for a, b in zip(n_A, n_A[1:])) and all(b < a for a, b in zip(frac, frac[1:]))
    detail = f"mean A-flagged levels {[round(v, 1) for v in n_A]}, fraction below half floor {[f'{v:.2e}' for v in frac]}"
    assert criterion(12, ok, detail)


# -- 13 ------------------------------------------------------------------------------

SMALL = ["--set", "t_end=20", "--set", "n_paths=16", "--set", "opening_tolerance=1", "--seed", str(SEED)]
COMMANDS = {
    "simulate": ["simulate", *SMALL],
    "ensemble": ["ensemble", *SMALL],
    "trend": ["trend", *SMALL, "--set", "kernel=nonneg_power", "--set", "horizons=10,20"],
    "verify": ["verify", "--beta-grid", "0.5", "--quick", "--seed", str(SEED)],
    "oracle_bm": ["oracle", "--kind", "bm", "--n", "500", "--seed", str(SEED)],
    "oracle_ramp": ["oracle", "--kind", "ramp"],
}


def _files(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_criterion_13_determinism(criterion, tmp_path, capsys):
    mismatched = []
    for name, argv in COMMANDS.items():
        outs = []
        for workers in ("1", "8", "1"):
            out = tmp_path / f"{name}_{workers}_{len(outs)}"
            code = cli.main([*argv, "--workers", workers, "--out", str(out)])
            outs.append((code, _files(out)))
        if any(o != outs[0] for o in outs) or not outs[0][1]:
            mismatched.append(name)
    capsys.readouterr()
    texts = []
    for _ in range(2):
        cli.main(["constants", "--beta", "0.5"])
        texts.append(capsys.readouterr().out)
    if texts[0] != texts[1]:
        mismatched.append("constants")
    detail = f"{len(COMMANDS) + 1} commands rerun with workers 1, 8, 1; mismatches {mismatched}"
    assert criterion(13, not mismatched, detail)
