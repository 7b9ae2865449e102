import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polymer.kernels import Kernel, eval_f
from polymer.occupation import PAGE, DriftQuerySpec, OccupationMeasure, QueryMode

DR = Kernel.durrett_rogers(0.5)
NP = Kernel.nonneg_power(0.5)


def brute(kernel, xs, dts, x):
    """Drift from every individual deposit, no binning."""
    return float(np.sum(dts * eval_f(kernel, x - xs)))


def binned_oracle(kernel, xs, dts, width, x):
    """Exact binned drift computed independently with numpy bincount."""
    cells = np.floor(xs / width).astype(np.int64)
    ids, inv = np.unique(cells, return_inverse=True)
    mass = np.bincount(inv, weights=dts)
    mom = np.bincount(inv, weights=xs * dts)
    return float(np.sum(mass * eval_f(kernel, x - mom / mass)))


def random_measure(rng, n, width=0.1, spread="normal"):
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
    m = OccupationMeasure(width)
    m.deposit_many(xs, dts)
    return m, xs, dts


def test_single_deposit():
    m = OccupationMeasure(0.1)
    m.deposit(0.55, 0.01)
    ids, mass, mom = m.cells()
    assert ids.tolist() == [5]
    assert mass[0] == 0.01
    assert mom[0] / mass[0] == pytest.approx(0.55)
    assert m.total_mass == 0.01


def test_two_deposits_share_cell_centroid():
    m = OccupationMeasure(0.1)
    m.deposit(0.52, 0.01)
    m.deposit(0.58, 0.01)
    ids, mass, mom = m.cells()
    assert ids.tolist() == [5]
    assert mom[0] / mass[0] == pytest.approx(0.55, abs=1e-15)


def test_conservation_over_a_million_deposits():
    rng = np.random.default_rng(0)
    dts = rng.exponential(0.01, 10**6)
    m = OccupationMeasure(0.1)
    m.deposit_many(rng.normal(0, 100, 10**6), dts)
    assert abs(m.total_mass - math.fsum(dts)) <= 1e-9 * math.fsum(dts)
    assert abs(m.cells()[1].sum() - math.fsum(dts)) <= 1e-9 * math.fsum(dts)


@pytest.mark.parametrize("dt", [0.0, -1.0, float("nan")])
def test_nonpositive_dt_rejected(dt):
    with pytest.raises(ValueError):
        OccupationMeasure(0.1).deposit(0.0, dt)


def test_range_grows_both_ways():
    m = OccupationMeasure(0.5)
    for x in (0.0, -1e6, 3e7, -2.5e8):
        m.deposit(x, 1.0)
    ids = m.cells()[0]
    assert ids.tolist() == sorted(math.floor(x / 0.5) for x in (0.0, -1e6, 3e7, -2.5e8))
    lo, hi = m.cell_range
    assert lo <= ids.min() and ids.max() < hi


@given(st.integers(0, 2**31), st.sampled_from(["normal", "cauchy", "pareto", "walk"]))
def test_centroids_inside_cells_and_aggregates_consistent(seed, spread):
    rng = np.random.default_rng(seed)
    m, xs, dts = random_measure(rng, 2000, 0.25, spread)
    ids, mass, mom = m.cells()
    c = mom / mass
    assert np.all(c >= ids * 0.25 - 1e-9 * (1 + np.abs(c)))
    assert np.all(c <= (ids + 1) * 0.25 + 1e-9 * (1 + np.abs(c)))
    r = m.copy()
    r.rebuild()
    k = m.n_pages
    assert np.array_equal(r.pmass[:k], m.pmass[:k]) and np.array_equal(r.pmom[:k], m.pmom[:k])
    assert np.array_equal(r.tmass, m.tmass) and np.array_equal(r.tmom, m.tmom)


def test_empty_measure_drift_is_zero():
    m = OccupationMeasure(0.1)
    assert m.drift_at(DR, 3.0) == 0.0
    assert m.drift_at(DR, 3.0, DriftQuerySpec("coarsened", 0.1, 0.5)) == 0.0
    np.testing.assert_array_equal(m.drift_profile(DR, [0.0, 1.0], (0.0, 1.0)), [0.0, 0.0])


def test_single_atom_drift():
    m = OccupationMeasure(0.1)
    m.deposit(1.0, 2.0)
    assert m.drift_at(DR, 2.0) == pytest.approx(1.0, rel=1e-12)


@given(st.integers(0, 2**31), st.sampled_from(["normal", "cauchy", "pareto", "walk"]), st.sampled_from([DR, NP]))
def test_exact_mode_matches_numpy_oracle(seed, spread, kernel):
    rng = np.random.default_rng(seed)
    m, xs, dts = random_measure(rng, 500, 0.1, spread)
    for x in rng.normal(0, 10, 5):
        ref = binned_oracle(kernel, xs, dts, 0.1, x)
        assert m.drift_at(kernel, x) == pytest.approx(ref, rel=1e-10, abs=1e-12)


@given(
    st.integers(0, 2**31),
    st.sampled_from(["normal", "cauchy", "pareto", "walk"]),
    st.sampled_from([DR, NP]),
    st.sampled_from([1e-3, 1e-2, 0.1, 1.0]),
)
def test_coarsened_within_tolerance(seed, spread, kernel, tol):
    rng = np.random.default_rng(seed)
    m, xs, dts = random_measure(rng, 3000, 0.1, spread)
    spec = DriftQuerySpec("coarsened", tol, 0.2)
    queries = np.concatenate([rng.normal(0, 10, 5), rng.choice(xs, 5)])
    for x in queries:
        assert abs(m.drift_at(kernel, x, spec) - m.drift_at(kernel, x)) <= tol


@given(st.integers(0, 2**31), st.sampled_from([0.05, 0.1, 0.5]))
def test_binning_error_second_order(seed, width):
    rng = np.random.default_rng(seed)
    m, xs, dts = random_measure(rng, 2000, width, "normal")
    # max |f''| from a dense second difference of f (independent of eval_fsecond)
    g = np.linspace(-10, 10, 200001)
    h = g[1] - g[0]
    f = eval_f(DR, g)
    f2 = np.max(np.abs(np.diff(f, 2))) / h**2
    bound = m.total_mass * f2 * 1.001 * width**2 / 8
    for x in rng.normal(0, 6, 10):
        assert abs(m.drift_at(DR, x) - brute(DR, xs, dts, x)) <= bound


def test_split_examples():
    m = OccupationMeasure(0.1)
    m.deposit(1.0, 1.0)
    h, k = m.drift_split(DR, 3.0, (0.0, 2.0))
    assert h == pytest.approx(float(eval_f(DR, 2.0)), rel=1e-12) and k == 0.0
    m = OccupationMeasure(0.1)
    m.deposit(5.0, 1.0)
    h, k = m.drift_split(DR, 3.0, (0.0, 2.0))
    assert h == 0.0 and k == pytest.approx(float(eval_f(DR, -2.0)), rel=1e-12)


@given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 30))
def test_split_partition(seed, x, a, width):
    rng = np.random.default_rng(seed)
    m, _, _ = random_measure(rng, 300, 0.1, "normal")
    h, k = m.drift_split(DR, x, (a, a + width))
    ex = m.drift_at(DR, x)
    assert abs(h + k - ex) <= 1e-12 * (1 + abs(h) + abs(k))


@pytest.mark.parametrize("interval", [(1.0, 1.0), (2.0, 1.0)])
def test_degenerate_interval(interval):
    with pytest.raises(ValueError):
        OccupationMeasure(0.1).drift_split(DR, 0.0, interval)


def test_profile_examples():
    m = OccupationMeasure(0.1)
    m.deposit(1.0, 1.0)
    prof = m.drift_profile(DR, [0.0, 0.5], (0.0, 1.5))
    assert prof[0] == pytest.approx(-0.5, rel=1e-12)
    assert prof[1] == pytest.approx(-(0.5 / (1 + 0.5**1.5)), rel=1e-12)
    assert prof[1] == pytest.approx(-0.369398, abs=1e-6)


def test_profile_of_symmetric_measure_vanishes_at_centre():
    m = OccupationMeasure(0.1)
    rng = np.random.default_rng(3)
    # mirrored deposits about 0.5, each in its own cell, away from cell edges
    d = (rng.integers(1, 40, 50) + 0.5) * 0.1
    m.deposit_many(np.concatenate([0.5 + d, 0.5 - d]), np.ones(100))
    assert abs(m.drift_profile(DR, [0.5], (-10, 10))[0]) <= 1e-12


def test_query_cost_cap_at_huge_extent():
    rng = np.random.default_rng(7)
    width = 1.0
    extent = 1e8
    n = 10**5
    xs = rng.uniform(0, extent * width, n)
    xs[: n // 10] = rng.normal(extent / 2, 3.0, n // 10)
    m = OccupationMeasure(width)
    m.deposit_many(xs, rng.exponential(0.01, n))
    assert m.cell_range[1] - m.cell_range[0] >= extent
    cap = 64 * math.ceil(math.log2(extent))
    spec = DriftQuerySpec("coarsened", 1e-2, 1.0)
    for x in np.concatenate([rng.uniform(0, extent, 20), extent / 2 + rng.normal(0, 2, 20)]):
        value, visited = m.drift_with_cost(DR, x, spec)
        assert visited <= cap
        assert abs(value - m.drift_at(DR, x)) <= 1e-2


def test_spec_validation():
    with pytest.raises(ValueError):
        DriftQuerySpec("coarsened", 0.0, 1.0)
    with pytest.raises(ValueError):
        DriftQuerySpec("coarsened", 0.1, 0.05).validate_for(0.1)
    assert DriftQuerySpec.exact().mode is QueryMode.EXACT


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(11)
    m, _, _ = random_measure(rng, 1000, 0.1, "cauchy")
    back = OccupationMeasure.from_csv(m.to_csv(), 0.1, total_mass=m.total_mass)
    for a, b in zip(m.cells(), back.cells()):
        assert np.array_equal(a, b)
    assert back.drift_at(DR, 1.3) == m.drift_at(DR, 1.3)


def test_from_cells_with_layout_reproduces_coarse_queries():
    rng = np.random.default_rng(12)
    m, _, _ = random_measure(rng, 5000, 0.1, "pareto")
    ids, mass, mom = m.cells()
    back = OccupationMeasure.from_cells(0.1, ids, mass, mom, m.total_mass, origin=int(m.ist[0]), n_slots=m.n_slots)
    spec = DriftQuerySpec("coarsened", 0.05, 0.2)
    for x in rng.normal(0, 5, 10):
        assert back.drift_with_cost(DR, x, spec) == m.drift_with_cost(DR, x, spec)


def test_page_size_is_power_of_two():
    assert PAGE & (PAGE - 1) == 0
