"""Euler-Maruyama integration of one self-interacting path.

Each step freezes the drift G = g_t(X_t) at the left endpoint, deposits the
step's time into the occupation measure at the starting position, and moves

    x <- x + G dt + sqrt(dt) * xi.

The step length is min(dt_base, dt_safety / (1 + |G|)) clipped so that record
and snapshot times are landed on exactly. Gaussian increments come from a
counter-based stream keyed on (seed, path_id): increment number n is a pure
function of (seed, path_id, n), so runs are reproducible bit for bit and
independent of how paths are scheduled across workers.

First passages of the levels +-k * level_step are detected when the running
maximum (minimum) is pushed past them and timed by linear interpolation
between the step endpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace

import numba
import numpy as np

from .kernels import Kernel
from .occupation import (
    NEED_PAGES,
    NEED_SLOTS,
    N_LEVELS,
    OK,
    STACK_SIZE,
    DriftQuerySpec,
    OccupationMeasure,
    QueryMode,
    _admission_table,
    _deposit,
    _drift_coarse,
    _drift_exact,
)
from .kernels import envelopes

# kernel exit codes (NEED_SLOTS / NEED_PAGES come from occupation)
DONE = 10
NEED_RNG = 11
NEED_LEVELS = 12
SNAPSHOT = 13
STEP_LIMIT = 14
ABORT = 15

# float state
S_T, S_X, S_MAX, S_MIN, S_G, S_THR = range(6)
# int state
S_STEP, S_NPOS, S_NNEG, S_REC, S_SNAP, S_GVALID, S_BLOCK0 = range(7)

FIRST_BLOCK = 1024
# per-sign cap on tracked levels (four float64 arrays of this length)
MAX_LEVELS = 1 << 25
MAX_BLOCK_DOUBLINGS = 6


class PathAborted(RuntimeError):
    """A path produced a non-finite position or drift. ``state`` keeps the partial run."""

    def __init__(self, message: str, state: "PathState"):
        super().__init__(message)
        self.state = state


# -- configuration ------------------------------------------------------------


def geometric_times(t_end: float, ratio: float = 2.0 ** 0.25, start: float = 1.0) -> tuple[float, ...]:
    times = []
    t = start
    k = 0
    # points within rounding of t_end collapse onto it
    while t < t_end * (1.0 - 1e-12):
        times.append(t)
        k += 1
        t = start * ratio**k
    times.append(float(t_end))
    return tuple(times)


def dyadic_times(t_end: float) -> tuple[float, ...]:
    times = [0.0]
    t = 1.0
    while t < t_end:
        times.append(t)
        t *= 2.0
    return tuple(times)


@dataclass(frozen=True)
class SimConfig:
    kernel: Kernel
    t_end: float
    dt_base: float = 0.1
    dt_safety: float = 0.1
    bin_width: float = 0.1
    drift_spec: DriftQuerySpec = field(default_factory=lambda: DriftQuerySpec("coarsened", 0.1, 0.5))
    seed: int = 0
    path_id: int = 0
    noise_on: bool = True
    record_times: tuple[float, ...] | None = None
    level_step: float = 1.0
    snapshot_times: tuple[float, ...] | None = None
    tmin_fraction: float = 0.125

    def __post_init__(self):
        if not (self.t_end > 0.0) or not math.isfinite(self.t_end):
            raise ValueError("t_end must be positive and finite")
        if not (self.dt_base > 0.0):
            raise ValueError("dt_base must be positive")
        if not (0.0 < self.dt_safety <= 1.0):
            raise ValueError("dt_safety must lie in (0, 1]")
        if not (self.bin_width > 0.0):
            raise ValueError("bin_width must be positive")
        if not (self.level_step > 0.0):
            raise ValueError("level_step must be positive")
        if not (0 <= int(self.seed) < 2**64) or not (0 <= int(self.path_id) < 2**64):
            raise ValueError("seed and path_id must be unsigned 64-bit integers")
        if not (0.0 < self.tmin_fraction <= 1.0):
            raise ValueError("tmin_fraction must lie in (0, 1]")
        if self.drift_spec.mode is QueryMode.COARSENED:
            self.drift_spec.validate_for(self.bin_width)
        rec = geometric_times(self.t_end) if self.record_times is None else tuple(float(v) for v in self.record_times)
        if rec[-1] != self.t_end:
            rec = rec + (float(self.t_end),)
        _check_times(rec, self.t_end, "record_times", strict_positive=True)
        object.__setattr__(self, "record_times", rec)
        snap = dyadic_times(self.t_end) if self.snapshot_times is None else tuple(float(v) for v in self.snapshot_times)
        _check_times(snap, self.t_end, "snapshot_times", strict_positive=False)
        object.__setattr__(self, "snapshot_times", snap)

    @property
    def alpha(self) -> float:
        return self.kernel.alpha

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "kernel":
                v = v.to_dict()
            elif f.name == "drift_spec":
                v = {"mode": v.mode.value, "opening_tolerance": v.opening_tolerance, "near_radius": v.near_radius}
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["kernel"] = Kernel(**d["kernel"])
        d["drift_spec"] = DriftQuerySpec(**d["drift_spec"])
        for key in ("record_times", "snapshot_times"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _check_times(times, t_end, name, strict_positive):
    arr = np.asarray(times, dtype=float)
    if arr.size and (np.any(np.diff(arr) <= 0.0) or arr[0] < 0.0 or (strict_positive and arr[0] <= 0.0) or arr[-1] > t_end):
        raise ValueError(f"{name} must be strictly increasing within [0, t_end]")


# -- noise ----------------------------------------------------------------------


def block_bounds(b: int) -> tuple[int, int]:
    """Step-index range [lo, hi) of normal block ``b``.

    Blocks start at FIRST_BLOCK draws and double up to a cap, so short paths
    do not pay for a large block.
    """
    lo = 0
    size = FIRST_BLOCK
    for i in range(b):
        lo += size
        if i < MAX_BLOCK_DOUBLINGS:
            size *= 2
    return lo, lo + size


def normal_block(seed: int, path_id: int, b: int) -> np.ndarray:
    lo, hi = block_bounds(b)
    bitgen = np.random.Philox(key=np.array([seed, path_id], dtype=np.uint64), counter=np.array([0, 0, 0, b], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(hi - lo)


def increment(seed: int, path_id: int, step_index: int) -> float:
    """The standard normal used at step ``step_index`` (for inspection and tests)."""
    b = 0
    while block_bounds(b)[1] <= step_index:
        b += 1
    lo, _ = block_bounds(b)
    return float(normal_block(seed, path_id, b)[step_index - lo])


# -- state ----------------------------------------------------------------------


@dataclass
class HittingRecord:
    level: float
    T: float
    A_event: bool
    G_at_T: float
    ratio: float


class PathState:
    """Everything needed to continue a path: position, time, measure, noise counter, diagnostics."""

    def __init__(self, config: SimConfig):
        self.fs = np.zeros(6)
        self.fs[S_THR] = np.inf
        self.ist = np.zeros(7, dtype=np.int64)
        self.ist[S_BLOCK0] = -1
        self.measure = OccupationMeasure(config.bin_width)
        self.pos_T = np.zeros(64)
        self.pos_G = np.zeros(64)
        self.neg_T = np.zeros(64)
        self.neg_G = np.zeros(64)
        n_rec = len(config.record_times)
        self.rec_t = np.full(n_rec, np.nan)
        self.rec_x = np.full(n_rec, np.nan)
        self.rec_G = np.full(n_rec, np.nan)
        self.admit = np.full(N_LEVELS, np.inf)
        self.snap_t: list[float] = []
        self.snap_delta: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._snap_prev = (np.empty(0, np.int64), np.empty(0), np.empty(0))
        self.aborted: str | None = None

    # readable views
    t = property(lambda self: float(self.fs[S_T]))
    x = property(lambda self: float(self.fs[S_X]))
    max_so_far = property(lambda self: float(self.fs[S_MAX]))
    min_so_far = property(lambda self: float(self.fs[S_MIN]))
    step_index = property(lambda self: int(self.ist[S_STEP]))

    @property
    def G(self) -> float:
        """Drift at the current state (valid once the state has been advanced or finished)."""
        return float(self.fs[S_G])

    @property
    def n_records(self) -> int:
        return int(self.ist[S_REC])

    @property
    def records(self) -> np.ndarray:
        """(t, x, G) rows emitted so far."""
        n = self.n_records
        return np.column_stack([self.rec_t[:n], self.rec_x[:n], self.rec_G[:n]])

    def hittings(self) -> dict[float, float]:
        """Map level -> first hitting time (level 0 is hit at time 0)."""
        return {lvl: T for lvl, T, _ in self._levels_iter()}

    def _levels_iter(self):
        ls = self._level_step
        yield 0.0, 0.0, 0.0
        for k in range(1, int(self.ist[S_NPOS]) + 1):
            yield k * ls, float(self.pos_T[k]), float(self.pos_G[k])
        for k in range(1, int(self.ist[S_NNEG]) + 1):
            yield -k * ls, float(self.neg_T[k]), float(self.neg_G[k])

    def hitting_table(self, alpha: float) -> dict[str, np.ndarray]:
        """Columns level, T, A_event, G, ratio for every level crossed (positive then negative).

        For negative levels the roles are mirrored: A_event compares with the
        next level towards 0 and ratio uses -G, so both sides read the same.
        """
        ls = self._level_step
        cols = {"level": [], "T": [], "A_event": [], "G": [], "ratio": []}
        for sign, Ts, Gs, n in ((1.0, self.pos_T, self.pos_G, int(self.ist[S_NPOS])), (-1.0, self.neg_T, self.neg_G, int(self.ist[S_NNEG]))):
            k = np.arange(1, n + 1)
            T = Ts[1 : n + 1]
            prev = Ts[:n]
            G = Gs[1 : n + 1]
            cols["level"].append(sign * k * ls)
            cols["T"].append(T)
            cols["A_event"].append(T <= prev + 1.0)
            cols["G"].append(G)
            with np.errstate(divide="ignore", invalid="ignore"):
                cols["ratio"].append(sign * G / T ** (alpha - 1.0))
        return {k: np.concatenate(v) for k, v in cols.items()}

    def hitting_records(self, alpha: float) -> list[HittingRecord]:
        tab = self.hitting_table(alpha)
        return [
            HittingRecord(float(l), float(T), bool(a), float(g), float(r))
            for l, T, a, g, r in zip(tab["level"], tab["T"], tab["A_event"], tab["G"], tab["ratio"])
        ]

    # -- snapshots

    def _save_snapshot(self) -> None:
        ids, mass, mom = self.measure.cells()
        pids, pmass, pmom = self._snap_prev
        dm = mass.copy()
        dmu = mom.copy()
        if pids.size:
            pos = np.searchsorted(ids, pids)
            dm[pos] -= pmass
            dmu[pos] -= pmom
        keep = (dm != 0.0) | (dmu != 0.0)
        self.snap_t.append(self.t)
        self.snap_delta.append((ids[keep], dm[keep], dmu[keep]))
        self._snap_prev = (ids, mass, mom)

    def snapshot_measures(self):
        """Yield (time, ids, mass, moment) for each saved snapshot, rebuilt from the deltas."""
        ids = np.empty(0, np.int64)
        mass = np.empty(0)
        mom = np.empty(0)
        for t, (di, dm, dmu) in zip(self.snap_t, self.snap_delta):
            new_ids = np.union1d(ids, di)
            m2 = np.zeros(new_ids.size)
            mu2 = np.zeros(new_ids.size)
            m2[np.searchsorted(new_ids, ids)] += mass
            mu2[np.searchsorted(new_ids, ids)] += mom
            pos = np.searchsorted(new_ids, di)
            m2[pos] += dm
            mu2[pos] += dmu
            ids, mass, mom = new_ids, m2, mu2
            yield t, ids, mass, mom

    # -- checkpoints

    def save(self, path, config: SimConfig) -> None:
        ids, mass, mom = self.measure.cells()
        snaps = {}
        for i, (di, dm, dmu) in enumerate(self.snap_delta):
            snaps[f"snap{i}_ids"] = di
            snaps[f"snap{i}_mass"] = dm
            snaps[f"snap{i}_mom"] = dmu
        np.savez(
            path,
            config=np.array(json.dumps(config.to_dict())),
            fs=self.fs, ist=self.ist,
            m_ist=self.measure.ist, m_fst=self.measure.fst,
            cell_ids=ids, cell_mass=mass, cell_mom=mom,
            pos_T=self.pos_T, pos_G=self.pos_G, neg_T=self.neg_T, neg_G=self.neg_G,
            rec_t=self.rec_t, rec_x=self.rec_x, rec_G=self.rec_G,
            admit=self.admit, snap_t=np.array(self.snap_t),
            aborted=np.array(self.aborted or ""),
            **snaps,
        )

    @classmethod
    def load(cls, path) -> tuple["PathState", SimConfig]:
        with np.load(path) as z:
            config = SimConfig.from_dict(json.loads(str(z["config"])))
            st = cls(config)
            st.fs = z["fs"].copy()
            st.ist = z["ist"].copy()
            st.measure = OccupationMeasure.from_cells(
                config.bin_width, z["cell_ids"], z["cell_mass"], z["cell_mom"],
                total_mass=float(z["m_fst"][0]), origin=int(z["m_ist"][0]), n_slots=int(z["m_ist"][1]),
            )
            for name in ("pos_T", "pos_G", "neg_T", "neg_G", "rec_t", "rec_x", "rec_G", "admit"):
                setattr(st, name, z[name].copy())
            st.snap_t = [float(v) for v in z["snap_t"]]
            st.snap_delta = [(z[f"snap{i}_ids"], z[f"snap{i}_mass"], z[f"snap{i}_mom"]) for i in range(len(st.snap_t))]
            if st.snap_t:
                st._snap_prev = list(st.snapshot_measures())[-1][1:]
            st.aborted = str(z["aborted"]) or None
        st._level_step = config.level_step
        return st, config


# -- compiled stepping ----------------------------------------------------------


@numba.njit(cache=True)
def _advance(
    fs, ist,
    m_ist, m_fst, table, pmass, pmom, tmass, tmom,
    code, beta, c, lip, curv, grid, exact_mode, tol, near, admit, stack,
    dt_base, dt_safety, t_end, noise_on, normals,
    rec_times, rec_t, rec_x, rec_G,
    snap_times, level_step,
    pos_T, pos_G, neg_T, neg_G,
    max_steps,
):
    n_rec = rec_times.shape[0]
    n_snap = snap_times.shape[0]
    steps = 0
    while True:
        t = fs[S_T]
        x = fs[S_X]
        if ist[S_GVALID] == 0:
            total = m_fst[0]
            if total <= 0.0:
                G = 0.0
            elif exact_mode:
                G = _drift_exact(m_ist, m_fst, table, pmass, pmom, code, beta, c, x)
            else:
                thr = tol / total
                if thr < fs[S_THR]:
                    fs[S_THR] = thr * (1.0 - 1.0 / 32.0)
                    _admission_table(lip, curv, grid, m_fst[1], fs[S_THR], admit)
                G = _drift_coarse(m_ist, m_fst, table, pmass, pmom, tmass, tmom, code, beta, c, x, near, admit, stack)[0]
            fs[S_G] = G
            ist[S_GVALID] = 1
        G = fs[S_G]
        if not (math.isfinite(G) and math.isfinite(x)):
            return ABORT
        r = ist[S_REC]
        if r < n_rec and t >= rec_times[r]:
            rec_t[r] = t
            rec_x[r] = x
            rec_G[r] = G
            ist[S_REC] = r + 1
        s = ist[S_SNAP]
        if s < n_snap and t >= snap_times[s]:
            return SNAPSHOT
        if t >= t_end:
            return DONE
        if steps >= max_steps:
            return STEP_LIMIT

        dt = min(dt_base, dt_safety / (1.0 + abs(G)))
        nxt = t_end
        if ist[S_REC] < n_rec and rec_times[ist[S_REC]] < nxt:
            nxt = rec_times[ist[S_REC]]
        if s < n_snap and snap_times[s] < nxt:
            nxt = snap_times[s]
        landing = t + dt >= nxt or (nxt - (t + dt)) <= 1e-12 * nxt
        if landing:
            dt = nxt - t

        n = ist[S_STEP]
        z = 0.0
        if noise_on:
            j = n - ist[S_BLOCK0]
            if ist[S_BLOCK0] < 0 or j >= normals.shape[0]:
                return NEED_RNG
            z = normals[j]
        x_new = x + G * dt + math.sqrt(dt) * z
        if not math.isfinite(x_new):
            return ABORT

        # level capacity before anything is mutated
        k_hi = 0
        if x_new > fs[S_MAX]:
            k_hi = np.int64(math.floor(x_new / level_step))
            if k_hi >= pos_T.shape[0]:
                return NEED_LEVELS
        k_lo = 0
        if x_new < fs[S_MIN]:
            k_lo = np.int64(math.floor(-x_new / level_step))
            if k_lo >= neg_T.shape[0]:
                return NEED_LEVELS

        status = _deposit(m_ist, m_fst, table, pmass, pmom, tmass, tmom, x, dt)
        if status != OK:
            return status

        for k in range(ist[S_NPOS] + 1, k_hi + 1):
            lvl = k * level_step
            pos_T[k] = t + dt * (lvl - x) / (x_new - x)
            pos_G[k] = G
        if k_hi > ist[S_NPOS]:
            ist[S_NPOS] = k_hi
        for k in range(ist[S_NNEG] + 1, k_lo + 1):
            lvl = -k * level_step
            neg_T[k] = t + dt * (x - lvl) / (x - x_new)
            neg_G[k] = G
        if k_lo > ist[S_NNEG]:
            ist[S_NNEG] = k_lo

        fs[S_T] = nxt if landing else t + dt
        fs[S_X] = x_new
        if x_new > fs[S_MAX]:
            fs[S_MAX] = x_new
        if x_new < fs[S_MIN]:
            fs[S_MIN] = x_new
        ist[S_STEP] = n + 1
        ist[S_GVALID] = 0
        steps += 1


class _Runner:
    """Drives ``_advance`` for one path, servicing its growth and noise requests."""

    def __init__(self, config: SimConfig, state: PathState):
        self.config = config
        self.state = state
        state._level_step = config.level_step
        k = config.kernel
        env = envelopes(k)
        self.env = env
        self.exact = config.drift_spec.mode is QueryMode.EXACT
        self.stack = np.empty((STACK_SIZE, 4), dtype=np.int64)
        self.rec_times = np.asarray(config.record_times, dtype=float)
        self.snap_times = np.asarray(config.snapshot_times, dtype=float)
        self.normals = np.empty(0)
        self._block = -1
        if state.ist[S_BLOCK0] >= 0:
            self._load_block_for(int(state.ist[S_STEP]))

    def _load_block_for(self, step_index: int) -> None:
        b = 0
        while block_bounds(b)[1] <= step_index:
            b += 1
        c = self.config
        self.normals = normal_block(int(c.seed), int(c.path_id), b)
        self._block = b
        self.state.ist[S_BLOCK0] = block_bounds(b)[0]

    def run(self, max_steps: int = 2**62) -> int:
        c = self.config
        st = self.state
        k = c.kernel
        ds = c.drift_spec
        remaining = max_steps
        while True:
            m = st.measure
            before = int(st.ist[S_STEP])
            status = _advance(
                st.fs, st.ist,
                m.ist, m.fst, m.table, m.pmass, m.pmom, m.tmass, m.tmom,
                k.code, k.beta, k.c, self.env.lip, self.env.curv, self.env.grid,
                self.exact, ds.opening_tolerance, ds.near_radius, st.admit, self.stack,
                c.dt_base, c.dt_safety, c.t_end, c.noise_on, self.normals,
                self.rec_times, st.rec_t, st.rec_x, st.rec_G,
                self.snap_times, c.level_step,
                st.pos_T, st.pos_G, st.neg_T, st.neg_G,
                remaining,
            )
            remaining -= int(st.ist[S_STEP]) - before
            if status in (DONE, STEP_LIMIT):
                return status
            if status == NEED_RNG:
                self._load_block_for(int(st.ist[S_STEP]))
            elif status in (NEED_SLOTS, NEED_PAGES):
                try:
                    m._grow(status, float(st.fs[S_X]))
                except OverflowError as exc:
                    st.aborted = f"t={st.t!r}: {exc}"
                    raise PathAborted(st.aborted, st) from exc
            elif status == NEED_LEVELS:
                if 2 * st.pos_T.shape[0] > MAX_LEVELS:
                    st.aborted = f"t={st.t!r}: more than {MAX_LEVELS} levels of size {c.level_step!r} would be crossed"
                    raise PathAborted(st.aborted, st)
                for name in ("pos_T", "pos_G", "neg_T", "neg_G"):
                    old = getattr(st, name)
                    new = np.zeros(2 * old.shape[0])
                    new[: old.shape[0]] = old
                    setattr(st, name, new)
            elif status == SNAPSHOT:
                st._save_snapshot()
                st.ist[S_SNAP] += 1
            elif status == ABORT:
                st.aborted = f"non-finite state at t={st.t!r}: x={st.x!r}, G={st.G!r}"
                raise PathAborted(st.aborted, st)
            else:  # pragma: no cover
                raise RuntimeError(f"unexpected integrator status {status}")


def new_state(config: SimConfig) -> PathState:
    st = PathState(config)
    st._level_step = config.level_step
    return st


def step(state: PathState, config: SimConfig) -> PathState:
    """Advance ``state`` by exactly one Euler-Maruyama step."""
    if state.t >= config.t_end:
        raise ValueError("path already reached t_end")
    _Runner(config, state).run(max_steps=1)
    return state


def simulate(config: SimConfig, state: PathState | None = None) -> PathState:
    """Run (or resume) a path to ``config.t_end`` and return its final state."""
    state = state if state is not None else new_state(config)
    _Runner(config, state).run()
    return state


def run_path(config: SimConfig, state: PathState | None = None) -> tuple[PathState, list[HittingRecord]]:
    state = simulate(config, state)
    return state, state.hitting_records(config.alpha)


def gamma_plus_diagnostic(state: PathState, config: SimConfig, snapshot_times=None) -> float:
    """min over saved snapshot times s of g_t(X_t) - g_s(X_t), at the final position."""
    if not state.snap_t:
        raise ValueError("no occupation snapshots were saved during the run")
    wanted = None if snapshot_times is None else {float(s) for s in snapshot_times}
    k = config.kernel
    x = state.x
    g_t = state.measure.drift_at(k, x)
    best = math.inf
    for t, ids, mass, mom in state.snapshot_measures():
        if wanted is not None and t not in wanted:
            continue
        nz = mass > 0.0
        g_s = float(np.sum(mass[nz] * k(x - mom[nz] / mass[nz]))) if nz.any() else 0.0
        best = min(best, g_t - g_s)
    if best == math.inf:
        raise ValueError("none of the requested snapshot times were saved")
    return best


def trajectory_rows(state: PathState, alpha: float):
    """Rows t, x, G, x / t^alpha for the emitted records."""
    for t, x, G in state.records:
        yield t, x, G, x / t**alpha
