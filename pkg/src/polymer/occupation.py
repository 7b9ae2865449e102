"""Binned occupation measure of a path and drift queries against it.

The path's history enters the dynamics only through

    g_t(x) = int_0^t f(x - X_s) ds = sum over cells of  mass * f(x - centroid)

where each spatial cell of width ``bin_width`` stores the time spent in it
(zeroth moment) and the time-weighted sum of positions (first moment).
Evaluating f at the within-cell centroid makes the binning error second order
in the bin width.

Storage is paged. Cells are grouped into pages of ``PAGE`` consecutive cells;
each page holds a small binary heap (leaves = cells, internal nodes = sums).
A second heap over page slots aggregates whole pages. Together they form one
dyadic hierarchy whose nodes hold (mass, first moment) of their span. Pages
are only allocated when touched, so a sparse measure spanning 1e8 cells costs
memory proportional to the touched pages. The slot range doubles (towards
whichever side overflowed) when a deposit lands outside it.

A coarsened drift query descends the hierarchy from the root and collapses a
node to a single point mass at its centroid once the node is farther than
``near_radius`` from the query point and the collapse error, bounded by
``min(Lip(d) * hw, curv(d) * hw**2 / 2)`` per unit mass, is below
``opening_tolerance / total_mass``. Here ``d`` is the distance from the query
to the node's span, ``hw`` its half width and Lip/curv are monotone envelopes
of |f'| and |f''| beyond distance ``d``. Summed over nodes this keeps the
coarsened value within ``opening_tolerance`` of the exact binned sum.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numba
import numpy as np

from .kernels import Kernel, envelopes, f_scalar

PAGE_BITS = 8
PAGE = 1 << PAGE_BITS
_MASK = PAGE - 1

# int state layout
I_ORIGIN, I_SLOTS, I_PAGES = 0, 1, 2
# float state layout
F_TOTAL, F_WIDTH = 0, 1

OK = 0
NEED_SLOTS = 1
NEED_PAGES = 2

STACK_SIZE = 256
# at most 2^22 page slots, i.e. about 1.07e9 addressable cells (~170 MB of slot arrays)
MAX_SLOTS = 1 << 22


class QueryMode(str, enum.Enum):
    EXACT = "exact"
    COARSENED = "coarsened"


@dataclass(frozen=True)
class DriftQuerySpec:
    mode: QueryMode = QueryMode.COARSENED
    opening_tolerance: float = 1e-2
    near_radius: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", QueryMode(self.mode))
        if not (self.opening_tolerance > 0.0):
            raise ValueError("opening_tolerance must be positive")
        if not (self.near_radius >= 0.0):
            raise ValueError("near_radius must be nonnegative")

    def validate_for(self, bin_width: float) -> None:
        if self.near_radius < bin_width:
            raise ValueError(f"near_radius ({self.near_radius}) must be >= bin_width ({bin_width})")

    @classmethod
    def exact(cls) -> "DriftQuerySpec":
        return cls(QueryMode.EXACT, 1.0, 0.0)


# -- compiled core ------------------------------------------------------------


@numba.njit(cache=True)
def _deposit(ist, fst, table, pmass, pmom, tmass, tmom, x, dt):
    q = x / fst[F_WIDTH]
    if not (abs(q) < 4.0e18):
        return NEED_SLOTS
    cell = np.int64(math.floor(q))
    page = cell >> PAGE_BITS
    slot = page - ist[I_ORIGIN]
    if slot < 0 or slot >= ist[I_SLOTS]:
        return NEED_SLOTS
    p = table[slot]
    if p < 0:
        if ist[I_PAGES] >= pmass.shape[0]:
            return NEED_PAGES
        p = ist[I_PAGES]
        ist[I_PAGES] += 1
        table[slot] = p
    i = PAGE + (cell & _MASK)
    pmass[p, i] += dt
    pmom[p, i] += x * dt
    i >>= 1
    while i >= 1:
        pmass[p, i] = pmass[p, 2 * i] + pmass[p, 2 * i + 1]
        pmom[p, i] = pmom[p, 2 * i] + pmom[p, 2 * i + 1]
        i >>= 1
    j = ist[I_SLOTS] + slot
    tmass[j] = pmass[p, 1]
    tmom[j] = pmom[p, 1]
    j >>= 1
    while j >= 1:
        tmass[j] = tmass[2 * j] + tmass[2 * j + 1]
        tmom[j] = tmom[2 * j] + tmom[2 * j + 1]
        j >>= 1
    fst[F_TOTAL] += dt
    return OK


@numba.njit(cache=True)
def _drift_exact(ist, fst, table, pmass, pmom, code, beta, c, x):
    total = 0.0
    for slot in range(ist[I_SLOTS]):
        p = table[slot]
        if p < 0:
            continue
        for i in range(PAGE, 2 * PAGE):
            m = pmass[p, i]
            if m > 0.0:
                total += m * f_scalar(code, beta, c, x - pmom[p, i] / m)
    return total


@numba.njit(cache=True)
def _drift_split(ist, fst, table, pmass, pmom, code, beta, c, x, a, b):
    h = 0.0
    k = 0.0
    for slot in range(ist[I_SLOTS]):
        p = table[slot]
        if p < 0:
            continue
        for i in range(PAGE, 2 * PAGE):
            m = pmass[p, i]
            if m > 0.0:
                y = pmom[p, i] / m
                v = m * f_scalar(code, beta, c, x - y)
                if a <= y <= b:
                    h += v
                else:
                    k += v
    return h, k


@numba.njit(cache=True)
def _admission_table(lip, curv, grid, w, thr, out):
    """out[L] = smallest distance at which a level-L node (2^L cells) may be collapsed.

    Collapse error per unit mass is bounded by min(lip * hw, curv * hw^2 / 2)
    with the envelopes taken at the node's distance; both envelopes are
    nonincreasing so the admissible distances form a half line.
    """
    n_env = lip.shape[0]
    for level in range(out.shape[0]):
        hw = 0.5 * w * (1 << level)
        lo = 0
        hi = n_env
        # first bucket k whose error bound is <= thr
        while lo < hi:
            mid = (lo + hi) >> 1
            e1 = lip[mid] * hw
            e2 = 0.5 * curv[mid] * hw * hw
            if min(e1, e2) <= thr:
                hi = mid
            else:
                lo = mid + 1
        out[level] = grid[lo] if lo < n_env else np.inf


@numba.njit(cache=True)
def _drift_coarse(ist, fst, table, pmass, pmom, tmass, tmom, code, beta, c, x, near, admit, stack):
    """Returns (drift, nodes visited).

    ``admit`` comes from ``_admission_table`` for a threshold no larger than
    opening_tolerance / total_mass. ``stack`` is int64[STACK_SIZE, 4] scratch.
    """
    if fst[F_TOTAL] <= 0.0:
        return 0.0, 0
    w = fst[F_WIDTH]
    n_slots = ist[I_SLOTS]
    slot_levels = 0
    while (1 << slot_levels) < n_slots:
        slot_levels += 1
    # entries: (page or -1 for the slot heap, node, first cell, level)
    stack[0, 0] = -1
    stack[0, 1] = 1
    stack[0, 2] = ist[I_ORIGIN] * PAGE
    stack[0, 3] = slot_levels + PAGE_BITS
    top = 1
    total = 0.0
    visited = 0
    while top > 0:
        top -= 1
        p = stack[top, 0]
        node = stack[top, 1]
        lo = stack[top, 2]
        level = stack[top, 3]
        if p < 0:
            m = tmass[node]
            mu = tmom[node]
        else:
            m = pmass[p, node]
            mu = pmom[p, node]
        visited += 1
        if m <= 0.0:
            continue
        if level == 0:
            total += m * f_scalar(code, beta, c, x - mu / m)
            continue
        n = np.int64(1) << level
        d = lo * w - x
        e = x - (lo + n) * w
        if e > d:
            d = e
        if d > near and d >= admit[level]:
            total += m * f_scalar(code, beta, c, x - mu / m)
            continue
        half = n >> 1
        if p < 0 and node >= n_slots:
            # a slot leaf is the root of its page
            q = table[node - n_slots]
            left = 2
        elif p < 0:
            q = -1
            left = 2 * node
        else:
            q = p
            left = 2 * node
        stack[top, 0] = q
        stack[top, 1] = left
        stack[top, 2] = lo
        stack[top, 3] = level - 1
        stack[top + 1, 0] = q
        stack[top + 1, 1] = left + 1
        stack[top + 1, 2] = lo + half
        stack[top + 1, 3] = level - 1
        top += 2
    return total, visited


N_LEVELS = 64


@numba.njit(cache=True)
def _deposit_many(ist, fst, table, pmass, pmom, tmass, tmom, xs, dts, start):
    """Deposit xs[start:], stopping early if storage must grow. Returns (index, status)."""
    for i in range(start, xs.shape[0]):
        s = _deposit(ist, fst, table, pmass, pmom, tmass, tmom, xs[i], dts[i])
        if s != OK:
            return i, s
    return xs.shape[0], OK


def admission_table(kernel: Kernel, bin_width: float, threshold: float) -> np.ndarray:
    env = envelopes(kernel)
    out = np.empty(N_LEVELS)
    _admission_table(env.lip, env.curv, env.grid, bin_width, threshold, out)
    return out


def _build_levels(heap: np.ndarray, n_leaves: int) -> None:
    """Fill internal nodes of a heap (root at 1) from its leaves, in place.

    Works on 1-d heaps and on the last axis of stacked page heaps.
    """
    width = n_leaves // 2
    while width >= 1:
        heap[..., width : 2 * width] = heap[..., 2 * width : 4 * width : 2] + heap[..., 2 * width + 1 : 4 * width : 2]
        width //= 2


class OccupationMeasure:
    """Time spent per spatial cell, with first moments and a dyadic aggregate.

    >>> m = OccupationMeasure(0.1)
    >>> m.deposit(0.55, 0.01)
    >>> m.total_mass
    0.01
    """

    def __init__(self, bin_width: float, n_slots: int = 4, page_capacity: int = 4):
        if not (bin_width > 0.0) or not math.isfinite(bin_width):
            raise ValueError(f"bin_width must be positive, got {bin_width!r}")
        if n_slots < 2 or n_slots & (n_slots - 1):
            raise ValueError("n_slots must be a power of two >= 2")
        self.ist = np.array([-(n_slots // 2), n_slots, 0], dtype=np.int64)
        self.fst = np.array([0.0, float(bin_width)])
        self.table = np.full(n_slots, -1, dtype=np.int64)
        self.pmass = np.zeros((page_capacity, 2 * PAGE))
        self.pmom = np.zeros((page_capacity, 2 * PAGE))
        self.tmass = np.zeros(2 * n_slots)
        self.tmom = np.zeros(2 * n_slots)

    # -- basic properties

    @property
    def bin_width(self) -> float:
        return float(self.fst[F_WIDTH])

    @property
    def total_mass(self) -> float:
        return float(self.fst[F_TOTAL])

    @property
    def n_slots(self) -> int:
        return int(self.ist[I_SLOTS])

    @property
    def n_pages(self) -> int:
        return int(self.ist[I_PAGES])

    @property
    def cell_range(self) -> tuple[int, int]:
        """Half-open range of cell ids currently addressable without growth."""
        o = int(self.ist[I_ORIGIN])
        return o * PAGE, (o + self.n_slots) * PAGE

    def arrays(self):
        return self.ist, self.fst, self.table, self.pmass, self.pmom, self.tmass, self.tmom

    def copy(self) -> "OccupationMeasure":
        new = object.__new__(OccupationMeasure)
        for name in ("ist", "fst", "table", "pmass", "pmom", "tmass", "tmom"):
            setattr(new, name, getattr(self, name).copy())
        return new

    # -- growth

    def _grow(self, status: int, x: float) -> None:
        if status == NEED_PAGES:
            cap = self.pmass.shape[0]
            for name in ("pmass", "pmom"):
                old = getattr(self, name)
                new = np.zeros((2 * cap, 2 * PAGE))
                new[:cap] = old
                setattr(self, name, new)
            return
        page = math.floor(x / self.bin_width) // PAGE
        origin, n = int(self.ist[I_ORIGIN]), self.n_slots
        new_origin, new_n = origin, n
        while not (new_origin <= page < new_origin + new_n):
            if page < new_origin:
                new_origin -= new_n
            new_n *= 2
            if new_n > MAX_SLOTS:
                raise OverflowError(f"position {x!r} is beyond the {MAX_SLOTS * PAGE} cells the measure can address")
        table = np.full(new_n, -1, dtype=np.int64)
        table[origin - new_origin : origin - new_origin + n] = self.table
        self.table = table
        self.ist[I_ORIGIN] = new_origin
        self.ist[I_SLOTS] = new_n
        self._rebuild_slots()

    def _rebuild_slots(self) -> None:
        n = self.n_slots
        self.tmass = np.zeros(2 * n)
        self.tmom = np.zeros(2 * n)
        used = np.flatnonzero(self.table >= 0)
        self.tmass[n + used] = self.pmass[self.table[used], 1]
        self.tmom[n + used] = self.pmom[self.table[used], 1]
        _build_levels(self.tmass, n)
        _build_levels(self.tmom, n)

    def rebuild(self) -> None:
        """Recompute every aggregate node from the cell leaves."""
        k = self.n_pages
        _build_levels(self.pmass[:k], PAGE)
        _build_levels(self.pmom[:k], PAGE)
        self._rebuild_slots()

    # -- updates

    def deposit(self, x: float, dt: float) -> None:
        """Add ``dt`` units of time spent at position ``x``."""
        if not (dt > 0.0):
            raise ValueError(f"deposit needs dt > 0, got {dt!r}")
        if not math.isfinite(x):
            raise ValueError(f"deposit position must be finite, got {x!r}")
        while True:
            s = _deposit(*self.arrays(), float(x), float(dt))
            if s == OK:
                return
            self._grow(s, x)

    def deposit_many(self, xs, dts) -> None:
        xs = np.ascontiguousarray(xs, dtype=float)
        dts = np.ascontiguousarray(np.broadcast_to(dts, xs.shape), dtype=float)
        if np.any(~(dts > 0.0)):
            raise ValueError("deposit needs dt > 0")
        if not np.all(np.isfinite(xs)):
            raise ValueError("deposit positions must be finite")
        i = 0
        while i < xs.shape[0]:
            i, s = _deposit_many(*self.arrays(), xs, dts, i)
            if s != OK:
                self._grow(s, xs[i])

    # -- queries

    def drift_at(self, kernel: Kernel, x: float, spec: DriftQuerySpec | None = None) -> float:
        """g(x) = sum of mass * f(x - centroid) over cells."""
        return self.drift_with_cost(kernel, x, spec)[0]

    def drift_with_cost(self, kernel: Kernel, x: float, spec: DriftQuerySpec | None = None) -> tuple[float, int]:
        spec = spec or DriftQuerySpec.exact()
        if spec.mode is QueryMode.EXACT:
            v = _drift_exact(self.ist, self.fst, self.table, self.pmass, self.pmom, kernel.code, kernel.beta, kernel.c, float(x))
            return v, self.n_pages * PAGE
        spec.validate_for(self.bin_width)
        admit = admission_table(kernel, self.bin_width, spec.opening_tolerance / max(self.total_mass, 1e-300))
        stack = np.empty((STACK_SIZE, 4), dtype=np.int64)
        return _drift_coarse(
            *self.arrays(), kernel.code, kernel.beta, kernel.c, float(x), spec.near_radius, admit, stack
        )

    def drift_split(self, kernel: Kernel, x: float, interval) -> tuple[float, float]:
        """(h, k): exact drift from cells whose centroid lies in / outside ``interval``."""
        a, b = _check_interval(interval)
        return _drift_split(self.ist, self.fst, self.table, self.pmass, self.pmom, kernel.code, kernel.beta, kernel.c, float(x), a, b)

    def drift_profile(self, kernel: Kernel, grid, interval) -> np.ndarray:
        """h over ``interval`` evaluated at every grid point."""
        grid = np.asarray(grid, dtype=float)
        if grid.size == 0:
            raise ValueError("drift_profile needs a nonempty grid")
        a, b = _check_interval(interval)
        return np.array([self.drift_split(kernel, g, (a, b))[0] for g in grid])

    # -- snapshots

    def cells(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nonempty cells sorted by id: (cell_id, mass, first_moment)."""
        used = np.flatnonzero(self.table >= 0)
        if used.size == 0:
            return np.empty(0, np.int64), np.empty(0), np.empty(0)
        pages = self.table[used]
        ids = ((used + self.ist[I_ORIGIN]) * PAGE)[:, None] + np.arange(PAGE)[None, :]
        mass = self.pmass[pages, PAGE:]
        mom = self.pmom[pages, PAGE:]
        keep = mass > 0.0
        return ids[keep], mass[keep], mom[keep]

    @classmethod
    def from_cells(
        cls, bin_width: float, ids, mass, moment, total_mass: float | None = None,
        origin: int | None = None, n_slots: int | None = None,
    ) -> "OccupationMeasure":
        """Rebuild a measure from its cells.

        Passing the ``origin`` and ``n_slots`` of the source measure reproduces
        its aggregate tree exactly, so coarsened queries agree bit for bit.
        """
        ids = np.asarray(ids, dtype=np.int64)
        mass = np.asarray(mass, dtype=float)
        moment = np.asarray(moment, dtype=float)
        m = cls(bin_width)
        if origin is not None and n_slots is not None:
            m.ist[I_ORIGIN] = origin
            m.ist[I_SLOTS] = n_slots
            m.table = np.full(n_slots, -1, dtype=np.int64)
            m._rebuild_slots()
        if ids.size:
            pages = ids >> PAGE_BITS
            m._grow(NEED_SLOTS, pages.min() * PAGE * bin_width + 0.5 * bin_width)
            m._grow(NEED_SLOTS, (pages.max() * PAGE + 0.5) * bin_width)
            uniq, inverse = np.unique(pages, return_inverse=True)
            cap = max(4, 1 << int(math.ceil(math.log2(len(uniq)))))
            m.pmass = np.zeros((cap, 2 * PAGE))
            m.pmom = np.zeros((cap, 2 * PAGE))
            m.table[uniq - m.ist[I_ORIGIN]] = np.arange(len(uniq))
            m.ist[I_PAGES] = len(uniq)
            m.pmass[inverse, PAGE + (ids & _MASK)] = mass
            m.pmom[inverse, PAGE + (ids & _MASK)] = moment
            m.rebuild()
        m.fst[F_TOTAL] = float(mass.sum()) if total_mass is None else float(total_mass)
        return m

    def to_csv(self) -> str:
        ids, mass, mom = self.cells()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell_id", "mass", "first_moment"])
        for i, m, mu in zip(ids.tolist(), mass.tolist(), mom.tolist()):
            w.writerow([i, repr(m), repr(mu)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, bin_width: float, total_mass: float | None = None) -> "OccupationMeasure":
        rows = list(csv.DictReader(io.StringIO(text)))
        ids = [int(r["cell_id"]) for r in rows]
        mass = [float(r["mass"]) for r in rows]
        mom = [float(r["first_moment"]) for r in rows]
        return cls.from_cells(bin_width, ids, mass, mom, total_mass)


def _check_interval(interval) -> tuple[float, float]:
    a, b = (float(v) for v in interval)
    if not (a < b):
        raise ValueError(f"degenerate interval [{a}, {b}]")
    return a, b
