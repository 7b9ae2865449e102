"""Many independent paths, pooled diagnostics, and trend reports across horizons.

Path ``i`` of an ensemble uses the master seed with ``path_id = i``. Workers
return compact per-path summaries and the reducer folds them in path order,
so every pooled number is independent of the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .integrator import PathAborted, SimConfig, gamma_plus_diagnostic, simulate
from .kernels import Variant
from .scaling import ScalingConstants, compute_constants

RESCALED_EDGES = np.linspace(-2.5, 2.5, 101)
# ratio histogram edges, in units of the drift floor (4 c0)^-beta
RATIO_EDGES = np.linspace(0.0, 8.0, 81)
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def default_workers() -> int:
    env = os.environ.get("POLYMER_WORKERS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("POLYMER_WORKERS must be a positive integer")
        return n
    return os.cpu_count() or 1


def floor_constants(config: SimConfig) -> ScalingConstants | None:
    k = config.kernel
    if k.variant in (Variant.DURRETT_ROGERS, Variant.NONNEG_POWER):
        return compute_constants(k.beta, k.l)
    return None


@dataclass
class PathSummary:
    path_id: int
    terminal_x: float
    terminal_t: float
    rescaled: float
    thmA_max: float
    lemma4_min_ratio: float
    gamma_plus: float
    sign: int
    n_levels: int
    n_A: int
    record_rescaled: np.ndarray = field(repr=False)
    ratio_counts: np.ndarray = field(repr=False)
    ratio_below_floor: int = 0
    ratio_below_half_floor: int = 0

    def row(self) -> list:
        return [
            self.path_id, self.terminal_x, self.terminal_t, self.rescaled, self.thmA_max,
            self.lemma4_min_ratio, self.gamma_plus, self.sign, self.n_levels, self.n_A,
        ]


PER_PATH_COLUMNS = [
    "path_id", "terminal_x", "terminal_t", "rescaled", "thmA_max",
    "lemma4_min_ratio", "gamma_plus", "sign", "n_levels", "n_A",
]


def summarize_path(config: SimConfig, path_id: int):
    """Run one path and reduce it to a PathSummary (or an abort message)."""
    cfg = config.with_(path_id=path_id)
    try:
        st = simulate(cfg)
    except PathAborted as exc:
        return path_id, str(exc)
    alpha = cfg.alpha
    t, x = st.t, st.x
    rec = st.records
    rec_rescaled = rec[:, 1] / rec[:, 0] ** alpha
    late = rec[:, 0] >= cfg.tmin_fraction * cfg.t_end
    thm_a = float(np.max(np.abs(rec_rescaled[late]))) if late.any() else math.nan
    sign = 0 if max(st.max_so_far, -st.min_so_far) < 1.0 else (1 if x > 0 else -1)

    tab = st.hitting_table(alpha)
    side = tab["level"] > 0 if sign >= 0 else tab["level"] < 0
    flagged = side & tab["A_event"]
    ratios = tab["ratio"][flagged]
    consts = floor_constants(cfg)
    floor = consts.drift_floor if consts else 1.0
    counts, _ = np.histogram(np.clip(ratios / floor, RATIO_EDGES[0], RATIO_EDGES[-1]), bins=RATIO_EDGES)
    return path_id, PathSummary(
        path_id=path_id,
        terminal_x=x,
        terminal_t=t,
        rescaled=x / t**alpha,
        thmA_max=thm_a,
        lemma4_min_ratio=float(ratios.min()) if ratios.size else math.nan,
        gamma_plus=gamma_plus_diagnostic(st, cfg),
        sign=sign,
        n_levels=int(side.sum()),
        n_A=int(flagged.sum()),
        record_rescaled=rec_rescaled,
        ratio_counts=counts.astype(np.int64),
        ratio_below_floor=int(np.sum(ratios < floor)),
        ratio_below_half_floor=int(np.sum(ratios < 0.5 * floor)),
    )


def _worker(args):
    config, path_id = args
    return summarize_path(config, path_id)


@dataclass
class EnsembleSummary:
    config: SimConfig
    n_paths: int
    per_path: list[PathSummary]
    aborted: list[tuple[int, str]]
    sign_balance: float
    committed_fraction: float
    n_committed: int
    ks_statistic: float
    ks_pvalue: float
    rescaled_counts: np.ndarray
    record_times: np.ndarray
    rescaled_quantiles: np.ndarray

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.per_path], dtype=float)

    def pooled(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "n_completed": len(self.per_path),
            "n_aborted": len(self.aborted),
            "aborted": [{"path_id": i, "message": m} for i, m in self.aborted],
            "sign_balance": self.sign_balance,
            "committed_fraction": self.committed_fraction,
            "n_committed": self.n_committed,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
            "median_abs_rescaled": _median(np.abs(self.column("rescaled"))),
            "median_rescaled": _median(self.column("rescaled")),
        }

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "pooled": self.pooled(),
            "record_times": self.record_times.tolist(),
            "quantile_levels": list(QUANTILES),
            "abs_rescaled_quantiles": self.rescaled_quantiles.tolist(),
        }
        return json.dumps(_finite(doc), indent=2, sort_keys=True) + "\n"

    def per_path_csv(self) -> str:
        return _csv(PER_PATH_COLUMNS, (p.row() for p in self.per_path))

    def histogram_csv(self) -> str:
        rows = zip(RESCALED_EDGES[:-1].tolist(), RESCALED_EDGES[1:].tolist(), self.rescaled_counts.tolist())
        return _csv(["lo", "hi", "count"], rows)

    def ratio_histogram_csv(self) -> str:
        total = sum((p.ratio_counts for p in self.per_path), np.zeros(len(RATIO_EDGES) - 1, np.int64))
        rows = zip(RATIO_EDGES[:-1].tolist(), RATIO_EDGES[1:].tolist(), total.tolist())
        return _csv(["lo_over_floor", "hi_over_floor", "count"], rows)


def _median(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(np.median(v)) if v.size else math.nan


def _finite(obj):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def reduce_paths(config: SimConfig, n_paths: int, results) -> EnsembleSummary:
    per_path = []
    aborted = []
    for pid, res in sorted(results, key=lambda r: r[0]):
        if isinstance(res, str):
            aborted.append((pid, res))
        else:
            per_path.append(res)
    signs = np.array([p.sign for p in per_path], dtype=int)
    rescaled = np.array([p.rescaled for p in per_path])
    committed = signs != 0
    n_comm = int(committed.sum())
    balance = float(np.mean(signs[committed] > 0)) if n_comm else math.nan
    pos = rescaled[committed & (signs > 0)]
    neg = -rescaled[committed & (signs < 0)]
    if pos.size and neg.size:
        ks = stats.ks_2samp(pos, neg)
        ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
    else:
        ks_stat, ks_p = math.nan, math.nan
    counts, _ = np.histogram(np.clip(rescaled, RESCALED_EDGES[0], RESCALED_EDGES[-1]), bins=RESCALED_EDGES)
    rec_times = np.asarray(config.record_times)
    if per_path:
        mat = np.abs(np.vstack([p.record_rescaled for p in per_path]))
        quant = np.quantile(mat, QUANTILES, axis=0).T
    else:
        quant = np.full((rec_times.size, len(QUANTILES)), np.nan)
    return EnsembleSummary(
        config=config,
        n_paths=n_paths,
        per_path=per_path,
        aborted=aborted,
        sign_balance=balance,
        committed_fraction=n_comm / len(per_path) if per_path else math.nan,
        n_committed=n_comm,
        ks_statistic=ks_stat,
        ks_pvalue=ks_p,
        rescaled_counts=counts.astype(np.int64),
        record_times=rec_times,
        rescaled_quantiles=quant,
    )


def run_ensemble(config: SimConfig, n_paths: int, workers: int | None = None) -> EnsembleSummary:
    """Simulate paths 0..n_paths-1 of ``config`` and pool their diagnostics."""
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError("n_paths must be a positive integer")
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be positive")
    jobs = [(config, i) for i in range(n_paths)]
    if workers == 1 or n_paths == 1:
        results = [_worker(j) for j in jobs]
    else:
        chunk = max(1, n_paths // (4 * workers))
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            results = list(pool.imap_unordered(_worker, jobs, chunksize=chunk))
    return reduce_paths(config, n_paths, results)


# -- cross-horizon reports --------------------------------------------------------


@dataclass
class TrendReport:
    horizons: list[float]
    median_abs_rescaled: list[float]
    frac_thmA_above: list[float]
    median_dist_c0: list[float] | None
    c0: float
    dist_decreasing: bool | None
    thmA_nonincreasing: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_csv(self) -> str:
        rows = []
        for i, T in enumerate(self.horizons):
            d = self.median_dist_c0[i] if self.median_dist_c0 is not None else math.nan
            rows.append([T, self.median_abs_rescaled[i], self.frac_thmA_above[i], d])
        return _csv(["t_end", "median_abs_rescaled", "frac_thmA_above_1.5c0", "median_dist_c0"], rows)


def scaling_trend(summaries: list[EnsembleSummary]) -> TrendReport:
    """Per-horizon scaling statistics and whether they move the way the limit laws predict.

    ``dist_decreasing`` (nonnegative kernel only) asks for a strictly
    decreasing median |X_T/T^alpha - c0|; ``thmA_nonincreasing`` asks the
    fraction of paths whose late maximum of |X_t|/t^alpha exceeds 1.5 c0 not
    to grow with the horizon.
    """
    if len(summaries) < 2 or len({s.config.t_end for s in summaries}) != len(summaries):
        raise ValueError("scaling_trend needs at least two distinct horizons")
    kernel = summaries[0].config.kernel
    if any(s.config.kernel != kernel for s in summaries):
        raise ValueError("all summaries must share one kernel")
    consts = floor_constants(summaries[0].config)
    if consts is None:
        raise ValueError("scaling_trend needs a power-law kernel")
    ordered = sorted(summaries, key=lambda s: s.config.t_end)
    c0 = consts.c0
    med_abs = [_median(np.abs(s.column("rescaled"))) for s in ordered]
    frac = [float(np.mean(s.column("thmA_max") > 1.5 * c0)) for s in ordered]
    dist = None
    dist_dec = None
    if kernel.variant is Variant.NONNEG_POWER:
        dist = [_median(np.abs(s.column("rescaled") - c0)) for s in ordered]
        dist_dec = bool(all(b < a for a, b in zip(dist, dist[1:])))
    return TrendReport(
        horizons=[s.config.t_end for s in ordered],
        median_abs_rescaled=med_abs,
        frac_thmA_above=frac,
        median_dist_c0=dist,
        c0=c0,
        dist_decreasing=dist_dec,
        thmA_nonincreasing=bool(all(b <= a for a, b in zip(frac, frac[1:]))),
    )


def lemma4_report(summary: EnsembleSummary, constants: ScalingConstants) -> dict:
    """A-flagged level counts and drift ratios for paths that escaped upwards."""
    floor = constants.drift_floor
    up = [p for p in summary.per_path if p.sign > 0]
    n_A = np.array([p.n_A for p in up], dtype=float)
    n_ratios = int(n_A.sum())
    below = sum(p.ratio_below_floor for p in up)
    below_half = sum(p.ratio_below_half_floor for p in up)
    mins = np.array([p.lemma4_min_ratio for p in up], dtype=float)
    return {
        "t_end": summary.config.t_end,
        "drift_floor": floor,
        "n_paths_up": len(up),
        "n_A_mean": float(n_A.mean()) if up else math.nan,
        "n_A_median": float(np.median(n_A)) if up else math.nan,
        "n_A_min": int(n_A.min()) if up else 0,
        "n_ratios": n_ratios,
        "frac_below_floor": below / n_ratios if n_ratios else math.nan,
        "frac_below_half_floor": below_half / n_ratios if n_ratios else math.nan,
        "median_min_ratio": _median(mins),
    }
