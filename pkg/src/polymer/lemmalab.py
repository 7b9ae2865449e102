"""Brute-force numerical checks of the deterministic and probabilistic lemmas.

* Lemma 2 (drift sign propagation) is checked on random atomic measures on
  [a, b], rejection-sampled until the hypothesis and one of the two geometric
  side conditions hold.
* Lemma 7 (drifted Brownian motion leaves a symmetric window upwards with
  probability >= 1 - exp(2 - a h)) and the Gaussian maximal inequality
  P[sup_{s<=t} B_s >= a] <= exp(-a^2 / 2t) are checked by Monte Carlo.

Barrier problems are simulated on a fine monitoring grid of step dt without
generating every grid point: a coarse walk is refined by bisection using
exact Brownian-bridge midpoints, and an interval is only refined if the
bridge between its endpoints crosses a barrier with probability above
``BRIDGE_EPS``. The skipped intervals change the exit law by at most
BRIDGE_EPS each. The same walk is refined two levels further, giving a
coupled dt/4 run whose shift from the dt run measures the monitoring bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

from .kernels import Kernel, KernelError, check_kernel_properties, eval_f
from .scaling import compute_constants, sequence_report

BRIDGE_EPS = 1e-12
N_COARSE = 64
SENTINEL_LEVELS = 2
DEFAULT_BETAS = (0.1, 0.25, 0.5, 0.75, 0.9)
LEMMA7_PRODUCTS = (6.0, 8.0, 12.0, 20.0)
EXP_CASES = ((1.0, 1.0), (1.0, 2.0), (4.0, 2.0))


class LabDomainError(ValueError):
    pass


# -- barrier Monte Carlo ----------------------------------------------------------


@numba.njit(cache=True)
def _cross_prob(xl, xr, lo, hi, dur):
    p = 0.0
    if hi < np.inf:
        p += math.exp(-2.0 * (hi - xl) * (hi - xr) / dur)
    if lo > -np.inf:
        p += math.exp(-2.0 * (xl - lo) * (xr - lo) / dur)
    return p


@numba.njit(cache=True)
def _exit_one(drift, lo, hi, horizon, depth, eps, stack):
    """Exit sides (+1 upper, -1 lower, 0 none by ``horizon``) at resolutions dt and dt/4.

    The fine grid has N_COARSE * 2^depth steps; the sentinel grid four times as many.
    """
    levels = depth + 2
    n_sub = 1 << levels
    dur_sub = horizon / (N_COARSE * n_sub)
    side_main = 0
    side_sent = 0
    x0 = 0.0
    for k in range(N_COARSE):
        big = dur_sub * n_sub
        x1 = x0 + drift * big + math.sqrt(big) * np.random.standard_normal()
        # stack rows: xl, xr, r, pos_right (r = log2 of interval length in sentinel steps)
        top = 0
        stack[0, 0] = x0
        stack[0, 1] = x1
        stack[0, 2] = levels
        stack[0, 3] = n_sub
        top = 1
        while top > 0:
            top -= 1
            xl = stack[top, 0]
            xr = stack[top, 1]
            r = np.int64(stack[top, 2])
            pos = np.int64(stack[top, 3])
            out_r = 1 if xr >= hi else (-1 if xr <= lo else 0)
            if r == 0:
                if out_r != 0 and side_sent == 0:
                    side_sent = out_r
                if out_r != 0 and pos % 4 == 0:
                    return out_r, side_sent
                continue
            dur = dur_sub * (1 << r)
            if out_r == 0 and _cross_prob(xl, xr, lo, hi, dur) <= eps:
                continue
            mid = 0.5 * (xl + xr) + math.sqrt(0.25 * dur) * np.random.standard_normal()
            step = 1 << (r - 1)
            stack[top, 0] = mid
            stack[top, 1] = xr
            stack[top, 2] = r - 1
            stack[top, 3] = pos
            stack[top + 1, 0] = xl
            stack[top + 1, 1] = mid
            stack[top + 1, 2] = r - 1
            stack[top + 1, 3] = pos - step
            top += 2
        x0 = x1
    return side_main, side_sent


@numba.njit(cache=True)
def _exit_many(seed, n_trials, drift, lo, hi, horizon, depth, eps):
    np.random.seed(seed)
    stack = np.empty((2 * (depth + 4) + 4, 4))
    main = np.empty(n_trials, dtype=np.int8)
    sent = np.empty(n_trials, dtype=np.int8)
    for i in range(n_trials):
        m, s = _exit_one(drift, lo, hi, horizon, depth, eps, stack)
        main[i] = m
        sent[i] = s
    return main, sent


def _depth_for(horizon: float, dt: float) -> int:
    return max(0, math.ceil(math.log2(horizon / (N_COARSE * dt))))


def _seed32(seed: int) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def barrier_exits(drift, lo, hi, horizon, dt, n_trials, seed):
    """Exit sides for ``n_trials`` walks of B_t + drift t monitored every <= dt up to ``horizon``.

    Returns (main, sentinel, effective_dt); sentinel uses effective_dt / 4 on the same paths.
    """
    depth = _depth_for(horizon, dt)
    dt_eff = horizon / (N_COARSE * 2**depth)
    main, sent = _exit_many(_seed32(seed), int(n_trials), float(drift), float(lo), float(hi), float(horizon), depth, BRIDGE_EPS)
    return main, sent, dt_eff


# -- Lemma 7 ----------------------------------------------------------------------


@dataclass
class Lemma7Report:
    a: float
    h: float
    n_trials: int
    dt: float
    p_hat: float
    p_hat_sentinel: float
    bound: float
    ci: float
    allowance: float
    n_capped: int
    passed: bool

    @property
    def margin(self) -> float:
        return self.p_hat - (self.bound - self.ci - self.allowance)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["margin"] = self.margin
        return d


def verify_lemma7(a: float, h: float, n_trials: int = 10**5, dt: float | None = None, seed: int = 0) -> Lemma7Report:
    """Estimate P[M_U = +a] for M_t = B_t + h t, U the exit of (-a, a) capped at a^2/2.

    The allowance for discrete monitoring is Richardson-style: monitoring
    bias shrinks like sqrt(dt), so the dt run sits 2 |p(dt) - p(dt/4)| away
    from the continuous-time value to first order.
    """
    if not (a > 0.0 and h >= 0.0) or a * h < 6.0 * (1.0 - 1e-12):
        raise LabDomainError(f"need a > 0, h >= 0 and a*h >= 6, got a={a!r}, h={h!r}")
    dt = a * a * 1e-5 if dt is None else dt
    if not (0.0 < dt <= a * a * 1e-5 * (1.0 + 1e-12)):
        raise LabDomainError("dt must lie in (0, a^2 * 1e-5]")
    if n_trials < 1:
        raise LabDomainError("n_trials must be positive")
    main, sent, dt_eff = barrier_exits(h, -a, a, 0.5 * a * a, dt, n_trials, seed)
    p = float(np.mean(main == 1))
    p4 = float(np.mean(sent == 1))
    bound = 1.0 - math.exp(2.0 - a * h)
    ci = 3.0 * math.sqrt(p * (1.0 - p) / n_trials)
    allowance = 2.0 * abs(p - p4)
    return Lemma7Report(
        a=a, h=h, n_trials=int(n_trials), dt=dt_eff, p_hat=p, p_hat_sentinel=p4,
        bound=bound, ci=ci, allowance=allowance, n_capped=int(np.sum(main == 0)),
        passed=bool(p >= bound - ci - allowance),
    )


# -- maximal inequality --------------------------------------------------------------


@dataclass
class ExpIneqReport:
    t: float
    a: float
    n_trials: int
    dt: float
    estimate: float
    estimate_sentinel: float
    bound: float
    exact: float
    ci: float
    allowance: float
    below_bound: bool
    matches_exact: bool

    @property
    def passed(self) -> bool:
        return self.below_bound and self.matches_exact

    @property
    def margin(self) -> float:
        return self.bound + self.ci - self.estimate

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        d["margin"] = self.margin
        return d


def verify_exponential_inequality(t: float, a: float, n_trials: int = 10**5, seed: int = 0, dt: float | None = None) -> ExpIneqReport:
    """Monte Carlo P[max of B on a fine grid over [0, t] >= a] against exp(-a^2/2t) and 2 P[B_t >= a]."""
    if not (t > 0.0) or not (a >= 0.0) or not math.isfinite(a + t):
        raise LabDomainError(f"need t > 0 and a >= 0, got t={t!r}, a={a!r}")
    if n_trials < 1:
        raise LabDomainError("n_trials must be positive")
    bound = math.exp(-a * a / (2.0 * t))
    exact = float(2.0 * stats.norm.sf(a / math.sqrt(t)))
    if a == 0.0:
        est = est4 = 1.0
        dt_eff = 0.0
    else:
        dt = t * 2.0**-20 if dt is None else dt
        main, sent, dt_eff = barrier_exits(0.0, -np.inf, a, t, dt, n_trials, seed)
        est = float(np.mean(main == 1))
        est4 = float(np.mean(sent == 1))
    ci = 3.0 * math.sqrt(max(est * (1.0 - est), exact * (1.0 - exact)) / n_trials)
    allowance = 2.0 * abs(est4 - est)
    return ExpIneqReport(
        t=t, a=a, n_trials=int(n_trials), dt=dt_eff, estimate=est, estimate_sentinel=est4,
        bound=bound, exact=exact, ci=ci, allowance=allowance,
        below_bound=bool(est <= bound + ci),
        matches_exact=bool(abs(est - exact) <= ci + allowance),
    )


# -- Lemma 2 ----------------------------------------------------------------------

MAX_ATOMS = 12
SMALL_GAP = 1
SHORT_INTERVAL = 2


@numba.njit(cache=True)
def _f(beta, x):
    return x / (1.0 + abs(x) ** (1.0 + beta))


@numba.njit(cache=True)
def _h(beta, pos, mass, n, x):
    s = 0.0
    for j in range(n):
        s += mass[j] * _f(beta, x - pos[j])
    return s


@numba.njit(cache=True)
def _sample_lemma2(seed, beta, n_keep, budget, xmax):
    np.random.seed(seed)
    A = np.empty(n_keep)
    B = np.empty(n_keep)
    X0 = np.empty(n_keep)
    NA = np.zeros(n_keep, dtype=np.int64)
    POS = np.zeros((n_keep, MAX_ATOMS))
    MASS = np.zeros((n_keep, MAX_ATOMS))
    BR = np.zeros(n_keep, dtype=np.int64)
    pos = np.empty(MAX_ATOMS)
    mass = np.empty(MAX_ATOMS)
    tried = 0
    kept = 0
    tried_branch = np.zeros(2, dtype=np.int64)
    kept_branch = np.zeros(2, dtype=np.int64)
    while kept < n_keep and tried < budget:
        tried += 1
        target = np.random.randint(0, 2)
        tried_branch[target] += 1
        a = np.random.uniform(-2.0, 2.0)
        if target == 0:
            w = np.random.uniform(0.05, 8.0)
        else:
            w = np.random.uniform(0.0, 1.0) * xmax
            if w <= 0.0:
                continue
        b = a + w
        n = np.random.randint(1, MAX_ATOMS + 1)
        layout = np.random.randint(0, 3)
        for j in range(n):
            if layout == 0:
                pos[j] = np.random.uniform(a, b)
            elif layout == 1:
                pos[j] = b - min(w, 0.125) * np.random.uniform(0.0, 1.0)
            else:
                pos[j] = a if np.random.uniform(0.0, 1.0) < 0.5 else b - min(w, 0.125) * np.random.uniform(0.0, 1.0)
            mass[j] = math.exp(2.0 * np.random.standard_normal())
        if target == 0:
            x0 = b - min(0.0625, w) * np.random.uniform(0.0, 1.0)
            if np.random.uniform(0.0, 1.0) < 0.5:
                # push x0 to the largest nonpositive point of h near b
                m = 64
                x0 = -np.inf
                for i in range(m, -1, -1):
                    xi = b - min(0.0625, w) * i / m
                    if _h(beta, pos, mass, n, xi) <= 0.0:
                        x0 = xi
                if x0 == -np.inf:
                    continue
        else:
            x0 = np.random.uniform(a, b)
        if x0 < a or x0 > b:
            continue
        if _h(beta, pos, mass, n, x0) > 0.0:
            continue
        gap = _f(beta, b - x0) <= _f(beta, b - a) ** 2 and b - x0 <= 0.0625
        short = b - a <= xmax
        if not (gap or short):
            continue
        A[kept] = a
        B[kept] = b
        X0[kept] = x0
        NA[kept] = n
        POS[kept, :n] = pos[:n]
        MASS[kept, :n] = mass[:n]
        BR[kept] = (SMALL_GAP if gap else 0) | (SHORT_INTERVAL if short else 0)
        kept_branch[target] += 1
        kept += 1
    return A[:kept], B[:kept], X0[:kept], NA[:kept], POS[:kept], MASS[:kept], BR[:kept], tried, tried_branch, kept_branch


@dataclass
class Lemma2Report:
    beta: float
    requested: int
    tried: int
    kept: int
    kept_small_gap: int
    kept_short_interval: int
    acceptance_rate: dict
    branch_recheck_failures: int
    violations: int
    worst_margin: float
    starved: bool
    grid_points: int = 1000
    examples: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.branch_recheck_failures == 0 and not self.starved

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "examples"}
        d["passed"] = self.passed
        return d


def lemma2_conclusion(kernel: Kernel, a: float, b: float, x0: float, pos, mass, grid_points: int = 1000):
    """max over a grid on [a, x0] of h(x) / total mass (the lemma says <= 0)."""
    pos = np.asarray(pos, dtype=float)
    mass = np.asarray(mass, dtype=float)
    xs = np.linspace(a, x0, grid_points)
    h = (mass[None, :] * eval_f(kernel, xs[:, None] - pos[None, :])).sum(axis=1)
    return float(h.max() / mass.sum())


def lemma2_branches(kernel: Kernel, a: float, b: float, x0: float) -> tuple[bool, bool]:
    """(small-gap condition, short-interval condition), recomputed from scratch."""
    f = lambda v: float(eval_f(kernel, np.array(v)))
    small_gap = f(b - x0) <= f(b - a) ** 2 and b - x0 <= 1.0 / 16.0
    short = b - a <= float((1.0 / kernel.beta) ** (1.0 / (1.0 + kernel.beta)))
    return small_gap, short


def verify_lemma2(beta: float, n_instances: int = 10**4, seed: int = 0, grid_points: int = 1000, budget_per_instance: int = 10**7) -> Lemma2Report:
    kernel = Kernel.durrett_rogers(beta)
    xmax = (1.0 / beta) ** (1.0 / (1.0 + beta))
    A, B, X0, NA, POS, MASS, BR, tried, tried_br, kept_br = _sample_lemma2(
        _seed32(seed), float(beta), int(n_instances), int(budget_per_instance) * int(n_instances), xmax
    )
    kept = len(A)
    violations = 0
    recheck = 0
    worst = -math.inf
    n_gap = n_short = 0
    for i in range(kept):
        n = NA[i]
        gap, short = lemma2_branches(kernel, A[i], B[i], X0[i])
        n_gap += gap
        n_short += short
        if not (gap or short) or (gap, short) != (bool(BR[i] & SMALL_GAP), bool(BR[i] & SHORT_INTERVAL)):
            recheck += 1
        h0 = float((MASS[i, :n] * eval_f(kernel, X0[i] - POS[i, :n])).sum())
        if h0 > 0.0:
            recheck += 1
        m = lemma2_conclusion(kernel, A[i], B[i], X0[i], POS[i, :n], MASS[i, :n], grid_points)
        worst = max(worst, m)
        if m > 1e-12:
            violations += 1
    rates = {
        "small_gap": float(kept_br[0] / tried_br[0]) if tried_br[0] else 0.0,
        "short_interval": float(kept_br[1] / tried_br[1]) if tried_br[1] else 0.0,
    }
    return Lemma2Report(
        beta=beta,
        requested=int(n_instances),
        tried=int(tried),
        kept=kept,
        kept_small_gap=int(n_gap),
        kept_short_interval=int(n_short),
        acceptance_rate=rates,
        branch_recheck_failures=recheck,
        violations=violations,
        worst_margin=-worst if kept else math.nan,
        starved=kept < n_instances,
        grid_points=grid_points,
    )


# -- everything -------------------------------------------------------------------


@dataclass
class MasterReport:
    seed: int
    beta_grid: list
    sections: dict

    @property
    def passed(self) -> bool:
        return all(item["passed"] for items in self.sections.values() for item in items)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "beta_grid": list(self.beta_grid), "passed": self.passed, "sections": self.sections}

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"seed {self.seed}, beta grid {list(self.beta_grid)}"]
        for name, items in self.sections.items():
            ok = all(it["passed"] for it in items)
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}")
            for it in items:
                label = ", ".join(f"{k}={it[k]}" for k in ("beta", "a", "h", "t") if k in it)
                margin = it.get("margin", it.get("worst_margin"))
                lines.append(f"    {'ok  ' if it['passed'] else 'FAIL'} {label}  margin={margin!r}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def verify_all(
    beta_grid=DEFAULT_BETAS,
    seed: int = 0,
    lemma2_instances: int = 10**4,
    lemma7_trials: int = 10**5,
    exp_trials: int = 10**5,
    sequence_terms: int = 10**7,
) -> MasterReport:
    """Run every certification over ``beta_grid``; an empty grid gives an empty report."""
    betas = [float(b) for b in beta_grid]
    sections: dict[str, list] = {}
    if not betas:
        return MasterReport(seed=seed, beta_grid=[], sections=sections)
    for b in betas:
        try:
            k = Kernel.durrett_rogers(b)
        except KernelError as exc:
            raise LabDomainError(str(exc)) from exc
        rep = check_kernel_properties(k)
        worst = min(ch.worst_margin for ch in rep.checks)
        sections.setdefault("kernel_properties", []).append({"beta": b, "passed": rep.passed, "worst_margin": worst, "checks": rep.to_dict()["checks"]})
        c = compute_constants(b)
        sections.setdefault("constants", []).append({"beta": b, "c0": c.c0, "alpha": c.alpha, "residual": c.residual, "passed": abs(c.residual) <= 1e-12, "margin": 1e-12 - abs(c.residual)})
        s = sequence_report(b, sequence_terms)
        sections.setdefault("a_sequence", []).append({"beta": b, **s.to_dict()})
    for i, b in enumerate(betas):
        r = verify_lemma2(b, lemma2_instances, seed=seed * 1000 + i)
        sections.setdefault("lemma2", []).append({"beta": b, **r.to_dict()})
    for j, ah in enumerate(LEMMA7_PRODUCTS):
        r = verify_lemma7(1.0, ah, lemma7_trials, seed=seed * 1000 + 100 + j)
        sections.setdefault("lemma7", []).append(r.to_dict())
    for j, (t, a) in enumerate(EXP_CASES):
        r = verify_exponential_inequality(t, a, exp_trials, seed=seed * 1000 + 200 + j)
        sections.setdefault("exponential_inequality", []).append(r.to_dict())
    return MasterReport(seed=seed, beta_grid=betas, sections=sections)
