"""Closed-form scaling constants and the a_n escape-radius sequence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .kernels import Kernel, KernelError


class DomainError(ValueError):
    pass


def _check_beta(beta: float) -> None:
    if not (0.0 < beta < 1.0) or not math.isfinite(beta):
        raise DomainError(f"beta must lie in (0, 1), got {beta!r}")


@dataclass(frozen=True)
class ScalingConstants:
    beta: float
    l: float
    alpha: float
    c0: float
    xmax: float

    @property
    def drift_floor(self) -> float:
        """(4 c0)^-beta, the asymptotic lower bound on G(T_x) / T_x^(alpha-1)."""
        return (4.0 * self.c0) ** (-self.beta)

    @property
    def residual(self) -> float:
        """alpha * c0^(1+beta) - l / (1-beta); zero up to rounding."""
        return self.alpha * self.c0 ** (1.0 + self.beta) - self.l / (1.0 - self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift_floor"] = self.drift_floor
        d["residual"] = self.residual
        return d


def compute_constants(beta: float, l: float = 1.0) -> ScalingConstants:
    """alpha = 2/(1+beta) and the limit constant c0.

    c0 solves alpha c0^(1+beta) = int_0^1 l (1-u)^-beta du = l / (1-beta).
    """
    _check_beta(beta)
    if not (l > 0.0) or not math.isfinite(l):
        raise DomainError(f"l must be positive, got {l!r}")
    alpha = 2.0 / (1.0 + beta)
    c0 = (l * (1.0 + beta) / (2.0 * (1.0 - beta))) ** (1.0 / (1.0 + beta))
    xmax = (1.0 / beta) ** (1.0 / (1.0 + beta))
    return ScalingConstants(beta=beta, l=l, alpha=alpha, c0=c0, xmax=xmax)


def constants_for(kernel: Kernel) -> ScalingConstants:
    try:
        return compute_constants(kernel.beta, kernel.l)
    except DomainError as exc:
        raise KernelError(str(exc)) from exc


@numba.njit(cache=True)
def _a_recursion(beta, n_terms):
    a = np.empty(n_terms)
    a[0] = 0.0
    a[1] = 0.5 * (1.0 / beta) ** (1.0 / (1.0 + beta))
    for n in range(1, n_terms - 1):
        y = 4.0 * a[n - 1]
        fy = y / (1.0 + abs(y) ** (1.0 + beta))
        a[n + 1] = a[n] + 0.5 * min(fy * fy, 1.0 / 16.0)
    return a


def a_sequence(beta: float, n_terms: int) -> np.ndarray:
    """a_0 = 0, a_1 = x_max/2, a_{n+1} = a_n + min(f(4 a_{n-1})^2, 1/16) / 2.

    Note that a_2 = a_1 exactly, since f(4 a_0) = f(0) = 0.
    """
    _check_beta(beta)
    if int(n_terms) != n_terms or n_terms < 2:
        raise DomainError(f"n_terms must be an integer >= 2, got {n_terms!r}")
    return _a_recursion(float(beta), int(n_terms))


@dataclass
class SequenceReport:
    beta: float
    n_terms: int
    nondecreasing: bool
    a2_equals_a1: bool
    strictly_increasing_from_2: bool
    doubling_bound: bool
    tail_epsilon: float
    tail_linear_bound: bool
    growth_exponent: float
    predicted_exponent: float
    growth_exponent_ok: bool
    last_value: float
    first_index_above: int | None
    threshold: float

    @property
    def divergence_certified(self) -> bool:
        return self.tail_linear_bound and self.growth_exponent_ok

    @property
    def passed(self) -> bool:
        return (
            self.nondecreasing
            and self.a2_equals_a1
            and self.strictly_increasing_from_2
            and self.doubling_bound
            and self.divergence_certified
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["divergence_certified"] = self.divergence_certified
        d["passed"] = self.passed
        return d


def sequence_report(beta: float, n_terms: int = 10**7, threshold: float = 1e3) -> SequenceReport:
    """Structural checks on a_n plus evidence that it is unbounded.

    Divergence is certified two ways on the second half of the sequence:
    a_n - a_m >= (n - m) eps with eps the smallest tail increment (> 0), and
    the fitted log-log growth exponent staying at or above 1/(1+2 beta), the
    rate forced by increments ~ (4 a)^(-2 beta) / 2 once f(4a)^2 < 1/16 (a
    bounded sequence would show an exponent tending to 0).
    ``first_index_above`` records when (if ever) a_n passes ``threshold``.
    """
    a = a_sequence(beta, n_terms)
    inc = np.diff(a)
    nondecreasing = bool(np.all(inc >= 0.0))
    a2_eq = bool(a[2] == a[1])
    strict = bool(np.all(inc[2:] > 0.0))
    doubling = bool(np.all(a[2:] <= 2.0 * a[1:-1]))

    m = n_terms // 2
    tail_inc = inc[m:]
    eps = float(tail_inc.min())
    k = np.arange(n_terms - m)
    tail_ok = bool(eps > 0.0 and np.all(a[m:] - a[m] >= k * eps * (1.0 - 1e-9)))

    idx = np.unique(np.geomspace(max(m, 2), n_terms - 1, 200).astype(np.int64))
    slope = float(np.polyfit(np.log(idx), np.log(a[idx]), 1)[0])
    predicted = 1.0 / (1.0 + 2.0 * beta)
    above = np.flatnonzero(a > threshold)
    return SequenceReport(
        beta=beta,
        n_terms=n_terms,
        nondecreasing=nondecreasing,
        a2_equals_a1=a2_eq,
        strictly_increasing_from_2=strict,
        doubling_bound=doubling,
        tail_epsilon=eps,
        tail_linear_bound=tail_ok,
        growth_exponent=slope,
        predicted_exponent=predicted,
        growth_exponent_ok=bool(slope >= 0.9 * predicted),
        last_value=float(a[-1]),
        first_index_above=int(above[0]) if above.size else None,
        threshold=threshold,
    )
