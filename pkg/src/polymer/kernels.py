"""Interaction kernels f and the analytic facts the rest of the package leans on.

Four variants are supported:

* ``DURRETT_ROGERS``: f(x) = x / (1 + |x|^(1+beta)), odd, self-repelling.
* ``NONNEG_POWER``:   f(x) = (1 + |x|)^(-beta), nonnegative with f(0) = 1.
* ``ZERO``:           f = 0 (plain Brownian motion).
* ``CONSTANT``:       f = c.

Besides pointwise evaluation, each kernel carries tabulated monotone envelopes
of |f'| and |f''| as functions of distance; the occupation drift engine uses
them to decide when a far-away block of mass may be collapsed to its centroid.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

DURRETT_ROGERS_CODE = 0
NONNEG_POWER_CODE = 1
ZERO_CODE = 2
CONSTANT_CODE = 3


class KernelError(ValueError):
    """Raised for invalid kernel parameters or unsupported variants."""


class Variant(str, enum.Enum):
    DURRETT_ROGERS = "durrett_rogers"
    NONNEG_POWER = "nonneg_power"
    ZERO = "zero"
    CONSTANT = "constant"


_CODES = {
    Variant.DURRETT_ROGERS: DURRETT_ROGERS_CODE,
    Variant.NONNEG_POWER: NONNEG_POWER_CODE,
    Variant.ZERO: ZERO_CODE,
    Variant.CONSTANT: CONSTANT_CODE,
}


@dataclass(frozen=True)
class Kernel:
    """An interaction function f.

    ``beta`` only matters for the two power-law variants, ``c`` only for
    ``CONSTANT``. ``l`` is the constant in x^beta f(x) -> l, which is 1 for
    both power-law variants.
    """

    variant: Variant
    beta: float = 0.5
    c: float = 0.0
    l: float = field(default=1.0)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant in (Variant.DURRETT_ROGERS, Variant.NONNEG_POWER):
            if not (0.0 < self.beta < 1.0) or not math.isfinite(self.beta):
                raise KernelError(f"beta must lie in (0, 1), got {self.beta!r}")
            if self.l != 1.0:
                raise KernelError("l is fixed to 1 for the power-law variants")
        if not math.isfinite(self.c):
            raise KernelError(f"c must be finite, got {self.c!r}")

    @classmethod
    def durrett_rogers(cls, beta: float) -> "Kernel":
        return cls(Variant.DURRETT_ROGERS, beta=beta)

    @classmethod
    def nonneg_power(cls, beta: float) -> "Kernel":
        return cls(Variant.NONNEG_POWER, beta=beta)

    @classmethod
    def zero(cls) -> "Kernel":
        return cls(Variant.ZERO)

    @classmethod
    def constant(cls, c: float) -> "Kernel":
        return cls(Variant.CONSTANT, c=c)

    @property
    def code(self) -> int:
        return _CODES[self.variant]

    @property
    def alpha(self) -> float:
        """Growth exponent used to rescale positions, X_t / t^alpha.

        2/(1+beta) for the power-law kernels; 1/2 for the zero kernel
        (diffusive) and 2 for a constant kernel (x = c t^2 / 2).
        """
        if self.variant is Variant.ZERO:
            return 0.5
        if self.variant is Variant.CONSTANT:
            return 2.0
        return 2.0 / (1.0 + self.beta)

    @property
    def sup_norm(self) -> float:
        if self.variant is Variant.CONSTANT:
            return abs(self.c)
        if self.variant is Variant.ZERO:
            return 0.0
        return 1.0

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "beta": self.beta, "c": self.c, "l": self.l}

    def __call__(self, x):
        return eval_f(self, x)


# -- scalar versions for compiled loops --------------------------------------


@numba.njit(cache=True, inline="always")
def f_scalar(code, beta, c, x):
    if code == DURRETT_ROGERS_CODE:
        return x / (1.0 + abs(x) ** (1.0 + beta))
    if code == NONNEG_POWER_CODE:
        return (1.0 + abs(x)) ** (-beta)
    if code == ZERO_CODE:
        return 0.0
    return c


# -- vectorised evaluation ----------------------------------------------------


def eval_f(kernel: Kernel, x):
    """f(x), elementwise for arrays."""
    x = np.asarray(x, dtype=float)
    v = kernel.variant
    if v is Variant.DURRETT_ROGERS:
        out = x / (1.0 + np.abs(x) ** (1.0 + kernel.beta))
    elif v is Variant.NONNEG_POWER:
        out = (1.0 + np.abs(x)) ** (-kernel.beta)
    elif v is Variant.ZERO:
        out = np.zeros_like(x)
    else:
        out = np.full_like(x, kernel.c)
    return out[()] if out.ndim == 0 else out


def eval_fprime(kernel: Kernel, x):
    """f'(x).

    For the Durrett-Rogers kernel the closed form on x >= 0 is extended to
    x < 0 by evenness (f is odd). The nonnegative kernel has a kink at 0,
    where the average of the one-sided derivatives (0) is returned.
    """
    x = np.asarray(x, dtype=float)
    v = kernel.variant
    ax = np.abs(x)
    if v is Variant.DURRETT_ROGERS:
        p = ax ** (1.0 + kernel.beta)
        out = (1.0 - kernel.beta * p) / (1.0 + p) ** 2
    elif v is Variant.NONNEG_POWER:
        out = -kernel.beta * np.sign(x) * (1.0 + ax) ** (-kernel.beta - 1.0)
    else:
        out = np.zeros_like(x)
    return out[()] if out.ndim == 0 else out


def eval_fsecond(kernel: Kernel, x):
    """f''(x) away from kinks (the nonnegative kernel's x = 0 is excluded)."""
    x = np.asarray(x, dtype=float)
    v = kernel.variant
    ax = np.abs(x)
    if v is Variant.DURRETT_ROGERS:
        b = kernel.beta
        p = ax ** (1.0 + b)
        out = -np.sign(x) * (1.0 + b) * ax**b * (2.0 + b - b * p) / (1.0 + p) ** 3
    elif v is Variant.NONNEG_POWER:
        b = kernel.beta
        out = b * (b + 1.0) * (1.0 + ax) ** (-b - 2.0)
    else:
        out = np.zeros_like(x)
    return out[()] if out.ndim == 0 else out


def x_max(kernel: Kernel) -> float:
    """Location of the positive maximum of the Durrett-Rogers kernel."""
    if kernel.variant is not Variant.DURRETT_ROGERS:
        raise KernelError(f"x_max is only defined for durrett_rogers, not {kernel.variant.value}")
    b = kernel.beta
    return (1.0 / b) ** (1.0 / (1.0 + b))


# -- derivative envelopes -----------------------------------------------------

# Grid: 0, then 1e-6 * 2^(k/16) up to ~1e15.
ENV_D0 = 1e-6
ENV_LOG_RATIO = math.log(2.0) / 16.0
ENV_N = 1 + int(math.ceil(math.log(1e21) / ENV_LOG_RATIO)) + 1
# Inflation over the sampled maximum; the sampled functions are smooth and
# sampled 9 times per 4%-wide grid cell, so this is ample.
ENV_SAFETY = 1.05


@dataclass(frozen=True)
class Envelopes:
    """Monotone upper envelopes sup_{|y| >= d} |f'(y)| and |f''(y)|.

    ``grid[k]`` is the left end of bucket k; ``lip[k]`` and ``curv[k]``
    bound the derivatives for every |y| >= grid[k].
    """

    grid: np.ndarray
    lip: np.ndarray
    curv: np.ndarray

    def lookup(self, d: float) -> tuple[float, float]:
        k = envelope_index(d)
        return float(self.lip[k]), float(self.curv[k])


@numba.njit(cache=True, inline="always")
def envelope_index(d):
    if d < ENV_D0:
        return 0
    k = 1 + int(math.log(d / ENV_D0) / ENV_LOG_RATIO)
    if k > ENV_N - 1:
        k = ENV_N - 1
    return k


@functools.lru_cache(maxsize=64)
def envelopes(kernel: Kernel) -> Envelopes:
    grid = np.empty(ENV_N)
    grid[0] = 0.0
    grid[1:] = ENV_D0 * np.exp(ENV_LOG_RATIO * np.arange(ENV_N - 1))
    if kernel.variant in (Variant.ZERO, Variant.CONSTANT):
        z = np.zeros(ENV_N)
        return Envelopes(grid, z, z.copy())
    # sample every bucket [grid[k], grid[k+1]] at 9 points, both signs of y
    upper = np.append(grid[1:], grid[-1] * 2.0)
    s = np.linspace(0.0, 1.0, 9)
    ys = grid[:, None] + (upper - grid)[:, None] * s[None, :]
    # the nonnegative kernel's f'' is singular at 0; nudge off the kink
    if kernel.variant is Variant.NONNEG_POWER:
        ys = np.maximum(ys, 1e-300)
    lip_b = np.maximum(np.abs(eval_fprime(kernel, ys)), np.abs(eval_fprime(kernel, -ys))).max(axis=1)
    curv_b = np.maximum(np.abs(eval_fsecond(kernel, ys)), np.abs(eval_fsecond(kernel, -ys))).max(axis=1)
    lip = np.maximum.accumulate(lip_b[::-1])[::-1] * ENV_SAFETY
    curv = np.maximum.accumulate(curv_b[::-1])[::-1] * ENV_SAFETY
    return Envelopes(grid, lip, curv)


# -- the kernel facts ---------------------------------------------------------


@dataclass
class PropertyCheck:
    name: str
    passed: bool
    worst_margin: float
    detail: str = ""


@dataclass
class PropertyReport:
    beta: float
    checks: list[PropertyCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "passed": self.passed,
            "checks": {
                c.name: {"passed": c.passed, "worst_margin": c.worst_margin, "detail": c.detail}
                for c in self.checks
            },
        }


def check_kernel_properties(
    kernel: Kernel,
    grid_step: float = 1e-3,
    x_lo: float = -2.0,
    x_hi: float = 50.0,
    n_triples: int = 10**5,
    seed: int = 0,
) -> PropertyReport:
    """Check the five shape facts of the Durrett-Rogers kernel on a grid.

    A margin is reported for every property, oriented so that a
    nonnegative worst margin means the property holds everywhere sampled:

    1. sup-norm bound: 1 - max |f|
    2. unimodality on the positive axis: smallest step increase on
       [0, x_max] and smallest step decrease on [x_max, x_hi]
    3. f(g) >= min(f(a), f(t)) for random triples -x_max <= a <= g <= t <= x_hi
    4. f'(x) + f(x) on [-1/2, x_hi]
    5. x_max^-beta - f(x_max)
    """
    if kernel.variant is not Variant.DURRETT_ROGERS:
        raise KernelError(f"kernel property checks need durrett_rogers, not {kernel.variant.value}")
    if not (grid_step > 0.0) or not (x_hi > x_lo) or not math.isfinite(grid_step):
        raise KernelError("invalid grid: need grid_step > 0 and x_hi > x_lo")
    n = int(round((x_hi - x_lo) / grid_step)) + 1
    xs = np.linspace(x_lo, x_hi, n)
    fx = eval_f(kernel, xs)
    xm = x_max(kernel)
    checks = []

    m1 = 1.0 - float(np.max(np.abs(fx)))
    checks.append(PropertyCheck("sup_norm", m1 >= 0.0, m1))

    pos = xs[xs >= 0.0]
    start = max(x_lo, 0.0)
    rising = np.concatenate([[start], pos[(pos > start) & (pos < xm)], [xm]])
    falling = np.concatenate([[xm], pos[(pos > xm) & (pos <= x_hi)]])
    d_up = np.diff(eval_f(kernel, rising))
    d_down = -np.diff(eval_f(kernel, falling))
    m2 = float(min(d_up.min(initial=np.inf), d_down.min(initial=np.inf)))
    checks.append(
        PropertyCheck("unimodal", m2 >= 0.0, m2, f"increasing on [0, {xm:.6g}], decreasing on [{xm:.6g}, {x_hi:g}]")
    )

    rng = np.random.default_rng(seed)
    lo = max(-xm, x_lo)
    tri = np.sort(rng.uniform(lo, x_hi, size=(n_triples, 3)), axis=1)
    ft = eval_f(kernel, tri)
    margins = ft[:, 1] - np.minimum(ft[:, 0], ft[:, 2])
    m3 = float(margins.min())
    checks.append(PropertyCheck("middle_not_below_ends", m3 >= 0.0, m3, f"{n_triples} triples on [{lo:.6g}, {x_hi:g}]"))

    sel = xs[xs >= -0.5]
    if sel.size == 0 or sel[0] > -0.5:
        sel = np.concatenate([[-0.5], sel])
    m4 = float(np.min(eval_fprime(kernel, sel) + eval_f(kernel, sel)))
    checks.append(PropertyCheck("fprime_ge_minus_f", m4 >= 0.0, m4))

    m5 = float(xm ** (-kernel.beta) - eval_f(kernel, xm))
    checks.append(PropertyCheck("peak_below_power", m5 >= 0.0, m5))
    return PropertyReport(kernel.beta, checks)
