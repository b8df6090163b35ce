"""Deployment constants: the exploration budget and the sampling-time threshold.

The budget ``N*`` is the smallest integer with

    N > 32 beta_N^2 L_h^2 / (eps^2 log(1 + sigma^-2)) * sum_i gamma_{i,N},

where ``beta_N`` is recomputed from ``gamma`` at every candidate ``N``. The
information gain comes either from a growth model
``gamma_N <= C_gamma N^omega (log(1 + N))^theta`` or from greedy tables.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .confidence import ConfidenceParams, beta_n

SCAN_LIMIT = 1000
DEFAULT_CAP = 10 ** 9


class NoFixedPoint(RuntimeError):
    """The budget inequality has no solution below the search cap."""


@dataclass(frozen=True)
class GammaGrowth:
    """``gamma_N = C_gamma N^omega (log(1 + N))^theta`` for every output dimension.

    ``log(1 + N)`` rather than ``log N`` keeps ``gamma_1`` positive; with
    ``log N`` every model with ``theta > 0`` would claim no information from
    the first measurement and make ``N = 1`` a spurious budget.
    """

    c_gamma: float
    omega: float
    theta: float

    def __post_init__(self):
        if self.c_gamma < 0 or self.theta < 0:
            raise ValueError("C_gamma and theta must be nonnegative")
        if not 0 <= self.omega < 0.5:
            raise ValueError("omega must lie in [0, 1/2)")

    def __call__(self, N: int) -> float:
        N = max(int(N), 1)
        return float(self.c_gamma * N ** self.omega * np.log1p(N) ** self.theta)

    @classmethod
    def squared_exponential(cls, c_gamma: float, n: int) -> "GammaGrowth":
        return cls(c_gamma, 0.0, float(n))

    @classmethod
    def linear(cls, c_gamma: float) -> "GammaGrowth":
        return cls(c_gamma, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class GammaTable:
    """Per-output information-gain tables, shape ``(n_outputs, N_max + 1)``.

    Lookups past the end raise :class:`NoFixedPoint`: a greedy table on a
    finite grid says nothing about larger budgets.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(v < 0):
            raise ValueError("information gain must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def n_max(self) -> int:
        return self.values.shape[1] - 1

    def __call__(self, N: int) -> np.ndarray:
        if N > self.n_max:
            raise NoFixedPoint(f"gamma table ends at N={self.n_max}, needed N={N}")
        return self.values[:, N]


@dataclass(frozen=True, eq=False)
class TheoremInputs:
    epsilon: float
    L_alpha: float
    L_h: float
    L_xdot: float
    confidence: ConfidenceParams
    gamma: Callable      # N -> gamma per output (scalar broadcasts)
    gp_noise: Optional[float] = None   # posterior noise in the log factor; None: noise scales

    def __post_init__(self):
        for name in ("epsilon", "L_alpha", "L_h", "L_xdot"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def n(self) -> int:
        return self.confidence.n

    @property
    def noise(self) -> float:
        """Largest multiplier of the square-root term of ``beta``."""
        return float(np.max(self.confidence.noise_scales))

    def gammas(self, N: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.gamma(N), dtype=float), (self.n,))

    def log_factor(self) -> float:
        """``log(1 + s^-2)`` for the largest posterior noise ``s`` (the smallest factor)."""
        s = self.noise if self.gp_noise is None else float(self.gp_noise)
        return np.inf if s == 0 else float(np.log1p(s ** -2))

    def prefactor(self) -> float:
        return 32.0 * self.L_h ** 2 / (self.epsilon ** 2 * self.log_factor())


def budget_rhs(inp: TheoremInputs, N: int) -> float:
    """Right-hand side of the budget inequality at ``N``."""
    g = inp.gammas(N)
    if np.isinf(inp.log_factor()):
        return 0.0
    beta = beta_n(inp.confidence, g)
    return float(inp.prefactor() * beta ** 2 * g.sum())


def _smallest_solution(holds: Callable[[int], bool], cap: int) -> int:
    """Smallest ``N`` with ``holds(N)``: linear scan to SCAN_LIMIT, then doubling and bisection.

    Past the linear range the bisection returns a boundary point ``N`` with
    ``holds(N)`` and ``not holds(N - 1)``.
    """
    for N in range(1, min(SCAN_LIMIT, cap) + 1):
        if holds(N):
            return N
    lo = SCAN_LIMIT
    hi = 2 * SCAN_LIMIT
    while not holds(hi):
        lo = hi
        hi *= 2
        if hi > cap:
            if cap > lo and holds(cap):
                hi = cap
                break
            raise NoFixedPoint(f"no solution below the cap {cap}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if holds(mid):
            hi = mid
        else:
            lo = mid
    return hi


def solve_delta_n_max(inp: TheoremInputs, cap: int = DEFAULT_CAP) -> int:
    return _smallest_solution(lambda N: N > budget_rhs(inp, N), cap)


def min_sampling_rate(inp: TheoremInputs, delta_n_max: int) -> float:
    """Sampling-time threshold ``eps / (L_alpha L_h L_xdot N)`` (seconds)."""
    if delta_n_max < 1:
        raise ValueError("delta_n_max must be at least 1")
    return inp.epsilon / (inp.L_alpha * inp.L_h * inp.L_xdot * delta_n_max)


def closed_form_constants(inp: TheoremInputs):
    """``(C1, C32, C2)`` bounding ``beta_N^2 sum_i gamma_i`` by ``C1 g + C32 g^1.5 + C2 g^2``."""
    n = inp.n
    B = float(np.max(inp.confidence.rkhs_bounds))
    s = inp.noise
    ld = 1.0 + np.log(n / inp.confidence.delta)
    c1 = n * B ** 2 + 2 * n * B * s * np.sqrt(2 * ld) + 2 * n * s ** 2 * ld
    c32 = 2 * n * B * s * np.sqrt(2.0)
    c2 = 2 * n * s ** 2
    return float(c1), float(c32), float(c2)


def closed_form_rhs(inp: TheoremInputs, growth: GammaGrowth, N: int) -> float:
    """Upper bound ``prefactor * (C1 + C32 + C2) * (gamma_N^2 + 1)`` on the budget right-hand side."""
    if np.isinf(inp.log_factor()):
        return 0.0
    g = growth(N)
    return inp.prefactor() * sum(closed_form_constants(inp)) * (g ** 2 + 1.0)


def appendix_c_closed_form(inp: TheoremInputs, growth: Optional[GammaGrowth] = None,
                           cap: int = DEFAULT_CAP) -> int:
    """Budget from the kernel-dependent bound with growth model ``growth``.

    ``growth`` defaults to ``inp.gamma`` when that is a :class:`GammaGrowth`.
    When the growth model dominates the information gain used by
    :func:`solve_delta_n_max`, so does the result.
    """
    growth = growth if growth is not None else inp.gamma
    if not isinstance(growth, GammaGrowth):
        raise TypeError("the closed form needs a GammaGrowth model")
    return _smallest_solution(lambda N: N > closed_form_rhs(inp, growth, N), cap)


def constants_report(inp: TheoremInputs, cap: int = DEFAULT_CAP) -> dict:
    """Budget, sampling-time threshold and every input, as plain data."""
    out = {
        "epsilon": inp.epsilon, "L_alpha": inp.L_alpha, "L_h": inp.L_h, "L_xdot": inp.L_xdot,
        "rkhs_bounds": inp.confidence.rkhs_bounds.tolist(),
        "noise_scales": inp.confidence.noise_scales.tolist(), "delta": inp.confidence.delta,
    }
    try:
        n_star = solve_delta_n_max(inp, cap)
        out["delta_n_max"] = n_star
        out["beta_at_delta_n_max"] = beta_n(inp.confidence, inp.gammas(n_star))
        out["dt_threshold"] = min_sampling_rate(inp, n_star)
    except NoFixedPoint as exc:
        out["delta_n_max"] = None
        out["error"] = str(exc)
    if isinstance(inp.gamma, GammaGrowth):
        g = inp.gamma
        out["gamma_growth"] = {"c_gamma": g.c_gamma, "omega": g.omega, "theta": g.theta}
        try:
            out["closed_form_delta_n_max"] = appendix_c_closed_form(inp, cap=cap)
        except NoFixedPoint as exc:
            out["closed_form_delta_n_max"] = None
            out["closed_form_error"] = str(exc)
    return out
