"""Confidence radii, information-gain estimates and LCB/UCB of the barrier derivative."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .gp import CompositeKernel


@dataclass(frozen=True)
class ConfidenceParams:
    rkhs_bounds: np.ndarray
    noise_scales: np.ndarray
    delta: float = 0.01

    def __post_init__(self):
        B = np.atleast_1d(np.asarray(self.rkhs_bounds, dtype=float))
        s = np.broadcast_to(np.asarray(self.noise_scales, dtype=float), B.shape).copy()
        object.__setattr__(self, "rkhs_bounds", B)
        object.__setattr__(self, "noise_scales", s)
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if np.any(B < 0) or np.any(s < 0):
            raise ValueError("RKHS bounds and noise scales must be nonnegative")

    @property
    def n(self) -> int:
        return self.rkhs_bounds.shape[0]


def beta_n(params: ConfidenceParams, gamma) -> float:
    """``max_i B_i + sigma_i sqrt(2 (gamma_i + 1 + log(n / delta)))``."""
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (params.n,))
    if np.any(gamma < 0):
        raise ValueError("information gain must be nonnegative")
    terms = params.rkhs_bounds + params.noise_scales * np.sqrt(
        2.0 * (gamma + 1.0 + np.log(params.n / params.delta)))
    return float(terms.max())


def beta_noise_scales(sensor_noise, gp_noise, form="calibrated") -> np.ndarray:
    """Multipliers of the square-root term of ``beta_n``, one per learned output.

    ``"raw"`` uses the noise scale itself. That matches the concentration
    bound only when the posterior is regularized with unit noise variance.
    With the posterior regularized by ``gp_noise**2`` the bound rescales to
    ``sensor_noise / gp_noise``, which is 1 when the GP noise is the sensor
    noise (``"calibrated"``).
    """
    sensor_noise = np.asarray(sensor_noise, dtype=float)
    gp_noise = np.broadcast_to(np.asarray(gp_noise, dtype=float), sensor_noise.shape)
    if form == "raw":
        return gp_noise.copy()
    if form == "calibrated":
        if np.any(gp_noise <= 0):
            raise ValueError("the calibrated radius needs positive GP noise")
        return sensor_noise / gp_noise
    raise ValueError("beta form must be 'calibrated' or 'raw'")


def candidate_grid(lower, upper, size=512, seed=0):
    """Scrambled Sobol points in the box ``[lower, upper]``."""
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    pts = qmc.Sobol(d=lower.size, scramble=True, seed=seed).random(size)
    return lower + pts * (upper - lower)


def info_gain_table(kernel: CompositeKernel, noise: float, X, U, n_max=None) -> np.ndarray:
    """Greedy information gain for every budget ``0..n_max`` on the grid ``(X, U)``.

    Entry ``N`` is ``0.5 log det(I + noise^-2 K_S)`` for the greedily chosen set
    ``S`` of size ``min(N, len(X))``. Each step adds the grid point with the
    largest current posterior variance (lowest index on ties), which is the
    greedy maximizer of the log-determinant by the chain rule.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.asarray(U, dtype=float).reshape(X.shape[0], kernel.m)
    G = X.shape[0]
    if G == 0:
        raise ValueError("candidate grid is empty")
    n_max = G if n_max is None else int(n_max)
    steps = min(n_max, G)
    s2 = float(noise) ** 2
    if s2 <= 0.0:
        raise ValueError("information gain needs a positive noise scale")
    var = kernel.diag(X, U).astype(float)
    basis = np.zeros((steps, G))
    table = np.zeros(n_max + 1)
    total = 0.0
    for t in range(steps):
        j = int(np.argmax(var))
        v = max(var[j], 0.0)
        total += 0.5 * np.log1p(v / s2)
        table[t + 1] = total
        kcol = kernel.gram(X, U, X[j:j + 1], U[j:j + 1])[:, 0]
        row = (kcol - basis[:t].T @ basis[:t, j]) / np.sqrt(v + s2)
        basis[t] = row
        var = var - row ** 2
    table[steps + 1:] = total
    return table


def info_gain_greedy(kernel: CompositeKernel, noise: float, X, U, N: int) -> float:
    if N < 0:
        raise ValueError("N must be nonnegative")
    return float(info_gain_table(kernel, noise, X, U, n_max=N)[N])


def log_det_gain(kernel: CompositeKernel, noise: float, X, U) -> float:
    """``log det(I + noise^-2 K)`` on the given points."""
    K = kernel.gram(X, U, X, U)
    _, ld = np.linalg.slogdet(np.eye(len(K)) + K / noise ** 2)
    return float(ld)


@dataclass(frozen=True, eq=False)
class BetaSchedule:
    """Precomputed ``beta_N`` for ``N = 0..len-1``; saturates beyond the table."""

    values: np.ndarray

    @classmethod
    def build(cls, params: ConfidenceParams, kernels, noise, X, U, n_max):
        tables = np.array([info_gain_table(k, s, X, U, n_max=n_max)
                           for k, s in zip(kernels, np.broadcast_to(noise, (len(kernels),)))])
        vals = np.array([beta_n(params, tables[:, N]) for N in range(n_max + 1)])
        return cls(vals)

    @classmethod
    def constant(cls, beta):
        return cls(np.array([float(beta)]))

    def __call__(self, N: int) -> float:
        return float(self.values[min(N, len(self.values) - 1)])


def rkhs_norm_estimate(kernel: CompositeKernel, X, U, y, noise=0.0, reg=1e-8) -> float:
    """RKHS norm of the kernel ridge fit of ``y`` on ``(X, U)``.

    The ridge is ``noise**2`` plus ``reg`` times the mean prior variance. With
    ``noise = 0`` this is the norm of the (near) interpolant, which blows up
    when the kernel is close to low rank on the grid; the noise ridge keeps the
    estimate at the scale the data can actually resolve.
    """
    K = kernel.gram(X, U, X, U)
    Kr = K.copy()
    Kr[np.diag_indices(len(K))] += noise ** 2 + reg * np.mean(np.diag(K))
    a = np.linalg.solve(Kr, y)
    return float(np.sqrt(max(a @ K @ a, 0.0)))


def hdot_bounds(model, beta: float, grad_h, h_lipschitz: float, x, u):
    """LCB and UCB of ``grad_h . xdot`` at ``(x, u)``.

    ``model`` is a :class:`DynamicsModel` or a bare :class:`GpPosterior` with
    one output per state dimension (zero prior).
    """
    mean, var = model.mean_var(x, u)
    centre = float(np.dot(grad_h, mean))
    rad = h_lipschitz * beta * np.sqrt(var.sum())
    return centre - rad, centre + rad
