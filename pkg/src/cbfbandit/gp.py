"""Gaussian-process regression of control-affine dynamics.

Each output dimension ``i`` of ``xdot = f(x) + g(x) u`` gets its own GP with the
composite kernel

    k_i(z, z') = k_f(x, x') + sum_j u_j k_gj(x, x') u'_j,      z = (x, u),

so that the posterior mean is affine in ``u`` and the posterior variance is a
quadratic form in ``(1, u)``. Everything here is immutable: appending data
returns a new posterior that shares nothing mutable with the old one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

JITTER_REL = 1e-10


class NumericalConditioningError(ArithmeticError):
    """A Gram matrix could not be factorized, or a variance went clearly negative."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SEKernel:
    """Squared-exponential kernel with one lengthscale per state dimension.

    A zero variance switches the component off; composite kernels use that for
    inputs known not to act on an output.
    """

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance >= 0 or not np.all(ls > 0):
            raise ValueError("SE variance must be nonnegative and lengthscales positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def __call__(self, A, B):
        A = np.atleast_2d(A) / self.lengthscales
        B = np.atleast_2d(B) / self.lengthscales
        # explicit differences: the expanded |a|^2 + |b|^2 - 2ab form cancels
        # badly and perturbs the diagonal of ill-conditioned Gram matrices
        sq = np.zeros((A.shape[0], B.shape[0]))
        for d in range(A.shape[1]):
            diff = A[:, d, None] - B[None, :, d]
            sq += diff * diff
        return self.variance * np.exp(-0.5 * sq)


@dataclass(frozen=True)
class CompositeKernel:
    state: SEKernel
    inputs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        for k in self.inputs:
            if k.dim != self.state.dim:
                raise DimensionError("all component kernels must act on the same state dimension")

    @property
    def n(self) -> int:
        return self.state.dim

    @property
    def m(self) -> int:
        return len(self.inputs)

    def _check(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(X.shape[0], self.m)
        if X.shape[1] != self.n or U.shape[1] != self.m:
            raise DimensionError(f"expected state dim {self.n} and input dim {self.m}, "
                                 f"got {X.shape[1]} and {U.shape[1]}")
        return X, U

    def gram(self, X1, U1, X2, U2):
        X1, U1 = self._check(X1, U1)
        X2, U2 = self._check(X2, U2)
        K = self.state(X1, X2)
        for j, kg in enumerate(self.inputs):
            K = K + U1[:, j, None] * kg(X1, X2) * U2[None, :, j]
        return K

    def diag(self, X, U):
        X, U = self._check(X, U)
        d = np.full(X.shape[0], self.state.variance)
        for j, kg in enumerate(self.inputs):
            d = d + kg.variance * U[:, j] ** 2
        return d

    def __call__(self, x, u, x2, u2) -> float:
        return float(self.gram(x, u, x2, u2)[0, 0])

    def packed(self):
        """(variances (m+1,), inverse lengthscales (m+1, n)) for compiled code."""
        comps = (self.state,) + self.inputs
        var = np.array([k.variance for k in comps])
        inv_ls = np.array([1.0 / k.lengthscales for k in comps])
        return var, inv_ls

    def with_params(self, variances, lengthscales) -> "CompositeKernel":
        comps = [SEKernel(v, l) for v, l in zip(variances, lengthscales)]
        return CompositeKernel(comps[0], tuple(comps[1:]))

    def restrict(self, active) -> "CompositeKernel":
        """Kernel on the inputs listed in ``active`` only."""
        return CompositeKernel(self.state, tuple(self.inputs[j] for j in active))

    def expand(self, active, m) -> "CompositeKernel":
        """Inverse of :meth:`restrict`: inputs outside ``active`` get switched-off components."""
        inputs = [SEKernel(0.0, self.state.lengthscales) for _ in range(m)]
        for k, j in zip(self.inputs, active):
            inputs[j] = k
        return CompositeKernel(self.state, tuple(inputs))


def kernel_eval(k: CompositeKernel, z, z2) -> float:
    """Evaluate ``k`` on two state-input points given as ``(x, u)`` pairs."""
    (x, u), (x2, u2) = z, z2
    x, x2 = np.atleast_1d(x), np.atleast_1d(x2)
    u, u2 = np.atleast_1d(u), np.atleast_1d(u2)
    if x.shape != (k.n,) or x2.shape != (k.n,) or u.shape != (k.m,) or u2.shape != (k.m,):
        raise DimensionError("state-input point does not match kernel dimensions")
    return k(x, u, x2, u2)


@dataclass(frozen=True)
class Measurement:
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("x", "u", "y"):
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"measurement field {name} is not finite")
            a.setflags(write=False)
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        U = np.asarray(self.U, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        U = U.reshape(X.shape[0], -1) if X.shape[0] else U.reshape(0, U.shape[-1] if U.ndim > 1 else 0)
        Y = Y.reshape(X.shape[0], -1) if X.shape[0] else Y.reshape(0, Y.shape[-1] if Y.ndim > 1 else 0)
        for a in (X, U, Y):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def empty(cls, n, m, p):
        return cls(np.zeros((0, n)), np.zeros((0, m)), np.zeros((0, p)))

    @classmethod
    def from_measurements(cls, meas: Sequence[Measurement]):
        return cls(np.array([q.x for q in meas]), np.array([q.u for q in meas]),
                   np.array([q.y for q in meas]))

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def __len__(self):
        return self.N

    def append(self, meas: Measurement) -> "Dataset":
        return Dataset(np.vstack([self.X, meas.x[None]]), np.vstack([self.U, meas.u[None]]),
                       np.vstack([self.Y, meas.y[None]]))


def _default_jitter(kernels, noise, data: Dataset):
    if data.N:
        scale = np.array([k.diag(data.X, data.U).mean() for k in kernels])
    else:
        scale = np.array([k.state.variance + sum(g.variance for g in k.inputs) for k in kernels])
    return JITTER_REL * scale


@dataclass(frozen=True, eq=False)
class GpPosterior:
    """Independent per-output GPs sharing one dataset.

    ``jitter`` is fixed for the lifetime of a posterior and inherited on
    append, so incremental updates reproduce a batch factorization exactly.
    """

    kernels: tuple
    noise: np.ndarray
    data: Dataset
    jitter: np.ndarray
    chol: np.ndarray = field(repr=False)
    chol_inv: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def from_data(cls, kernels: Sequence[CompositeKernel], noise, data: Optional[Dataset] = None,
                  jitter=None) -> "GpPosterior":
        kernels = tuple(kernels)
        p = len(kernels)
        n, m = kernels[0].n, kernels[0].m
        noise = np.broadcast_to(np.asarray(noise, dtype=float), (p,)).copy()
        if np.any(noise < 0):
            raise ValueError("noise scales must be nonnegative")
        if data is None:
            data = Dataset.empty(n, m, p)
        if data.X.shape[1] != n or data.U.shape[1] != m or data.Y.shape[1] != p:
            raise DimensionError("dataset does not match kernel dimensions")
        jitter = _default_jitter(kernels, noise, data) if jitter is None else \
            np.broadcast_to(np.asarray(jitter, dtype=float), (p,)).copy()
        N = data.N
        L = np.zeros((p, N, N))
        Linv = np.zeros((p, N, N))
        w = np.zeros((p, N))
        for i, k in enumerate(kernels):
            K = k.gram(data.X, data.U, data.X, data.U)
            K[np.diag_indices(N)] += noise[i] ** 2 + jitter[i]
            try:
                L[i] = np.linalg.cholesky(K)
            except np.linalg.LinAlgError as exc:
                raise NumericalConditioningError(f"Gram matrix of output {i} is not PD") from exc
            Linv[i] = solve_triangular(L[i], np.eye(N), lower=True)
            w[i] = cho_solve((L[i], True), data.Y[:, i])
        for a in (L, Linv, w, noise, jitter):
            a.setflags(write=False)
        return cls(kernels, noise, data, jitter, L, Linv, w)

    @property
    def n(self):
        return self.kernels[0].n

    @property
    def m(self):
        return self.kernels[0].m

    @property
    def p(self):
        return len(self.kernels)

    @property
    def N(self):
        return self.data.N

    def predict(self, X, U):
        """Posterior mean and variance at many points; arrays of shape (k, p)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(X.shape[0], self.m)
        mean = np.zeros((X.shape[0], self.p))
        var = np.zeros((X.shape[0], self.p))
        for i, k in enumerate(self.kernels):
            prior = k.diag(X, U)
            if self.N == 0:
                var[:, i] = prior
                continue
            Ks = k.gram(X, U, self.data.X, self.data.U)
            mean[:, i] = Ks @ self.weights[i]
            V = solve_triangular(self.chol[i], Ks.T, lower=True)
            var[:, i] = prior - (V * V).sum(0)
        return mean, self._clamp(var)

    def _clamp(self, var):
        if np.any(var < -self.jitter):
            raise NumericalConditioningError(f"posterior variance {var.min():.3e} below -jitter")
        return np.maximum(var, 0.0)

    def mean_var(self, x, u):
        mean, var = self.predict(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None])
        return mean[0], var[0]

    def packed(self):
        var = np.empty((self.p, self.m + 1))
        inv_ls = np.empty((self.p, self.m + 1, self.n))
        for i, k in enumerate(self.kernels):
            var[i], inv_ls[i] = k.packed()
        return var, inv_ls

    def affine_posterior(self, x):
        """Mean ``mu0 + mu_u @ u`` and per-output variances ``ut^T S_i ut`` with ut = (1, u).

        Returns ``(mu0 (p,), mu_u (p, m), S (p, m+1, m+1))``.
        """
        var, inv_ls = self.packed()
        coef, S = gp_affine_form(np.asarray(x, dtype=float), self.data.X, self.data.U, var, inv_ls,
                                 self.chol_inv, self.weights)
        return coef[:, 0], coef[:, 1:], S

    def append(self, meas: Measurement) -> "GpPosterior":
        """Rank-one extension of every Cholesky factor; O(N^2) per output."""
        x, u, y = meas.x, meas.u, meas.y
        if x.shape != (self.n,) or u.shape != (self.m,) or y.shape != (self.p,):
            raise DimensionError("measurement does not match posterior dimensions")
        N = self.N
        L = np.zeros((self.p, N + 1, N + 1))
        Linv = np.zeros_like(L)
        w = np.zeros((self.p, N + 1))
        data = self.data.append(meas)
        for i, k in enumerate(self.kernels):
            kx = k.gram(x, u, self.data.X, self.data.U)[0] if N else np.zeros(0)
            kxx = k.diag(x[None], u[None])[0] + self.noise[i] ** 2 + self.jitter[i]
            # a triangular solve keeps the factor as accurate as a batch Cholesky;
            # multiplying by the stored inverse loses digits on ill-conditioned Grams
            l = solve_triangular(self.chol[i], kx, lower=True) if N else kx
            d2 = kxx - l @ l
            if not d2 > 0:
                raise NumericalConditioningError(f"extended Gram of output {i} is not PD")
            d = np.sqrt(d2)
            L[i, :N, :N] = self.chol[i]
            L[i, N, :N] = l
            L[i, N, N] = d
            Linv[i, :N, :N] = self.chol_inv[i]
            Linv[i, N, :N] = -(l @ self.chol_inv[i]) / d
            Linv[i, N, N] = 1.0 / d
            w[i] = cho_solve((L[i], True), data.Y[:, i])
        for a in (L, Linv, w):
            a.setflags(write=False)
        return GpPosterior(self.kernels, self.noise, data, self.jitter, L, Linv, w)


def posterior_mean_var(gp: GpPosterior, x, u):
    return gp.mean_var(x, u)


def append_measurement(gp: GpPosterior, meas: Measurement) -> GpPosterior:
    return gp.append(meas)


@njit(cache=True)
def gp_affine_form(x, X, U, var, inv_ls, Linv, w):
    """Compiled core of :meth:`GpPosterior.affine_posterior`.

    ``coef[i] = C_i^T w_i`` and ``S[i] = diag(var_i) - V_i^T V_i`` where
    ``C_i[q, c]`` is the c-th kernel component at data point q (scaled by the
    stored input for c > 0) and ``V_i = L_i^{-1} C_i``.
    """
    p, c = var.shape
    N = X.shape[0]
    n = x.shape[0]
    coef = np.zeros((p, c))
    S = np.zeros((p, c, c))
    C = np.empty((N, c))
    for i in range(p):
        for k in range(c):
            S[i, k, k] = var[i, k]
        if N == 0:
            continue
        for q in range(N):
            for k in range(c):
                s = 0.0
                for d in range(n):
                    t = (x[d] - X[q, d]) * inv_ls[i, k, d]
                    s += t * t
                e = var[i, k] * np.exp(-0.5 * s)
                if k > 0:
                    e *= U[q, k - 1]
                C[q, k] = e
        for k in range(c):
            acc = 0.0
            for q in range(N):
                acc += C[q, k] * w[i, q]
            coef[i, k] = acc
        vr = np.empty(c)
        for r in range(N):
            for k in range(c):
                acc = 0.0
                for q in range(r + 1):
                    acc += Linv[i, r, q] * C[q, k]
                vr[k] = acc
            for k in range(c):
                for k2 in range(c):
                    S[i, k, k2] -= vr[k] * vr[k2]
    return coef, S


# ----------------------------------------------------------------------------
# Hyperparameters
# ----------------------------------------------------------------------------

def log_marginal_likelihood(kernel: CompositeKernel, noise: float, X, U, y) -> float:
    """Exact log evidence of one output; ``-inf`` when the Gram matrix is not PD."""
    N = len(y)
    K = kernel.gram(X, U, X, U)
    K[np.diag_indices(N)] += noise ** 2 + JITTER_REL * np.mean(np.diag(K))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return -np.inf
    a = cho_solve((L, True), y)
    return float(-0.5 * y @ a - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2 * np.pi))


@dataclass(frozen=True)
class FitConfig:
    """Multi-start L-BFGS-B over log-parameters.

    ``mode="tied"`` gives each kernel component a single lengthscale multiplier
    applied to ``widths`` (the state-domain side lengths), which keeps the
    parameter count at ``2 (m + 1)``; ``mode="ard"`` frees every lengthscale.
    """

    mode: str = "ard"
    starts: int = 8
    seed: int = 0
    maxiter: int = 500
    log_ls_bounds: tuple = (np.log(0.02), np.log(50.0))   # relative to the domain width
    log_var_span: float = 12.0                            # +- around the data-scale variance

    def __post_init__(self):
        if self.mode not in ("ard", "tied"):
            raise ValueError("fit mode must be 'ard' or 'tied'")


def _unpack(theta, c, n, widths, mode):
    var = np.exp(theta[:c])
    if mode == "tied":
        ls = np.exp(theta[c:2 * c])[:, None] * widths[None, :]
    else:
        ls = np.exp(theta[c:].reshape(c, n)) * widths[None, :]
    return var, ls


def _pack(kernel: CompositeKernel, widths, mode):
    comps = (kernel.state,) + kernel.inputs
    var = np.log([k.variance for k in comps])
    rel = np.log(np.array([k.lengthscales for k in comps]) / widths[None, :])
    if mode == "tied":
        return np.concatenate([var, rel.mean(1)])
    return np.concatenate([var, rel.ravel()])


class _Evidence:
    """Negative log evidence of one output and its gradient in the packed parameters."""

    def __init__(self, X, U, y, noise, widths, mode):
        self.X, self.y, self.noise2 = X, y, float(noise) ** 2
        self.widths, self.mode = widths, mode
        N, n = X.shape
        self.D = (X[:, None, :] - X[None, :, :]) ** 2            # N x N x n
        ones = np.ones((N, 1))
        Uf = np.hstack([ones, U])
        self.UU = Uf[:, None, :] * Uf[None, :, :]                  # N x N x c
        self.c, self.n, self.N = Uf.shape[1], n, N

    def __call__(self, theta):
        c, n, N = self.c, self.n, self.N
        var, ls = _unpack(theta, c, n, self.widths, self.mode)
        comps = []
        for k in range(c):
            comps.append(var[k] * np.exp(-0.5 * (self.D @ (1.0 / ls[k] ** 2))) * self.UU[:, :, k])
        K = np.sum(comps, axis=0)
        jit = JITTER_REL * np.mean(np.diag(K))
        K[np.diag_indices(N)] += self.noise2 + jit
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return 1e300, np.zeros_like(theta)
        a = cho_solve((L, True), self.y)
        f = 0.5 * self.y @ a + np.log(np.diag(L)).sum() + 0.5 * N * np.log(2 * np.pi)
        W = np.outer(a, a) - cho_solve((L, True), np.eye(N))
        trW = np.trace(W)

        def dlml(dK):
            return 0.5 * (np.sum(W * dK) + JITTER_REL * np.mean(np.diag(dK)) * trW)

        grad = np.zeros_like(theta)
        for k in range(c):
            grad[k] = -dlml(comps[k])
            scaled = self.D / ls[k] ** 2                           # N x N x n
            if self.mode == "tied":
                grad[c + k] = -dlml(comps[k] * scaled.sum(2))
            else:
                for d in range(n):
                    grad[c + k * n + d] = -dlml(comps[k] * scaled[:, :, d])
        return float(f), grad


def fit_hyperparameters(data: Dataset, init: Sequence[CompositeKernel], noise, widths,
                        cfg: FitConfig = FitConfig()) -> list:
    """Maximize the log marginal likelihood independently per output.

    The first start is ``init`` itself, and the best start is only accepted if it
    beats ``init``, so the returned evidence is never below the initial one.
    Lengthscales are searched relative to ``widths`` within
    ``cfg.log_ls_bounds``; variances within ``cfg.log_var_span`` of the
    output's empirical second moment.
    """
    if data.N < 2:
        raise ValueError("hyperparameter fitting needs at least two measurements")
    widths = np.asarray(widths, dtype=float)
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (data.Y.shape[1],))
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i, k0 in enumerate(init):
        y = data.Y[:, i]
        c, n = k0.m + 1, k0.n
        ulev = np.concatenate([[1.0], np.mean(data.U ** 2, 0)]) if k0.m else np.ones(1)
        var_mid = np.log(max(np.mean(y ** 2), 1e-12) / np.maximum(ulev, 1e-300))
        lo = np.concatenate([var_mid - cfg.log_var_span,
                             np.full(c if cfg.mode == "tied" else c * n, cfg.log_ls_bounds[0])])
        hi = np.concatenate([var_mid + cfg.log_var_span,
                             np.full(c if cfg.mode == "tied" else c * n, cfg.log_ls_bounds[1])])
        objective = _Evidence(data.X, data.U, y, noise[i], widths, cfg.mode)

        theta0 = _pack(k0, widths, cfg.mode)
        f_init = objective(theta0)[0]
        if f_init >= 1e300:
            raise NumericalConditioningError(f"output {i}: Gram matrix is singular at the initial "
                                             "hyperparameters (duplicate inputs without noise?)")
        best_theta, best_f = theta0, f_init
        starts = [np.clip(theta0, lo, hi)] + [rng.uniform(lo, hi) for _ in range(cfg.starts - 1)]
        for s in starts:
            res = minimize(objective, s, jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo, hi)), options=dict(maxiter=cfg.maxiter))
            if np.isfinite(res.fun) and res.fun < best_f:
                best_theta, best_f = res.x, float(res.fun)
        if best_theta is theta0:
            out.append(k0)
        else:
            out.append(k0.with_params(*_unpack(best_theta, c, n, widths, cfg.mode)))
    return out


def save_hyperparameters(path, kernels: Sequence[CompositeKernel], noise) -> None:
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (len(kernels),))
    doc = []
    for k, s in zip(kernels, noise):
        doc.append({
            "noise": float(s),
            "signal_variance": [float(c.variance) for c in (k.state,) + k.inputs],
            "lengthscales": [[float(v) for v in c.lengthscales] for c in (k.state,) + k.inputs],
        })
    Path(path).write_text(json.dumps({"outputs": doc}, indent=2) + "\n")


def load_hyperparameters(path):
    doc = json.loads(Path(path).read_text())["outputs"]
    kernels, noise = [], []
    for entry in doc:
        comps = [SEKernel(v, l) for v, l in zip(entry["signal_variance"], entry["lengthscales"])]
        kernels.append(CompositeKernel(comps[0], tuple(comps[1:])))
        noise.append(entry["noise"])
    return kernels, np.array(noise)


# ----------------------------------------------------------------------------
# Dynamics model: optional known prior plus GP residual on selected outputs
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """``xdot ~ f_hat(x) + g_hat(x) u + r(x, u)`` with a GP on some outputs of ``r``.

    ``learned`` lists the state derivatives that carry a GP; the remaining
    ones are taken from the prior with zero variance. ``prior`` maps a state
    to ``(f_hat, g_hat)``; ``None`` stands for the zero prior.
    """

    gp: GpPosterior
    learned: tuple
    n_state: int
    prior: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "learned", tuple(int(i) for i in self.learned))
        if len(self.learned) != self.gp.p:
            raise DimensionError("one GP output per learned state derivative")

    @property
    def m(self):
        return self.gp.m

    def prior_fg(self, x):
        if self.prior is None:
            return np.zeros(self.n_state), np.zeros((self.n_state, self.m))
        f, g = self.prior(x)
        return np.asarray(f, dtype=float), np.asarray(g, dtype=float).reshape(self.n_state, self.m)

    def residual(self, x, u, xdot):
        f, g = self.prior_fg(x)
        return (np.asarray(xdot) - f - g @ np.asarray(u))[list(self.learned)]

    def append(self, x, u, xdot) -> "DynamicsModel":
        y = self.residual(x, u, xdot)
        return DynamicsModel(self.gp.append(Measurement(x, u, y)), self.learned, self.n_state,
                             self.prior)

    def mean_var(self, x, u):
        """Full-state posterior mean and variance (zero variance on known outputs)."""
        f, g = self.prior_fg(x)
        mean = f + g @ np.asarray(u, dtype=float)
        var = np.zeros(self.n_state)
        mu, s2 = self.gp.mean_var(x, u)
        idx = list(self.learned)
        mean[idx] += mu
        var[idx] = s2
        return mean, var
