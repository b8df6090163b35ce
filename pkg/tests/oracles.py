"""Slow, obviously-correct reference implementations used by the tests.

Nothing here shares code with the package beyond kernel evaluation: posteriors
come from dense linear solves, cone programs from grid search, and budget
thresholds from exhaustive scans.
"""
from __future__ import annotations

import numpy as np


def refined_solve(K, B, iters=3):
    """``K^-1 B`` by LU plus iterative refinement with extended-precision residuals."""
    Kl = K.astype(np.longdouble)
    X = np.linalg.solve(K, B)
    for _ in range(iters):
        R = (B.astype(np.longdouble) - Kl @ X.astype(np.longdouble)).astype(float)
        X = X + np.linalg.solve(K, R)
    return X


def dense_posterior(kernel, noise, X, U, y, Xq, Uq, jitter=0.0):
    """Posterior mean and variance from a dense solve of ``(K + s^2 I) a = .``.

    The solve is refined and the final contractions run in extended precision,
    so the reference is as accurate as the float64 inputs allow.
    """
    K = kernel.gram(X, U, X, U) + (noise ** 2 + jitter) * np.eye(len(X))
    Ks = kernel.gram(Xq, Uq, X, U)
    Ksl = Ks.astype(np.longdouble)
    mean = (Ksl @ refined_solve(K, y).astype(np.longdouble)).astype(float)
    S = refined_solve(K, Ks.T).astype(np.longdouble)
    var = kernel.diag(Xq, Uq) - np.einsum("ij,ji->i", Ksl, S).astype(float)
    return mean, var


def grid_points(box_lo, box_hi, per_dim):
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(box_lo, box_hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def grid_spacing(box_lo, box_hi, per_dim):
    """Largest distance from any box point to its nearest grid point."""
    h = (np.asarray(box_hi) - np.asarray(box_lo)) / (per_dim - 1)
    return 0.5 * float(np.linalg.norm(h))


def phi_on(points, A, c, r, M):
    """Constraint values, shape (k, J), at many inputs."""
    ut = np.hstack([np.ones((len(points), 1)), points])
    q = np.maximum(np.einsum("ki,ij,kj->k", ut, M, ut), 0.0)
    return points @ A.T + c[None, :] - np.sqrt(q)[:, None] * r[None, :]


def grid_margin(A, c, r, M, lo, hi, per_dim):
    pts = grid_points(lo, hi, per_dim)
    vals = phi_on(pts, A, c, r, M).min(1)
    k = int(np.argmax(vals))
    return float(vals[k]), pts[k]


def grid_filter(A, c, r, M, lo, hi, u_nom, per_dim):
    """Smallest ``|u - u_nom|^2`` over feasible grid points, or None."""
    pts = grid_points(lo, hi, per_dim)
    ok = phi_on(pts, A, c, r, M).min(1) >= 0.0
    if not ok.any():
        return None
    d = ((pts[ok] - u_nom) ** 2).sum(1)
    k = int(np.argmin(d))
    return float(d[k]), pts[ok][k]


def grid_ucb(a, r, M, lo, hi, per_dim):
    pts = grid_points(lo, hi, per_dim)
    ut = np.hstack([np.ones((len(pts), 1)), pts])
    q = np.maximum(np.einsum("ki,ij,kj->k", ut, M, ut), 0.0)
    vals = pts @ a + r * np.sqrt(q)
    return float(vals.max())


def lipschitz_of_phi(A, r, M, lo, hi):
    """Crude upper bound on the Lipschitz constant of every ``phi_j`` over the box."""
    w, V = np.linalg.eigh(M)
    root = V @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ V.T
    return float(np.max(np.linalg.norm(A, axis=1)) + np.max(r) * np.linalg.norm(root[:, 1:], 2))


def smallest_n_scan(holds, limit):
    """First ``N`` in ``1..limit`` with ``holds(N)``; None if there is none."""
    for N in range(1, limit + 1):
        if holds(N):
            return N
    return None


def rk4_linear(Amat, x0, dt, steps):
    """Classical RK4 on ``xdot = A x`` written out longhand."""
    x = np.array(x0, dtype=float)
    for _ in range(steps):
        k1 = Amat @ x
        k2 = Amat @ (x + 0.5 * dt * k1)
        k3 = Amat @ (x + 0.5 * dt * k2)
        k4 = Amat @ (x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def central_gradient(fun, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def greedy_gain_scan(kernel, noise, X, U, steps):
    """Greedy information gain by brute force: try every candidate with a dense log-det."""
    chosen, gains = [], [0.0]
    for _ in range(steps):
        best, best_j = -np.inf, None
        for j in range(len(X)):
            S = chosen + [j]
            K = kernel.gram(X[S], U[S], X[S], U[S])
            val = 0.5 * np.linalg.slogdet(np.eye(len(S)) + K / noise ** 2)[1]
            if val > best + 1e-12:
                best, best_j = val, j
        chosen.append(best_j)
        gains.append(best)
    return np.array(gains)
