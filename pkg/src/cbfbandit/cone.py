"""Box-constrained cone programs behind the safety filter.

Every problem is built from constraints of the form

    phi_j(u) = a_j . u + c_j - r_j sqrt(ut^T M ut) >= 0,     ut = (1, u),

over an input box, with ``M`` positive semidefinite. Three problems are solved:

* the feasibility margin ``max_u min_j phi_j(u)``,
* the robust safety filter ``min |u - u_nom|^2`` subject to ``phi_j(u) >= 0``,
* the UCB maximizer ``max_u a . u + r sqrt(ut^T M ut)``, which is convex and so
  lives on a vertex of the box.

With a single input and a single constraint the first two have closed forms.
Otherwise a log-barrier interior-point method with Newton steps is used; the
cone constraints enter through the barrier ``-log(y^2 - r^2 q)`` with ``y > 0``,
which stays smooth when ``M`` is singular.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

OK, INFEASIBLE, MAX_ITER = 0, 1, 2
VERTEX_LIMIT = 16
_TIE_RTOL = 1e-12
T_GROWTH = 10.0


class SolverError(RuntimeError):
    """The interior-point method did not converge."""


@dataclass(frozen=True)
class InputBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or np.any(lo > hi) or not np.all(np.isfinite(lo + hi)):
            raise ValueError("input box needs finite bounds with lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    def clip(self, u):
        return np.minimum(np.maximum(u, self.lower), self.upper)

    def vertices(self):
        return vertex_table(self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class ConeProblem:
    """One or more cone constraints sharing a quadratic ``M``.

    ``A`` has one row per barrier, ``c = b - rhs`` folds the constant part of
    the mean derivative together with ``-alpha(h) + eps/2``, and
    ``radius`` holds ``L_h * beta`` per barrier.
    """

    A: np.ndarray
    c: np.ndarray
    radius: np.ndarray
    M: np.ndarray
    box: InputBox
    u_nom: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        m = self.box.m
        A = A.reshape(-1, m)
        J = A.shape[0]
        c = np.broadcast_to(np.asarray(self.c, dtype=float), (J,)).copy()
        r = np.broadcast_to(np.asarray(self.radius, dtype=float), (J,)).copy()
        M = np.asarray(self.M, dtype=float).reshape(m + 1, m + 1)
        M = 0.5 * (M + M.T)
        u_nom = np.broadcast_to(np.asarray(self.u_nom, dtype=float), (m,)).copy()
        if np.any(r < 0):
            raise ValueError("radius factors must be nonnegative")
        for name, val in (("A", A), ("c", c), ("radius", r), ("M", M), ("u_nom", u_nom)):
            object.__setattr__(self, name, val)

    @classmethod
    def single(cls, a, b, radius_factor, M, rhs, u_nom, box):
        """The one-barrier problem ``a.u + b - radius sqrt(ut^T M ut) >= rhs``."""
        return cls(np.atleast_2d(a), np.array([b - rhs]), np.array([radius_factor]), M, box, u_nom)

    def phi(self, u):
        """Constraint values ``phi_j`` at one input (shape (J,)) or many (shape (k, J))."""
        u = np.asarray(u, dtype=float)
        U = np.atleast_2d(u)
        ut = np.hstack([np.ones((U.shape[0], 1)), U])
        q = np.maximum(np.einsum("ki,ij,kj->k", ut, self.M, ut), 0.0)
        val = U @ self.A.T + self.c[None, :] - np.sqrt(q)[:, None] * self.radius[None, :]
        return val[0] if u.ndim == 1 else val


def _unpack(p: ConeProblem):
    return p.A, p.c, p.radius, p.M, p.box.lower, p.box.upper


def feasibility_margin(p: ConeProblem, return_argmax=False):
    """``max_u min_j phi_j(u)`` over the box; positive iff the filter is strictly feasible."""
    status, val, u = margin_kernel(*_unpack(p))
    if status == MAX_ITER:
        raise SolverError(f"margin solve did not converge (A={p.A}, c={p.c}, r={p.radius})")
    return (val, u) if return_argmax else val


def solve_safety_filter(p: ConeProblem, tol: float = 1e-9):
    """Minimal-norm correction of ``u_nom``; ``None`` if the constraints are infeasible."""
    status, u, _, _ = filter_kernel(*_unpack(p), p.u_nom, tol)
    if status == MAX_ITER:
        raise SolverError(f"safety filter did not converge (A={p.A}, c={p.c}, r={p.radius})")
    if status == INFEASIBLE:
        return None
    return u


def max_ucb_input(a, radius_factor, M, box: InputBox):
    """Vertex maximizing ``a.u + radius sqrt(ut^T M ut)``, ties to the lexicographically smallest."""
    if box.m > VERTEX_LIMIT:
        raise ValueError(f"vertex enumeration supports at most {VERTEX_LIMIT} inputs")
    a = np.asarray(a, dtype=float).reshape(box.m)
    M = np.asarray(M, dtype=float).reshape(box.m + 1, box.m + 1)
    return ucb_vertex(a, float(radius_factor), M, box.lower, box.upper)


# ----------------------------------------------------------------------------
# compiled kernels
# ----------------------------------------------------------------------------

@njit(cache=True)
def _quad(M, u):
    m = u.shape[0]
    q = M[0, 0]
    for i in range(m):
        q += 2.0 * M[0, i + 1] * u[i]
        for j in range(m):
            q += M[i + 1, j + 1] * u[i] * u[j]
    return q if q > 0.0 else 0.0


@njit(cache=True)
def phi_values(A, c, r, M, u, out):
    sq = np.sqrt(_quad(M, u))
    vmin = np.inf
    for j in range(A.shape[0]):
        v = c[j] - r[j] * sq
        for i in range(u.shape[0]):
            v += A[j, i] * u[i]
        out[j] = v
        if v < vmin:
            vmin = v
    return vmin


@njit(cache=True)
def vertex_table(lo, hi):
    m = lo.shape[0]
    V = np.empty((1 << m, m))
    for k in range(1 << m):
        for i in range(m):
            V[k, i] = hi[i] if (k >> (m - 1 - i)) & 1 else lo[i]
    return V


@njit(cache=True)
def ucb_vertex(a, r, M, lo, hi):
    V = vertex_table(lo, hi)
    nv = V.shape[0]
    vals = np.empty(nv)
    best = -np.inf
    for k in range(nv):
        v = r * np.sqrt(_quad(M, V[k]))
        for i in range(a.shape[0]):
            v += a[i] * V[k, i]
        vals[k] = v
        if v > best:
            best = v
    thr = best - _TIE_RTOL * max(1.0, abs(best))
    for k in range(nv):
        if vals[k] >= thr:
            return V[k].copy()
    return V[0].copy()


@njit(cache=True)
def _psi1(a, c, r, M, u):
    q = M[0, 0] + 2.0 * M[0, 1] * u + M[1, 1] * u * u
    return a * u + c - r * np.sqrt(q if q > 0.0 else 0.0)


@njit(cache=True)
def _margin_1d(a, c, r, M, lo, hi):
    """Closed-form maximum of the concave scalar ``psi`` over ``[lo, hi]``."""
    best_u = lo
    best = _psi1(a, c, r, M, lo)
    v = _psi1(a, c, r, M, hi)
    if v > best:
        best, best_u = v, hi
    # stationary points solve a^2 q(u) = r^2 (M01 + M11 u)^2
    qa = a * a * M[1, 1] - r * r * M[1, 1] * M[1, 1]
    qb = 2.0 * a * a * M[0, 1] - 2.0 * r * r * M[0, 1] * M[1, 1]
    qc = a * a * M[0, 0] - r * r * M[0, 1] * M[0, 1]
    roots = np.empty(2)
    nr = 0
    scale = abs(qa) + abs(qb) + abs(qc)
    if scale > 0.0:
        if abs(qa) > 1e-14 * scale:
            disc = qb * qb - 4.0 * qa * qc
            if disc >= 0.0:
                sd = np.sqrt(disc)
                qq = -0.5 * (qb + sd if qb >= 0.0 else qb - sd)
                if qq != 0.0:
                    roots[0] = qq / qa
                    roots[1] = qc / qq
                    nr = 2
                else:
                    roots[0] = 0.0
                    nr = 1
        elif abs(qb) > 0.0:
            roots[0] = -qc / qb
            nr = 1
    for k in range(nr):
        u = roots[k]
        if lo < u < hi:
            v = _psi1(a, c, r, M, u)
            if v > best:
                best, best_u = v, u
    return best, best_u


@njit(cache=True)
def _boundary_1d(a, c, r, M, inside, outside):
    """Bisection for the point where ``psi`` crosses zero; returns the feasible end."""
    for _ in range(200):
        mid = 0.5 * (inside + outside)
        if mid == inside or mid == outside:
            break
        if _psi1(a, c, r, M, mid) >= 0.0:
            inside = mid
        else:
            outside = mid
    return inside


# ---- interior-point machinery (variables normalized to [-1, 1]^m) ----------

@njit(cache=True)
def _solve_small(H, g):
    """Gaussian elimination with partial pivoting; ``H`` and ``g`` are overwritten."""
    n = g.shape[0]
    for k in range(n):
        p = k
        big = abs(H[k, k])
        for i in range(k + 1, n):
            if abs(H[i, k]) > big:
                big = abs(H[i, k])
                p = i
        if big == 0.0:
            H[k, k] = 1e-300
        elif p != k:
            for j in range(n):
                tmp = H[k, j]
                H[k, j] = H[p, j]
                H[p, j] = tmp
            tmp = g[k]
            g[k] = g[p]
            g[p] = tmp
        for i in range(k + 1, n):
            f = H[i, k] / H[k, k]
            if f != 0.0:
                for j in range(k, n):
                    H[i, j] -= f * H[k, j]
                g[i] -= f * g[k]
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        s = g[k]
        for j in range(k + 1, n):
            s -= H[k, j] * x[j]
        x[k] = s / H[k, k]
    return x


@njit(cache=True)
def _normalize(A, c, M, lo, hi):
    """Rewrite the problem in ``w`` with ``u = mid + half * w``."""
    m = lo.shape[0]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    J = A.shape[0]
    Aw = np.empty((J, m))
    cw = c.copy()
    for j in range(J):
        for i in range(m):
            Aw[j, i] = A[j, i] * half[i]
            cw[j] += A[j, i] * mid[i]
    T = np.zeros((m + 1, m + 1))
    T[0, 0] = 1.0
    for i in range(m):
        T[i + 1, 0] = mid[i]
        T[i + 1, i + 1] = half[i]
    Mw = T.T @ M @ T
    return Aw, cw, Mw, mid, half


@njit(cache=True)
def _barrier(Aw, cw, r, Mw, w, s, t, mode, wn, fixed):
    """Barrier value, or ``inf`` outside the domain.

    mode 0: margin problem, objective ``-s``; mode 1: filter, objective
    ``|half * (w - wn)|^2`` with ``fixed`` holding ``half^2``.
    """
    m = w.shape[0]
    val = 0.0
    for i in range(m):
        if not (-1.0 < w[i] < 1.0):
            return np.inf
        val -= np.log(1.0 - w[i]) + np.log(1.0 + w[i])
    q = _quad(Mw, w)
    for j in range(Aw.shape[0]):
        y = cw[j] - s
        for i in range(m):
            y += Aw[j, i] * w[i]
        g = y * y - r[j] * r[j] * q
        if y <= 0.0 or g <= 0.0:
            return np.inf
        val -= np.log(g)
    if mode == 0:
        val -= t * s
    else:
        for i in range(m):
            d = w[i] - wn[i]
            val += t * fixed[i] * d * d
    return val


@njit(cache=True)
def _grad_hess(Aw, cw, r, Mw, w, s, t, mode, wn, fixed, grad, H):
    """Gradient and Hessian of the barrier in ``(w, s)`` (``s`` only in mode 0)."""
    m = w.shape[0]
    d = m + 1 if mode == 0 else m
    for i in range(d):
        grad[i] = 0.0
        for k in range(d):
            H[i, k] = 0.0
    for i in range(m):
        a1 = 1.0 / (1.0 - w[i])
        a2 = 1.0 / (1.0 + w[i])
        grad[i] += a1 - a2
        H[i, i] += a1 * a1 + a2 * a2
    q = _quad(Mw, w)
    dq = np.empty(m)
    for i in range(m):
        acc = Mw[0, i + 1]
        for k in range(m):
            acc += Mw[i + 1, k + 1] * w[k]
        dq[i] = 2.0 * acc
    dg = np.empty(d)
    for j in range(Aw.shape[0]):
        y = cw[j] - s
        for i in range(m):
            y += Aw[j, i] * w[i]
        rr = r[j] * r[j]
        g = y * y - rr * q
        for i in range(m):
            dg[i] = 2.0 * y * Aw[j, i] - rr * dq[i]
        if mode == 0:
            dg[m] = -2.0 * y
        for i in range(d):
            grad[i] -= dg[i] / g
            for k in range(d):
                H[i, k] += dg[i] * dg[k] / (g * g)
        # second derivative of g: 2 dy dy^T - r^2 * 2 Mw_uu
        for i in range(d):
            yi = Aw[j, i] if i < m else -1.0
            for k in range(d):
                yk = Aw[j, k] if k < m else -1.0
                d2 = 2.0 * yi * yk
                if i < m and k < m:
                    d2 -= 2.0 * rr * Mw[i + 1, k + 1]
                H[i, k] -= d2 / g
    if mode == 0:
        grad[m] -= t
    else:
        for i in range(m):
            grad[i] += 2.0 * t * fixed[i] * (w[i] - wn[i])
            H[i, i] += 2.0 * t * fixed[i]


@njit(cache=True)
def _ipm(Aw, cw, r, Mw, w0, s0, mode, wn, fixed, gap_tol, t0):
    """Barrier method: centering by damped Newton, ``t`` grows tenfold per round."""
    m = w0.shape[0]
    d = m + 1 if mode == 0 else m
    w = w0.copy()
    s = s0
    t = t0
    nu = 2.0 * Aw.shape[0] + 2.0 * m
    grad = np.empty(d)
    H = np.empty((d, d))
    wt = np.empty(m)
    newton_total = 0
    for _outer in range(60):
        for _inner in range(100):
            newton_total += 1
            _grad_hess(Aw, cw, r, Mw, w, s, t, mode, wn, fixed, grad, H)
            for i in range(d):
                H[i, i] += 1e-14 * (1.0 + abs(H[i, i]))
            g = grad.copy()
            step = _solve_small(H.copy(), g)
            lam2 = 0.0
            for i in range(d):
                lam2 += grad[i] * step[i]
            if not np.isfinite(lam2):
                return MAX_ITER, w, s, newton_total
            if lam2 <= 1e-6:
                break
            f0 = _barrier(Aw, cw, r, Mw, w, s, t, mode, wn, fixed)
            alpha = 1.0
            accepted = False
            for _ls in range(60):
                for i in range(m):
                    wt[i] = w[i] - alpha * step[i]
                st = s - alpha * step[m] if mode == 0 else s
                f1 = _barrier(Aw, cw, r, Mw, wt, st, t, mode, wn, fixed)
                # near the centre a full step is safe for self-concordant barriers; only
                # domain membership is checked there, since f0 - f1 drowns in round-off
                if lam2 < 0.1 and np.isfinite(f1):
                    accepted = True
                    break
                if f1 <= f0 - 0.25 * alpha * lam2:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            for i in range(m):
                w[i] = wt[i]
            s = st
            if lam2 < 1e-9 and alpha == 1.0:
                break
        if mode == 0:
            if nu / t < gap_tol:
                return OK, w, s, newton_total
        else:
            # |u - u_nom| overshoots its optimum by at most gap / dist
            dist = 0.0
            for i in range(m):
                dist += fixed[i] * (w[i] - wn[i]) ** 2
            dist = np.sqrt(dist)
            if nu / t < gap_tol * max(gap_tol, dist):
                return OK, w, s, newton_total
        t *= T_GROWTH
    return MAX_ITER, w, s, newton_total


@njit(cache=True)
def margin_kernel(A, c, r, M, lo, hi):
    """Returns ``(status, margin, argmax)``."""
    m = lo.shape[0]
    J = A.shape[0]
    if m == 1 and J == 1:
        val, u = _margin_1d(A[0, 0], c[0], r[0], M, lo[0], hi[0])
        out = np.empty(1)
        out[0] = u
        return OK, val, out
    Aw, cw, Mw, mid, half = _normalize(A, c, M, lo, hi)
    free = np.zeros(m, dtype=np.bool_)
    for i in range(m):
        free[i] = half[i] > 0.0
    tmp = np.empty(J)
    w0 = np.zeros(m)
    v0 = phi_values(Aw, cw, r, Mw, w0, tmp)
    scale = 1.0 + abs(v0)
    for j in range(J):
        for i in range(m):
            scale += abs(Aw[j, i])
        scale += r[j] * np.sqrt(Mw[0, 0] + 1e-300)
    s0 = v0 - 0.1 * scale
    status, w, s, _ = _ipm(Aw, cw, r, Mw, w0, s0, 0, w0, w0, 1e-11 * scale, 1.0 / scale)
    # the barrier optimum sits slightly inside; evaluate the true objective there
    # and polish towards nearby box faces the iterate is pressed against
    best = phi_values(Aw, cw, r, Mw, w, tmp)
    wb = w.copy()
    for i in range(m):
        if not free[i]:
            continue
        for side in (-1.0, 1.0):
            if abs(w[i] - side) < 1e-6:
                cand = wb.copy()
                cand[i] = side
                v = phi_values(Aw, cw, r, Mw, cand, tmp)
                if v > best:
                    best = v
                    wb = cand
    u = mid + half * wb
    return status, best, u


@njit(cache=True)
def filter_kernel(A, c, r, M, lo, hi, u_nom, tol):
    """Returns ``(status, u, margin, u_margin)``; ``u`` is meaningless unless status is OK.

    ``u_margin`` is the margin maximizer, a strictly feasible point when the
    margin is positive.
    """
    m = lo.shape[0]
    un = np.empty(m)
    for i in range(m):
        un[i] = min(max(u_nom[i], lo[i]), hi[i])
    status, margin, um = margin_kernel(A, c, r, M, lo, hi)
    if status != OK:
        return status, un, margin, um
    if not margin > 0.0:
        return INFEASIBLE, un, margin, um
    st, u = filter_from(A, c, r, M, lo, hi, u_nom, tol, um, margin)
    return st, u, margin, um


@njit(cache=True)
def filter_from(A, c, r, M, lo, hi, u_nom, tol, um, margin):
    """Filter solve given a strictly feasible ``um`` with ``min_j phi_j(um) = margin > 0``.

    Returns ``(status, u)``.
    """
    m = lo.shape[0]
    J = A.shape[0]
    tmp = np.empty(J)
    un = np.empty(m)
    for i in range(m):
        un[i] = min(max(u_nom[i], lo[i]), hi[i])
    if phi_values(A, c, r, M, un, tmp) >= 0.0:
        return OK, un
    if m == 1 and J == 1:
        a0, c0, r0 = A[0, 0], c[0], r[0]
        if un[0] < um[0]:
            lo_feas = lo[0] if _psi1(a0, c0, r0, M, lo[0]) >= 0.0 else \
                _boundary_1d(a0, c0, r0, M, um[0], lo[0])
            un[0] = max(un[0], lo_feas)
        else:
            hi_feas = hi[0] if _psi1(a0, c0, r0, M, hi[0]) >= 0.0 else \
                _boundary_1d(a0, c0, r0, M, um[0], hi[0])
            un[0] = min(un[0], hi_feas)
        return OK, un
    Aw, cw, Mw, mid, half = _normalize(A, c, M, lo, hi)
    # strictly interior start: pull the feasible point slightly to the centre
    wm = np.zeros(m)
    wn = np.zeros(m)
    fixed = np.empty(m)
    for i in range(m):
        wm[i] = (um[i] - mid[i]) / half[i] if half[i] > 0.0 else 0.0
        wn[i] = (u_nom[i] - mid[i]) / half[i] if half[i] > 0.0 else 0.0
        fixed[i] = half[i] * half[i]
    phic = phi_values(Aw, cw, r, Mw, np.zeros(m), tmp)
    kappa = 0.5
    if phic < margin:
        kappa = min(0.5, 0.5 * margin / (margin - phic))
    w0 = (1.0 - kappa) * wm
    for i in range(m):
        w0[i] = min(max(w0[i], -1.0 + 1e-12), 1.0 - 1e-12)
    scale = 1e-300
    for i in range(m):
        scale += fixed[i]
    st, w, _, _ = _ipm(Aw, cw, r, Mw, w0, 0.0, 1, wn, fixed, tol, 1.0 / scale)
    if st != OK:
        return st, un
    u = mid + half * w
    for i in range(m):
        u[i] = min(max(u[i], lo[i]), hi[i])
    return OK, u
