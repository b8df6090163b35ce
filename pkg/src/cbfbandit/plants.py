"""Benchmark plants: adaptive cruise control, a quadrotor with ground effect, and
a linear test plant for integrator checks.

Each plant is described by a parameter vector plus a handful of compiled
functions with fixed signatures so that the simulation loop can take them as
arguments:

    fg(x, P)        -> (f (n,), g (n, m))     true control-affine dynamics
    prior(x, P)     -> (f_hat, g_hat)         known part of the model
    cbf(x, P)       -> (h (J,), grad (J, n))  barrier values and gradients
    nominal(x, P)   -> u (m,)                 nominal controller
    post(x)         -> x                      projection after each step
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .cone import InputBox


class DomainError(ValueError):
    """State outside the region where the plant model is defined."""


@dataclass(frozen=True)
class CbfSpec:
    """Barrier ``h >= 0`` with linear class-K function ``alpha(s) = alpha_slope * s``."""

    h: Callable
    grad_h: Callable
    alpha_slope: float
    epsilon: float
    h_lipschitz: float
    name: str = "h"

    def __post_init__(self):
        if not (self.alpha_slope > 0 and self.epsilon > 0 and self.h_lipschitz > 0):
            raise ValueError("alpha slope, epsilon and L_h must be positive")

    def alpha(self, s):
        return self.alpha_slope * s

    @property
    def alpha_lipschitz(self) -> float:
        return self.alpha_slope


# ----------------------------------------------------------------------------
# shared numerics
# ----------------------------------------------------------------------------

@njit(cache=True)
def _xdot(fg, x, u, P):
    f, g = fg(x, P)
    return f + g @ u


@njit(cache=True)
def rk4_step(fg, post, x, u, dt, P):
    """Classical RK4 with ``u`` held, followed by the plant's projection ``post``."""
    k1 = _xdot(fg, x, u, P)
    k2 = _xdot(fg, x + 0.5 * dt * k1, u, P)
    k3 = _xdot(fg, x + 0.5 * dt * k2, u, P)
    k4 = _xdot(fg, x + dt * k3, u, P)
    return post(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


@njit(cache=True)
def identity_post(x):
    return x


@njit(cache=True)
def zero_prior_cruise(x, P):
    return np.zeros(2), np.zeros((2, 1))


# ----------------------------------------------------------------------------
# cruise control, state (v, z), input wheel force
# P = [mass, zeta0, zeta1, zeta2, v_lead, T_h, v_des, k_p]
# ----------------------------------------------------------------------------

CRUISE_KEYS = ("mass", "zeta0", "zeta1", "zeta2", "v_lead", "headway", "v_des", "k_p")


@njit(cache=True)
def cruise_fg(x, P):
    v = x[0]
    f = np.empty(2)
    f[0] = -(P[1] + P[2] * v + P[3] * v * v) / P[0]
    f[1] = P[4] - v
    g = np.zeros((2, 1))
    g[0, 0] = 1.0 / P[0]
    return f, g


@njit(cache=True)
def cruise_cbf(x, P):
    h = np.empty(1)
    h[0] = x[1] - P[5] * x[0]
    grad = np.empty((1, 2))
    grad[0, 0] = -P[5]
    grad[0, 1] = 1.0
    return h, grad


@njit(cache=True)
def cruise_nominal(x, P):
    u = np.empty(1)
    u[0] = -P[7] * (x[0] - P[6])
    return u


# ----------------------------------------------------------------------------
# quadrotor, state (p, v, q) with q = (w, x, y, z); input (T, omega_body)
# P = [g, rho, r_rot, T_z, h1_scale, r, alpha_q, lam, kp, kd, k_att, k_yaw, px*, py*, pz*]
# ----------------------------------------------------------------------------

QUAD_KEYS = ("gravity", "rho", "r_rot", "T_z", "h1_scale", "radius", "alpha_q", "lam",
             "k_p", "k_d", "k_att", "k_yaw", "setpoint_x", "setpoint_y", "setpoint_z", "h1_sign")


@njit(cache=True)
def ground_effect(pz, P):
    a = P[2] / (4.0 * pz)
    return 1.0 - P[1] * a * a


@njit(cache=True)
def body_z(q):
    """Third column of the rotation matrix, ``R e_z``."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    b = np.empty(3)
    b[0] = 2.0 * (x * z + w * y)
    b[1] = 2.0 * (y * z - w * x)
    b[2] = 1.0 - 2.0 * (x * x + y * y)
    return b


@njit(cache=True)
def body_z_jacobian(q):
    """``d(R e_z)/dq`` as a 3x4 matrix."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    D = np.empty((3, 4))
    D[0, 0], D[0, 1], D[0, 2], D[0, 3] = 2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x
    D[1, 0], D[1, 1], D[1, 2], D[1, 3] = -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y
    D[2, 0], D[2, 1], D[2, 2], D[2, 3] = 0.0, -4.0 * x, -4.0 * y, 0.0
    return D


@njit(cache=True)
def rotation(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def quat_rate_matrix(q):
    """``Q(q)`` with ``q_dot = 0.5 Q(q) omega`` for body rates ``omega``."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    Q = np.empty((4, 3))
    Q[0, 0], Q[0, 1], Q[0, 2] = -x, -y, -z
    Q[1, 0], Q[1, 1], Q[1, 2] = w, -z, y
    Q[2, 0], Q[2, 1], Q[2, 2] = z, w, -x
    Q[3, 0], Q[3, 1], Q[3, 2] = -y, x, w
    return Q


@njit(cache=True)
def quad_fg(x, P):
    """NaN-valued output when the ground-effect factor is nonpositive."""
    f = np.zeros(10)
    g = np.zeros((10, 4))
    zeta = ground_effect(x[2], P) if x[2] > 0.0 else -1.0
    if not zeta > 0.0:
        f[:] = np.nan
        return f, g
    f[0:3] = x[3:6]
    f[5] = -P[0]
    b = body_z(x[6:10])
    g[3:6, 0] = zeta * b
    g[6:10, 1:4] = 0.5 * quat_rate_matrix(x[6:10])
    return f, g


@njit(cache=True)
def quad_prior(x, P):
    """Known kinematics (position and attitude rates); translational acceleration unknown."""
    f = np.zeros(10)
    g = np.zeros((10, 4))
    f[0:3] = x[3:6]
    g[6:10, 1:4] = 0.5 * quat_rate_matrix(x[6:10])
    return f, g


@njit(cache=True)
def quad_drift_prior(x, P):
    """Known input-free drift (kinematics and gravity) plus attitude kinematics.

    Only the thrust channel of the translational acceleration is unknown.
    """
    f, g = quad_prior(x, P)
    f[5] = -P[0]
    return f, g


@njit(cache=True)
def zero_prior_quad(x, P):
    return np.zeros(10), np.zeros((10, 4))


@njit(cache=True)
def quad_cbf(x, P):
    p, v, q = x[0:3], x[3:6], x[6:10]
    s1, Tz, r, aq, lam = P[4], -P[15] * P[3], P[5], P[6], P[7]
    h = np.empty(2)
    grad = np.zeros((2, 10))
    h[0] = s1 * (p[2] - Tz * v[2])
    grad[0, 2] = s1
    grad[0, 5] = -s1 * Tz
    b = body_z(q)
    pb = p[0] * b[0] + p[1] * b[1] + p[2] * b[2]
    pv = p[0] * v[0] + p[1] * v[1] + p[2] * v[2]
    pp = p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
    h[1] = -2.0 * pv + aq * (r * r - pp) - lam * (1.0 + pb / r)
    for i in range(3):
        grad[1, i] = -2.0 * v[i] - 2.0 * aq * p[i] - lam * b[i] / r
        grad[1, 3 + i] = -2.0 * p[i]
    D = body_z_jacobian(q)
    for k in range(4):
        acc = 0.0
        for i in range(3):
            acc += p[i] * D[i, k]
        grad[1, 6 + k] = -lam * acc / r
    return h, grad


@njit(cache=True)
def quad_nominal(x, P):
    """Cascaded PD hover controller, not yet saturated."""
    p, v, q = x[0:3], x[3:6], x[6:10]
    kp, kd, katt, kyaw = P[8], P[9], P[10], P[11]
    a = np.empty(3)
    for i in range(3):
        a[i] = -kp * (p[i] - P[12 + i]) - kd * v[i]
    a[2] += P[0]
    b = body_z(q)
    zeta = ground_effect(p[2], P) if p[2] > 0.0 else 1.0
    if zeta < 1e-3:
        zeta = 1e-3
    u = np.zeros(4)
    u[0] = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / zeta
    na = np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    if na > 0.0:
        bd = a / na
        # world-frame rotation taking b towards bd, expressed in the body frame
        cx = b[1] * bd[2] - b[2] * bd[1]
        cy = b[2] * bd[0] - b[0] * bd[2]
        cz = b[0] * bd[1] - b[1] * bd[0]
        R = rotation(q)
        for i in range(3):
            u[1 + i] = katt * (R[0, i] * cx + R[1, i] * cy + R[2, i] * cz)
    # yaw: drive the body x axis' heading back to zero
    R = rotation(q)
    u[3] += -kyaw * np.arctan2(R[1, 0], R[0, 0])
    return u


@njit(cache=True)
def quad_post(x):
    y = x.copy()
    nq = np.sqrt(x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9])
    for i in range(6, 10):
        y[i] = x[i] / nq
    return y


# ----------------------------------------------------------------------------
# plant records
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Plant:
    name: str
    n: int
    m: int
    params: np.ndarray
    box: InputBox
    x_lower: np.ndarray
    x_upper: np.ndarray
    fg_fn: Callable
    cbf_fn: Callable
    nominal_fn: Callable
    post_fn: Callable
    prior_fn: Callable
    learned: tuple
    saturate_nominal: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n_cbf(self) -> int:
        return len(self.cbf_fn(np.asarray(self.x_lower + self.x_upper) / 2, self.params)[0])

    def check_domain(self, x):
        if self.name == "quadrotor":
            zeta = ground_effect(float(x[2]), self.params) if x[2] > 0 else -1.0
            if not zeta > 0:
                raise DomainError(f"altitude {x[2]:.4g} is below the ground-effect singularity")
            nq = np.linalg.norm(x[6:10])
            if abs(nq - 1.0) > 1e-6:
                raise DomainError(f"quaternion norm {nq:.12g} is not 1")

    def dynamics(self, x):
        x = np.asarray(x, dtype=float)
        self.check_domain(x)
        return self.fg_fn(x, self.params)

    def xdot(self, x, u):
        f, g = self.dynamics(x)
        return f + g @ np.asarray(u, dtype=float)

    def prior(self, x):
        return self.prior_fn(np.asarray(x, dtype=float), self.params)

    def barriers(self, x):
        return self.cbf_fn(np.asarray(x, dtype=float), self.params)

    def nominal(self, x):
        u = self.nominal_fn(np.asarray(x, dtype=float), self.params)
        return self.box.clip(u) if self.saturate_nominal else u

    def step(self, x, u, dt):
        x1 = rk4_step(self.fg_fn, self.post_fn, np.asarray(x, dtype=float),
                      np.asarray(u, dtype=float), float(dt), self.params)
        if not np.all(np.isfinite(x1)):
            raise FloatingPointError(f"{self.name}: integration produced a non-finite state")
        return x1

    def cbf_specs(self, alpha_slope, epsilon, h_lipschitz):
        """One :class:`CbfSpec` per barrier; ``h_lipschitz`` gives L_h per barrier."""
        specs = []
        for j in range(len(h_lipschitz)):
            specs.append(CbfSpec(
                h=lambda x, j=j: float(self.barriers(x)[0][j]),
                grad_h=lambda x, j=j: self.barriers(x)[1][j].copy(),
                alpha_slope=float(alpha_slope), epsilon=float(epsilon),
                h_lipschitz=float(h_lipschitz[j]), name=f"h_{j + 1}"))
        return specs

    def sample_states(self, k, rng, lower=None, upper=None):
        """Uniform draws from the domain box (or a sub-box); quaternions are normalized."""
        lower = self.x_lower if lower is None else np.asarray(lower, dtype=float)
        upper = self.x_upper if upper is None else np.asarray(upper, dtype=float)
        x = rng.uniform(lower, upper, size=(k, self.n))
        if self.name == "quadrotor":
            x[:, 6:10] /= np.linalg.norm(x[:, 6:10], axis=1, keepdims=True)
        return x

    def sample_inputs(self, k, rng):
        return rng.uniform(self.box.lower, self.box.upper, size=(k, self.m))

    def xdot_bound(self, samples=100_000, seed=0, factor=1.1):
        """``factor`` times the largest sampled ``|f(x) + g(x) u|`` over the domain and box."""
        rng = np.random.default_rng(seed)
        X = self.sample_states(samples, rng)
        U = self.sample_inputs(samples, rng)
        return factor * float(max(np.linalg.norm(self.xdot(x, u)) for x, u in zip(X, U)))

    def h_lipschitz(self, samples=20_000, seed=0, factor=1.1):
        """Per-barrier bound on the gradient norm over the learned state derivatives.

        Only the learned outputs carry posterior variance, so the gradient
        components along exactly known derivatives never multiply the
        confidence radius. Exact for constant gradients, otherwise ``factor``
        times the sampled maximum.
        """
        rng = np.random.default_rng(seed)
        X = self.sample_states(samples, rng)
        G = np.array([self.barriers(x)[1] for x in X])[:, :, list(self.learned)]
        norms = np.linalg.norm(G, axis=2).max(0)
        const = np.all(np.abs(G - G[:1]).max(0) < 1e-12, axis=1)
        return np.where(const, norms, factor * norms)


@dataclass(frozen=True)
class CruiseParams:
    mass: float = 1650.0
    zeta0: float = 0.2
    zeta1: float = 10.0
    zeta2: float = 0.5
    v_lead: float = 14.0
    headway: float = 1.8
    v_des: float = 24.0
    k_p: float = 10.0
    u_max: float = 4000.0
    v_range: tuple = (0.0, 40.0)
    z_range: tuple = (0.0, 150.0)

    def vector(self):
        return np.array([getattr(self, k) for k in CRUISE_KEYS], dtype=float)


@dataclass(frozen=True)
class QuadrotorParams:
    gravity: float = 9.81
    rho: float = 5.0
    r_rot: float = 0.09
    T_z: float = 0.1
    h1_scale: float = 10.0
    radius: float = 2.0
    alpha_q: float = 1.0
    lam: float = 1.0
    k_p: float = 2.0
    k_d: float = 3.0
    k_att: float = 4.0
    k_yaw: float = 1.0
    setpoint_x: float = 0.0
    setpoint_y: float = 0.0
    setpoint_z: float = 1.0
    # -1 gives the altitude barrier 10 (p_z - T_z v_z) exactly as printed, +1 the
    # look-ahead form 10 (p_z + T_z v_z) whose safe set excludes falling into the ground
    h1_sign: float = -1.0
    thrust_range: tuple = (0.0, 15000.0)
    omega_max: float = 5.0
    p_range: tuple = (-3.0, 3.0)
    pz_range: tuple = (0.1, 3.0)
    v_range: tuple = (-5.0, 5.0)

    def __post_init__(self):
        if not 0 < self.lam < self.radius ** 2 / 2:
            raise ValueError("lam must lie in (0, radius^2 / 2)")
        if self.h1_sign not in (-1.0, 1.0):
            raise ValueError("h1_sign must be -1 or +1")

    def vector(self):
        return np.array([getattr(self, k) for k in QUAD_KEYS], dtype=float)


def make_cruise(params: CruiseParams = CruiseParams(), prior: str = "zero") -> Plant:
    priors = {"zero": zero_prior_cruise, "true": cruise_fg}
    return Plant(
        name="cruise", n=2, m=1, params=params.vector(),
        box=InputBox([-params.u_max], [params.u_max]),
        x_lower=np.array([params.v_range[0], params.z_range[0]]),
        x_upper=np.array([params.v_range[1], params.z_range[1]]),
        fg_fn=cruise_fg, cbf_fn=cruise_cbf, nominal_fn=cruise_nominal, post_fn=identity_post,
        prior_fn=priors[prior], learned=(0, 1))


def make_quadrotor(params: QuadrotorParams = QuadrotorParams(), prior: str = "kinematics") -> Plant:
    """Priors other than ``"zero"`` learn only the translational acceleration.

    ``"kinematics"`` knows the position and attitude rates, ``"drift"`` adds
    gravity, ``"true"`` is the exact model (for checks).
    """
    priors = {"kinematics": (quad_prior, (3, 4, 5)), "drift": (quad_drift_prior, (3, 4, 5)),
              "zero": (zero_prior_quad, tuple(range(10))), "true": (quad_fg, (3, 4, 5))}
    prior_fn, learned = priors[prior]
    lo_p, hi_p = params.p_range
    lo_v, hi_v = params.v_range
    om = params.omega_max
    return Plant(
        name="quadrotor", n=10, m=4, params=params.vector(),
        box=InputBox([params.thrust_range[0], -om, -om, -om], [params.thrust_range[1], om, om, om]),
        x_lower=np.array([lo_p, lo_p, params.pz_range[0]] + [lo_v] * 3 + [-1.0] * 4),
        x_upper=np.array([hi_p, hi_p, params.pz_range[1]] + [hi_v] * 3 + [1.0] * 4),
        fg_fn=quad_fg, cbf_fn=quad_cbf, nominal_fn=quad_nominal, post_fn=quad_post,
        prior_fn=prior_fn, learned=learned, saturate_nominal=True)


# ----------------------------------------------------------------------------
# linear test plant xdot = A x + B u, barrier 1 - |x|^2
# P = [n, m, A (row-major), B (row-major)]
# ----------------------------------------------------------------------------

@njit(cache=True)
def linear_fg(x, P):
    n, m = int(P[0]), int(P[1])
    A = P[2:2 + n * n].reshape(n, n)
    B = P[2 + n * n:2 + n * n + n * m].reshape(n, m)
    return A @ x, B.copy()


@njit(cache=True)
def linear_prior(x, P):
    n, m = int(P[0]), int(P[1])
    return np.zeros(n), np.zeros((n, m))


@njit(cache=True)
def unit_ball_cbf(x, P):
    h = np.empty(1)
    h[0] = 1.0 - x @ x
    grad = np.empty((1, x.shape[0]))
    grad[0] = -2.0 * x
    return h, grad


@njit(cache=True)
def zero_nominal(x, P):
    return np.zeros(int(P[1]))


def make_linear(A, B, u_max: float = 1.0, x_bound: float = 2.0) -> Plant:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape
    if A.shape != (n, n):
        raise ValueError("A must be square with as many rows as B")
    P = np.concatenate([[n, m], A.ravel(), B.ravel()])
    return Plant(
        name="linear", n=n, m=m, params=P,
        box=InputBox(-u_max * np.ones(m), u_max * np.ones(m)),
        x_lower=-x_bound * np.ones(n), x_upper=x_bound * np.ones(n),
        fg_fn=linear_fg, cbf_fn=unit_ball_cbf, nominal_fn=zero_nominal, post_fn=identity_post,
        prior_fn=linear_prior, learned=tuple(range(n)))
