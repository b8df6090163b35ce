"""Safe control with on-the-fly bandit exploration.

While the robust filter is strictly feasible the controller applies its
solution. At the first check instant where it is not, the controller starts an
exploration event: it picks the input maximizing the UCB of one barrier's
derivative, holds it for ``dt_sample`` seconds, records a noisy derivative
measurement taken at the start of the hold, and appends it to the GP when the
hold ends. It then re-checks feasibility immediately.

:func:`step_controller` is the readable reference implementation; the fast
loop in :mod:`cbfbandit.sim` calls the same compiled kernels
(:func:`decision_terms`, :func:`safe_decision`) and is tested to match it
record for record.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit

from .cone import OK, ConeProblem, InputBox, SolverError, filter_from, filter_kernel, \
    margin_kernel, phi_values, ucb_vertex
from .confidence import BetaSchedule
from .gp import DynamicsModel, gp_affine_form

SAFE_FILTER, EXPLORE_HOLD = 0, 1
MODE_NAMES = {SAFE_FILTER: "SAFE_FILTER", EXPLORE_HOLD: "EXPLORE_HOLD"}
TRIGGER = 3


@dataclass(frozen=True)
class ControllerConfig:
    dt_sample: float
    epsilon: float
    alpha_slope: float
    h_lipschitz: np.ndarray
    beta: BetaSchedule
    noise: np.ndarray
    policy: str = "ucb"
    exact_margin: bool = True
    filter_tol: float = 1e-9
    seed: int = 0
    radius: str = "lipschitz"

    def __post_init__(self):
        if self.policy not in ("ucb", "random"):
            raise ValueError("policy must be 'ucb' or 'random'")
        if self.radius not in ("lipschitz", "pointwise"):
            raise ValueError("radius must be 'lipschitz' or 'pointwise'")
        if not (self.dt_sample > 0 and self.epsilon > 0 and self.alpha_slope > 0):
            raise ValueError("dt_sample, epsilon and alpha slope must be positive")
        object.__setattr__(self, "h_lipschitz", np.atleast_1d(np.asarray(self.h_lipschitz, float)))
        object.__setattr__(self, "noise", np.atleast_1d(np.asarray(self.noise, float)))


@dataclass(frozen=True, eq=False)
class ControllerState:
    model: DynamicsModel
    beta: float
    explore: bool = False
    N: int = 0
    t_N: float = -np.inf
    held_input: Optional[np.ndarray] = None
    pending: Optional[tuple] = None      # (x, u, measured xdot) awaiting its GP update
    events: int = 0
    certificate: Optional[np.ndarray] = None   # input last known strictly feasible

    def __post_init__(self):
        if self.explore != (self.held_input is not None):
            raise ValueError("a held input exists exactly while exploring")


@dataclass(frozen=True)
class ControlDecision:
    u: np.ndarray
    mode: int
    margin: float
    h: np.ndarray
    lcb: np.ndarray
    ucb: np.ndarray


def select_exploration_cbf(events: int, n_cbf: int) -> int:
    """Round-robin over barriers by exploration-event count (events counted from 1)."""
    if n_cbf < 1:
        raise ValueError("at least one barrier is needed")
    return (max(events, 1) - 1) % n_cbf


def take_measurement(plant, x, u, noise, seed) -> np.ndarray:
    """True state derivative plus iid Gaussian noise drawn from ``seed``."""
    xdot = plant.xdot(x, u)
    noise = np.broadcast_to(np.asarray(noise, dtype=float), xdot.shape)
    rng = np.random.default_rng(seed)
    return xdot + noise * rng.standard_normal(xdot.shape)


def measurement_seed(seed: int, N: int):
    return [int(seed), int(N), 0]


def policy_seed(seed: int, N: int):
    return [int(seed), int(N), 1]


# ----------------------------------------------------------------------------
# compiled decision kernels shared with the simulation loop
# ----------------------------------------------------------------------------

@njit(cache=True)
def decision_terms(x, P, prior, cbf, learned, X, U, var, inv_ls, Linv, w, alpha, eps, Lh, beta,
                   pointwise):
    """Cone data at ``x``: returns ``(A, b, c, r, M, h)``.

    Mean derivative of barrier j is ``A[j] . u + b[j]``; the filter constraint
    is ``A[j] . u + c[j] - r[j] sqrt(ut^T M ut) >= 0``. The radius factor
    ``r[j]`` is ``Lh[j] beta``, or with ``pointwise`` the norm of barrier j's
    gradient along the learned derivatives at ``x`` times ``beta`` (never
    larger, and equal for barriers with constant gradient).
    """
    f0, g0 = prior(x, P)
    h, G = cbf(x, P)
    coef, S = gp_affine_form(x, X, U, var, inv_ls, Linv, w)
    n, m = g0.shape
    mean0 = f0.copy()
    meanu = g0.copy()
    M = np.zeros((m + 1, m + 1))
    for i in range(learned.shape[0]):
        li = learned[i]
        mean0[li] += coef[i, 0]
        for k in range(m):
            meanu[li, k] += coef[i, k + 1]
        M += S[i]
    J = h.shape[0]
    A = np.zeros((J, m))
    b = np.zeros(J)
    c = np.empty(J)
    r = np.empty(J)
    for j in range(J):
        for d in range(n):
            b[j] += G[j, d] * mean0[d]
            for k in range(m):
                A[j, k] += G[j, d] * meanu[d, k]
        c[j] = b[j] + alpha * h[j] - 0.5 * eps
        if pointwise:
            gn = 0.0
            for i in range(learned.shape[0]):
                gn += G[j, learned[i]] ** 2
            r[j] = min(np.sqrt(gn), Lh[j]) * beta
        else:
            r[j] = Lh[j] * beta
    return A, b, c, r, M, h


@njit(cache=True)
def safe_decision(A, c, r, M, lo, hi, u_nom, tol, exact_margin, u_cert, use_cert):
    """Returns ``(status, u, margin, u_cert)``; status is OK or TRIGGER (or a solver failure).

    With ``exact_margin`` off the margin is only solved for when no
    certificate of strict feasibility is at hand. The clipped nominal input is
    tried first, then ``u_cert`` (when ``use_cert``), a point that was strictly
    feasible at an earlier state. The margin reported is then the certified
    lower bound ``min_j phi_j`` at that point. The returned ``u_cert`` is the
    point to try next time: the surviving certificate or the fresh margin
    maximizer.
    """
    m = lo.shape[0]
    un = np.empty(m)
    for i in range(m):
        un[i] = min(max(u_nom[i], lo[i]), hi[i])
    if not exact_margin:
        tmp = np.empty(A.shape[0])
        v = phi_values(A, c, r, M, un, tmp)
        if v > 0.0:
            return OK, un, v, u_cert
        if use_cert:
            vw = phi_values(A, c, r, M, u_cert, tmp)
            if vw > 0.0:
                st, u = filter_from(A, c, r, M, lo, hi, u_nom, tol, u_cert, vw)
                return st, u, vw, u_cert
    status, u, margin, um = filter_kernel(A, c, r, M, lo, hi, u_nom, tol)
    if status == 1:
        return TRIGGER, un, margin, um
    return status, u, margin, um


@njit(cache=True)
def margin_only(A, c, r, M, lo, hi):
    return margin_kernel(A, c, r, M, lo, hi)


def _model_arrays(model: DynamicsModel):
    gp = model.gp
    var, inv_ls = gp.packed()
    return (np.array(model.learned, dtype=np.int64), gp.data.X, gp.data.U, var, inv_ls,
            gp.chol_inv, gp.weights)


def assemble_cone_problem(model: DynamicsModel, beta: float, plant, x, u_nom, alpha_slope,
                          epsilon, h_lipschitz, pointwise=False) -> ConeProblem:
    """Cone problem for all barriers of ``plant`` at state ``x``."""
    A, b, c, r, M, h = decision_terms(np.asarray(x, dtype=float), plant.params, plant.prior_fn,
                                      plant.cbf_fn, *_model_arrays(model), float(alpha_slope),
                                      float(epsilon), np.asarray(h_lipschitz, dtype=float),
                                      float(beta), bool(pointwise))
    return ConeProblem(A, c, r, M, plant.box, u_nom)


def exploration_input(A, b, r, M, box: InputBox, sel: int, policy: str, rng_seed):
    if policy == "random":
        rng = np.random.default_rng(rng_seed)
        return rng.uniform(box.lower, box.upper)
    return ucb_vertex(A[sel].copy(), float(r[sel]), M, box.lower, box.upper)


def initial_state(model: DynamicsModel, cfg: ControllerConfig) -> ControllerState:
    return ControllerState(model=model, beta=cfg.beta(model.gp.N), N=model.gp.N)


def step_controller(state: ControllerState, t: float, x, plant, cfg: ControllerConfig,
                    eps_time: float = 1e-9):
    """One controller evaluation at time ``t``; returns ``(decision, new_state)``.

    ``eps_time`` absorbs round-off when comparing ``t`` with ``t_N + dt_sample``;
    pass half an integration step to count hold length in steps.
    """
    x = np.asarray(x, dtype=float)
    if state.explore:
        if t < state.t_N + cfg.dt_sample - eps_time:
            h = plant.barriers(x)[0]
            return ControlDecision(state.held_input, EXPLORE_HOLD, np.nan, h,
                                   np.full(h.shape, np.nan), np.full(h.shape, np.nan)), state
        xm, um, ym = state.pending
        model = state.model.append(xm, um, ym)
        state = replace(state, model=model, beta=cfg.beta(model.gp.N), explore=False,
                        held_input=None, pending=None)
    u_nom = plant.nominal(x)
    arrs = _model_arrays(state.model)
    A, b, c, r, M, h = decision_terms(x, plant.params, plant.prior_fn, plant.cbf_fn, *arrs,
                                      cfg.alpha_slope, cfg.epsilon, cfg.h_lipschitz, state.beta,
                                      cfg.radius == "pointwise")
    cert = state.certificate
    status, u, margin, cert = safe_decision(A, c, r, M, plant.box.lower, plant.box.upper, u_nom,
                                            cfg.filter_tol, cfg.exact_margin,
                                            cert if cert is not None else u_nom, cert is not None)
    if status not in (OK, TRIGGER):
        raise SolverError(f"cone solve failed at t={t!r}, x={x!r}, N={state.N}")
    q = float(np.sqrt(max(_quad_py(M, u), 0.0)))
    if status == OK:
        return ControlDecision(u, SAFE_FILTER, margin, h, A @ u + b - r * q, A @ u + b + r * q), \
            replace(state, certificate=cert)
    events = state.events + 1
    N = state.N + 1
    sel = select_exploration_cbf(events, len(h))
    u_exp = exploration_input(A, b, r, M, plant.box, sel, cfg.policy, policy_seed(cfg.seed, N))
    y = take_measurement(plant, x, u_exp, cfg.noise, measurement_seed(cfg.seed, N))
    q = float(np.sqrt(max(_quad_py(M, u_exp), 0.0)))
    new = replace(state, explore=True, N=N, t_N=t, held_input=u_exp, pending=(x, u_exp, y),
                  events=events, certificate=None)
    return ControlDecision(u_exp, EXPLORE_HOLD, margin, h, A @ u_exp + b - r * q,
                           A @ u_exp + b + r * q), new


def _quad_py(M, u):
    ut = np.concatenate([[1.0], u])
    return float(ut @ M @ ut)
