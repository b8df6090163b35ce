"""Closed-loop simulation, failure sweeps and output files."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit

from .cone import OK
from .confidence import BetaSchedule, ConfidenceParams, beta_n, beta_noise_scales, \
    candidate_grid, info_gain_table, rkhs_norm_estimate
from .config import SimConfig
from .controller import EXPLORE_HOLD, MODE_NAMES, SAFE_FILTER, TRIGGER, ControllerConfig, \
    decision_terms, exploration_input, measurement_seed, policy_seed, safe_decision, \
    select_exploration_cbf, take_measurement
from .gp import CompositeKernel, Dataset, DynamicsModel, FitConfig, GpPosterior, SEKernel, \
    fit_hyperparameters, load_hyperparameters
from .plants import CruiseParams, Plant, QuadrotorParams, make_cruise, make_quadrotor, \
    rk4_step

DEFAULT_PRIOR = {"cruise": "zero", "quadrotor": "kinematics"}
RUN_OK, RUN_SOLVER_ERROR, RUN_INTEGRATION_ERROR = 0, 2, 3


def build_plant(cfg: SimConfig) -> Plant:
    prior = cfg.prior or DEFAULT_PRIOR[cfg.plant]
    params = dict(cfg.plant_params)
    for key in ("v_range", "z_range", "thrust_range", "p_range", "pz_range", "v_range"):
        if key in params:
            params[key] = tuple(params[key])
    if cfg.plant == "cruise":
        return make_cruise(CruiseParams(**params), prior=prior)
    return make_quadrotor(QuadrotorParams(**params), prior=prior)


def default_x0(plant: Plant):
    if plant.name == "cruise":
        return np.array([22.0, 80.0])
    x = np.zeros(10)
    x[2] = 1.0
    x[6] = 1.0
    return x


def default_region(plant: Plant):
    if plant.name == "cruise":
        return np.array([18.0, 60.0]), np.array([26.0, 120.0])
    lo = np.zeros(10)
    hi = np.zeros(10)
    lo[:3], hi[:3] = (-0.5, -0.5, 0.5), (0.5, 0.5, 1.5)
    lo[6] = hi[6] = 1.0
    return lo, hi


# ----------------------------------------------------------------------------
# scenario: everything shared by the runs of one config
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scenario:
    cfg: SimConfig
    plant: Plant
    kernels: tuple
    noise: np.ndarray            # measurement noise per state dimension
    gp_noise: np.ndarray         # per learned output
    rkhs_bounds: np.ndarray
    beta: BetaSchedule
    h_lipschitz: np.ndarray
    grid: tuple = field(repr=False)

    def confidence_params(self) -> ConfidenceParams:
        scales = beta_noise_scales(self.noise[list(self.plant.learned)], self.gp_noise,
                                   self.cfg.beta_form)
        return ConfidenceParams(self.rkhs_bounds, scales, self.cfg.delta)

    def empty_model(self) -> DynamicsModel:
        gp = GpPosterior.from_data(self.kernels, self.gp_noise)
        return DynamicsModel(gp, self.plant.learned, self.plant.n, self.plant.prior)

    def controller_config(self, cfg: Optional[SimConfig] = None) -> ControllerConfig:
        cfg = cfg or self.cfg
        return ControllerConfig(dt_sample=cfg.dt_sample, epsilon=cfg.epsilon,
                                alpha_slope=cfg.alpha_slope, h_lipschitz=self.h_lipschitz,
                                beta=self.beta, noise=self.noise, policy=cfg.policy,
                                exact_margin=cfg.exact_margin, filter_tol=cfg.filter_tol,
                                seed=cfg.seed, radius=cfg.radius)


def model_region(plant: Plant, cfg: SimConfig):
    lo = plant.x_lower if cfg.model_region_lower is None else np.asarray(cfg.model_region_lower,
                                                                         dtype=float)
    hi = plant.x_upper if cfg.model_region_upper is None else np.asarray(cfg.model_region_upper,
                                                                         dtype=float)
    return lo, hi


def _state_input_grid(plant: Plant, cfg: SimConfig):
    """Sobol grid over the model region times the input box."""
    xlo, xhi = model_region(plant, cfg)
    lo = np.concatenate([xlo, plant.box.lower])
    hi = np.concatenate([xhi, plant.box.upper])
    Z = candidate_grid(lo, hi, cfg.grid_size, cfg.grid_seed)
    X, U = Z[:, :plant.n].copy(), Z[:, plant.n:].copy()
    if plant.name == "quadrotor":
        X[:, 6:10] /= np.linalg.norm(X[:, 6:10], axis=1, keepdims=True)
    return X, U


def fit_data(plant: Plant, cfg: SimConfig, noise):
    """``cfg.fit_points`` noisy residual measurements at uniform random state-input pairs."""
    rng = np.random.default_rng(cfg.fit_seed)
    X = plant.sample_states(cfg.fit_points, rng, *model_region(plant, cfg))
    U = plant.sample_inputs(cfg.fit_points, rng)
    idx = list(plant.learned)
    Y = []
    for x, u in zip(X, U):
        xdot = plant.xdot(x, u) + noise * rng.standard_normal(plant.n)
        f0, g0 = plant.prior(x)
        Y.append((xdot - f0 - g0 @ u)[idx])
    return Dataset(X, U, np.array(Y))


def initial_kernels(plant: Plant, data: Dataset, widths):
    kernels = []
    for i in range(data.Y.shape[1]):
        y2 = max(float(np.mean(data.Y[:, i] ** 2)), 1e-8)
        u2 = np.maximum(np.mean(data.U ** 2, 0), 1e-12)
        comps = [SEKernel(y2, 0.5 * widths)] + [SEKernel(y2 / u2[j], 0.5 * widths)
                                                 for j in range(data.U.shape[1])]
        kernels.append(CompositeKernel(comps[0], tuple(comps[1:])))
    return kernels


def active_inputs(plant: Plant, cfg: SimConfig):
    if cfg.active_inputs is None:
        return tuple(range(plant.m))
    act = tuple(sorted(set(int(j) for j in cfg.active_inputs)))
    if any(j < 0 or j >= plant.m for j in act):
        raise ValueError(f"active_inputs must index the {plant.m} plant inputs")
    return act


def fit_kernels(plant: Plant, cfg: SimConfig, noise):
    """Evidence-maximizing kernels; inputs outside ``cfg.active_inputs`` get no component."""
    data = fit_data(plant, cfg, noise)
    act = active_inputs(plant, cfg)
    sub = Dataset(data.X, data.U[:, list(act)], data.Y)
    gp_noise = noise[list(plant.learned)]
    lo, hi = model_region(plant, cfg)
    widths = np.maximum(hi - lo, 1e-3 * (plant.x_upper - plant.x_lower))
    kernels = fit_hyperparameters(sub, initial_kernels(plant, sub, widths), gp_noise, widths,
                                  FitConfig(mode=cfg.fit_mode, starts=cfg.fit_starts,
                                            seed=cfg.fit_seed))
    return [k.expand(act, plant.m) for k in kernels], gp_noise


def build_scenario(cfg: SimConfig) -> Scenario:
    plant = build_plant(cfg)
    noise = np.broadcast_to(np.asarray(cfg.noise, dtype=float), (plant.n,)).copy()
    if cfg.hypers_file:
        kernels, gp_noise = load_hyperparameters(cfg.hypers_file)
    else:
        kernels, gp_noise = fit_kernels(plant, cfg, noise)
    X, U = _state_input_grid(plant, cfg)
    p = len(kernels)
    if isinstance(cfg.rkhs_bound, str):
        if cfg.rkhs_bound != "auto":
            raise ValueError("rkhs_bound must be 'auto' or numeric")
        idx = list(plant.learned)
        Y = np.array([plant.xdot(x, u) - plant.prior(x)[0] - plant.prior(x)[1] @ u
                      for x, u in zip(X, U)])[:, idx]
        B = np.array([cfg.rkhs_factor * rkhs_norm_estimate(k, X, U, Y[:, i], gp_noise[i])
                      for i, k in enumerate(kernels)])
    else:
        B = np.broadcast_to(np.asarray(cfg.rkhs_bound, dtype=float), (p,)).copy()
    if cfg.beta_override is not None:
        beta = BetaSchedule.constant(cfg.beta_override)
    else:
        scales = beta_noise_scales(noise[list(plant.learned)], gp_noise, cfg.beta_form)
        params = ConfidenceParams(B, scales, cfg.delta)
        beta = BetaSchedule.build(params, kernels, gp_noise, X, U, cfg.beta_table)
    return Scenario(cfg, plant, tuple(kernels), noise, np.asarray(gp_noise, dtype=float), B,
                    beta, plant.h_lipschitz(), (X, U))


# ----------------------------------------------------------------------------
# logs
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class TrajectoryLog:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    mode: np.ndarray
    h: np.ndarray
    margin: np.ndarray
    N: np.ndarray
    beta: np.ndarray

    @classmethod
    def allocate(cls, steps, n, m, J):
        K = steps + 1
        return cls(np.arange(K) * 0.0, np.full((K, n), np.nan), np.full((K, m), np.nan),
                   np.full(K, -1, dtype=np.int64), np.full((K, J), np.nan), np.full(K, np.nan),
                   np.zeros(K, dtype=np.int64), np.full(K, np.nan))

    def truncate(self, K) -> "TrajectoryLog":
        return TrajectoryLog(*(a[:K] for a in (self.t, self.x, self.u, self.mode, self.h,
                                               self.margin, self.N, self.beta)))

    def __len__(self):
        return len(self.t)

    def header(self):
        n, m, J = self.x.shape[1], self.u.shape[1], self.h.shape[1]
        return (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                + ["mode"] + [f"h_{j + 1}" for j in range(J)] + ["margin", "N", "beta"])

    def to_csv(self, path, every=1):
        rows = range(0, len(self), every)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for k in rows:
                w.writerow([_fmt(self.t[k])] + [_fmt(v) for v in self.x[k]]
                           + [_fmt(v) for v in self.u[k]] + [MODE_NAMES.get(int(self.mode[k]), "")]
                           + [_fmt(v) for v in self.h[k]]
                           + [_fmt(self.margin[k]), str(int(self.N[k])), _fmt(self.beta[k])])


def _fmt(v) -> str:
    """Shortest text that parses back to the same float (``3.0`` prints as ``3``)."""
    text = repr(float(v))
    return text[:-2] if text.endswith(".0") else text


@dataclass
class RunSummary:
    safe: bool
    failure_time: Optional[float]
    exploration_events: int
    feasibility_recovered_at: Optional[float]
    last_event_time: Optional[float]
    min_h: float
    final_N: int
    wall_time: float
    error: Optional[str] = None
    x0: Optional[list] = None
    seed: int = 0

    def to_json(self, path=None, deterministic=False):
        d = asdict(self)
        if deterministic:
            d.pop("wall_time")
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def summarize(log: TrajectoryLog, event_times, error, wall, x0, seed) -> RunSummary:
    hmin = np.min(log.h, axis=1) if log.h.shape[1] else np.zeros(len(log))
    bad = np.flatnonzero(~(hmin >= 0))
    failure_time = float(log.t[bad[0]]) if len(bad) else None
    if error is not None and failure_time is None:
        failure_time = float(log.t[-1]) if len(log) else 0.0
    last = float(event_times[-1]) if event_times else None
    recovered = None
    if last is not None:
        later = np.flatnonzero((log.t > last) & (log.mode == SAFE_FILTER))
        recovered = float(log.t[later[0]]) if len(later) else None
    return RunSummary(safe=failure_time is None and error is None, failure_time=failure_time,
                      exploration_events=len(event_times), feasibility_recovered_at=recovered,
                      last_event_time=last, min_h=float(np.nanmin(hmin)) if len(log) else np.nan,
                      final_N=int(log.N[-1]) if len(log) else 0, wall_time=wall, error=error,
                      x0=[float(v) for v in x0], seed=int(seed))


# ----------------------------------------------------------------------------
# compiled segments
# ----------------------------------------------------------------------------

@njit(cache=True)
def _safe_segment(k0, k_end, x, dt, P, fg, post, prior, cbf, nominal, saturate, learned, X, U,
                  var, inv_ls, Linv, w, alpha, eps, Lh, beta, pointwise, lo, hi, tol, exact, N,
                  L_t, L_x, L_u, L_mode, L_h, L_margin, L_N, L_beta):
    """Filter mode from step ``k0``; stops at a trigger, a failure, or after ``k_end``.

    Returns ``(k, x, code)`` where ``code`` is OK (horizon reached), TRIGGER
    (``x`` is the unlogged state at step ``k``), or a failure code.
    """
    k = k0
    u_cert = np.zeros(lo.shape[0])
    use_cert = False
    while True:
        u_nom = nominal(x, P)
        if saturate:
            for i in range(lo.shape[0]):
                u_nom[i] = min(max(u_nom[i], lo[i]), hi[i])
        A, b, c, r, M, h = decision_terms(x, P, prior, cbf, learned, X, U, var, inv_ls, Linv, w,
                                          alpha, eps, Lh, beta, pointwise)
        status, u, margin, u_cert = safe_decision(A, c, r, M, lo, hi, u_nom, tol, exact, u_cert,
                                                  use_cert)
        if status == 3:
            return k, x, 3
        if status != 0:
            return k, x, 2
        L_t[k] = k * dt
        L_x[k] = x
        L_u[k] = u
        L_mode[k] = 0
        L_h[k] = h
        L_margin[k] = margin
        L_N[k] = N
        L_beta[k] = beta
        use_cert = True
        if k >= k_end:
            return k, x, 0
        x = rk4_step(fg, post, x, u, dt, P)
        k += 1
        for i in range(x.shape[0]):
            if not np.isfinite(x[i]):
                return k, x, 4


@njit(cache=True)
def _hold_segment(k0, k_stop, x, u, dt, P, fg, post, cbf, N, beta,
                  L_t, L_x, L_u, L_mode, L_h, L_margin, L_N, L_beta):
    """Integrate with ``u`` held from step ``k0`` (already logged) to ``k_stop``.

    Steps ``k0 + 1 .. k_stop - 1`` are logged as holds; returns the state at
    ``k_stop`` or a failure flag.
    """
    for k in range(k0 + 1, k_stop + 1):
        x = rk4_step(fg, post, x, u, dt, P)
        for i in range(x.shape[0]):
            if not np.isfinite(x[i]):
                return k, x, 4
        if k == k_stop:
            break
        L_t[k] = k * dt
        L_x[k] = x
        L_u[k] = u
        L_mode[k] = 1
        L_h[k] = cbf(x, P)[0]
        L_margin[k] = np.nan
        L_N[k] = N
        L_beta[k] = beta
    return k_stop, x, 0


def _log_record(log: TrajectoryLog, k, dt, x, u, mode, h, margin, N, beta):
    log.t[k] = k * dt
    log.x[k] = x
    log.u[k] = u
    log.mode[k] = mode
    log.h[k] = h
    log.margin[k] = margin
    log.N[k] = N
    log.beta[k] = beta


def run_simulation(scn: Scenario, cfg: Optional[SimConfig] = None, x0=None):
    """Integrate the closed loop from ``t = 0`` to the horizon.

    Deterministic given the config; the returned log has one record per
    integration step (plus the initial one) unless the run ended in an error.
    """
    cfg = cfg or scn.cfg
    plant = scn.plant
    wall0 = time.perf_counter()
    x = np.array(x0 if x0 is not None else (cfg.x0 if cfg.x0 is not None
                                            else default_x0(plant)), dtype=float)
    x_init = x.copy()
    validate_initial_state(plant, x, cfg)
    dt = cfg.integration_step
    steps = cfg.n_steps
    n_hold = cfg.hold_steps
    J = len(plant.barriers(x)[0])
    log = TrajectoryLog.allocate(steps, plant.n, plant.m, J)
    model = scn.empty_model()
    ccfg = scn.controller_config(cfg)
    lo, hi = plant.box.lower, plant.box.upper
    learned = np.array(plant.learned, dtype=np.int64)
    Lh = scn.h_lipschitz
    pointwise = cfg.radius == "pointwise"
    events, event_times = 0, []
    error = None
    k = 0
    checked = 0          # log.h[:checked] is known to be nonnegative
    K_logged = steps + 1
    while True:
        gp = model.gp
        var, inv_ls = gp.packed()
        N = gp.N
        beta = ccfg.beta(N)
        k, x, code = _safe_segment(
            k, steps, x, dt, plant.params, plant.fg_fn, plant.post_fn, plant.prior_fn,
            plant.cbf_fn, plant.nominal_fn, plant.saturate_nominal, learned, gp.data.X,
            gp.data.U, var, inv_ls, gp.chol_inv, gp.weights, cfg.alpha_slope, cfg.epsilon, Lh,
            beta, pointwise, lo, hi, cfg.filter_tol, cfg.exact_margin, N,
            log.t, log.x, log.u, log.mode, log.h, log.margin, log.N, log.beta)
        if code == RUN_OK:
            break
        if code == 2:
            error = f"cone solver failure at t={k * dt:.6g}"
            K_logged = k
            break
        if code == 4:
            error = f"integration failure (non-finite state) at t={k * dt:.6g}"
            K_logged = k
            break
        # exploration event at step k
        if cfg.stop_on_failure:
            if np.any(log.h[checked:k] < 0):
                K_logged = k
                break
            checked = k
        A, b, c, r, M, h = decision_terms(x, plant.params, plant.prior_fn, plant.cbf_fn, learned,
                                          gp.data.X, gp.data.U, var, inv_ls, gp.chol_inv,
                                          gp.weights, cfg.alpha_slope, cfg.epsilon, Lh, beta,
                                          pointwise)
        u_nom = plant.nominal(x)
        _, _, margin, _ = safe_decision(A, c, r, M, lo, hi, u_nom, cfg.filter_tol,
                                        cfg.exact_margin, u_nom, False)
        events += 1
        event_times.append(k * dt)
        sel = select_exploration_cbf(events, J)
        u_exp = exploration_input(A, b, r, M, plant.box, sel, cfg.policy,
                                  policy_seed(cfg.seed, N + 1))
        y = take_measurement(plant, x, u_exp, scn.noise, measurement_seed(cfg.seed, N + 1))
        _log_record(log, k, dt, x, u_exp, EXPLORE_HOLD, h, margin, N + 1, beta)
        x_meas = x.copy()
        if k == steps:
            break
        k_stop = min(k + n_hold, steps)
        k2, x, code = _hold_segment(k, k_stop, x, u_exp, dt, plant.params, plant.fg_fn,
                                    plant.post_fn, plant.cbf_fn, N + 1, beta,
                                    log.t, log.x, log.u, log.mode, log.h, log.margin, log.N,
                                    log.beta)
        if code != RUN_OK:
            error = f"integration failure (non-finite state) at t={k2 * dt:.6g}"
            K_logged = k2
            break
        if k + n_hold > steps:
            # the horizon ends inside the hold
            _log_record(log, steps, dt, x, u_exp, EXPLORE_HOLD, plant.barriers(x)[0], np.nan,
                        N + 1, beta)
            break
        k = k_stop
        model = model.append(x_meas, u_exp, y)
    if error is None and np.any(log.mode < 0):
        K_logged = int(np.argmax(log.mode < 0))
    log = log.truncate(K_logged)
    summary = summarize(log, event_times, error, time.perf_counter() - wall0, x_init, cfg.seed)
    return log, summary


def validate_initial_state(plant: Plant, x, cfg: SimConfig):
    plant.check_domain(x)
    h = plant.barriers(x)[0]
    if np.any(cfg.alpha_slope * h < cfg.epsilon):
        raise ValueError(f"initial state {x} violates alpha(h(x0)) >= epsilon (h = {h})")


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

def sample_initial_states(plant: Plant, cfg: SimConfig, count: int, seed: int):
    """Uniform draws from the sweep region, rejecting those with alpha(h) < epsilon."""
    lo, hi = default_region(plant)
    if cfg.region_lower is not None:
        lo = np.asarray(cfg.region_lower, dtype=float)
    if cfg.region_upper is not None:
        hi = np.asarray(cfg.region_upper, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(1000 * count):
        x = rng.uniform(lo, hi)
        if np.all(cfg.alpha_slope * plant.barriers(x)[0] >= cfg.epsilon):
            out.append(x)
            if len(out) == count:
                return np.array(out)
    raise ValueError("sweep region contains too few states with alpha(h) >= epsilon")


@dataclass
class SweepRow:
    dt_sample: float
    policy: str
    trials: int
    failures: int
    errors: int
    failure_rate: float
    mean_events: float


def run_trials(scn: Scenario, dt_sample: float, policy: str, trials: int, seed: int = 0,
               x0s=None):
    """``trials`` runs from sampled initial states; trial ``i`` uses seed ``seed + i``."""
    cfg = scn.cfg.with_(dt_sample=dt_sample, policy=policy, dt_int=None,
                        stop_on_failure=scn.cfg.sweep_stop_on_failure)
    if x0s is None:
        x0s = sample_initial_states(scn.plant, cfg, trials, seed)
    out = []
    for i in range(trials):
        try:
            _, s = run_simulation(scn, cfg.with_(seed=seed + i), x0=x0s[i])
        except Exception as exc:       # a crashed trial is a data point, not a sweep abort
            s = RunSummary(False, 0.0, 0, None, None, np.nan, 0, 0.0,
                           error=f"{type(exc).__name__}: {exc}",
                           x0=[float(v) for v in x0s[i]], seed=seed + i)
        out.append(s)
    return out


def run_failure_sweep(scn: Scenario, dts=None, policies=None, trials=None, seed=None):
    cfg = scn.cfg
    dts = cfg.sweep_dts if dts is None else dts
    policies = cfg.sweep_policies if policies is None else policies
    trials = cfg.sweep_trials if trials is None else trials
    seed = cfg.sweep_seed if seed is None else seed
    x0s = sample_initial_states(scn.plant, cfg, trials, seed)
    rows, runs = [], {}
    for dt_s in dts:
        for pol in policies:
            res = run_trials(scn, dt_s, pol, trials, seed, x0s)
            runs[(dt_s, pol)] = res
            fails = sum(not r.safe for r in res)
            rows.append(SweepRow(dt_s, pol, trials, fails, sum(r.error is not None for r in res),
                                 fails / trials, float(np.mean([r.exploration_events
                                                                for r in res]))))
    return rows, runs


def sweep_table_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dt_sample", "policy", "trials", "failures", "errors", "failure_rate",
                "mean_events"])
    for r in rows:
        w.writerow([_fmt(r.dt_sample), r.policy, r.trials, r.failures, r.errors,
                    _fmt(r.failure_rate), _fmt(r.mean_events)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_outputs(log: TrajectoryLog, summary: RunSummary, out_dir, stem="run", every=1):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        log.to_csv(out / f"{stem}.csv", every=every)
        summary.to_json(out / f"{stem}_summary.json")
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return out / f"{stem}.csv", out / f"{stem}_summary.json"


def beta_report(scn: Scenario):
    return {"rkhs_bounds": scn.rkhs_bounds.tolist(), "beta_0": scn.beta(0),
            "beta_max": float(np.max(scn.beta.values)),
            "h_lipschitz": scn.h_lipschitz.tolist()}


__all__ = ["Scenario", "build_scenario", "run_simulation", "run_failure_sweep", "run_trials",
           "TrajectoryLog", "RunSummary", "emit_outputs", "sweep_table_csv", "beta_n",
           "info_gain_table", "OK", "TRIGGER"]
