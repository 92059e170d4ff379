"""Reduced solver for the estimate-feedback optimal control problem.

The covariance recursion is always evaluated forward from the decision
variables (single shooting), so the only free variables are the nominal
controls and the feedback gains; the constraint-variance slacks are
eliminated analytically (the expected hinge penalty is strictly increasing
in the variance, so at any optimum each slack sits at max(floor, variance)).

The optimizer is a projected quasi-Newton method: central finite-difference
gradient, damped BFGS approximation with restart, Armijo backtracking along
the projection arc, and hard box bounds on the nominal controls enforced by
clipping at every trial point.

Gradient cost note: a perturbation of the nominal controls changes the
whole prediction, but a perturbation of the feedback gains leaves the
rollout, the linearization and the filter gains untouched, so the gain part
of the gradient reuses the cached prediction and only re-runs the
covariance propagation.  Both parts are evaluated as single batched calls.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import Array, ControlProblem
from .objective import ObjectiveBreakdown, ObjectiveEvaluator
from .uncertainty import Policy

MODES = ("nominal", "open_loop", "output_feedback")

_CURVATURE_SKIP_LIMIT = 3
_BOUND_EPS = 1e-10


def eliminate_beta(direction_variances: Array, eps_sigma: float) -> Array:
    """Optimal constraint-variance slacks: max(eps_sigma^2, variance).

    Valid because the expected hinge penalty is strictly increasing in the
    standard deviation, so no slack is ever slack at the optimum.
    """
    H = np.clip(np.asarray(direction_variances, dtype=float), 0.0, None)
    return np.maximum(H, eps_sigma**2)


@dataclass(frozen=True)
class SolveOptions:
    """Solver configuration.

    mode selects the controller family: 'nominal' optimizes the controls on
    the noise-free model (covariance terms dropped, constraints keep the
    minimum smoothing), 'open_loop' optimizes the controls under the full
    predicted uncertainty with zero feedback, 'output_feedback' optimizes
    controls and feedback gains jointly.
    """

    mode: str = "output_feedback"
    max_iterations: int = 500
    tolerance: float = 1e-6
    fd_step: float = 1e-6
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40
    eps_sigma: float = 1e-3
    eps_K: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tolerance <= 0 or self.fd_step <= 0:
            raise ValueError("tolerance and fd_step must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must be in (0, 1)")


@dataclass(frozen=True)
class SolveResult:
    policy: Policy
    objective: ObjectiveBreakdown
    beta: list
    iterations: int
    stationarity: float
    status: str  # converged | max_iter | line_search_failure

    @property
    def converged(self) -> bool:
        return self.status == "converged"


class _Variables:
    """Flat packing of (u_nom, feedback) with box bounds on the controls."""

    def __init__(self, problem: ControlProblem, mode: str):
        model = problem.model
        self.N = model.horizon
        self.n_u = model.n_u
        self.n_x = model.n_x
        self.with_gains = mode == "output_feedback"
        self.n_u_vars = self.N * self.n_u
        self.n_k_vars = (self.N - 1) * self.n_u * self.n_x if self.with_gains else 0
        self.size = self.n_u_vars + self.n_k_vars
        lo = np.tile(problem.constraints.u_lower, self.N)
        hi = np.tile(problem.constraints.u_upper, self.N)
        self.lower = np.concatenate([lo, np.full(self.n_k_vars, -np.inf)])
        self.upper = np.concatenate([hi, np.full(self.n_k_vars, np.inf)])

    def pack(self, policy: Policy) -> Array:
        parts = [np.asarray(policy.u_nom, dtype=float).ravel()]
        if self.with_gains:
            parts.append(np.asarray(policy.feedback, dtype=float).ravel())
        return np.concatenate(parts)

    def unpack(self, theta: Array) -> Policy:
        u = theta[: self.n_u_vars].reshape(self.N, self.n_u)
        if self.with_gains:
            fb = theta[self.n_u_vars :].reshape(self.N - 1, self.n_u, self.n_x)
        else:
            fb = np.zeros((max(self.N - 1, 0), self.n_u, self.n_x))
        return Policy(u_nom=u, feedback=fb)

    def unpack_batch(self, thetas: Array) -> tuple[Array, Array]:
        B = thetas.shape[0]
        u = thetas[:, : self.n_u_vars].reshape(B, self.N, self.n_u)
        if self.with_gains:
            fb = thetas[:, self.n_u_vars :].reshape(B, self.N - 1, self.n_u, self.n_x)
        else:
            fb = np.zeros((B, max(self.N - 1, 0), self.n_u, self.n_x))
        return u, fb

    def project(self, theta: Array) -> Array:
        return np.clip(theta, self.lower, self.upper)


def _fd_gradient(ev: ObjectiveEvaluator, var: _Variables, theta: Array, step: float,
                 f0: float, pred_base=None) -> tuple[Array, Array]:
    """Central-difference gradient plus diagonal curvature, batched.

    Control perturbations re-run the full prediction; gain perturbations
    share the unperturbed prediction (exact, not an approximation: the
    prediction does not depend on the gains).  ``pred_base`` lets the caller
    pass a prediction already computed at ``theta``.

    The same evaluations give second differences around ``f0`` for free;
    the returned per-coordinate curvatures seed the quasi-Newton metric,
    which matters enormously on instances mixing near-flat control
    directions with stiff penalty walls.
    """
    g = np.empty(var.size)
    curv = np.empty(var.size)
    n_u_vars = var.n_u_vars
    h_u = step * (1.0 + np.abs(theta[:n_u_vars]))
    pol = var.unpack(theta)

    u_flat = theta[:n_u_vars]
    trials = np.repeat(u_flat[None], 2 * n_u_vars, axis=0)
    idx = np.arange(n_u_vars)
    trials[2 * idx, idx] += h_u
    trials[2 * idx + 1, idx] -= h_u
    u_batch = trials.reshape(2 * n_u_vars, var.N, var.n_u)
    totals = ev.totals(u_batch, pol.feedback)
    g[:n_u_vars] = (totals[0::2] - totals[1::2]) / (2.0 * h_u)
    curv[:n_u_vars] = (totals[0::2] - 2.0 * f0 + totals[1::2]) / h_u**2

    if var.n_k_vars:
        k_flat = theta[n_u_vars:]
        h_k = step * (1.0 + np.abs(k_flat))
        trials = np.repeat(k_flat[None], 2 * var.n_k_vars, axis=0)
        idx = np.arange(var.n_k_vars)
        trials[2 * idx, idx] += h_k
        trials[2 * idx + 1, idx] -= h_k
        fb_batch = trials.reshape(2 * var.n_k_vars, var.N - 1, var.n_u, var.n_x)
        pred = pred_base if pred_base is not None else ev.prediction(pol.u_nom)
        parts = ev.parts_from_prediction(pred, fb_batch)
        totals = parts[0] + parts[1] + parts[2] + parts[3]
        g[n_u_vars:] = (totals[0::2] - totals[1::2]) / (2.0 * h_k)
        curv[n_u_vars:] = (totals[0::2] - 2.0 * f0 + totals[1::2]) / h_k**2
    return g, curv


def _diag_metric(curv: Array, gnorm: float) -> Array:
    """Damped-Newton diagonal seed for the quasi-Newton metric.

    Stiff coordinates step by roughly the inverse of their measured curvature;
    flat coordinates are floored so no step exceeds the steepest-descent scale
    1/gnorm.  Second-difference noise makes tiny curvature estimates
    unreliable, hence the additional floor relative to the stiffest coordinate.
    """
    c = np.abs(np.asarray(curv, dtype=float))
    c_max = float(np.max(c, initial=0.0))
    if not np.isfinite(c_max) or c_max <= 0.0:
        return np.eye(c.size) / max(gnorm, 1e-12)
    floor = max(1e-4 * c_max, gnorm, 1e-12)
    return np.diag(1.0 / np.maximum(c, floor))


_LS_CHUNK = 12


def _armijo_search(ev, var: _Variables, theta: Array, f: float, g: Array,
                   direction: Array, opts: "SolveOptions", fb_fixed: Array):
    """Backtracking Armijo search along the projection arc.

    Candidate step sizes form the usual geometric sequence, but they are
    evaluated in batched chunks (one prediction pass per chunk) instead of
    one objective call per trial — the first (largest) passing step is
    returned, so the result is identical to sequential backtracking.
    """
    alphas = opts.backtrack_factor ** np.arange(opts.max_backtracks)
    for start in range(0, alphas.size, _LS_CHUNK):
        chunk = alphas[start : start + _LS_CHUNK]
        trials = var.project(theta[None, :] + chunk[:, None] * direction[None, :])
        decreases = (trials - theta) @ g
        if not np.any(decreases < 0.0):
            continue
        u_b, fb_b = var.unpack_batch(trials)
        totals, pred = ev.totals_and_prediction(u_b, fb_b if var.with_gains else fb_fixed)
        ok = (decreases < 0.0) & (totals <= f + opts.armijo_c * decreases)
        if np.any(ok):
            idx = int(np.argmax(ok))  # first True = largest passing step
            return trials[idx], float(totals[idx]), pred.take(idx), True
    return theta, f, None, False


def _masked_gradient(g: Array, theta: Array, var: _Variables) -> Array:
    """Zero the gradient on active bounds pointing outward."""
    g = g.copy()
    at_lower = (theta <= var.lower + _BOUND_EPS) & (g > 0)
    at_upper = (theta >= var.upper - _BOUND_EPS) & (g < 0)
    g[at_lower | at_upper] = 0.0
    return g


def _projected_gradient_norm(theta: Array, g: Array, var: _Variables) -> float:
    return float(np.max(np.abs(theta - var.project(theta - g)), initial=0.0))


def _bfgs_update(H: Array, s: Array, y: Array) -> tuple[Array, bool]:
    """Damped inverse-BFGS update; returns (H_new, updated?)."""
    sy = float(s @ y)
    norm = float(np.linalg.norm(s) * np.linalg.norm(y))
    if norm == 0.0:
        return H, False
    Bs = np.linalg.solve(H, s)  # current Hessian estimate applied to s
    sBs = float(s @ Bs)
    if sBs <= 0:
        return H, False
    if sy < 0.2 * sBs:
        if sy <= 1e-12 * norm:
            return H, False
        tau = 0.8 * sBs / (sBs - sy)
        y = tau * y + (1.0 - tau) * Bs
        sy = float(s @ y)
    rho = 1.0 / sy
    Hy = H @ y
    yHy = float(y @ Hy)
    # H <- (I - rho s y')H(I - rho y s') + rho s s'
    H_new = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + rho**2 * yHy * np.outer(s, s) + rho * np.outer(s, s)
    return 0.5 * (H_new + H_new.T), True


def solve(
    problem: ControlProblem,
    x0: Array,
    P_hat_0: Array,
    options: SolveOptions | None = None,
    warm_start: Policy | None = None,
) -> SolveResult:
    """Minimize the expected objective over the selected variable set.

    Returns a local solution: nominal controls inside their box (enforced by
    projection at every trial point) and, in output_feedback mode, the
    feedback gains.  status is 'converged' when the projected-gradient
    infinity norm reaches the tolerance, 'max_iter' when the iteration
    budget runs out, and 'line_search_failure' when no acceptable step
    exists along either the quasi-Newton or the steepest-descent direction
    (the best iterate found so far is returned in all cases).
    """
    opts = options or SolveOptions()
    var = _Variables(problem, opts.mode)
    ev = ObjectiveEvaluator(
        problem,
        x0,
        P_hat_0,
        eps_sigma=opts.eps_sigma,
        eps_K=opts.eps_K,
        include_uncertainty=opts.mode != "nominal",
    )

    if warm_start is not None:
        theta0 = var.pack(warm_start)
    else:
        theta0 = np.zeros(var.size)
    theta = var.project(theta0)

    pol0 = var.unpack(theta)
    totals0, pred_at = ev.totals_and_prediction(pol0.u_nom, pol0.feedback)
    f = float(totals0)
    best_theta, best_f = theta.copy(), f
    curvature_skips = 0
    status = "max_iter"
    iterations = 0
    g, curv = _fd_gradient(ev, var, theta, opts.fd_step, f, pred_base=pred_at)
    gnorm = max(float(np.linalg.norm(g)), 1e-12)
    H = _diag_metric(curv, gnorm)
    # With no usable curvature the seed is just scaled steepest descent; in that
    # case calibrate the metric from the first accepted step instead.
    first_step_pending = float(np.max(np.abs(curv), initial=0.0)) <= 0.0
    stationarity = _projected_gradient_norm(theta, g, var)

    for it in range(opts.max_iterations):
        if stationarity <= opts.tolerance:
            status = "converged"
            break
        iterations = it + 1
        g_masked = _masked_gradient(g, theta, var)
        gnorm = max(float(np.linalg.norm(g_masked)), 1e-12)
        d = -H @ g_masked
        d[g_masked == 0.0] = 0.0
        if float(d @ g_masked) >= 0.0:  # metric went bad: reseed from curvature
            H = _diag_metric(curv, gnorm)
            d = -H @ g_masked
            d[g_masked == 0.0] = 0.0

        fb0 = var.unpack(theta).feedback
        accepted = False
        for direction in (d, -g_masked / gnorm):
            trial, f_trial, pred_trial, accepted = _armijo_search(
                ev, var, theta, f, g, direction, opts, fb0
            )
            if accepted:
                break
            H = _diag_metric(curv, gnorm)  # quasi-Newton direction failed
        if not accepted:
            status = "line_search_failure"
            break

        g_new, curv = _fd_gradient(ev, var, trial, opts.fd_step, f_trial, pred_base=pred_trial)
        s = trial - theta
        y = g_new - g
        if first_step_pending:
            sy, yy = float(s @ y), float(y @ y)
            if sy > 0 and yy > 0:
                H = np.eye(var.size) * (sy / yy)
            first_step_pending = False
        H, updated = _bfgs_update(H, s, y)
        if updated:
            curvature_skips = 0
        else:
            curvature_skips += 1
            if curvature_skips >= _CURVATURE_SKIP_LIMIT:
                H = _diag_metric(curv, max(float(np.linalg.norm(g_new)), 1e-12))
                curvature_skips = 0

        theta, f, g = trial, f_trial, g_new
        if f < best_f:
            best_f, best_theta = f, theta.copy()
        stationarity = _projected_gradient_norm(theta, g, var)

    if f <= best_f:
        best_f, best_theta = f, theta
    policy = var.unpack(best_theta)
    breakdown = ev.breakdown(policy)
    beta = ev.constraint_variances(policy)
    return SolveResult(
        policy=policy,
        objective=breakdown,
        beta=beta,
        iterations=iterations,
        stationarity=stationarity,
        status=status,
    )
