"""System models, quadratic costs, and constraint sets.

All numerical routines in this package are batch-aware: state, control and
noise arrays may carry arbitrary leading batch dimensions in front of the
core vector/matrix axes, and the stage maps are expected to broadcast over
them.  This keeps finite-difference gradients and Monte-Carlo evaluations
vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# Stage maps: f(k, x, u, w) -> next state, g(k, x, v) -> output.
DynamicsFn = Callable[[int, Array, Array, Array], Array]
OutputFn = Callable[[int, Array, Array], Array]
# Analytic Jacobian providers, evaluated at the given point.
DynamicsJacFn = Callable[[int, Array, Array, Array], tuple[Array, Array, Array]]
OutputJacFn = Callable[[int, Array, Array], tuple[Array, Array]]


class ModelError(ValueError):
    """Invalid model input or a map producing non-finite values."""


def psd_sqrt(M: Array) -> Array:
    """A square root L with L @ L.T = M for symmetric PSD M (zero allowed).

    Cholesky when positive definite, eigendecomposition otherwise.

    Raises:
        ModelError: if M has a significantly negative eigenvalue.
    """
    M = np.asarray(M, dtype=float)
    if not np.any(M):
        return np.zeros_like(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(M)
        if np.min(vals) < -1e-10:
            raise ModelError("covariance is not positive semidefinite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def fd_jacobian(fn: Callable[[Array], Array], at: Array, step: float = 1e-6) -> Array:
    """Central-difference Jacobian of a vector map at a single point.

    The step for column ``j`` is ``step * (1 + |at[j]|)``, which keeps the
    perturbation meaningful for both small and large coordinates.  Matches
    analytic Jacobians of smooth maps to O(step^2).

    Raises:
        ModelError: if the map returns non-finite values at a perturbed
            point (the offending column is named).
    """
    at = np.asarray(at, dtype=float)
    if at.ndim != 1:
        raise ModelError(f"fd_jacobian expects a 1-d point, got shape {at.shape}")
    base = np.asarray(fn(at), dtype=float)
    if not np.all(np.isfinite(base)):
        raise ModelError("fd_jacobian: map is non-finite at the evaluation point")
    n = at.size
    cols = []
    for j in range(n):
        h = step * (1.0 + abs(at[j]))
        lo = at.copy()
        hi = at.copy()
        lo[j] -= h
        hi[j] += h
        f_hi = np.asarray(fn(hi), dtype=float)
        f_lo = np.asarray(fn(lo), dtype=float)
        if not (np.all(np.isfinite(f_hi)) and np.all(np.isfinite(f_lo))):
            raise ModelError(f"fd_jacobian: non-finite evaluation perturbing column {j}")
        cols.append((f_hi - f_lo) / (2.0 * h))
    return np.stack(cols, axis=-1)


def rk4_step(
    ode: Callable[[Array, Array, Array], Array],
    x: Array,
    u: Array,
    w: Array,
    dt: float,
    substeps: int = 4,
) -> Array:
    """Classical 4-stage Runge-Kutta step with the noise held constant.

    Integrates ``xdot = ode(x, u, w)`` over ``dt`` using ``substeps`` equal
    sub-intervals.  ``u`` and ``w`` are zero-order held.  Batch dimensions
    broadcast through the ode.
    """
    if dt <= 0.0:
        raise ModelError(f"rk4_step requires dt > 0, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ModelError("rk4_step: non-finite state or control input")
    h = dt / substeps
    for _ in range(substeps):
        k1 = ode(x, u, w)
        k2 = ode(x + 0.5 * h * k1, u, w)
        k3 = ode(x + 0.5 * h * k2, u, w)
        k4 = ode(x + h * k3, u, w)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def rk4_step_with_jacobian(
    ode: Callable[[Array, Array, Array], Array],
    ode_jac: Callable[[Array, Array, Array], tuple[Array, Array, Array]],
    x: Array,
    u: Array,
    w: Array,
    dt: float,
    substeps: int = 4,
) -> tuple[Array, Array, Array, Array]:
    """RK4 step together with the exact Jacobians of the discrete map.

    ``ode_jac`` returns the continuous-time Jacobians ``(d xdot/dx,
    d xdot/du, d xdot/dw)`` at a point.  The discrete Jacobians are obtained
    by differentiating the RK4 update itself (chain rule through the four
    stages, composed over sub-steps), so they are consistent with
    :func:`rk4_step` to machine precision.

    Returns:
        ``(x_next, A, B, G)`` with ``A = dx+/dx``, ``B = dx+/du``,
        ``G = dx+/dw``; all broadcast over leading batch dimensions.
    """
    if dt <= 0.0:
        raise ModelError(f"rk4_step_with_jacobian requires dt > 0, got {dt}")
    x = np.asarray(x, dtype=float)
    h = dt / substeps
    n = x.shape[-1]
    eye = np.eye(n)
    A = np.broadcast_to(eye, x.shape + (n,)).copy()
    B = None
    G = None
    for _ in range(substeps):
        k1 = ode(x, u, w)
        x2 = x + 0.5 * h * k1
        k2 = ode(x2, u, w)
        x3 = x + 0.5 * h * k2
        k3 = ode(x3, u, w)
        x4 = x + h * k3
        k4 = ode(x4, u, w)

        A1, B1, G1 = ode_jac(x, u, w)
        A2, B2, G2 = ode_jac(x2, u, w)
        A3, B3, G3 = ode_jac(x3, u, w)
        A4, B4, G4 = ode_jac(x4, u, w)

        D1x = A1
        D2x = A2 @ (eye + 0.5 * h * D1x)
        D3x = A3 @ (eye + 0.5 * h * D2x)
        D4x = A4 @ (eye + h * D3x)
        Jx = eye + (h / 6.0) * (D1x + 2.0 * D2x + 2.0 * D3x + D4x)

        D1u = B1
        D2u = B2 + A2 @ (0.5 * h * D1u)
        D3u = B3 + A3 @ (0.5 * h * D2u)
        D4u = B4 + A4 @ (h * D3u)
        Ju = (h / 6.0) * (D1u + 2.0 * D2u + 2.0 * D3u + D4u)

        D1w = G1
        D2w = G2 + A2 @ (0.5 * h * D1w)
        D3w = G3 + A3 @ (0.5 * h * D2w)
        D4w = G4 + A4 @ (h * D3w)
        Jw = (h / 6.0) * (D1w + 2.0 * D2w + 2.0 * D3w + D4w)

        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A = Jx @ A
        B = Ju if B is None else Jx @ B + Ju
        G = Jw if G is None else Jx @ G + Jw
    return x, A, B, G


@dataclass(frozen=True)
class SystemModel:
    """Nonlinear stochastic discrete-time system with unit-covariance noise.

    The process and output noises are standardized: any noise shaping
    (Cholesky factors of physical covariances) lives inside ``f`` and ``g``,
    so every downstream consumer draws ``w, v ~ N(0, I)``.

    Attributes:
        n_x, n_u, n_w, n_v, n_y: dimensions.
        horizon: number of stages N.
        f: stage map ``f(k, x, u, w)``; with ``w = 0`` it must be
            deterministic and repeatable bit-for-bit.
        g: output map ``g(k, x, v)`` for stages 1..N.
        f_jac: optional analytic Jacobians ``(A, B, G)`` of ``f``; finite
            differences are used when absent.
        g_jac: optional analytic Jacobians ``(C, D)`` of ``g``.
        state_names / control_names: labels for file outputs.
    """

    n_x: int
    n_u: int
    n_w: int
    n_v: int
    n_y: int
    horizon: int
    f: DynamicsFn
    g: OutputFn
    f_jac: DynamicsJacFn | None = None
    g_jac: OutputJacFn | None = None
    fd_step: float = 1e-6
    state_names: tuple[str, ...] = ()
    control_names: tuple[str, ...] = ()
    # True when f and g ignore the stage index; lets callers fold the stage
    # axis into the batch and evaluate all Jacobians in one call.
    stage_invariant: bool = False

    def __post_init__(self):
        if self.horizon < 0:
            raise ModelError("horizon must be nonnegative")

    def linearize_dynamics(self, k: int, x: Array, u: Array, w: Array) -> tuple[Array, Array, Array]:
        """Jacobians of ``f`` at ``(x, u, w)``, batch dims supported by the
        analytic provider; the finite-difference fallback loops per point."""
        if self.f_jac is not None:
            A, B, G = self.f_jac(k, np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(w, dtype=float))
            return np.asarray(A, dtype=float), np.asarray(B, dtype=float), np.asarray(G, dtype=float)
        return self._fd_dynamics(k, x, u, w)

    def linearize_output(self, k: int, x: Array, v: Array) -> tuple[Array, Array]:
        if self.g_jac is not None:
            C, D = self.g_jac(k, np.asarray(x, dtype=float), np.asarray(v, dtype=float))
            return np.asarray(C, dtype=float), np.asarray(D, dtype=float)
        return self._fd_output(k, x, v)

    # Finite-difference fallbacks: one point at a time, vectorized callers
    # iterate over the batch.
    def _fd_dynamics(self, k, x, u, w):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        if x.ndim > 1:
            flat_x = x.reshape(-1, self.n_x)
            flat_u = np.broadcast_to(u, x.shape[:-1] + (self.n_u,)).reshape(-1, self.n_u)
            flat_w = np.broadcast_to(w, x.shape[:-1] + (self.n_w,)).reshape(-1, self.n_w)
            out = [self._fd_dynamics(k, xi, ui, wi) for xi, ui, wi in zip(flat_x, flat_u, flat_w)]
            shape = x.shape[:-1]
            A = np.stack([o[0] for o in out]).reshape(shape + (self.n_x, self.n_x))
            B = np.stack([o[1] for o in out]).reshape(shape + (self.n_x, self.n_u))
            G = np.stack([o[2] for o in out]).reshape(shape + (self.n_x, self.n_w))
            return A, B, G
        A = fd_jacobian(lambda p: self.f(k, p, u, w), x, self.fd_step)
        B = fd_jacobian(lambda p: self.f(k, x, p, w), u, self.fd_step)
        G = fd_jacobian(lambda p: self.f(k, x, u, p), w, self.fd_step)
        return A, B, G

    def _fd_output(self, k, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if x.ndim > 1:
            flat_x = x.reshape(-1, self.n_x)
            flat_v = np.broadcast_to(v, x.shape[:-1] + (self.n_v,)).reshape(-1, self.n_v)
            out = [self._fd_output(k, xi, vi) for xi, vi in zip(flat_x, flat_v)]
            shape = x.shape[:-1]
            C = np.stack([o[0] for o in out]).reshape(shape + (self.n_y, self.n_x))
            D = np.stack([o[1] for o in out]).reshape(shape + (self.n_y, self.n_v))
            return C, D
        C = fd_jacobian(lambda p: self.g(k, p, v), x, self.fd_step)
        D = fd_jacobian(lambda p: self.g(k, x, p), v, self.fd_step)
        return C, D


_PSD_TOL = -1e-10


@dataclass(frozen=True)
class QuadraticCost:
    """Convex quadratic stage and terminal costs.

    Stage k cost over ``z = (x, u)``:
        ``l_k(z) = 0.5 z' H_k z + g_k' z + c_k``
    Terminal cost over ``x`` alike.  All stage Hessians must be PSD (the
    expected-cost trace term is then nonnegative for PSD covariances).
    """

    stage_hessians: Array  # (N, n_z, n_z)
    stage_gradients: Array  # (N, n_z)
    stage_constants: Array  # (N,)
    terminal_hessian: Array  # (n_x, n_x)
    terminal_gradient: Array  # (n_x,)
    terminal_constant: float = 0.0

    def __post_init__(self):
        for name, H in (("stage", self.stage_hessians), ("terminal", self.terminal_hessian)):
            if H.size and np.min(np.linalg.eigvalsh(H)) < _PSD_TOL:
                raise ModelError(f"{name} cost Hessian is not positive semidefinite")

    @property
    def horizon(self) -> int:
        return self.stage_hessians.shape[0]

    def stage_value(self, k: int, x: Array, u: Array) -> Array:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        z = np.concatenate(
            [np.broadcast_to(x, batch + x.shape[-1:]), np.broadcast_to(u, batch + u.shape[-1:])],
            axis=-1,
        )
        H = self.stage_hessians[k]
        g = self.stage_gradients[k]
        return 0.5 * np.einsum("...i,ij,...j->...", z, H, z) + z @ g + self.stage_constants[k]

    def terminal_value(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        H = self.terminal_hessian
        return 0.5 * np.einsum("...i,ij,...j->...", x, H, x) + x @ self.terminal_gradient + self.terminal_constant


@dataclass(frozen=True)
class ConstraintSet:
    """Penalized inequality constraints plus hard control box bounds.

    Stage constraints ``h_k(x, u) <= 0`` (k = 0..N-1) and a terminal
    ``h_N(x) <= 0`` are softened with per-constraint linear violation
    weights.  The control box is additionally enforced exactly on the
    nominal controls by the solver.
    """

    stage_fn: Callable[[int, Array, Array], Array] | None
    stage_jac: Callable[[int, Array, Array], Array] | None
    stage_counts: tuple[int, ...]
    stage_weights: tuple[Array, ...]
    terminal_fn: Callable[[Array], Array] | None
    terminal_jac: Callable[[Array], Array] | None
    terminal_count: int
    terminal_weights: Array
    u_lower: Array
    u_upper: Array

    def __post_init__(self):
        for wts in list(self.stage_weights) + [self.terminal_weights]:
            if np.asarray(wts).size and np.any(np.asarray(wts) <= 0.0):
                raise ModelError("violation weights must be strictly positive")
        if np.any(self.u_lower > self.u_upper):
            raise ModelError("control box is empty (lower > upper)")

    @classmethod
    def empty(cls, n_u: int, horizon: int, u_lower=None, u_upper=None) -> "ConstraintSet":
        lo = np.full(n_u, -np.inf) if u_lower is None else np.asarray(u_lower, dtype=float)
        hi = np.full(n_u, np.inf) if u_upper is None else np.asarray(u_upper, dtype=float)
        return cls(
            stage_fn=None,
            stage_jac=None,
            stage_counts=tuple([0] * horizon),
            stage_weights=tuple([np.zeros(0)] * horizon),
            terminal_fn=None,
            terminal_jac=None,
            terminal_count=0,
            terminal_weights=np.zeros(0),
            u_lower=lo,
            u_upper=hi,
        )

    def stage_values(self, k: int, x: Array, u: Array) -> Array:
        if self.stage_fn is None or self.stage_counts[k] == 0:
            batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
            return np.zeros(batch + (0,))
        return np.asarray(self.stage_fn(k, x, u), dtype=float)

    def stage_gradients(self, k: int, x: Array, u: Array) -> Array:
        if self.stage_jac is None or self.stage_counts[k] == 0:
            batch = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
            return np.zeros(batch + (0, np.shape(x)[-1] + np.shape(u)[-1]))
        return np.asarray(self.stage_jac(k, x, u), dtype=float)

    def terminal_values(self, x: Array) -> Array:
        if self.terminal_fn is None or self.terminal_count == 0:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return np.asarray(self.terminal_fn(x), dtype=float)

    def terminal_gradients(self, x: Array) -> Array:
        if self.terminal_jac is None or self.terminal_count == 0:
            return np.zeros(np.shape(x)[:-1] + (0, np.shape(x)[-1]))
        return np.asarray(self.terminal_jac(x), dtype=float)


@dataclass(frozen=True)
class ControlProblem:
    """A system model bundled with its cost and constraints."""

    model: SystemModel
    cost: QuadraticCost
    constraints: ConstraintSet

    def __post_init__(self):
        if self.cost.horizon != self.model.horizon:
            raise ModelError("cost horizon does not match model horizon")
        if len(self.constraints.stage_counts) != self.model.horizon:
            raise ModelError("constraint stage count does not match model horizon")


def make_linear_problem(
    A: Array,
    B: Array,
    G: Array,
    C: Array,
    D: Array,
    Q: Array,
    R: Array,
    Q_terminal: Array,
    horizon: int,
    u_lower: Sequence[float] | None = None,
    u_upper: Sequence[float] | None = None,
) -> ControlProblem:
    """Time-invariant linear-Gaussian problem with quadratic cost.

    Dynamics ``x+ = A x + B u + G w``, output ``y = C x + D v`` with
    standardized noises; cost ``0.5 x'Qx + 0.5 u'Ru`` and terminal
    ``0.5 x'Q_f x``.  Useful as an oracle instance: the optimal policy is
    the time-varying LQR gain applied to the Kalman estimate.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    G = np.asarray(G, dtype=float)
    C = np.asarray(C, dtype=float)
    D = np.asarray(D, dtype=float)
    n_x = A.shape[0]
    n_u = B.shape[1]
    n_w = G.shape[1]
    n_y, n_v = C.shape[0], D.shape[1]

    def f(k, x, u, w):
        return x @ A.T + u @ B.T + w @ G.T

    def g(k, x, v):
        return x @ C.T + v @ D.T

    def f_jac(k, x, u, w):
        batch = np.shape(x)[:-1]
        return (
            np.broadcast_to(A, batch + A.shape),
            np.broadcast_to(B, batch + B.shape),
            np.broadcast_to(G, batch + G.shape),
        )

    def g_jac(k, x, v):
        batch = np.shape(x)[:-1]
        return np.broadcast_to(C, batch + C.shape), np.broadcast_to(D, batch + D.shape)

    model = SystemModel(
        n_x=n_x, n_u=n_u, n_w=n_w, n_v=n_v, n_y=n_y, horizon=horizon,
        f=f, g=g, f_jac=f_jac, g_jac=g_jac,
        state_names=tuple(f"x{i}" for i in range(n_x)),
        control_names=tuple(f"u{i}" for i in range(n_u)),
        stage_invariant=True,
    )
    n_z = n_x + n_u
    H = np.zeros((n_z, n_z))
    H[:n_x, :n_x] = np.asarray(Q, dtype=float)
    H[n_x:, n_x:] = np.asarray(R, dtype=float)
    cost = QuadraticCost(
        stage_hessians=np.repeat(H[None], horizon, axis=0),
        stage_gradients=np.zeros((horizon, n_z)),
        stage_constants=np.zeros(horizon),
        terminal_hessian=np.asarray(Q_terminal, dtype=float),
        terminal_gradient=np.zeros(n_x),
    )
    constraints = ConstraintSet.empty(n_u, horizon, u_lower, u_upper)
    return ControlProblem(model=model, cost=cost, constraints=constraints)
