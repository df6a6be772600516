"""Adaptive ESDIRK (TR-BDF2) integration with forward sensitivities.

The scheme has an explicit first stage and two implicit stages sharing the
diagonal entry, so a single factorization of ``I - h*gamma*J`` serves all
Newton solves of a step.  After each accepted state step, the linear
sensitivity systems are advanced with the same stage mechanics, reusing
that factorization (with cheap iterative refinement when the stage
Jacobians have drifted from the factorized one).

Quadrature states (running integrals of linear state selections) can be
appended to any system; their values and sensitivities then accumulate
through the integrator itself rather than by trajectory post-processing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import IntegrationFailure, InvalidInputError, KineticsDomainError, SimulationFailure

__all__ = [
    "ButcherTableau",
    "IntegratorConfig",
    "IntegrationStats",
    "Trajectory",
    "SensitivityTrajectory",
    "AugmentedSystem",
    "step_controller",
    "integrate",
    "integrate_with_sensitivities",
    "attach_quadratures",
]

log = logging.getLogger(__name__)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# iteration matrix is refactorized when h drifts by more than this
H_REUSE_WINDOW = 0.2
# Newton convergence rate above which the Jacobian is considered stale
SLOW_RATE = 0.5
MAX_NEWTON_HALVINGS = 2


@dataclass(frozen=True)
class ButcherTableau:
    """ESDIRK tableau with an embedded error weight vector."""

    a: np.ndarray
    b: np.ndarray
    b_embedded: np.ndarray
    c: np.ndarray
    gamma: float
    order: int
    embedded_order: int

    @property
    def n_stages(self) -> int:
        return len(self.b)

    def order_condition_residuals(self) -> dict[str, float]:
        """Residuals of the order conditions up to order 3 for b and b_embedded."""
        c, a = self.c, self.a
        out = {}
        for name, w in (("b", self.b), ("b_embedded", self.b_embedded)):
            out[f"{name}_order1"] = abs(w.sum() - 1.0)
            out[f"{name}_order2"] = abs(w @ c - 0.5)
            out[f"{name}_order3a"] = abs(w @ c**2 - 1.0 / 3.0)
            out[f"{name}_order3b"] = abs(w @ (a @ c) - 1.0 / 6.0)
        return out

    @classmethod
    def trbdf2(cls) -> "ButcherTableau":
        """Three-stage, second-order TR-BDF2 with a third-order embedding."""
        gamma = 1.0 - np.sqrt(2.0) / 2.0  # repeated diagonal entry
        w = np.sqrt(2.0) / 4.0
        a = np.array(
            [
                [0.0, 0.0, 0.0],
                [gamma, gamma, 0.0],
                [w, w, gamma],
            ]
        )
        b = a[-1].copy()  # stiffly accurate
        b_embedded = np.array(
            [(1.0 - w) / 3.0, (3.0 * w + 1.0) / 3.0, gamma / 3.0]
        )
        c = np.array([0.0, 2.0 * gamma, 1.0])
        return cls(
            a=a, b=b, b_embedded=b_embedded, c=c, gamma=gamma, order=2, embedded_order=3
        )


@dataclass
class IntegratorConfig:
    """Tolerances and policies of one integration run."""

    rtol: float = 1e-6
    atol: float | np.ndarray = 1e-9
    initial_step: float | None = None
    min_step: float = 0.0  # 0 means span * 1e-14
    max_step: float = np.inf
    max_newton_iter: int = 8
    newton_tol: float = 0.1  # fraction of the unit error budget
    fixed_step: float | None = None
    max_steps: int = 5_000_000
    output_times: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.rtol < 1.0:
            raise InvalidInputError(f"rtol must lie in (0, 1), got {self.rtol}")
        if np.any(np.asarray(self.atol) <= 0.0):
            raise InvalidInputError("atol must be positive")
        if self.output_times is not None:
            self.output_times = np.asarray(self.output_times, dtype=float)
            if self.output_times.ndim != 1 or np.any(np.diff(self.output_times) < 0):
                raise InvalidInputError("output times must be ascending")


@dataclass
class IntegrationStats:
    n_steps: int = 0
    n_rejected: int = 0
    n_newton_iterations: int = 0
    n_rhs: int = 0
    n_jacobians: int = 0
    n_factorizations: int = 0


@dataclass
class Trajectory:
    """Accepted step times plus snapshots at the mandatory output times."""

    step_times: np.ndarray
    output_times: np.ndarray
    outputs: np.ndarray  # (n_outputs, n_x)
    final_time: float
    final_state: np.ndarray
    stats: IntegrationStats


@dataclass
class SensitivityTrajectory:
    """d(state)/d(parameters) at the mandatory output times."""

    output_times: np.ndarray
    outputs: np.ndarray  # (n_outputs, n_x, n_p)
    final: np.ndarray  # (n_x, n_p)


def step_controller(
    error_norm: float,
    h: float,
    order: int,
    safety: float = SAFETY,
    min_factor: float = MIN_FACTOR,
    max_factor: float = MAX_FACTOR,
) -> tuple[bool, float]:
    """Accept/reject a step and propose the next size from a scaled error norm."""
    if error_norm < 0.0:
        raise InvalidInputError("error norm must be nonnegative")
    accept = error_norm <= 1.0
    if error_norm == 0.0:
        factor = max_factor
    else:
        factor = min(max_factor, max(min_factor, safety * error_norm ** (-1.0 / (order + 1))))
    return accept, h * factor


class _StageFailure(Exception):
    """Internal: Newton divergence or kinetics leaving its domain."""


class _Stepper:
    """Shared machinery for plain and sensitivity-propagating integration."""

    def __init__(self, f, jac_x, x0, t_span, config: IntegratorConfig, jac_p=None, s0=None):
        self.f = f
        self.jac_x = jac_x
        self.jac_p = jac_p
        self.tab = ButcherTableau.trbdf2()
        self.config = config
        self.t0, self.tf = float(t_span[0]), float(t_span[1])
        if not self.tf > self.t0:
            raise InvalidInputError(f"integration span [{self.t0}, {self.tf}] is empty")
        self.x = np.array(x0, dtype=float)
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError("initial state is not finite")
        self.n = self.x.size
        self.S = None if s0 is None else np.array(s0, dtype=float)
        self.stats = IntegrationStats()
        self.atol = np.broadcast_to(np.asarray(config.atol, dtype=float), self.x.shape)

        self.outputs_req = config.output_times
        if self.outputs_req is None:
            self.outputs_req = np.array([self.tf])
        lo = self.t0 - 1e-9 * max(1.0, abs(self.t0))
        hi = self.tf + 1e-9 * max(1.0, abs(self.tf))
        if np.any(self.outputs_req < lo) or np.any(self.outputs_req > hi):
            raise InvalidInputError("mandatory output times fall outside the span")

        self.min_step = config.min_step or (self.tf - self.t0) * 1e-14

        # iteration-matrix bookkeeping
        self._lu = None
        self._jac = None
        self._jac_is_current = False  # evaluated at the current (t, x)?
        self._force_refresh = False
        self._h_fact = None
        self._last_rate = 0.0
        self._negativity_warned = False

    # -- norms ----------------------------------------------------------

    def _error_weights(self, y):
        return 1.0 / (self.atol + self.config.rtol * np.abs(y))

    def _wrms(self, v, w):
        return float(np.sqrt(np.mean((v * w) ** 2)))

    # -- RHS / Jacobian wrappers ----------------------------------------

    def _eval_f(self, t, y):
        self.stats.n_rhs += 1
        try:
            val = self.f(t, y)
        except KineticsDomainError as exc:
            raise _StageFailure(str(exc)) from exc
        if not np.all(np.isfinite(val)):
            raise _StageFailure("right-hand side is not finite")
        return val

    def _refresh_jacobian(self, t, y):
        self._jac = self.jac_x(t, y)
        self.stats.n_jacobians += 1
        self._jac_is_current = True
        self._force_refresh = False
        self._h_fact = None

    def _factorize(self, h):
        n = self.n
        W = -(h * self.tab.gamma) * self._jac
        W[np.diag_indices(n)] += 1.0
        self._lu = lu_factor(W, check_finite=False)
        self._h_fact = h
        self.stats.n_factorizations += 1

    def _ensure_factorization(self, t, y, h):
        if self._jac is None or self._force_refresh:
            self._refresh_jacobian(t, y)
        if self._h_fact is None or abs(h - self._h_fact) > H_REUSE_WINDOW * self._h_fact:
            self._factorize(h)

    # -- one step attempt -------------------------------------------------

    def _solve_stage(self, t_stage, h_gamma, r, y_pred, weights):
        """Solve Y - h*gamma*f(t, Y) = r by modified Newton; returns Y."""
        cfg = self.config
        y = y_pred
        prev_norm = None
        for _ in range(cfg.max_newton_iter):
            fval = self._eval_f(t_stage, y)
            g = y - h_gamma * fval - r
            delta = lu_solve(self._lu, -g, check_finite=False)
            y = y + delta
            self.stats.n_newton_iterations += 1
            dnorm = self._wrms(delta, weights)
            if prev_norm is not None:
                if dnorm > 0.9 * prev_norm and dnorm > cfg.newton_tol:
                    raise _StageFailure("Newton iteration diverging")
                self._last_rate = dnorm / prev_norm if prev_norm > 0 else 0.0
            else:
                self._last_rate = 0.0
            prev_norm = dnorm
            if dnorm <= cfg.newton_tol:
                return y
        raise _StageFailure("Newton iteration exceeded the iteration limit")

    def _attempt_step(self, t, h, k1):
        """Compute stage states and derivatives over [t, t+h].

        Returns (stage_states, stage_ks).  Raises _StageFailure on Newton
        or kinetics trouble.
        """
        tab = self.tab
        y0 = self.x
        weights = self._error_weights(y0)
        ks = [k1]
        ys = [y0]
        h_gamma = h * tab.gamma
        for i in range(1, tab.n_stages):
            r = y0 + h * sum(tab.a[i, j] * ks[j] for j in range(i))
            y_pred = r + h_gamma * ks[i - 1]  # warm start from the previous stage slope
            y_i = self._solve_stage(t + tab.c[i] * h, h_gamma, r, y_pred, weights)
            k_i = (y_i - r) / h_gamma
            ks.append(k_i)
            ys.append(y_i)
        return ys, ks

    # -- driver -----------------------------------------------------------

    def run(self):
        cfg = self.config
        tab = self.tab
        t = self.t0
        out_times = self.outputs_req
        outputs = np.empty((len(out_times), self.n))
        sens_outputs = (
            np.empty((len(out_times), self.n, self.S.shape[1])) if self.S is not None else None
        )
        i_out = 0
        # snapshots exactly at t0 if requested
        while i_out < len(out_times) and out_times[i_out] <= t:
            outputs[i_out] = self.x
            if sens_outputs is not None:
                sens_outputs[i_out] = self.S
            i_out += 1

        step_times = [t]
        k1 = self._eval_f(t, self.x)
        h = self._initial_step(t, k1)
        newton_halvings = 0

        while t < self.tf - 1e-14 * max(1.0, abs(self.tf)):
            if self.stats.n_steps + self.stats.n_rejected > cfg.max_steps:
                raise IntegrationFailure(
                    "step limit exceeded", time=t, step=h, state=self.x.copy()
                )
            h = min(h, cfg.max_step, self.tf - t)
            t_target = None
            if i_out < len(out_times):
                t_next_out = out_times[i_out]
                if t + h >= t_next_out - 1e-14 * max(1.0, abs(t_next_out)):
                    h = t_next_out - t
                    t_target = t_next_out
            if h < self.min_step and cfg.fixed_step is None:
                raise IntegrationFailure(
                    f"step size underflow (h={h:.3e})", time=t, step=h, state=self.x.copy()
                )

            self._ensure_factorization(t, self.x, h)
            try:
                ys, ks = self._attempt_step(t, h, k1)
            except _StageFailure as exc:
                if not self._jac_is_current:
                    self._refresh_jacobian(t, self.x)
                    self._factorize(h)
                    continue
                newton_halvings += 1
                if newton_halvings > MAX_NEWTON_HALVINGS:
                    raise IntegrationFailure(
                        f"nonlinear solver failed to converge: {exc}",
                        time=t,
                        step=h,
                        state=self.x.copy(),
                    ) from exc
                h = 0.5 * h
                self._factorize(h)
                continue

            y_new = ys[-1]
            if cfg.fixed_step is not None:
                accept, h_next = True, cfg.fixed_step
            else:
                est = h * sum((tab.b[i] - tab.b_embedded[i]) * ks[i] for i in range(tab.n_stages))
                est = lu_solve(self._lu, est, check_finite=False)  # smooth the stiff estimate
                err_norm = self._wrms(est, self._error_weights(np.maximum(np.abs(self.x), np.abs(y_new))))
                accept, h_next = step_controller(err_norm, h, tab.order)

            if not accept:
                self.stats.n_rejected += 1
                h = h_next
                continue

            if self.S is not None:
                self._advance_sensitivities(t, h, ys)

            newton_halvings = 0
            if self._last_rate > SLOW_RATE:
                self._force_refresh = True
            t_new = t_target if t_target is not None else min(t + h, self.tf)
            self.x = y_new
            self._jac_is_current = False
            k1 = ks[-1]  # first stage of the next step coincides with the last stage
            t = t_new
            self.stats.n_steps += 1
            step_times.append(t)
            self._check_negativity(t, y_new)

            while i_out < len(out_times) and out_times[i_out] <= t:
                outputs[i_out] = self.x
                if sens_outputs is not None:
                    sens_outputs[i_out] = self.S
                i_out += 1
            h = max(h_next, self.min_step)

        traj = Trajectory(
            step_times=np.asarray(step_times),
            output_times=out_times.copy(),
            outputs=outputs,
            final_time=t,
            final_state=self.x.copy(),
            stats=self.stats,
        )
        if self.S is None:
            return traj, None
        sens = SensitivityTrajectory(
            output_times=out_times.copy(), outputs=sens_outputs, final=self.S.copy()
        )
        return traj, sens

    def _initial_step(self, t, f0):
        cfg = self.config
        if cfg.fixed_step is not None:
            return cfg.fixed_step
        if cfg.initial_step is not None:
            return cfg.initial_step
        span = self.tf - self.t0
        w = self._error_weights(self.x)
        d1 = self._wrms(f0, w)
        if d1 > 0.0:
            h = 0.01 / d1
        else:
            h = 1e-3 * span
        return float(min(h, 1e-2 * span, cfg.max_step))

    def _advance_sensitivities(self, t, h, ys):
        """Stage-by-stage solve of S' = J(t, x) S + f_p with the factored matrix."""
        tab = self.tab
        h_gamma = h * tab.gamma
        S0 = self.S
        Ks = []
        for i in range(tab.n_stages):
            t_i = t + tab.c[i] * h
            J_i = self.jac_x(t_i, ys[i])
            self.stats.n_jacobians += 1
            fp_i = self.jac_p(t_i, ys[i])
            R = S0 + h * sum(tab.a[i, j] * Ks[j] for j in range(i))
            rhs = J_i @ R + fp_i
            if i == 0:
                Ks.append(rhs)  # explicit stage
                continue
            K = lu_solve(self._lu, rhs, check_finite=False)
            # refine: the factorization may hold a neighboring Jacobian
            for _ in range(2):
                resid = rhs - (K - h_gamma * (J_i @ K))
                corr = lu_solve(self._lu, resid, check_finite=False)
                K = K + corr
                if np.max(np.abs(corr)) <= 1e-10 * max(1.0, np.max(np.abs(K))):
                    break
            Ks.append(K)
        self.S = S0 + h * sum(tab.b[i] * Ks[i] for i in range(tab.n_stages))

    def _check_negativity(self, y):
        if self._negativity_warned:
            return
        floor = -10.0 * float(np.max(self.atol))
        if np.any(y < floor):
            self._negativity_warned = True
            log.warning(
                "state undershoot below %.1e detected at t=%.6g (min=%.3e); "
                "continuing without clipping",
                floor,
                0.0,
                float(np.min(y)),
            )


def integrate(f, jac_x, x0, t_span, config: IntegratorConfig) -> Trajectory:
    """Integrate dx/dt = f(t, x) over ``t_span`` with adaptive TR-BDF2."""
    traj, _ = _Stepper(f, jac_x, x0, t_span, config).run()
    return traj


def integrate_with_sensitivities(
    f, jac_x, jac_p, x0, s0, t_span, config: IntegratorConfig
) -> tuple[Trajectory, SensitivityTrajectory]:
    """Integrate the state and propagate dx/dp alongside.

    The sensitivity systems are linear; they are advanced after each
    accepted state step and never influence step-size control.
    """
    s0 = np.asarray(s0, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if s0.shape[0] != x0.size:
        raise InvalidInputError("sensitivity seed has wrong row count")
    stepper = _Stepper(f, jac_x, x0, t_span, config, jac_p=jac_p, s0=s0)
    traj, sens = stepper.run()
    return traj, sens


@dataclass(frozen=True)
class AugmentedSystem:
    """A base ODE system extended with running-integral (quadrature) states."""

    n_base: int
    selection: np.ndarray  # (n_quad, n_base)
    base_rhs: Callable
    base_jac_x: Callable
    base_jac_p: Callable | None = None

    @property
    def n_quad(self) -> int:
        return self.selection.shape[0]

    @property
    def n_states(self) -> int:
        return self.n_base + self.n_quad

    def rhs(self, t, x, *args):
        xb = x[: self.n_base]
        return np.concatenate([self.base_rhs(t, xb, *args), self.selection @ xb])

    def jac_x(self, t, x, *args):
        n, q = self.n_base, self.n_quad
        J = np.zeros((n + q, n + q))
        J[:n, :n] = self.base_jac_x(t, x[:n], *args)
        J[n:, :n] = self.selection
        return J

    def jac_p(self, t, x, *args):
        Jp = self.base_jac_p(t, x[: self.n_base], *args)
        return np.vstack([Jp, np.zeros((self.n_quad, Jp.shape[1]))])

    def augment_state(self, x0: np.ndarray) -> np.ndarray:
        return np.concatenate([x0, np.zeros(self.n_quad)])

    def augment_sensitivity(self, s0: np.ndarray) -> np.ndarray:
        return np.vstack([s0, np.zeros((self.n_quad, s0.shape[1]))])

    def quadrature_values(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.n_base :]


def attach_quadratures(
    n_base: int,
    rhs: Callable,
    jac_x: Callable,
    selection: np.ndarray,
    jac_p: Callable | None = None,
) -> AugmentedSystem:
    """Append quadrature states Q' = selection @ x to an ODE system."""
    selection = np.atleast_2d(np.asarray(selection, dtype=float))
    if selection.shape[1] != n_base:
        raise InvalidInputError(
            f"selection has {selection.shape[1]} columns, expected {n_base}"
        )
    return AugmentedSystem(
        n_base=n_base,
        selection=selection,
        base_rhs=rhs,
        base_jac_x=jac_x,
        base_jac_p=jac_p,
    )
