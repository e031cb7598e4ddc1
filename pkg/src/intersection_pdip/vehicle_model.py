"""Longitudinal electric-vehicle model and RK4 integration with sensitivities.

State x = (p, v), control u = (E, Fb).  All step functions are vectorized
over a leading axis so a whole shooting grid is integrated in one call, and
they only use ring operations so complex-step differentiation works on them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class DomainError(ValueError):
    """Raised when a time query falls outside the horizon."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1500.0
    c_e: float = 280.0
    c_w: float = 8.0
    c_d: float = 0.35
    c_r: float = 150.0
    w_max: float = 800.0
    e_max: float = 400.0
    p_max: float = 120000.0
    fb_max: float = 10000.0
    d: float = 4.5
    delta: float = 7.0

    def __post_init__(self):
        positive = ("m", "c_e", "c_w", "w_max", "e_max", "p_max", "fb_max", "d", "delta")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.c_d < 0 or self.c_r < 0:
            raise ValueError("c_d and c_r must be >= 0")
        if self.delta < self.d:
            raise ValueError("safety margin delta must be >= vehicle length d")

    @property
    def v_max(self) -> float:
        """Speed at which the motor reaches its speed limit."""
        return self.w_max / self.c_w

    def with_(self, **kw) -> "VehicleParams":
        return replace(self, **kw)


DEFAULT_PARAMS = VehicleParams()


@dataclass
class StepSensitivity:
    """Result of one (possibly batched) RK4 step.

    Shapes for a batch of n steps: x_next (n, 2), jac_x (n, 2, 2),
    jac_u (n, 2, 2), d_h (n, 2).
    """

    x_next: np.ndarray
    jac_x: np.ndarray
    jac_u: np.ndarray
    d_h: np.ndarray


def continuous_dynamics(params: VehicleParams, x, u) -> np.ndarray:
    """Time derivative (v, a) for state(s) x and control(s) u."""
    x = np.asarray(x)
    u = np.asarray(u)
    v = x[..., 1]
    acc = (params.c_e * u[..., 0] - u[..., 1] - params.c_d * v * v - params.c_r) / params.m
    return np.stack([v, acc], axis=-1)


# ---- helpers ----

def _f(params, p, v, e, fb):
    return v, (params.c_e * e - fb - params.c_d * v * v - params.c_r) / params.m


def _fx_apply(params, v, dx):
    """Multiply the state Jacobian of f at speed v with dx of shape (n, 2, c)."""
    out = np.empty_like(dx)
    out[:, 0, :] = dx[:, 1, :]
    out[:, 1, :] = (-2.0 * params.c_d / params.m) * v[:, None] * dx[:, 1, :]
    return out


def _fx_vec(params, v, dx):
    """Same as _fx_apply for a stack of vectors of shape (n, 2)."""
    return np.stack([dx[:, 1], (-2.0 * params.c_d / params.m) * v * dx[:, 1]], axis=-1)


def rk4_step(params: VehicleParams, x, u, h) -> StepSensitivity:
    """One classical RK4 step of length h and its exact discrete derivatives.

    ``x`` and ``u`` may be single vectors of length 2 or stacks of shape
    (n, 2); ``h`` may be a scalar or an array of length n.  The returned
    arrays always carry the batch axis.
    """
    x = np.atleast_2d(np.asarray(x))
    u = np.atleast_2d(np.asarray(u))
    n = max(x.shape[0], u.shape[0])
    if x.shape[0] != n:
        x = np.broadcast_to(x, (n, 2))
    if u.shape[0] != n:
        u = np.broadcast_to(u, (n, 2))
    h = np.broadcast_to(np.asarray(h), (n,))
    if np.isrealobj(h) and np.any(h < 0):
        raise ValueError("step length must be nonnegative")

    dtype = np.result_type(x, u, h, float)
    p, v = x[:, 0], x[:, 1]
    e, fb = u[:, 0], u[:, 1]

    k1 = np.stack(_f(params, p, v, e, fb), axis=-1)
    x2 = x + 0.5 * h[:, None] * k1
    k2 = np.stack(_f(params, x2[:, 0], x2[:, 1], e, fb), axis=-1)
    x3 = x + 0.5 * h[:, None] * k2
    k3 = np.stack(_f(params, x3[:, 0], x3[:, 1], e, fb), axis=-1)
    x4 = x + h[:, None] * k3
    k4 = np.stack(_f(params, x4[:, 0], x4[:, 1], e, fb), axis=-1)
    incr = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    x_next = x + h[:, None] * incr

    # derivatives w.r.t. (x, u) stacked as 4 columns
    eye = np.zeros((n, 2, 4), dtype=dtype)
    eye[:, 0, 0] = 1.0
    eye[:, 1, 1] = 1.0
    fu = np.zeros((n, 2, 4), dtype=dtype)
    fu[:, 1, 2] = params.c_e / params.m
    fu[:, 1, 3] = -1.0 / params.m
    hh = h[:, None, None]

    dk1 = _fx_apply(params, v, eye) + fu
    dk2 = _fx_apply(params, x2[:, 1], eye + 0.5 * hh * dk1) + fu
    dk3 = _fx_apply(params, x3[:, 1], eye + 0.5 * hh * dk2) + fu
    dk4 = _fx_apply(params, x4[:, 1], eye + hh * dk3) + fu
    jac = eye + hh * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4) / 6.0

    # derivative w.r.t. the step length
    hv = h[:, None]
    dk2_h = _fx_vec(params, x2[:, 1], 0.5 * k1)
    dk3_h = _fx_vec(params, x3[:, 1], 0.5 * k2 + 0.5 * hv * dk2_h)
    dk4_h = _fx_vec(params, x4[:, 1], k3 + hv * dk3_h)
    d_h = incr + hv * (2.0 * dk2_h + 2.0 * dk3_h + dk4_h) / 6.0

    return StepSensitivity(x_next, jac[:, :, :2], jac[:, :, 2:], d_h)


def interval_index(t: float, dt: float, K: int) -> int:
    """Shooting interval owning time t; the final instant belongs to K-1."""
    return min(int(math.floor(t / dt)), K - 1)


@dataclass
class PositionEval:
    p: float
    k: int
    dp_dx: np.ndarray  # (2,) w.r.t. x_k
    dp_du: np.ndarray  # (2,) w.r.t. u_k
    dp_dt: float


def position_at(params: VehicleParams, xs, us, t: float, dt: float) -> PositionEval:
    """Position at time t obtained by a partial RK4 step from node k = floor(t/dt).

    ``xs`` holds the K+1 shooting states and ``us`` the K controls.
    """
    xs = np.asarray(xs)
    us = np.asarray(us)
    K = us.shape[0]
    if not (0.0 <= t <= K * dt):
        raise DomainError(f"t={t} outside [0, {K * dt}]")
    k = interval_index(t, dt, K)
    h = t - k * dt
    st = rk4_step(params, xs[k], us[k], h)
    return PositionEval(
        float(st.x_next[0, 0]), k, st.jac_x[0, 0].copy(), st.jac_u[0, 0].copy(), float(st.d_h[0, 0])
    )


def reference_input(params: VehicleParams, v_ref: float) -> np.ndarray:
    """Steady-state input (E, 0) that holds speed v_ref with the brake released."""
    e = (params.c_d * v_ref * v_ref + params.c_r) / params.c_e
    return np.array([e, 0.0])


def rollout(params: VehicleParams, x0, us, dt: float) -> np.ndarray:
    """Integrate K RK4 steps from x0; returns the K+1 node states."""
    us = np.asarray(us, dtype=float)
    xs = np.empty((us.shape[0] + 1, 2))
    xs[0] = x0
    for k in range(us.shape[0]):
        xs[k + 1] = rk4_step(params, xs[k], us[k], dt).x_next[0]
    return xs
