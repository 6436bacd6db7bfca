"""Adaptation objectives and their gradients with respect to the
preconditioner parameters.

All gradients use frozen-value semantics: the cached trajectory gradients,
the roulette accumulator y, the power vector b and the Hessian midpoint
are constants; theta enters only through the explicit C / C^T products.
Each objective therefore has a surrogate (re-evaluatable at any parameter
point from the frozen pieces) and an analytic gradient assembled from the
two preconditioner adjoint primitives, with finite differences of the
surrogate as the independent check.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .entropy import (
    DELTA_PRIME,
    N_MIN,
    PENALTY_DELTA,
    dl_coeff,
    penalty_h,
    penalty_h_grad,
)

BETA_BOUNDS = (1e-2, 1e2)
GAMMA_BOUNDS = (1e3, 1e5)
ALPHA_STAR = 0.67


@dataclass
class AdaptConfig:
    """Learning rates and controller constants for one adaptation run."""

    rho_theta: float = 1e-2
    rho_beta: float = 0.02
    rho_gamma: float = 1e2
    alpha_star: float = ALPHA_STAR
    beta_bounds: tuple = BETA_BOUNDS
    gamma_bounds: tuple = GAMMA_BOUNDS
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    penalty_delta: float = PENALTY_DELTA
    penalty_delta2: Optional[float] = None
    delta_prime: float = DELTA_PRIME
    n_min: int = N_MIN
    lambda_rate: float = 0.05
    l2hmc_floor: float = 1e-8

    def penalty_args(self):
        d2 = self.penalty_delta2
        if d2 is None:
            d2 = 1.0 + self.penalty_delta
        return self.penalty_delta, d2


def default_adapt_config(kind):
    """Per-kind learning-rate defaults: the dense and banded parameterizations
    need a smaller step than the diagonal one."""
    rate = 1e-2 if kind == "diagonal" else 1e-3
    return AdaptConfig(rho_theta=rate)


@dataclass
class AdaptState:
    """Mutable optimizer state shared by all chains between barriers."""

    precond: object
    config: AdaptConfig
    beta: float = 1.0
    gamma: float = GAMMA_BOUNDS[0]
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step: int = 0
    lambda_ma: Optional[float] = None
    skip_count: int = 0

    def __post_init__(self):
        n = self.precond.theta.size
        if self.adam_m is None:
            self.adam_m = np.zeros(n)
        if self.adam_v is None:
            self.adam_v = np.zeros(n)
        lo, hi = self.config.beta_bounds
        if not lo <= self.beta <= hi:
            raise ValueError("beta outside its projection interval")
        lo, hi = self.config.gamma_bounds
        if not lo <= self.gamma <= hi:
            raise ValueError("gamma outside its projection interval")


def make_adapt_state(precond, config=None):
    if config is None:
        config = default_adapt_config(precond.kind)
    return AdaptState(precond=precond, config=config)


# -- frozen endpoint pieces ----------------------------------------------


def surrogate_endpoint(traj, precond):
    """Endpoint as an explicit function of the preconditioner, with the
    trajectory's gradient accumulators frozen."""
    h, L = traj.h, traj.L
    ct_terms = h * h * traj.xi + 0.5 * L * h * h * traj.grads[0]
    return traj.q[0] + L * h * precond.matvec(traj.v) - precond.matvec(
        precond.rmatvec(ct_terms)
    )


def surrogate_velocity(traj, precond):
    """Final velocity C^T p_L as a function of the preconditioner."""
    h, L = traj.h, traj.L
    m = 0.5 * h * (traj.grads[0] + traj.grads[L])
    if L > 1:
        m = m + h * traj.grads[1:L].sum(axis=0)
    return traj.v - precond.rmatvec(m), m


def surrogate_delta(traj, precond, model):
    """Energy error re-evaluated at an arbitrary parameter point."""
    w, _ = surrogate_velocity(traj, precond)
    q_end = surrogate_endpoint(traj, precond)
    u0 = model.potential(traj.q[0])
    u_end = model.potential(q_end)
    delta = u_end - u0 + 0.5 * float(w @ w) - 0.5 * float(traj.v @ traj.v)
    return delta


def _endpoint_adjoint(traj, precond, u, out, scale=1.0):
    # accumulate scale * d(u^T q_L(theta)) / dtheta for frozen u
    h, L = traj.h, traj.L
    precond.accumulate_bilinear_grad(u, traj.v, out, scale * L * h)
    ct_terms = h * h * traj.xi + 0.5 * L * h * h * traj.grads[0]
    precond.accumulate_bilinear_grad(u, precond.rmatvec(ct_terms), out, -scale)
    precond.accumulate_bilinear_grad(ct_terms, precond.rmatvec(u), out, -scale)


def _delta_grad(traj, precond, out, scale=1.0):
    # accumulate scale * dDelta/dtheta with all potential gradients frozen
    w, m = surrogate_velocity(traj, precond)
    _endpoint_adjoint(traj, precond, traj.grads[traj.L], out, scale)
    precond.accumulate_bilinear_grad(m, w, out, -scale)


# -- penalised generalized-speed-measure objective -----------------------


def _entropy_bilinear(traj, draw, precond, model, u, w):
    # u^T D_L(theta) w with the midpoint frozen; one hvp
    if traj.L == 1:
        return 0.0, None
    hw = model.hvp(traj.midpoint, precond.matvec(w))
    val = dl_coeff(traj.h, traj.L) * float(precond.matvec(u) @ hw)
    return val, hw


def gsm_surrogate_loss(traj, draw, state, precond, model):
    """Penalised loss at an arbitrary parameter point, frozen pieces fixed.

    Returns the scalar and a breakdown record with the energy, log-det,
    entropy-surrogate and penalty parts (the last three scaled by beta
    and beta * gamma inside the total).
    """
    cfg = state.config
    d = traj.q.shape[1]
    delta = surrogate_delta(traj, precond, model)
    energy = max(0.0, delta)
    logdet = d * np.log(traj.h) + precond.logdet()
    ent, _ = _entropy_bilinear(traj, draw, precond, model, draw.y, draw.epsilon)
    mu, _ = _entropy_bilinear(traj, draw, precond, model, draw.b, draw.b)
    pd, pd2 = cfg.penalty_args()
    pen = penalty_h(abs(mu), pd, pd2)
    loss = energy - state.beta * (logdet + ent - state.gamma * pen)
    parts = {
        "delta": delta,
        "energy": energy,
        "logdet": logdet,
        "entropy": ent,
        "mu": mu,
        "penalty": pen,
    }
    return loss, parts


def gsm_gradient(traj, draw, state, precond, model):
    """Analytic gradient of the penalised loss under frozen-value semantics.

    The energy part enters only when the trajectory's energy error is
    positive; the entropy part back-propagates through both C factors of
    the surrogate operator; the penalty differentiates through the
    operator only, with b frozen.  Costs up to three hvp calls.
    """
    cfg = state.config
    out = np.zeros_like(precond.theta)
    if np.isfinite(traj.delta) and traj.delta > 0.0:
        _delta_grad(traj, precond, out, 1.0)
    # log-det part: d log h is theta-free
    precond.accumulate_logdet_grad(out, -state.beta)
    if traj.L > 1:
        c = dl_coeff(traj.h, traj.L)
        h_ce = model.hvp(traj.midpoint, precond.matvec(draw.epsilon))
        h_cy = model.hvp(traj.midpoint, precond.matvec(draw.y))
        precond.accumulate_bilinear_grad(h_ce, draw.y, out, -state.beta * c)
        precond.accumulate_bilinear_grad(h_cy, draw.epsilon, out, -state.beta * c)
        h_cb = model.hvp(traj.midpoint, precond.matvec(draw.b))
        mu = c * float(precond.matvec(draw.b) @ h_cb)
        pd, pd2 = cfg.penalty_args()
        slope = penalty_h_grad(abs(mu), pd, pd2)
        if slope != 0.0 and mu != 0.0:
            coeff = state.beta * state.gamma * slope * np.sign(mu) * c * 2.0
            precond.accumulate_bilinear_grad(h_cb, draw.b, out, coeff)
    return out


# -- competing objectives ------------------------------------------------


def esjd_loss(traj):
    """Negative acceptance-weighted squared jump of the trajectory."""
    jump = traj.q[traj.L] - traj.q[0]
    return -traj.accept_prob * float(jump @ jump)


def esjd_surrogate_loss(traj, precond, model):
    """ESJD loss re-evaluated at an arbitrary parameter point."""
    delta = surrogate_delta(traj, precond, model)
    a = min(1.0, float(np.exp(-max(delta, -700.0)))) if np.isfinite(delta) else 0.0
    jump = surrogate_endpoint(traj, precond) - traj.q[0]
    return -a * float(jump @ jump)


def _jump_value_and_grad(traj, precond, out_scale_pairs):
    # shared piece of the esjd/l2hmc gradients: J = a * r and
    # dJ/dtheta = a dr + r da, accumulated into each (out, scale)
    a = traj.accept_prob
    jump = traj.q[traj.L] - traj.q[0]
    r = float(jump @ jump)
    j = a * r
    for out, scale in out_scale_pairs:
        if a > 0.0:
            _endpoint_adjoint(traj, precond, jump, out, scale * a * 2.0)
        if np.isfinite(traj.delta) and traj.delta > 0.0 and a > 0.0:
            # da = -a dDelta on the branch where the exponential binds
            tmp = np.zeros_like(out)
            _delta_grad(traj, precond, tmp, 1.0)
            out += scale * r * (-a) * tmp
    return j


def esjd_gradient(traj, precond):
    out = np.zeros_like(precond.theta)
    _jump_value_and_grad(traj, precond, [(out, -1.0)])
    return out


def l2hmc_loss(traj, state):
    """Jump-over-average ratio loss with a reciprocal barrier.

    loss = -(J / lambda - lambda / max(J, floor)) where J is the
    acceptance-weighted squared jump and lambda its moving average.
    """
    jump = traj.q[traj.L] - traj.q[0]
    j = traj.accept_prob * float(jump @ jump)
    lam = state.lambda_ma if state.lambda_ma is not None else max(j, state.config.l2hmc_floor)
    return -(j / lam - lam / max(j, state.config.l2hmc_floor))


def l2hmc_surrogate_loss(traj, state, precond, model):
    delta = surrogate_delta(traj, precond, model)
    a = min(1.0, float(np.exp(-max(delta, -700.0)))) if np.isfinite(delta) else 0.0
    jump = surrogate_endpoint(traj, precond) - traj.q[0]
    j = a * float(jump @ jump)
    lam = state.lambda_ma if state.lambda_ma is not None else max(j, state.config.l2hmc_floor)
    return -(j / lam - lam / max(j, state.config.l2hmc_floor))


def l2hmc_gradient(traj, state, precond):
    floor = state.config.l2hmc_floor
    jump = traj.q[traj.L] - traj.q[0]
    j = traj.accept_prob * float(jump @ jump)
    lam = state.lambda_ma if state.lambda_ma is not None else max(j, floor)
    dloss_dj = -1.0 / lam
    if j > floor:
        dloss_dj -= lam / (j * j)
    out = np.zeros_like(precond.theta)
    _jump_value_and_grad(traj, precond, [(out, dloss_dj)])
    return out


# -- parameter and controller updates ------------------------------------


def adam_update(state, grad):
    """One bias-corrected Adam step on theta; non-finite gradients are a
    counted no-op so a single bad draw cannot derail the run."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        state.skip_count += 1
        return state
    cfg = state.config
    state.step += 1
    t = state.step
    state.adam_m = cfg.adam_beta1 * state.adam_m + (1 - cfg.adam_beta1) * grad
    state.adam_v = cfg.adam_beta2 * state.adam_v + (1 - cfg.adam_beta2) * grad * grad
    m_hat = state.adam_m / (1 - cfg.adam_beta1**t)
    v_hat = state.adam_v / (1 - cfg.adam_beta2**t)
    state.precond.theta = state.precond.theta - cfg.rho_theta * m_hat / (
        np.sqrt(v_hat) + cfg.adam_eps
    )
    return state


def update_beta(state, accept_prob):
    """Multiplicative drift of beta toward the target acceptance rate."""
    cfg = state.config
    lo, hi = cfg.beta_bounds
    state.beta = float(
        np.clip(state.beta * (1.0 + cfg.rho_beta * (accept_prob - cfg.alpha_star)), lo, hi)
    )
    return state


def update_gamma(state, pen):
    """Additive penalty-driven push of gamma, projected to its interval."""
    cfg = state.config
    lo, hi = cfg.gamma_bounds
    state.gamma = float(np.clip(state.gamma + cfg.rho_gamma * pen, lo, hi))
    return state


def update_lambda(state, jump_value):
    """Moving average of the acceptance-weighted squared jump, seeded from
    the first observation."""
    if state.lambda_ma is None:
        state.lambda_ma = float(jump_value)
    else:
        r = state.config.lambda_rate
        state.lambda_ma = float((1.0 - r) * state.lambda_ma + r * jump_value)
    if state.lambda_ma < state.config.l2hmc_floor:
        state.lambda_ma = state.config.l2hmc_floor
    return state
