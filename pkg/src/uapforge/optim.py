"""The three update rules the attack composes.

Normalized gradient descent on flat parameters, l2-projected gradient descent
on data, and Adam with an l-infinity clamp handled by the caller. Gradients
with l2 norm below ZERO_GRAD_TOL skip the step instead of dividing by a tiny
norm, which keeps every budget invariant intact.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import require_finite

ZERO_GRAD_TOL = 1e-12

# Relative slack for the inside-the-ball test; keeps projection idempotent
# under floating-point rounding of the rescale.
_BALL_SLACK = 1e-12


def normalized_descent_step(theta, grad, alpha):
    """One step of theta - alpha * grad / ||grad||_2.

    The step has l2 length exactly alpha. A gradient with norm below
    ZERO_GRAD_TOL returns theta unchanged.
    """
    if theta.shape != grad.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    require_finite(grad, "gradient")
    norm = float(np.linalg.norm(grad))
    if norm < ZERO_GRAD_TOL:
        return theta
    return theta - (alpha / norm) * grad


@dataclass
class ProjectionSpec:
    """An l2 ball: center tensor and non-negative radius."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")


def l2_project(v, spec):
    """Map v onto the l2 ball around spec.center if it lies outside.

    Points already inside (up to relative rounding slack) are returned
    unchanged, so the projection is bit-wise idempotent.
    """
    if v.shape != spec.center.shape:
        raise ValueError(f"shape mismatch: v {v.shape}, center {spec.center.shape}")
    require_finite(v, "projection input")
    disp = v - spec.center
    norm = float(np.linalg.norm(disp))
    if norm <= spec.radius * (1.0 + _BALL_SLACK):
        return v
    return spec.center + disp * (spec.radius / norm)


def l2_pgd_step(x, grad, alpha, spec, clamp_box=False):
    """One l2-PGD descent step followed by projection onto spec's ball.

    x' = project(x - alpha * grad / ||grad||_2); with `clamp_box` the result
    is additionally clamped to the [0, 1] pixel box.
    """
    if x.shape != grad.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, grad {grad.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    require_finite(grad, "gradient")
    norm = float(np.linalg.norm(grad))
    if norm >= ZERO_GRAD_TOL:
        x = x - (alpha / norm) * grad
    x = l2_project(x, spec)
    if clamp_box:
        x = np.clip(x, 0.0, 1.0)
    return x


@dataclass
class AdamState:
    """Adam moments for one tensor; step_count increments once per update."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, shape, dtype=np.float32, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        return cls(
            m=np.zeros(shape, dtype=dtype),
            v=np.zeros(shape, dtype=dtype),
            beta1=beta1,
            beta2=beta2,
            eps_hat=eps_hat,
        )


def adam_step(state, grad, gamma):
    """Standard bias-corrected Adam update for a minimization gradient.

    Returns (update, new_state) where update = -gamma * m_hat / (sqrt(v_hat)
    + eps_hat). The attack maximizes by feeding the negated loss gradient.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if grad.shape != state.m.shape:
        raise ValueError(f"shape mismatch: grad {grad.shape}, state {state.m.shape}")
    require_finite(grad, "gradient")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * np.square(grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    update = -gamma * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    new_state = AdamState(
        m=m, v=v, step_count=t, beta1=state.beta1, beta2=state.beta2, eps_hat=state.eps_hat
    )
    return update, new_state
