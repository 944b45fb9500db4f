"""Numerical check of the log-probability / gradient-parameter product relation.

Along the ray t -> t*theta the cross-entropy gradient g satisfies

    log f(x, theta)[k0] - log f(x, 0)[k0] = -int_0^1 g(x, t theta) . theta dt

exactly. Freezing g at t = 1 gives the endpoint approximation
-g(x, theta) . theta, which is what the product significance score ranks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .models import ParamVector, check_onehot, loss_and_grad


@dataclass(frozen=True)
class LemmaReport:
    model_id: str
    x: list
    panels: int
    exact_lhs: float
    quadrature_rhs: float
    endpoint_rhs: float
    abs_gap_quadrature: float
    abs_gap_endpoint: float
    theta_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def simpson(values: np.ndarray, h: float) -> float:
    """Composite Simpson rule on an odd number of equally spaced samples."""
    n = values.size - 1
    if n < 2 or n % 2:
        raise ValueError("Simpson's rule needs an even number of panels >= 2")
    return float(h / 3.0 * (values[0] + values[-1] + 4.0 * values[1:-1:2].sum() + 2.0 * values[2:-1:2].sum()))


def line_integral(loss_fn, grad_fn, theta: np.ndarray, panels: int) -> tuple[float, float, float]:
    """(exact, quadrature, endpoint) for any loss along the ray t -> t*theta.

    exact is loss(0) - loss(theta); quadrature is -int_0^1 grad(t theta) . theta dt
    by composite Simpson; endpoint freezes the gradient at t = 1.
    """
    if panels < 2 or panels % 2:
        raise ValueError("panels must be even and >= 2")
    theta = np.asarray(theta, dtype=np.float64)
    exact = loss_fn(np.zeros_like(theta)) - loss_fn(theta)
    vals = np.array([float(grad_fn(t * theta) @ theta) for t in np.linspace(0.0, 1.0, panels + 1)])
    return exact, -simpson(vals, 1.0 / panels), -float(vals[-1])


def verify_integral(params: ParamVector, x, y, panels: int = 128, theta_scale: float = 1.0) -> LemmaReport:
    """Compare both sides of the identity, plus its endpoint approximation."""
    y = check_onehot(y, params.spec.num_classes)
    x = np.asarray(x, dtype=np.float64)

    def loss(theta):
        return loss_and_grad(params.with_theta(theta), x, y)[0]

    def grad(theta):
        return loss_and_grad(params.with_theta(theta), x, y)[1].values

    exact, quad, endpoint = line_integral(loss, grad, params.theta, panels)
    return LemmaReport(
        model_id=params.spec.name,
        x=x.reshape(-1).tolist(),
        panels=panels,
        exact_lhs=exact,
        quadrature_rhs=quad,
        endpoint_rhs=endpoint,
        abs_gap_quadrature=abs(exact - quad),
        abs_gap_endpoint=abs(exact - endpoint),
        theta_scale=theta_scale,
    )


def verify_lemma_approx(params: ParamVector, x, y, theta_scale: float, panels: int = 32) -> LemmaReport:
    """Same report with every parameter multiplied by ``theta_scale``."""
    if theta_scale <= 0:
        raise ValueError("theta_scale must be positive")
    return verify_integral(params.scaled(theta_scale), x, y, panels, theta_scale)


def convergence_slope(params: ParamVector, x, y, panels=(8, 32, 128)) -> float:
    """Least-squares slope of log(abs_gap_quadrature) against log(panels)."""
    gaps = [verify_integral(params, x, y, n).abs_gap_quadrature for n in panels]
    return float(np.polyfit(np.log(panels), np.log(np.maximum(gaps, 1e-300)), 1)[0])
