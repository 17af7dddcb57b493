"""Central finite-difference gradient checking, independent of the tape.

The numeric side only ever calls the forward computation on perturbed
copies; it never touches the backward pass it is checking.
"""

import numpy as np

from rmiseg import tensor as T

FD_STEP = 1e-5
REL_TOL = 1e-4


def numeric_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus = x.copy()
        plus[idx] += step
        minus = x.copy()
        minus[idx] -= step
        grad[idx] = (f(plus) - f(minus)) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def tape_value_and_grads(build, params):
    """Run ``build(params) -> scalar Tensor`` under a fresh tape.

    Returns (loss value, list of gradient arrays aligned with params).
    """
    with T.Tape() as tape:
        loss = build(params)
    grads = tape.backward(loss, wrt=params)
    return loss.item(), [grads[p] for p in params]


def check_grads(build, params, rel_tol: float = REL_TOL, step: float = FD_STEP) -> float:
    """Compare tape gradients against finite differences for every param.

    ``build`` maps a list of Tensors to a scalar Tensor and must be pure.
    Returns the worst relative error seen.
    """
    _, analytic = tape_value_and_grads(build, params)
    worst = 0.0
    for i, p in enumerate(params):

        def f(x, i=i):
            trial = list(params)
            trial[i] = T.Tensor(x, requires_grad=True)
            return build(trial).item()

        worst = max(worst, max_rel_err(analytic[i], numeric_gradient(f, p.data, step)))
    assert worst < rel_tol, f"gradient mismatch: max rel err {worst:.3e} >= {rel_tol}"
    return worst
