"""Central-finite-difference gradient checking.

Used by the test suite and the ``selftest`` CLI command. The numeric side
re-evaluates the forward function from scratch for every probe, so it stays
independent of the tape's backward rules.
"""

import numpy as np


def numerical_gradients(make_loss, params, step: float = 1e-6):
    """Central differences of ``make_loss(params)`` wrt each parameter.

    make_loss must rebuild the loss Tensor from the parameters' current
    ``.data`` on every call.
    """
    grads = []
    for p in params:
        flat = p.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(make_loss(params).data)
            flat[i] = orig - step
            minus = float(make_loss(params).data)
            flat[i] = orig
            num[i] = (plus - minus) / (2.0 * step)
        grads.append(num.reshape(p.shape))
    return grads


def max_relative_error(analytic, numeric) -> float:
    analytic = np.zeros_like(numeric) if analytic is None else np.asarray(analytic)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0


_TARGET_MAGNITUDE = 1e-5


def check_gradients(make_loss, params, step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    The loss is rescaled by a constant so its magnitude is ~1e-5 before
    differencing: the factor multiplies the analytic and numeric sides
    identically, while keeping the subtraction's cancellation noise below
    the comparison's 1e-8 denominator floor even for entries whose true
    gradient is zero.
    """
    from . import autodiff as ad

    first = float(make_loss(params).data)
    factor = _TARGET_MAGNITUDE / max(abs(first), _TARGET_MAGNITUDE)

    def scaled_loss(ps):
        return ad.scale(make_loss(ps), factor)

    for p in params:
        p.grad = None
    loss = scaled_loss(params)
    loss.backward()
    numeric = numerical_gradients(scaled_loss, params, step)
    return max(max_relative_error(p.grad, n) for p, n in zip(params, numeric))
