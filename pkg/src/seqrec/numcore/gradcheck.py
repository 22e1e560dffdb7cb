"""Central finite-difference gradient checking.

Always runs in 64-bit; callers build their scalar function with float64
parameters and dropout disabled. Non-deterministic functions are rejected by
comparing two forward passes bit for bit.
"""

from __future__ import annotations

import numpy as np

from seqrec.numcore.tensor import NumcoreError, Tape, Tensor, backward


class NondeterministicError(NumcoreError):
    pass


class PrecisionError(NumcoreError):
    pass


def _as_param_dict(params) -> dict[str, Tensor]:
    if isinstance(params, dict):
        return params
    return {f"p{i}": t for i, t in enumerate(params)}


def finite_difference_check(scalar_fn, params, epsilon: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - numeric| divided by
    max(1, |analytic|, |numeric|), with central differences of step epsilon.

    scalar_fn takes no arguments and returns a scalar Tensor computed from
    the given parameters (perturbed in place during the numeric sweep).
    """
    params = _as_param_dict(params)
    for name, t in params.items():
        if t.dtype != np.float64:
            raise PrecisionError(f"parameter {name!r} must be float64")
        if not t.requires_grad:
            raise NumcoreError(f"parameter {name!r} does not require grad")

    v1 = float(scalar_fn().data)
    v2 = float(scalar_fn().data)
    if v1 != v2:
        raise NondeterministicError(
            "scalar_fn returned different values on two passes; "
            "disable dropout/randomness before checking")

    with Tape() as tape:
        loss = scalar_fn()
    grads = backward(tape, loss)

    worst = 0.0
    for name, t in params.items():
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(scalar_fn().data)
            flat[i] = orig - epsilon
            f_minus = float(scalar_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]),
                                                abs(numeric))
            if err > worst:
                worst = err
    return worst
