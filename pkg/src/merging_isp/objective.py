"""Mu-law tonemapping and the tonemapped L2 training loss."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tz
from .tensor import DomainError, ShapeError

MU_DEFAULT = 5e3


def mu_law(x, mu=MU_DEFAULT):
    """Logarithmic range compression log(1 + mu*x) / log(1 + mu).

    Maps [0,1] onto [0,1], strictly increasing and concave; differentiable,
    so it can sit inside the loss.
    """
    mu = float(mu)
    if mu <= 0:
        raise DomainError(f"mu_law: mu must be positive, got {mu}")
    x = tz._as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("mu_law: input must be nonnegative")
    return tz.div_scalar(tz.log1p_scaled(x, mu), math.log1p(mu))


def tonemap(x, mu=MU_DEFAULT):
    """Plain-array mu-law for evaluation and previews (no autodiff)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("tonemap: input must be nonnegative")
    return np.log1p(float(mu) * x) / math.log1p(float(mu))


def hdr_loss(prediction, target, mu=MU_DEFAULT):
    """Mean squared error between tonemapped prediction and target.

    The reduction is the mean over all elements, so the value is invariant
    to batch and patch size.
    """
    prediction = tz._as_tensor(prediction)
    target = tz._as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(
            f"hdr_loss: shape mismatch {prediction.shape} vs {target.shape}"
        )
    diff = tz.sub(mu_law(prediction, mu), mu_law(target, mu))
    return tz.mean(tz.square(diff))
