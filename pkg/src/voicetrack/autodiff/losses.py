"""Scalar losses built on the tensor ops."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, as_tensor

BCE_CLAMP = 1e-7


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff.astype(np.float64) ** 2), dtype=pred.dtype)
    return _make(out, (pred, target), lambda g: (2 * g * diff / n, -2 * g * diff / n), "mse_loss")


def gaussian_kl(mu, log_var) -> Tensor:
    """Mean over elements of ``mu^2 + sigma^2 - log sigma^2 - 1`` with ``sigma^2 = exp(log_var)``.

    This is twice the usual KL(N(mu, sigma^2) || N(0, 1)); the factor is
    absorbed by the loss weight.
    """
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ValueError("mu and log_var must share a shape")
    var = np.exp(log_var.data)
    n = mu.data.size
    terms = mu.data.astype(np.float64) ** 2 + var - log_var.data - 1.0
    out = np.asarray(terms.mean(), dtype=mu.dtype)
    return _make(out, (mu, log_var), lambda g: (2 * g * mu.data / n, g * (var - 1.0) / n), "gaussian_kl")


def bce_loss(y_hat, y) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [1e-7, 1 - 1e-7]."""
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype).reshape(y_hat.shape)
    p = np.clip(y_hat.data, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    terms = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    inside = (y_hat.data > BCE_CLAMP) & (y_hat.data < 1 - BCE_CLAMP)

    def back(g):
        return (g * inside * (-(y / p) + (1 - y) / (1 - p)) / n,)

    return _make(np.asarray(terms.mean(), dtype=y_hat.dtype), (y_hat,), back, "bce_loss")


def bce_with_logits(logits, y) -> Tensor:
    """``bce_loss(sigmoid(logits), y)`` evaluated stably from the logits."""
    logits = as_tensor(logits)
    a = logits.data
    y = np.asarray(y, dtype=logits.dtype).reshape(a.shape)
    n = a.size
    terms = np.logaddexp(0, a) - y * a
    p = 0.5 * (1 + np.tanh(0.5 * a))
    return _make(np.asarray(terms.mean(), dtype=logits.dtype), (logits,),
                 lambda g: (g * (p - y) / n,), "bce_with_logits")
