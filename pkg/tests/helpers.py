"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np


def fd_grad(build_loss, param_tensor, h=1e-5):
    """Central differences with respect to every entry of one parameter.

    build_loss re-runs the forward pass and returns the scalar loss as a
    float; the parameter is perturbed in place and restored.
    """
    flat = param_tensor.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp = build_loss()
        flat[i] = old - h
        lm = build_loss()
        flat[i] = old
        g[i] = (lp - lm) / (2.0 * h)
    return g.reshape(param_tensor.data.shape)


def max_rel_err(analytic, fd):
    """max |analytic - fd| / max(|fd|, 1e-8), elementwise."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)))
