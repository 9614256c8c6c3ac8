"""Shared oracles for the test suite.

These are independent routes to quantities the library computes with
learned components, kept deliberately simple so they can be trusted.
"""

import numpy as np


def closed_form_embedding(fm, s, n_obs):
    """Exact conditional mean embedding for the Gaussian location task.

    Conditional on the sample mean s of n_obs unit-variance Gaussian rows,
    one row is N(s, (1 - 1/n) I), and the expectation of cos(w.x + b) under
    that law is cos(w.s + b) * exp(-0.5 * (1 - 1/n) * ||w||^2).
    """
    s = np.asarray(s, dtype=np.float64)
    w = fm.frequencies
    damp = np.exp(-0.5 * (1.0 - 1.0 / n_obs) * (w * w).sum(axis=1))
    return np.sqrt(2.0 / fm.n_features) * np.cos(w @ s + fm.phases) * damp


def fd_gradient(fn, x, h=1e-6):
    """Central finite differences of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g
