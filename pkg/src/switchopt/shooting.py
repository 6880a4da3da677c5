"""Explicit Euler matching conditions shared by the transcriptions.

For intervals k = 0..K-1 with step ``h_k`` and left time ``t_k`` the
matching residual is ``x_{k+1} - x_k - h_k f(x_k, u_k, c_k, t_k)``.
"""

import numpy as np


def full_inputs(spec, free_values, fixed_mask):
    """Insert fixed continuous inputs into a ``(K, n_free)`` array."""
    K = free_values.shape[0]
    C = np.empty((K, spec.continuous_input_dim))
    C[:, fixed_mask] = spec.continuous_input_bounds[fixed_mask, 0]
    C[:, ~fixed_mask] = free_values
    return C


def residuals(spec, X, U, C, T, H):
    F = spec.dynamics(X[:-1], U, C, T)
    return X[1:] - X[:-1] - H[:, None] * F


def residual_derivatives(spec, X, U, C, T, H):
    """Blocks of the matching-residual Jacobian.

    Returns a dict with ``x_left (K,nx,nx)``, ``u (K,nx,nu)``, ``c (K,nx,nc)``,
    ``h (K,nx)`` and ``t (K,nx)``; the block for ``x_{k+1}`` is the identity.
    """
    F = spec.dynamics(X[:-1], U, C, T)
    fx, fu, fc, ft = spec.dynamics_jacobians(X[:-1], U, C, T)
    nx = X.shape[1]
    Hc = H[:, None, None]
    return {
        "x_left": -(np.eye(nx)[None] + Hc * fx),
        "u": -Hc * fu,
        "c": -Hc * fc,
        "h": -F,
        "t": -H[:, None] * ft,
    }


def block_coo(row_index, col_index, values):
    """COO triplets for dense blocks: rows ``(K, a)``, cols ``(K, b)``, values ``(K, a, b)``."""
    K, a = row_index.shape
    b = col_index.shape[1]
    rows = np.broadcast_to(row_index[:, :, None], (K, a, b))
    cols = np.broadcast_to(col_index[:, None, :], (K, a, b))
    return rows, cols, values
