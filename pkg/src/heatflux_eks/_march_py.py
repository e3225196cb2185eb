"""Numpy fallback for the column march (same contract as ``_march``).

Uses the dense inverse of the shared column matrix, so each column costs one
small matmul over the whole batch instead of a scalar Thomas sweep.
"""
import numpy as np


def march_columns(t_old, q, courant, diffusion, source, t_in, inv_beta, gamma, nx, ny, a_inv=None):
    t_old = np.asarray(t_old, dtype=float)
    nb = t_old.shape[0]
    if a_inv is None:
        a_inv = _inverse_from_factors(inv_beta, gamma, diffusion)
    grid = t_old.reshape(nb, nx, ny)
    out = np.empty_like(grid)
    upstream = np.full((nb, ny), t_in)
    top = np.zeros((nb, ny))
    top[:, -1] = source * np.asarray(q, dtype=float)
    for i in range(nx):
        rhs = grid[:, i, :] + courant * upstream + top
        out[:, i, :] = rhs @ a_inv.T
        upstream = out[:, i, :]
    return out.reshape(nb, nx * ny)


def _inverse_from_factors(inv_beta, gamma, diffusion):
    # rebuild the tridiagonal matrix from its Thomas factors
    beta = 1.0 / np.asarray(inv_beta)
    gamma = np.asarray(gamma)
    n = beta.size
    diag = beta.copy()
    diag[1:] += -diffusion * gamma[:-1]
    a = np.diag(diag) + np.diag(np.full(n - 1, -diffusion), 1) + np.diag(np.full(n - 1, -diffusion), -1)
    return np.linalg.inv(a)
