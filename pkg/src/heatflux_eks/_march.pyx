# cython: language_level=3
"""Compiled column march for the implicit upwind/central scheme.

Every column shares one tridiagonal matrix, so the caller passes its
pre-computed Thomas factors (``inv_beta``, ``gamma``) and the kernel only
does forward/back substitution, column after column in the flow direction.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def march_columns(const double[:, ::1] t_old, const double[::1] q,
                  const double[::1] courant, double diffusion, double source,
                  double t_in, const double[::1] inv_beta,
                  const double[::1] gamma, Py_ssize_t nx, Py_ssize_t ny):
    """Advance a batch of fields one implicit step.

    ``t_old`` has shape (batch, nx*ny), column-major over the grid (flat
    index ``i*ny + j``). Returns a new array of the same shape.
    """
    cdef Py_ssize_t nb = t_old.shape[0]
    cdef Py_ssize_t b, i, j, col, up
    cdef double rhs, z_prev
    out_arr = np.empty((nb, nx * ny), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] z = np.empty(ny, dtype=np.float64)

    for b in range(nb):
        for i in range(nx):
            col = i * ny
            up = col - ny
            # forward substitution, sub-diagonal is -diffusion everywhere
            z_prev = 0.0
            for j in range(ny):
                rhs = t_old[b, col + j]
                if i == 0:
                    rhs += courant[j] * t_in
                else:
                    rhs += courant[j] * out[b, up + j]
                if j == ny - 1:
                    rhs += source * q[b]
                z_prev = (rhs + diffusion * z_prev) * inv_beta[j]
                z[j] = z_prev
            out[b, col + ny - 1] = z[ny - 1]
            for j in range(ny - 2, -1, -1):
                out[b, col + j] = z[j] - gamma[j] * out[b, col + j + 1]
    return out_arr
