"""Reference implementations shared by the unit and acceptance tests.

They are written from the textbook equations and share no code with the
package.
"""
import numpy as np


def assemble_dense(mesh, params):
    """Whole-field implicit step in per-unit-volume form.

    ``M T_new = T_old + b + s q``; each row is the cell balance divided by its
    heat capacity. Written independently of the package's column solver.
    """
    n = mesh.nx * mesh.ny
    m = np.eye(n)
    b = np.zeros(n)
    s = np.zeros(n)
    alpha = params.k_c / (params.rho * params.c_p)
    r = alpha * mesh.dt / mesh.dy ** 2
    for i in range(mesh.nx):
        for j in range(mesh.ny):
            row = i * mesh.ny + j
            y = (j + 0.5) * mesh.dy
            c = 6 * params.u_m * y / params.height * (1 - y / params.height) * mesh.dt / mesh.dx
            m[row, row] += c
            if i > 0:
                m[row, row - mesh.ny] -= c
            else:
                b[row] += c * params.t_in
            if j > 0:
                m[row, row] += r
                m[row, row - 1] -= r
            if j < mesh.ny - 1:
                m[row, row] += r
                m[row, row + 1] -= r
            else:
                s[row] = mesh.dt / (params.rho * params.c_p * mesh.dy)
    return m, b, s


def kalman_oracle(a, h, q, r, m0, p0, ys):
    """Plain Kalman filter and full RTS smoother written out step by step."""
    n, d = len(ys), a.shape[0]
    xf = [np.array(m0, dtype=float)]
    pf = [np.array(p0, dtype=float)]
    xp = [None]
    pp = [None]
    for y in ys:
        m = a @ xf[-1]
        p = a @ pf[-1] @ a.T + q
        s = h @ p @ h + r
        k = p @ h / s
        xp.append(m)
        pp.append(p)
        xf.append(m + k * (y - h @ m))
        pf.append((np.eye(d) - np.outer(k, h)) @ p)
    xs, ps = list(xf), list(pf)
    for k in range(n - 1, -1, -1):
        g = pf[k] @ a.T @ np.linalg.inv(pp[k + 1])
        xs[k] = xf[k] + g @ (xs[k + 1] - xp[k + 1])
        ps[k] = pf[k] + g @ (ps[k + 1] - pp[k + 1]) @ g.T
    return np.array(xf), np.array(pf), np.array(xs), np.array(ps)
