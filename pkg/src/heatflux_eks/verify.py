"""Built-in self-checks run by ``heatflux-eks verify``.

Each check compares a production code path against an independent,
deliberately naive reference (dense solves, textbook Kalman recursions,
finite differences) and reports pass/fail with the observed discrepancy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .filtering import FixedLagSmoother, GaussianState, NoiseModel
from .mlp import batch_jacobian, forward, init_model
from .physics import Mesh, PhysicalParams, bulk_outlet_rise, get_solver, steady_state, uniform_field


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.3g} (limit {self.threshold:.3g}, {self.seconds:.2f} s)"


def _timed(fn):
    t0 = time.perf_counter()
    value = fn()
    return value, time.perf_counter() - t0


# -- forward solver -----------------------------------------------------------

def dense_system(mesh: Mesh, params: PhysicalParams):
    """Assemble the whole-field implicit step as one dense linear system.

    Returns ``(A, B, c, s)`` with ``A T_new = B T_old + c + s q``. Built cell by
    cell from the finite-volume balance, independent of the column solver.
    """
    n = mesh.nx * mesh.ny
    a = np.zeros((n, n))
    b = np.zeros((n, n))
    c = np.zeros(n)
    s = np.zeros(n)
    y = (np.arange(mesh.ny) + 0.5) * mesh.dy
    u = 6.0 * params.u_m * (y / params.height) * (1.0 - y / params.height)
    rc = params.rho * params.c_p
    for i in range(mesh.nx):
        for j in range(mesh.ny):
            p = i * mesh.ny + j
            cap = rc * mesh.dx * mesh.dy / mesh.dt
            a[p, p] += cap
            b[p, p] += cap
            # upwind advection in x (flow to +x), face length dy
            flow = rc * u[j] * mesh.dy
            a[p, p] += flow
            if i == 0:
                c[p] += flow * params.t_in
            else:
                a[p, p - mesh.ny] -= flow
            # conduction through the y faces, face length dx
            g = params.k_c * mesh.dx / mesh.dy
            for nb in (j - 1, j + 1):
                if 0 <= nb < mesh.ny:
                    a[p, p] += g
                    a[p, i * mesh.ny + nb] -= g
            if j == mesh.ny - 1:
                s[p] = mesh.dx
    return a, b, c, s


def check_forward_oracle(steps: int = 20, tol: float = 1e-10) -> CheckResult:
    mesh = Mesh(nx=5, ny=8, dx=0.2, dy=0.0125, dt=0.01)
    params = PhysicalParams()

    def run():
        a, b, c, s = dense_system(mesh, params)
        solver = get_solver(mesh, params)
        t_ref = uniform_field(mesh, params)
        t = t_ref.copy()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(steps):
            q = float(rng.uniform(0.0, 5000.0))
            t_ref = np.linalg.solve(a, b @ t_ref + c + s * q)
            t = solver.step(t, q)
            worst = max(worst, float(np.max(np.abs(t - t_ref) / np.abs(t_ref))))
        return worst

    worst, sec = _timed(run)
    return CheckResult("forward solver vs dense solve (5x8, 20 steps)", worst <= tol, worst, tol, sec)


def check_energy_balance(q: float = 2500.0, tol: float = 0.02) -> CheckResult:
    params = PhysicalParams()
    mesh = Mesh.for_params(params)

    def run():
        rise = bulk_outlet_rise(steady_state(q, mesh, params), mesh, params)
        analytic = q * params.length / (params.rho * params.c_p * params.u_m * params.height)
        return abs(rise - analytic) / analytic

    err, sec = _timed(run)
    return CheckResult("steady outlet rise vs q*L/(rho*c_p*u_m*h)", err <= tol, err, tol, sec)


# -- filtering ----------------------------------------------------------------

class LinearModel:
    """``x_{k+1} = A x_k`` exposed through the transfer-model surface."""

    def __init__(self, a, h):
        self.a = np.asarray(a, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.dim = self.a.shape[0]

    def transfer(self, x):
        return self.a @ x

    def transfer_batch(self, xs):
        return np.atleast_2d(xs) @ self.a.T

    def jacobian(self, x):
        return self.a.copy()

    def measurement_row(self):
        return self.h


def dense_kalman_rts(a, h, q, r, m0, p0, ys):
    """Textbook Kalman filter followed by a full RTS pass (all in one go)."""
    n = len(ys)
    dim = a.shape[0]
    mp = np.zeros((n + 1, dim))
    pp = np.zeros((n + 1, dim, dim))
    mf = np.zeros((n + 1, dim))
    pf = np.zeros((n + 1, dim, dim))
    mf[0], pf[0] = m0, p0
    for k in range(1, n + 1):
        mp[k] = a @ mf[k - 1]
        pp[k] = a @ pf[k - 1] @ a.T + q
        s = h @ pp[k] @ h + r
        kg = pp[k] @ h / s
        mf[k] = mp[k] + kg * (ys[k - 1] - h @ mp[k])
        pf[k] = pp[k] - np.outer(kg, h @ pp[k])
    ms = mf.copy()
    ps = pf.copy()
    for k in range(n - 1, -1, -1):
        g = pf[k] @ a.T @ np.linalg.inv(pp[k + 1])
        ms[k] = mf[k] + g @ (ms[k + 1] - mp[k + 1])
        ps[k] = pf[k] + g @ (ps[k + 1] - pp[k + 1]) @ g.T
    return mf, ms, ps


def check_linear_kalman(tol: float = 1e-10) -> CheckResult:
    def run():
        rng = np.random.default_rng(1)
        a = np.array([[1.0, 0.1], [0.0, 1.0]])
        h = np.array([1.0, 0.0])
        q = np.diag([1e-3, 1e-2])
        r = 0.25
        m0 = np.zeros(2)
        p0 = np.eye(2)
        ys = np.cumsum(rng.normal(size=60)) * 0.1 + rng.normal(scale=0.5, size=60)
        worst = 0.0
        mf, _, _ = dense_kalman_rts(a, h, q, r, m0, p0, ys)
        sm = FixedLagSmoother(LinearModel(a, h), NoiseModel(q, r), 0, GaussianState(m0, p0))
        for k, y in enumerate(ys, start=1):
            _, st = sm.update(y)
            worst = max(worst, float(np.max(np.abs(st.mean - mf[k]))))
        n_f = 8
        sm = FixedLagSmoother(LinearModel(a, h), NoiseModel(q, r), n_f, GaussianState(m0, p0))
        for j, y in enumerate(ys, start=1):
            out = sm.update(y)
            if out is None:
                continue
            # fixed-lag output at k equals the full smoother on y_1..y_{k+n_f}
            k, st = out
            _, ms, ps = dense_kalman_rts(a, h, q, r, m0, p0, ys[:j])
            worst = max(worst, float(np.max(np.abs(st.mean - ms[k]))), float(np.max(np.abs(st.cov - ps[k]))))
        return worst

    worst, sec = _timed(run)
    return CheckResult("EKF/RTS vs dense Kalman smoother (2-state linear)", worst <= tol, worst, tol, sec)


# -- networks -----------------------------------------------------------------

def check_mlp_jacobian(n_nets: int = 100, tol: float = 1e-5) -> CheckResult:
    def run():
        worst = 0.0
        for seed in range(n_nets):
            rng = np.random.default_rng(seed)
            sizes = (int(rng.integers(1, 7)), int(rng.integers(1, 12)), int(rng.integers(1, 6)))
            model = init_model(sizes, seed=seed)
            x = rng.normal(size=(3, sizes[0]))
            _, jac = batch_jacobian(model, x)
            theta = model.get_params()
            h = 1e-6
            fd = np.empty_like(jac)
            for p in range(theta.size):
                tp = theta.copy()
                tm = theta.copy()
                tp[p] += h
                tm[p] -= h
                fd[:, :, p] = (forward(model.with_params(tp), x) - forward(model.with_params(tm), x)) / (2 * h)
            scale = max(1.0, float(np.max(np.abs(fd))))
            worst = max(worst, float(np.max(np.abs(jac - fd))) / scale)
        return worst

    worst, sec = _timed(run)
    return CheckResult(f"backprop vs finite-difference Jacobian ({n_nets} nets)", worst < tol, worst, tol, sec)


def run_all() -> list[CheckResult]:
    return [check_forward_oracle(), check_energy_balance(), check_linear_kalman(), check_mlp_jacobian()]
