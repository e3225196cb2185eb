"""Finite-volume solver for the 2D channel with a heated upper wall.

The governing equation is transient advection in X (parabolic profile, no
X-diffusion) plus conduction in Y. Time marching is implicit Euler, advection
is first-order upwind, conduction is second-order central. Because the flow is
unidirectional and there is no X-diffusion, the implicit system decouples into
one tridiagonal solve per column, marched from the inlet downstream.

Fields are flat float64 arrays of length ``nx*ny`` with flat index
``i*ny + j`` (column ``i`` along the flow, row ``j`` from the adiabatic bottom
wall upwards).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from ._march_py import march_columns as _pure_march


class DomainError(ValueError):
    """A coordinate or index lies outside the computational domain."""


@dataclass(frozen=True)
class PhysicalParams:
    k_c: float = 0.243
    rho: float = 1.29
    c_p: float = 1005.0
    length: float = 1.0
    height: float = 0.1
    u_m: float = 0.033
    t_in: float = 300.0

    def __post_init__(self):
        for name in ("k_c", "rho", "c_p", "length", "height", "u_m", "t_in"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")

    @property
    def diffusivity(self) -> float:
        return self.k_c / (self.rho * self.c_p)


@dataclass(frozen=True)
class Mesh:
    nx: int = 25
    ny: int = 50
    dx: float = 0.04
    dy: float = 0.002
    dt: float = 0.01

    def __post_init__(self):
        if self.nx < 1 or self.ny < 2:
            raise ValueError("mesh needs nx >= 1 and ny >= 2")
        if not (self.dx > 0 and self.dy > 0 and self.dt > 0):
            raise ValueError("dx, dy, dt must be > 0")

    @classmethod
    def for_params(cls, params: PhysicalParams, nx: int = 25, ny: int = 50, dt: float = 0.01) -> "Mesh":
        return cls(nx=nx, ny=ny, dx=params.length / nx, dy=params.height / ny, dt=dt)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    def flat(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise DomainError(f"cell ({i}, {j}) outside {self.nx}x{self.ny} mesh")
        return i * self.ny + j

    def with_dt(self, dt: float) -> "Mesh":
        return Mesh(self.nx, self.ny, self.dx, self.dy, dt)


def check_mesh(mesh: Mesh, params: PhysicalParams) -> None:
    if not np.isclose(mesh.nx * mesh.dx, params.length, rtol=1e-9):
        raise ValueError(f"nx*dx = {mesh.nx * mesh.dx} does not match length {params.length}")
    if not np.isclose(mesh.ny * mesh.dy, params.height, rtol=1e-9):
        raise ValueError(f"ny*dy = {mesh.ny * mesh.dy} does not match height {params.height}")


def velocity_at(params: PhysicalParams, y):
    """Fully developed parabolic profile ``6 u_m (y/h)(1 - y/h)``."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < 0) or np.any(y_arr > params.height) or not np.all(np.isfinite(y_arr)):
        raise DomainError(f"y must lie in [0, {params.height}]")
    eta = y_arr / params.height
    u = 6.0 * params.u_m * eta * (1.0 - eta)
    return float(u) if u.ndim == 0 else u


def node_index(x: float, y: float, mesh: Mesh) -> tuple[int, int]:
    """Cell whose center is nearest to ``(x, y)``; ties go to the lower index."""
    if not (0.0 <= x <= mesh.nx * mesh.dx + 1e-12 and 0.0 <= y <= mesh.ny * mesh.dy + 1e-12):
        raise DomainError(f"point ({x}, {y}) outside the domain")
    return _nearest(x, mesh.x_centers()), _nearest(y, mesh.y_centers())


def _nearest(value: float, centers: np.ndarray) -> int:
    dist = np.abs(centers - value)
    # snap round-off so exact ties resolve to the lower index
    best = dist.min()
    return int(np.flatnonzero(dist <= best + 1e-12 * max(1.0, abs(value)))[0])


class ColumnSolver:
    """Pre-factored implicit step operator for one (mesh, params) pair.

    All columns share the same tridiagonal matrix
    ``(1 + c_j + r*n_j) T_j - r T_{j-1} - r T_{j+1}``, where ``c_j`` is the
    upwind Courant number at row ``j``, ``r`` the diffusion number and ``n_j``
    the number of vertical neighbours.
    """

    def __init__(self, mesh: Mesh, params: PhysicalParams, backend: str | None = None):
        check_mesh(mesh, params)
        self.mesh = mesh
        self.params = params
        self.courant = velocity_at(params, mesh.y_centers()) * mesh.dt / mesh.dx
        self.diffusion = params.diffusivity * mesh.dt / mesh.dy**2
        self.source = mesh.dt / (params.rho * params.c_p * mesh.dy)
        ny = mesh.ny
        neighbours = np.full(ny, 2.0)
        neighbours[0] = neighbours[-1] = 1.0
        self.diag = 1.0 + self.courant + self.diffusion * neighbours
        # strict diagonal dominance guarantees a breakdown-free Thomas sweep
        off = np.full(ny, 2.0 * self.diffusion)
        off[0] = off[-1] = self.diffusion
        if not np.all(self.diag > off):
            raise RuntimeError("column matrix is not diagonally dominant")
        beta = np.empty(ny)
        gamma = np.empty(ny)
        beta[0] = self.diag[0]
        gamma[0] = -self.diffusion / beta[0]
        for j in range(1, ny):
            beta[j] = self.diag[j] + self.diffusion * gamma[j - 1]
            gamma[j] = -self.diffusion / beta[j]
        self.inv_beta = 1.0 / beta
        self.gamma = gamma
        self.a_inv = np.linalg.inv(self.matrix())
        if backend is None:
            backend = _kernels.BACKEND
        if backend == "cython" and _kernels.compiled_march_columns is None:
            raise RuntimeError("compiled kernel not available")
        self.backend = backend

    def matrix(self) -> np.ndarray:
        """Dense column matrix (ny x ny)."""
        ny = self.mesh.ny
        a = np.diag(self.diag)
        idx = np.arange(ny - 1)
        a[idx, idx + 1] = -self.diffusion
        a[idx + 1, idx] = -self.diffusion
        return a

    def step_batch(self, fields: np.ndarray, q) -> np.ndarray:
        """Advance ``fields`` (batch, nx*ny) with per-member fluxes ``q``."""
        fields = np.ascontiguousarray(fields, dtype=np.float64)
        if fields.ndim != 2 or fields.shape[1] != self.mesh.size:
            raise ValueError(f"expected fields of shape (batch, {self.mesh.size}), got {fields.shape}")
        q = np.ascontiguousarray(np.broadcast_to(np.asarray(q, dtype=np.float64), (fields.shape[0],)))
        if not (np.all(np.isfinite(fields)) and np.all(np.isfinite(q))):
            raise ValueError("non-finite temperature or heat flux")
        args = (fields, q, self.courant, self.diffusion, self.source, self.params.t_in,
                self.inv_beta, self.gamma, self.mesh.nx, self.mesh.ny)
        if self.backend == "cython":
            return _kernels.compiled_march_columns(*args)
        return _pure_march(*args, a_inv=self.a_inv)

    def step(self, field: np.ndarray, q: float) -> np.ndarray:
        return self.step_batch(np.asarray(field, dtype=np.float64)[None, :], q)[0]


@lru_cache(maxsize=32)
def get_solver(mesh: Mesh, params: PhysicalParams) -> ColumnSolver:
    return ColumnSolver(mesh, params)


def uniform_field(mesh: Mesh, params: PhysicalParams) -> np.ndarray:
    return np.full(mesh.size, params.t_in, dtype=np.float64)


def advance_step(field: np.ndarray, q: float, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> np.ndarray:
    """One implicit time step of the full field under wall flux ``q``."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (mesh.size,):
        raise ValueError(f"field must have shape ({mesh.size},), got {field.shape}")
    return get_solver(mesh, params).step(field, q)


@dataclass
class TransientResult:
    probes: np.ndarray  # (steps, n_probes), temperature after each step
    final: np.ndarray
    times: np.ndarray  # time at the end of each step


def run_transient(q_signal, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams(),
                  record=(), initial: np.ndarray | None = None) -> TransientResult:
    """Chain ``advance_step`` from a uniform inlet-temperature field.

    ``q_signal`` is a :class:`~heatflux_eks.signals.FluxSignal` or a plain
    array of samples; sample ``k`` drives the step from ``t_k`` to ``t_k+1``.
    ``record`` holds flat cell indices.
    """
    samples = np.asarray(getattr(q_signal, "samples", q_signal), dtype=float)
    signal_dt = getattr(q_signal, "dt", None)
    if signal_dt is not None and not np.isclose(signal_dt, mesh.dt, rtol=1e-9):
        raise ValueError(f"signal dt {signal_dt} does not match mesh dt {mesh.dt}")
    record = [int(r) for r in record]
    for r in record:
        if not 0 <= r < mesh.size:
            raise DomainError(f"probe index {r} out of range for {mesh.size} cells")
    solver = get_solver(mesh, params)
    field = uniform_field(mesh, params) if initial is None else np.array(initial, dtype=float)
    probes = np.empty((samples.size, len(record)))
    for k, q in enumerate(samples):
        field = solver.step(field, q)
        probes[k] = field[record]
    times = (np.arange(samples.size) + 1) * mesh.dt
    return TransientResult(probes=probes, final=field, times=times)


def field_history(q_signal, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> np.ndarray:
    """All fields ``T_0 .. T_n`` as an array of shape (n+1, nx*ny)."""
    samples = np.asarray(getattr(q_signal, "samples", q_signal), dtype=float)
    solver = get_solver(mesh, params)
    out = np.empty((samples.size + 1, mesh.size))
    out[0] = uniform_field(mesh, params)
    for k, q in enumerate(samples):
        out[k + 1] = solver.step(out[k], q)
    return out


def steady_state(q: float, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams(),
                 dt: float = 20.0, tol: float = 1e-10, max_steps: int = 10_000) -> np.ndarray:
    """Step with a large implicit time step until the field stops changing."""
    coarse = mesh.with_dt(dt)
    solver = ColumnSolver(coarse, params, backend=get_solver(mesh, params).backend)
    field = uniform_field(mesh, params)
    for _ in range(max_steps):
        new = solver.step(field, q)
        if np.max(np.abs(new - field)) < tol * max(1.0, np.max(np.abs(new))):
            return new
        field = new
    raise RuntimeError("steady state not reached")


def bulk_outlet_rise(field: np.ndarray, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> float:
    """Velocity-weighted (mixing-cup) temperature rise in the last column."""
    u = velocity_at(params, mesh.y_centers())
    outlet = field.reshape(mesh.nx, mesh.ny)[-1]
    return float(np.sum(u * (outlet - params.t_in)) / np.sum(u))
