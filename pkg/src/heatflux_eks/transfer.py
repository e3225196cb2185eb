"""State-transfer models for the Kalman recursion.

Both realizations expose the same duck-typed surface used by
:mod:`heatflux_eks.filtering`:

``dim``
    state dimension
``transfer(x)`` / ``transfer_batch(X)``
    one-step state map; the heat flux is carried over unchanged
``jacobian(x)``
    central-difference Jacobian of the transfer
``measurement_row()``
    selector of the sensor temperature

:class:`CfdTransferModel` uses the full field plus flux (``nx*ny + 1``
components); :class:`AnnTransferModel` uses the six-component reduced state
with one network for transfer and another for sensitivities.
"""
from __future__ import annotations

import numpy as np

from .datasets import local_cells, perturbation_steps
from .mlp import MlpModel, ModelMismatchError, predict
from .physics import Mesh, PhysicalParams, get_solver


def numeric_jacobian(model, state, eps: float = 1e-4) -> np.ndarray:
    """Central differences with per-component steps ``eps*|x_j|`` (floor 1e-6).

    ``model`` is either an object with ``transfer_batch`` or a callable that
    maps a batch ``(B, n)`` of states to ``(B, m)`` outputs. All ``2n``
    perturbed states are evaluated in a single batch.
    """
    fn = getattr(model, "transfer_batch", model)
    x = np.asarray(state, dtype=float)
    n = x.size
    h = perturbation_steps(x, eps)
    batch = np.tile(x, (2 * n, 1))
    idx = np.arange(n)
    batch[2 * idx, idx] += h
    batch[2 * idx + 1, idx] -= h
    out = np.asarray(fn(batch), dtype=float)
    return ((out[0::2] - out[1::2]) / (2.0 * h)[:, None]).T


def measurement_row(model) -> np.ndarray:
    return model.measurement_row()


class CfdTransferModel:
    """Full-state transfer: every cell temperature plus the wall flux."""

    def __init__(self, sensor: tuple[int, int], mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams(),
                 eps: float = 1e-4):
        self.mesh = mesh
        self.params = params
        self.sensor = tuple(sensor)
        self.sensor_index = mesh.flat(*sensor)
        self.eps = eps
        self.dim = mesh.size + 1
        self._solver = get_solver(mesh, params)

    def transfer_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out = np.empty_like(states)
        out[:, :-1] = self._solver.step_batch(states[:, :-1], states[:, -1])
        out[:, -1] = states[:, -1]
        return out

    def transfer(self, state: np.ndarray) -> np.ndarray:
        return self.transfer_batch(state[None, :])[0]

    def jacobian(self, state: np.ndarray) -> np.ndarray:
        f = numeric_jacobian(self, state, self.eps)
        f[-1] = 0.0
        f[-1, -1] = 1.0
        return f

    def measurement_row(self) -> np.ndarray:
        h = np.zeros(self.dim)
        h[self.sensor_index] = 1.0
        return h

    def initial_mean(self, q0: float = 0.0) -> np.ndarray:
        return np.append(np.full(self.mesh.size, self.params.t_in), q0)

    def reduce(self, state: np.ndarray) -> np.ndarray:
        """Reduced six-component view of a full state."""
        cells = local_cells(self.sensor, self.mesh)
        return np.append(state[cells], state[-1])


def cfd_transfer(state: np.ndarray, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    solver = get_solver(mesh, params)
    return np.append(solver.step(state[:-1], state[-1]), state[-1])


class AnnTransferModel:
    """Reduced-state transfer served by two surrogate networks."""

    dim = 6

    def __init__(self, transfer_net: MlpModel, sensitivity_net: MlpModel, eps: float = 1e-4,
                 sensor: tuple[int, int] | None = None):
        for name, net in (("transfer", transfer_net), ("sensitivity", sensitivity_net)):
            if net.layer_sizes[0] != 6 or net.layer_sizes[-1] != 5:
                raise ModelMismatchError(f"{name} network must map 6 inputs to 5 outputs")
            if net.standardizer is None:
                raise ModelMismatchError(f"{name} network has no standardizer")
        a, b = transfer_net.manifest, sensitivity_net.manifest
        for key in ("sensor", "corpus_hash", "mesh"):
            if a.get(key) != b.get(key):
                raise ModelMismatchError(f"transfer and sensitivity networks disagree on {key}: {a.get(key)} vs {b.get(key)}")
        if sensor is not None and a.get("sensor") is not None and list(a["sensor"]) != list(sensor):
            raise ModelMismatchError(f"networks were trained for sensor {a['sensor']}, not {list(sensor)}")
        self.transfer_net = transfer_net
        self.sensitivity_net = sensitivity_net
        self.eps = eps

    def _check(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != 6:
            raise ValueError("reduced state has six components")
        if not np.all(np.isfinite(states)):
            raise ValueError("non-finite reduced state")
        return states

    def _apply(self, net: MlpModel, states: np.ndarray) -> np.ndarray:
        states = self._check(states)
        out = np.empty_like(states)
        out[:, :5] = predict(net, states)
        out[:, 5] = states[:, 5]
        return out

    def transfer_batch(self, states: np.ndarray) -> np.ndarray:
        return self._apply(self.transfer_net, states)

    def transfer(self, state: np.ndarray) -> np.ndarray:
        return self.transfer_batch(state)[0]

    def sensitivity_batch(self, states: np.ndarray) -> np.ndarray:
        return self._apply(self.sensitivity_net, states)

    def jacobian(self, state: np.ndarray) -> np.ndarray:
        f = numeric_jacobian(self.sensitivity_batch, self._check(state)[0], self.eps)
        f[5] = 0.0
        f[5, 5] = 1.0
        return f

    def measurement_row(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])

    def initial_mean(self, t_in: float = 300.0, q0: float = 0.0) -> np.ndarray:
        return np.array([t_in] * 5 + [q0])


def ann_transfer(state: np.ndarray, transfer_net: MlpModel) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (6,) or not np.all(np.isfinite(state)):
        raise ValueError("reduced state must be six finite values")
    return np.append(predict(transfer_net, state), state[5])

