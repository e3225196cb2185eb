"""Training data for the reduced-state surrogates.

The reduced state at a sensor cell is
``[T_s, T_{+x}, T_{-x}, T_{+y}, T_{-y}, q]``; a surrogate maps it to the five
local temperatures one step later. Two datasets come out of one CFD run: the
nominal transitions ("transfer") and twelve one-component central-difference
perturbations per step ("sensitivity").
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .physics import DomainError, Mesh, PhysicalParams, get_solver, uniform_field

STATE_NAMES = ("t_s", "t_xp", "t_xm", "t_yp", "t_ym", "q")
OUTPUT_NAMES = STATE_NAMES[:5]
# absolute perturbation floor (K or W/m^2) for near-zero components
EPS_FLOOR = 1e-6


def neighbour_offsets(mesh: Mesh) -> np.ndarray:
    """Flat-index offsets of the five local cells, in reduced-state order."""
    return np.array([0, mesh.ny, -mesh.ny, 1, -1])


def local_cells(sensor: tuple[int, int], mesh: Mesh) -> np.ndarray:
    i, j = sensor
    if not (1 <= i < mesh.nx - 1 and 1 <= j < mesh.ny - 1):
        raise DomainError(f"sensor cell {sensor} lacks one of its four neighbours")
    return mesh.flat(i, j) + neighbour_offsets(mesh)


def extract_local_state(field: np.ndarray, sensor: tuple[int, int], q: float, mesh: Mesh = Mesh()) -> np.ndarray:
    cells = local_cells(sensor, mesh)
    return np.append(np.asarray(field, dtype=float)[cells], float(q))


def perturbation_steps(x: np.ndarray, eps: float) -> np.ndarray:
    """Relative finite-difference steps ``eps*|x|`` with an absolute floor."""
    return np.maximum(eps * np.abs(np.asarray(x, dtype=float)), EPS_FLOOR)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, n_in)
    outputs: np.ndarray  # (n, n_out)
    tag: str

    def __post_init__(self):
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("inputs and outputs differ in sample count")
        if self.tag not in ("transfer", "sensitivity", "inverse"):
            raise ValueError(f"unknown dataset tag {self.tag!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.outputs[idx], self.tag)


def generate_datasets(signal, sensor: tuple[int, int], eps: float = 1e-4,
                      mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> tuple[Dataset, Dataset]:
    """Run the CFD model along ``signal`` and harvest transfer/sensitivity samples.

    For each step ``k`` the nominal field and twelve perturbed copies (each
    reduced-state component moved by ``+-eps*|x_j|``) are advanced together
    as one batch.
    """
    samples = np.asarray(getattr(signal, "samples", signal), dtype=float)
    cells = local_cells(sensor, mesh)
    solver = get_solver(mesh, params)
    n = samples.size
    t_in = np.empty((n, 6))
    t_out = np.empty((n, 5))
    s_in = np.empty((12 * n, 6))
    s_out = np.empty((12 * n, 5))

    field = uniform_field(mesh, params)
    batch = np.empty((13, mesh.size))
    qs = np.empty(13)
    comp = np.repeat(np.arange(6), 2)
    sign = np.tile([1.0, -1.0], 6)
    rows = np.arange(1, 13)
    for k, q in enumerate(samples):
        state = np.append(field[cells], q)
        h = perturbation_steps(state, eps)
        batch[:] = field
        qs[:] = q
        for r, c, sg in zip(rows, comp, sign):
            if c < 5:
                batch[r, cells[c]] += sg * h[c]
            else:
                qs[r] += sg * h[c]
        new = solver.step_batch(batch, qs)
        t_in[k] = state
        t_out[k] = new[0, cells]
        pert = np.tile(state, (12, 1))
        pert[np.arange(12), comp] += sign * h[comp]
        s_in[12 * k:12 * k + 12] = pert
        s_out[12 * k:12 * k + 12] = new[1:, cells]
        field = new[0]
    return Dataset(t_in, t_out, "transfer"), Dataset(s_in, s_out, "sensitivity")


class StandardizationError(ValueError):
    pass


@dataclass(frozen=True)
class Standardizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def apply_inputs(self, x):
        return (np.asarray(x, dtype=float) - self.in_mean) / self.in_std

    def invert_inputs(self, z):
        return np.asarray(z, dtype=float) * self.in_std + self.in_mean

    def apply_outputs(self, y):
        return (np.asarray(y, dtype=float) - self.out_mean) / self.out_std

    def invert_outputs(self, z):
        return np.asarray(z, dtype=float) * self.out_std + self.out_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("in_mean", "in_std", "out_mean", "out_std")})


def _moments(a: np.ndarray, names) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)  # population std
    for c, (m, s) in enumerate(zip(mean, std)):
        if not s > 1e-12 * max(1.0, abs(m)):
            name = names[c] if names is not None and c < len(names) else f"#{c}"
            raise StandardizationError(f"channel {name} is constant; cannot standardize")
    return mean, std


def fit_standardizer(data: Dataset, in_names=STATE_NAMES, out_names=OUTPUT_NAMES) -> Standardizer:
    if len(data) < 2:
        raise StandardizationError("need at least two samples")
    in_mean, in_std = _moments(data.inputs, in_names)
    out_mean, out_std = _moments(data.outputs, out_names)
    return Standardizer(in_mean, in_std, out_mean, out_std)


def split(data, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Seeded random partition into train/validation/test.

    ``data`` may be a :class:`Dataset` or an integer sample count (then index
    arrays are returned).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = data if isinstance(data, (int, np.integer)) else len(data)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    if isinstance(data, (int, np.integer)):
        return parts
    return tuple(data.subset(np.sort(p)) for p in parts)


def write_dataset_csv(datasets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(STATE_NAMES) + [f"next_{n}" for n in OUTPUT_NAMES] + ["tag"])
        for d in datasets:
            for x, y in zip(d.inputs, d.outputs):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y] + [d.tag])


def read_dataset_csv(path) -> dict[str, Dataset]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 12 or header[-1] != "tag":
            raise ValueError(f"{path}: unexpected dataset header")
        rows: dict[str, list] = {}
        for row in reader:
            rows.setdefault(row[-1], []).append([float(v) for v in row[:-1]])
    out = {}
    for tag, vals in rows.items():
        a = np.asarray(vals)
        out[tag] = Dataset(a[:, :6], a[:, 6:], tag)
    return out
