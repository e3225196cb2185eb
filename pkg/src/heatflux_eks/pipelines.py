"""End-to-end inversion: ANN-EKS, CFD-EKS and the inverse-ANN baseline.

Conventions
-----------
Flux sample ``q[k]`` drives the step from ``t_k`` to ``t_{k+1}``; the sensor
reading ``T[k]`` is the temperature at ``t_{k+1}``, so ``T[k]`` is the first
reading that depends on ``q[k]``. With these conventions every algorithm
estimates ``q[k]`` from readings up to ``T[k + n_f]``, and the Kalman state
with filter index ``k + 1`` carries the estimate of ``q[k]``.
"""
from __future__ import annotations

import csv
import gc
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import Dataset, fit_standardizer, split
from .filtering import FixedLagSmoother, GaussianState, NoiseModel
from .mlp import MlpModel, ModelMismatchError, TrainConfig, predict, train_levenberg_marquardt
from .physics import Mesh, PhysicalParams, run_transient
from .signals import FluxSignal, builtin_testing_signal, builtin_training_signal
from .surrogates import SurrogateSpec, load_or_train
from .transfer import AnnTransferModel, CfdTransferModel

log = logging.getLogger(__name__)

ALGORITHMS = ("ann_eks", "cfd_eks", "inverse_ann")
BASELINE_SENSOR = (20, 44)  # (0.820, 0.089) on the default mesh


@dataclass(frozen=True)
class NoiseDefaults:
    """Filter tuning shared by both Kalman pipelines.

    ``R`` defaults to the injected noise variance ``m**2`` (floored so the
    noise-free case stays well posed).
    """

    t_std: float = 0.01  # K per step, temperature components of Q
    q_std: float = 50.0  # W/m^2 per step, flux random walk
    p0_t_std: float = 1.0
    p0_q_std: float = 1000.0
    r_floor: float = 0.1  # K

    def measurement_variance(self, m: float) -> float:
        return max(float(m), self.r_floor) ** 2

    def noise_model(self, dim: int, m: float) -> NoiseModel:
        q = np.full(dim, self.t_std ** 2)
        q[-1] = self.q_std ** 2
        return NoiseModel(np.diag(q), self.measurement_variance(m))

    def initial_cov(self, dim: int) -> np.ndarray:
        p = np.full(dim, self.p0_t_std ** 2)
        p[-1] = self.p0_q_std ** 2
        return np.diag(p)


@dataclass
class InversionConfig:
    sensor: tuple = BASELINE_SENSOR
    n_f: int = 18
    noise: float = 5.0
    seed: int = 0
    algorithm: str = "ann_eks"
    models: str | None = None  # directory with transfer.json / sensitivity.json
    n_p: int | None = None  # inverse-ANN past window, defaults to n_f
    window: tuple | None = None  # (start, stop) sample range of the testing signal
    literal_rts: bool = False
    check_psd: bool = False
    filter: NoiseDefaults = field(default_factory=NoiseDefaults)
    mesh: Mesh = field(default_factory=Mesh)
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def __post_init__(self):
        self.sensor = tuple(int(v) for v in self.sensor)
        if self.n_f < 0:
            raise ValueError("n_f must be >= 0")
        if self.noise < 0:
            raise ValueError("noise level m must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.n_p is not None and self.n_p < 0:
            raise ValueError("n_p must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensor"] = list(self.sensor)
        return d


@dataclass
class InversionResult:
    k: np.ndarray  # flux sample indices that were estimated
    q_true: np.ndarray
    q_hat: np.ndarray
    measurements: np.ndarray  # T[k], the first reading affected by q[k]
    ae: float
    step_ms: np.ndarray  # wall time per consumed measurement
    dt: float = 0.01
    psd_checks: int = 0
    psd_failures: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ae >= 0:
            raise ValueError("AE must be non-negative")

    @property
    def steps(self) -> int:
        return int(self.k.size)

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean(self.step_ms))

    @property
    def p95_step_ms(self) -> float:
        return float(np.percentile(self.step_ms, 95))

    def summary(self) -> dict:
        return {"AE": self.ae, "mean_step_ms": self.mean_step_ms, "p95_step_ms": self.p95_step_ms,
                "steps": self.steps}


# -- metric and noise --------------------------------------------------------

def add_noise(series, m: float, seed: int = 0) -> np.ndarray:
    """``y = T + m * sigma`` with i.i.d. standard normal ``sigma``."""
    if m < 0:
        raise ValueError("noise level m must be >= 0")
    series = np.asarray(series, dtype=float)
    if m == 0:
        return series.copy()
    return series + m * np.random.default_rng(seed).standard_normal(series.shape)


def average_error(q_true, q_est) -> float:
    """Root-mean-square flux error, both signals scaled by ``max|q_true|``."""
    q_true = np.asarray(q_true, dtype=float)
    q_est = np.asarray(q_est, dtype=float)
    if q_true.shape != q_est.shape:
        raise ValueError(f"length mismatch: {q_true.shape} vs {q_est.shape}")
    scale = float(np.max(np.abs(q_true))) if q_true.size else 0.0
    if scale == 0.0:
        raise ValueError("q_true is identically zero; AE normalizer undefined")
    return float(np.sqrt(np.mean(((q_est - q_true) / scale) ** 2)))


# -- ground truth -------------------------------------------------------------

def simulate_measurements(signal, sensor, mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> np.ndarray:
    """Noise-free sensor readings ``T[k]`` for the whole signal."""
    return run_transient(signal, mesh, params, record=[mesh.flat(*sensor)]).probes[:, 0]


def _testing_case(config: InversionConfig, signal=None):
    signal = builtin_testing_signal(config.mesh.dt) if signal is None else signal
    q = np.asarray(getattr(signal, "samples", signal), dtype=float)
    clean = simulate_measurements(signal, config.sensor, config.mesh, config.params)
    start, stop = config.window or (0, q.size)
    if not 0 <= start < stop <= q.size:
        raise ValueError(f"window {config.window} outside signal of {q.size} samples")
    # the window is simulated from t=0 so the field carries its true history;
    # the prior then holds the true temperatures at the window start and q=0
    return q, clean, start, stop


# -- Kalman pipelines ---------------------------------------------------------

def _run_smoother(model, initial_mean, y, q, start, config: InversionConfig, smooth_cov: bool) -> InversionResult:
    dim = initial_mean.size
    noise = config.filter.noise_model(dim, config.noise)
    prior = GaussianState(np.asarray(initial_mean, dtype=float), config.filter.initial_cov(dim))
    smoother = FixedLagSmoother(model, noise, config.n_f, prior, smooth_cov=smooth_cov,
                                literal=config.literal_rts, check_psd=config.check_psd)
    ks, qs = [], []
    times = np.empty(y.size)
    clock = time.perf_counter
    # The per-step records are acyclic, so reference counting frees them; the
    # cyclic collector is paused (as timeit does) so its sweeps over whatever
    # else the process holds are not charged to the filter.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for j, yj in enumerate(y):
            c0 = smoother.check_seconds
            t0 = clock()
            out = smoother.update(yj)
            # diagnostic covariance checks are not part of the online budget
            times[j] = clock() - t0 - (smoother.check_seconds - c0)
            if out is not None:
                ks.append(start + out[0] - 1)
                qs.append(float(out[1].mean[-1]))
    finally:
        if gc_was_enabled:
            gc.enable()
    if not ks:
        raise ValueError(f"window of {y.size} readings is shorter than the lag n_f={config.n_f}")
    k = np.asarray(ks)
    q_hat = np.asarray(qs)
    return InversionResult(k=k, q_true=q[k], q_hat=q_hat, measurements=y[k - start], ae=average_error(q[k], q_hat),
                           step_ms=times * 1e3, dt=config.mesh.dt, psd_checks=smoother.psd_checks,
                           psd_failures=list(smoother.psd_failures))


def load_surrogates(config: InversionConfig, cache=None):
    """Networks from ``config.models`` or the content-addressed training cache."""
    if config.models:
        from .mlp import load_model

        root = Path(config.models)
        paths = [root / "transfer.json", root / "sensitivity.json"]
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"model file {p} not found")
        return tuple(load_model(p) for p in paths)
    return load_or_train(SurrogateSpec(sensor=config.sensor, mesh=config.mesh, params=config.params), cache)


def run_ann_eks(config: InversionConfig, *, networks=None, signal=None, measurements=None) -> InversionResult:
    """Fixed-lag ANN-EKS on the testing signal.

    ``networks`` is an optional ``(transfer, sensitivity)`` pair; otherwise
    they are loaded (or trained) for the configured sensor. ``measurements``
    overrides the noisy readings (for paired comparisons).
    """
    t_net, s_net = networks if networks is not None else load_surrogates(config)
    model = AnnTransferModel(t_net, s_net, sensor=config.sensor)
    q, clean, start, stop = _testing_case(config, signal)
    y = add_noise(clean, config.noise, config.seed) if measurements is None else np.asarray(measurements, dtype=float)
    mean = model.initial_mean(config.params.t_in, 0.0)
    if start > 0:
        mean = _reduced_truth(clean_field_at(config, q, start), config, 0.0)
    return _run_smoother(model, mean, y[start:stop], q, start, config, smooth_cov=True)


def run_cfd_eks(config: InversionConfig, *, signal=None, measurements=None) -> InversionResult:
    """Fixed-lag EKS with the full 1251-component CFD state.

    Expensive (a full Jacobian per step); use ``config.window`` to bound the
    run, 200 steps by default. Smoothed covariances are never formed (only the
    smoothed means are reported, and each would cost a dense 1251x1251
    product per lag step); ``check_psd`` covers the predicted and filtered
    covariances.
    """
    if config.window is None:
        config = replace(config, window=(0, 200))
    model = CfdTransferModel(config.sensor, config.mesh, config.params)
    q, clean, start, stop = _testing_case(config, signal)
    y = add_noise(clean, config.noise, config.seed) if measurements is None else np.asarray(measurements, dtype=float)
    mean = model.initial_mean(0.0)
    if start > 0:
        mean = np.append(clean_field_at(config, q, start), 0.0)
    return _run_smoother(model, mean, y[start:stop], q, start, config, smooth_cov=False)


def clean_field_at(config: InversionConfig, q, k: int) -> np.ndarray:
    """True temperature field at ``t_k``."""
    return run_transient(q[:k], config.mesh, config.params).final


def _reduced_truth(field_k, config, q_prev):
    from .datasets import extract_local_state

    return extract_local_state(field_k, config.sensor, q_prev, config.mesh)


# -- inverse ANN --------------------------------------------------------------

def window_matrix(y, n_p: int, n_f: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``[y[k-n_p], ..., y[k+n_f]]`` for every ``k`` with a full window."""
    y = np.asarray(y, dtype=float)
    width = n_p + n_f + 1
    if y.size < width:
        raise ValueError(f"series of {y.size} readings is shorter than the window ({width})")
    k = np.arange(n_p, y.size - n_f)
    rows = np.lib.stride_tricks.sliding_window_view(y, width)
    return rows, k


def train_inverse_ann(signal=None, sensor=BASELINE_SENSOR, n_p: int = 18, n_f: int = 18, *, noise: float = 0.0,
                      seed: int = 0, hidden: int = 10, config: TrainConfig = TrainConfig(max_iterations=500),
                      mesh: Mesh = Mesh(), params: PhysicalParams = PhysicalParams()) -> MlpModel:
    """Direct regression from a window of sensor readings to the flux.

    Trained on the training corpus; ``noise`` adds Gaussian noise of that
    level to the training inputs (clean by default).
    """
    signal = builtin_training_signal(mesh.dt) if signal is None else signal
    q = np.asarray(getattr(signal, "samples", signal), dtype=float)
    y = add_noise(simulate_measurements(signal, sensor, mesh, params), noise, seed)
    x, k = window_matrix(y, n_p, n_f)
    data = Dataset(x, q[k, None], "inverse")
    train, val, test = split(data, (0.7, 0.15, 0.15), seed=seed)
    st = fit_standardizer(train, in_names=None, out_names=("q",))
    model, report = train_levenberg_marquardt(
        (st.apply_inputs(train.inputs), st.apply_outputs(train.outputs)),
        (st.apply_inputs(val.inputs), st.apply_outputs(val.outputs)),
        replace(config, seed=seed), layer_sizes=(x.shape[1], hidden, 1),
        test=(st.apply_inputs(test.inputs), st.apply_outputs(test.outputs)),
    )
    model.standardizer = st
    model.manifest = {"tag": "inverse", "sensor": [int(v) for v in sensor], "n_p": n_p, "n_f": n_f,
                      "train_noise": noise, "report": report.to_dict()}
    return model


def run_inverse_ann(config: InversionConfig, *, model: MlpModel | None = None, signal=None,
                    measurements=None) -> InversionResult:
    n_p = config.n_f if config.n_p is None else config.n_p
    if model is None:
        model = train_inverse_ann(sensor=config.sensor, n_p=n_p, n_f=config.n_f, mesh=config.mesh, params=config.params)
    man = model.manifest
    if man.get("n_p", n_p) != n_p or man.get("n_f", config.n_f) != config.n_f:
        raise ModelMismatchError(f"inverse network window ({man.get('n_p')}, {man.get('n_f')}) "
                                 f"does not match ({n_p}, {config.n_f})")
    if man.get("sensor") is not None and list(man["sensor"]) != list(config.sensor):
        raise ModelMismatchError(f"inverse network was trained for sensor {man['sensor']}")
    q, clean, start, stop = _testing_case(config, signal)
    y = add_noise(clean, config.noise, config.seed) if measurements is None else np.asarray(measurements, dtype=float)
    yw = y[start:stop]
    x, k = window_matrix(yw, n_p, config.n_f)
    if k.size < yw.size:
        log.info("inverse ANN: %d warm-up steps without a full window are not estimated", yw.size - k.size)
    times = np.empty(k.size)
    q_hat = np.empty(k.size)
    clock = time.perf_counter
    for i, row in enumerate(x):
        t0 = clock()
        q_hat[i] = predict(model, row)[0]
        times[i] = clock() - t0
    k = k + start
    return InversionResult(k=k, q_true=q[k], q_hat=q_hat, measurements=y[k], ae=average_error(q[k], q_hat),
                           step_ms=times * 1e3, dt=config.mesh.dt)


def run_inversion(config: InversionConfig, **kwargs) -> InversionResult:
    runner = {"ann_eks": run_ann_eks, "cfd_eks": run_cfd_eks, "inverse_ann": run_inverse_ann}[config.algorithm]
    return runner(config, **kwargs)


# -- output -------------------------------------------------------------------

def write_estimates_csv(result: InversionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "q_true", "q_hat", "T_meas"])
        for k, qt, qh, y in zip(result.k, result.q_true, result.q_hat, result.measurements):
            w.writerow([int(k), repr(float(k * result.dt)), repr(float(qt)), repr(float(qh)), repr(float(y))])


def write_result_json(result: InversionResult, path) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=1))
