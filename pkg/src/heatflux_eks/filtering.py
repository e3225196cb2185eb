"""Extended Kalman filter and fixed-lag Rauch-Tung-Striebel smoother.

The recursion is generic over any transfer model exposing ``transfer``,
``jacobian`` and ``measurement_row`` (see :mod:`heatflux_eks.transfer`).
Measurements are scalar sensor temperatures. State index 0 is the prior; the
measurement ``y_k`` (k >= 1) produces the filtered state ``k``.
"""
from __future__ import annotations

import logging
import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
PSD_FLOOR = 1e-12


class FilterError(RuntimeError):
    pass


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray | None

    def copy(self) -> "GaussianState":
        return GaussianState(self.mean.copy(), None if self.cov is None else self.cov.copy())


@dataclass
class NoiseModel:
    Q: np.ndarray
    R: float

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not self.R > 0:
            raise ValueError("measurement variance R must be > 0")
        if not covariance_ok(self.Q):
            raise ValueError("process covariance Q must be symmetric positive semidefinite")


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def covariance_ok(p: np.ndarray) -> bool:
    """Symmetric to 1e-9 (relative) and Cholesky of ``P + 1e-12 I`` succeeds."""
    p = np.asarray(p, dtype=float)
    scale = max(1.0, float(np.max(np.abs(p))))
    if np.max(np.abs(p - p.T)) > SYMMETRY_TOL * scale:
        return False
    try:
        np.linalg.cholesky(p + PSD_FLOOR * np.eye(p.shape[0]))
    except np.linalg.LinAlgError:
        return False
    return True


def predict(belief: GaussianState, model, noise: NoiseModel) -> tuple[GaussianState, np.ndarray]:
    """Propagate the mean through the model and the covariance through its Jacobian."""
    x = np.asarray(belief.mean, dtype=float)
    mean = np.asarray(model.transfer(x), dtype=float)
    if not np.all(np.isfinite(mean)):
        raise FilterError("transfer model returned non-finite values")
    f = np.atleast_2d(model.jacobian(x))
    cov = symmetrize(f @ belief.cov @ f.T + noise.Q)
    return GaussianState(mean, cov), f


def correct(predicted: GaussianState, measurement: float, h, noise: NoiseModel) -> GaussianState:
    h = np.asarray(h, dtype=float).ravel()
    ph = predicted.cov @ h
    s = float(h @ ph) + noise.R
    if not s > 0:
        raise FilterError("innovation variance must be positive")
    gain = ph / s
    mean = predicted.mean + gain * (float(measurement) - float(h @ predicted.mean))
    cov = symmetrize(predicted.cov - np.outer(gain, ph))
    return GaussianState(mean, cov)


@dataclass
class StepRecord:
    """Filter quantities for state ``index``.

    ``jacobian`` and ``gain`` describe the transition out of this state and are
    filled in once the next state has been predicted.
    """

    index: int
    predicted: GaussianState | None
    filtered: GaussianState
    jacobian: np.ndarray | None = None
    gain: np.ndarray | None = None


def smoother_gain(filtered_cov: np.ndarray, jacobian: np.ndarray, next_predicted_cov: np.ndarray) -> np.ndarray:
    """``G = P_filt F^T P_pred^{-1}``, via Cholesky; regularized if singular."""
    rhs = jacobian @ filtered_cov  # = (P_filt F^T)^T
    try:
        factor = cho_factor(next_predicted_cov)
    except LinAlgError:
        warnings.warn("singular predicted covariance in RTS gain; regularizing with 1e-12*I", RuntimeWarning)
        factor = cho_factor(next_predicted_cov + PSD_FLOOR * np.eye(rhs.shape[0]))
    return cho_solve(factor, rhs).T


def rts_backward(window, smooth_cov: bool = True, literal: bool = False) -> list[GaussianState]:
    """Backward pass over ``window`` (oldest first), anchored at its newest record.

    Uses ``x'_k = x_k + G_k (x'_{k+1} - xhat_{k+1})``. With ``literal`` the
    difference is taken against the filtered ``x_{k+1}`` instead of the
    prediction. Returns smoothed states aligned with ``window``.
    """
    window = list(window)
    if not window:
        return []
    head = window[-1].filtered
    out = [head.copy()]
    x_next = head.mean
    p_next = head.cov
    for k in range(len(window) - 2, -1, -1):
        rec, nxt = window[k], window[k + 1]
        g = rec.gain
        if g is None:
            g = rec.gain = smoother_gain(rec.filtered.cov, rec.jacobian, nxt.predicted.cov)
        anchor = nxt.filtered.mean if literal else nxt.predicted.mean
        x = rec.filtered.mean + g @ (x_next - anchor)
        p = None
        if smooth_cov:
            p = symmetrize(rec.filtered.cov + g @ (p_next - nxt.predicted.cov) @ g.T)
        out.append(GaussianState(x, p))
        x_next, p_next = x, p
    out.reverse()
    return out


class FixedLagSmoother:
    """Online EKF with an ``n_f``-step RTS backward pass per measurement.

    Each call to :meth:`update` consumes ``y_j`` and returns the smoothed
    state ``j - n_f`` (or ``None`` while the window is still filling).
    """

    def __init__(self, model, noise: NoiseModel, n_f: int, initial: GaussianState, *,
                 smooth_cov: bool = True, literal: bool = False, check_psd: bool = False):
        if n_f < 0:
            raise ValueError("n_f must be >= 0")
        self.model = model
        self.noise = noise
        self.n_f = int(n_f)
        self.h = np.asarray(model.measurement_row(), dtype=float)
        self.smooth_cov = smooth_cov
        self.literal = literal
        self.check_psd = check_psd
        self.window: deque[StepRecord] = deque(maxlen=self.n_f + 1)
        cov = symmetrize(np.asarray(initial.cov, dtype=float))
        self.window.append(StepRecord(0, None, GaussianState(np.asarray(initial.mean, dtype=float), cov)))
        self.index = 0
        self.psd_checks = 0
        self.psd_failures: list[tuple[int, str]] = []
        self.check_seconds = 0.0  # time spent in the optional covariance checks

    def _check(self, label: str, cov) -> None:
        if not self.check_psd or cov is None:
            return
        t0 = time.perf_counter()
        self.psd_checks += 1
        if not covariance_ok(cov):
            self.psd_failures.append((self.index, label))
        self.check_seconds += time.perf_counter() - t0

    def update(self, y: float) -> tuple[int, GaussianState] | None:
        last = self.window[-1]
        pred, f = predict(last.filtered, self.model, self.noise)
        filt = correct(pred, y, self.h, self.noise)
        self.index += 1
        last.jacobian = f
        if self.n_f > 0:
            last.gain = smoother_gain(last.filtered.cov, f, pred.cov)
        self._check("predicted", pred.cov)
        self._check("filtered", filt.cov)
        self.window.append(StepRecord(self.index, pred, filt))
        target = self.index - self.n_f
        if target < 1:
            return None
        if self.n_f == 0:
            return self.index, filt
        smoothed = rts_backward(self.window, self.smooth_cov, self.literal)
        if self.smooth_cov:
            for s in smoothed:
                self._check("smoothed", s.cov)
        return target, smoothed[0]


def fixed_lag_estimate(measurements, model, noise: NoiseModel, n_f: int, initial: GaussianState, **kwargs):
    """Yield ``(k, q_k)`` smoothed flux estimates with a latency of ``n_f`` steps.

    ``measurements`` is an iterable of ``y_1, y_2, ...``; the flux is the last
    state component.
    """
    smoother = FixedLagSmoother(model, noise, n_f, initial, **kwargs)
    emitted = 0
    for y in measurements:
        out = smoother.update(y)
        if out is not None:
            emitted += 1
            yield out[0], float(out[1].mean[-1])
    if emitted == 0:
        log.warning("measurement stream shorter than the lag window (n_f=%d); nothing emitted", n_f)
