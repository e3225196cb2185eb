"""Small tanh multilayer perceptron trained with Levenberg-Marquardt.

Networks operate on standardized values; :func:`predict` wraps the
standardizer attached to a model. Parameters are flattened layer by layer as
``W_l.ravel()`` (row-major, shape ``(n_out, n_in)``) followed by ``b_l``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .datasets import Standardizer


class TrainingError(RuntimeError):
    pass


class ModelMismatchError(ValueError):
    """A model file does not match the sensor/corpus it is used with."""


@dataclass
class MlpModel:
    layer_sizes: tuple
    weights: list
    biases: list
    standardizer: Standardizer | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.layer_sizes[l], self.layer_sizes[l + 1]
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ValueError(f"layer {l}: expected W {(n_out, n_in)}, b {(n_out,)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, theta: np.ndarray) -> "MlpModel":
        weights, biases = [], []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(theta[pos:pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            biases.append(theta[pos:pos + n_out].copy())
            pos += n_out
        return MlpModel(self.layer_sizes, weights, biases, self.standardizer, dict(self.manifest))


def init_model(layer_sizes, seed: int = 0, standardizer: Standardizer | None = None) -> MlpModel:
    """Uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / math.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return MlpModel(tuple(layer_sizes), weights, biases, standardizer)


def _activations(model: MlpModel, x: np.ndarray) -> list:
    acts = [x]
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if l == last else np.tanh(z))
    return acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate on standardized input(s): shape ``(n_in,)`` or ``(n, n_in)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {model.layer_sizes[0]}")
    return _activations(model, x)[-1]


def predict(model: MlpModel, raw) -> np.ndarray:
    """Evaluate on raw (physical) inputs, returning raw outputs."""
    st = model.standardizer
    if st is None:
        return forward(model, raw)
    return st.invert_outputs(forward(model, st.apply_inputs(raw)))


def batch_jacobian(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outputs ``(n, n_out)`` and Jacobian ``(n, n_out, n_params)`` by backprop."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    acts = _activations(model, x)
    n = x.shape[0]
    n_out = model.layer_sizes[-1]
    jac = np.zeros((n, n_out, model.n_params))
    offsets = []
    pos = 0
    for n_in, n_o in zip(model.layer_sizes[:-1], model.layer_sizes[1:]):
        offsets.append((pos, pos + n_in * n_o, pos + n_in * n_o + n_o))
        pos += (n_in + 1) * n_o
    n_layers = len(model.weights)
    for o in range(n_out):
        delta = np.zeros((n, n_out))
        delta[:, o] = 1.0
        for l in range(n_layers - 1, -1, -1):
            w0, b0, b1 = offsets[l]
            a_prev = acts[l]
            jac[:, o, w0:b0] = (delta[:, :, None] * a_prev[:, None, :]).reshape(n, -1)
            jac[:, o, b0:b1] = delta
            if l > 0:
                delta = (delta @ model.weights[l]) * (1.0 - a_prev**2)
    return acts[-1], jac


def jacobian_wrt_weights(model: MlpModel, x) -> np.ndarray:
    """Jacobian of the outputs for one input w.r.t. all weights and biases."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.layer_sizes[0],):
        raise ValueError(f"expected a single input of length {model.layer_sizes[0]}")
    return batch_jacobian(model, x[None, :])[1][0]


@dataclass
class TrainConfig:
    max_iterations: int = 1000
    patience: int = 6
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    damping_max: float = 1e10
    seed: int = 0
    goal: float = 0.0  # stop once train MSE reaches this
    chunk: int = 8192

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.damping > 0:
            raise ValueError("initial damping must be > 0")


@dataclass
class TrainReport:
    iterations: int
    train_mse: float
    validation_mse: float
    test_mse: float | None
    regression_r: float | None
    stop_reason: str
    best_iteration: int
    sse_history: list = field(default_factory=list)
    damping_schedule: str = ""

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("sse_history")
        return d


def _mse(model: MlpModel, x, y) -> float:
    return float(np.mean((y - forward(model, x)) ** 2))


def _normal_equations(model: MlpModel, x, y, chunk: int):
    p = model.n_params
    jtj = np.zeros((p, p))
    jtr = np.zeros(p)
    sse = 0.0
    for s in range(0, x.shape[0], chunk):
        out, jac = batch_jacobian(model, x[s:s + chunk])
        r = (y[s:s + chunk] - out).ravel()
        j2 = jac.reshape(-1, p)
        jtj += j2.T @ j2
        jtr += j2.T @ r
        sse += float(r @ r)
    return jtj, jtr, sse


def train_levenberg_marquardt(train, validation, config: TrainConfig = TrainConfig(), *,
                              model: MlpModel | None = None, layer_sizes=None, test=None,
                              val_loss=None) -> tuple[MlpModel, TrainReport]:
    """Full-batch Levenberg-Marquardt with validation early stopping.

    ``train``, ``validation`` and ``test`` are ``(x, y)`` pairs of standardized
    arrays. An accepted step divides the damping by ``damping_down``; a
    rejected one multiplies it by ``damping_up``. Training stops after
    ``max_iterations`` accepted steps, once the validation MSE has not improved
    for ``patience`` consecutive accepted steps, or when the damping exceeds
    ``damping_max``. The parameters with the best validation MSE are returned.
    ``val_loss`` overrides the validation metric (a callable on the model).
    """
    x, y = (np.asarray(a, dtype=float) for a in train)
    xv, yv = (np.asarray(a, dtype=float) for a in validation)
    if x.shape[0] == 0 or xv.shape[0] == 0:
        raise TrainingError("train and validation sets must be nonempty")
    if y.ndim == 1:
        y, yv = y[:, None], yv[:, None]
    if model is None:
        sizes = layer_sizes or (x.shape[1], 10, y.shape[1])
        model = init_model(sizes, config.seed)
    score = val_loss or (lambda m: _mse(m, xv, yv))

    theta = model.get_params()
    lam = config.damping
    jtj, jtr, sse = _normal_equations(model, x, y, config.chunk)
    if not math.isfinite(sse):
        raise TrainingError("non-finite loss at initialization")
    best_val = score(model)
    best_theta, best_it = theta.copy(), 0
    stale = 0
    it = 0
    history = [sse]
    reason = "max_iterations"
    eye = np.eye(theta.size)
    n_res = y.size
    while it < config.max_iterations:
        if sse / n_res <= config.goal:
            reason = "goal"
            break
        try:
            step = cho_solve(cho_factor(jtj + lam * eye), jtr)
        except (LinAlgError, ValueError):
            step = None
        trial = None if step is None else model.with_params(theta + step)
        trial_sse = math.inf if trial is None else float(np.sum((y - forward(trial, x)) ** 2))
        if math.isnan(trial_sse) and step is not None and lam >= config.damping_max:
            raise TrainingError("NaN loss")
        if trial_sse < sse:
            it += 1
            theta = theta + step
            model = trial
            lam = max(lam / config.damping_down, 1e-20)
            jtj, jtr, sse = _normal_equations(model, x, y, config.chunk)
            history.append(sse)
            val = score(model)
            if val < best_val:
                best_val, best_theta, best_it = val, theta.copy(), it
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    reason = "validation_patience"
                    break
        else:
            lam *= config.damping_up
            if lam > config.damping_max:
                if step is None:
                    raise TrainingError("normal matrix stays singular at maximum damping")
                reason = "damping_limit"
                break
    best = model.with_params(best_theta)
    test_mse = r = None
    if test is not None:
        xt, yt = (np.asarray(a, dtype=float) for a in test)
        if yt.ndim == 1:
            yt = yt[:, None]
        test_mse = _mse(best, xt, yt)
        r = regression_r(best, (xt, yt))
    report = TrainReport(
        iterations=it,
        train_mse=_mse(best, x, y),
        validation_mse=float(best_val),
        test_mse=test_mse,
        regression_r=r,
        stop_reason=reason,
        best_iteration=best_it,
        sse_history=history,
        damping_schedule=f"lambda0={config.damping:g}, x{config.damping_up:g} on reject, /{config.damping_down:g} on accept",
    )
    return best, report


def regression_r(model: MlpModel, samples) -> float:
    """Pearson correlation between flattened predictions and targets."""
    x, y = (np.asarray(a, dtype=float) for a in samples)
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    pred = forward(model, x).ravel()
    return float(np.corrcoef(pred, y.ravel())[0, 1])


# -- persistence -----------------------------------------------------------

def model_to_dict(model: MlpModel) -> dict:
    d = {
        "format": "heatflux-eks-mlp",
        "version": 1,
        "layer_sizes": list(model.layer_sizes),
        "activation": {"hidden": "tanh", "output": "identity"},
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "standardizer": None if model.standardizer is None else model.standardizer.to_dict(),
        "manifest": model.manifest,
    }
    d["manifest_hash"] = manifest_digest(model.manifest)
    return d


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format") != "heatflux-eks-mlp":
        raise ValueError("not a heatflux-eks model document")
    sizes = d["layer_sizes"]
    weights = [np.asarray(w, dtype=float).reshape(b, a) for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    st = None if d.get("standardizer") is None else Standardizer.from_dict(d["standardizer"])
    manifest = d.get("manifest", {})
    if "manifest_hash" in d and d["manifest_hash"] != manifest_digest(manifest):
        raise ModelMismatchError("model manifest hash does not match its contents")
    return MlpModel(tuple(sizes), weights, biases, st, manifest)


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def manifest_digest(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
