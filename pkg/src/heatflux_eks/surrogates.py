"""Training and on-disk caching of the transfer/sensitivity surrogate pair."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import Dataset, fit_standardizer, generate_datasets, split
from .mlp import MlpModel, TrainConfig, TrainReport, load_model, save_model, train_levenberg_marquardt
from .physics import Mesh, PhysicalParams
from .signals import builtin_training_signal, load_manifest, manifest_hash

log = logging.getLogger(__name__)


def cache_dir(override=None) -> Path:
    root = override or os.environ.get("HEATFLUX_EKS_CACHE") or Path.home() / ".cache" / "heatflux_eks"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SurrogateSpec:
    """Everything that determines a trained surrogate pair."""

    sensor: tuple
    exclude: tuple = ()
    hidden: int = 10
    eps: float = 1e-4
    split_seed: int = 0
    transfer_config: TrainConfig = field(default_factory=lambda: TrainConfig(max_iterations=2000))
    sensitivity_config: TrainConfig = field(default_factory=lambda: TrainConfig(max_iterations=300))
    mesh: Mesh = field(default_factory=Mesh)
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def corpus_hash(self) -> str:
        return config_hash({"manifest": manifest_hash(load_manifest("training")),
                            "exclude": sorted(self.exclude)})

    def key(self) -> str:
        d = asdict(self)
        d["sensor"] = list(self.sensor)
        d["exclude"] = sorted(self.exclude)
        d["corpus"] = self.corpus_hash()
        d["version"] = __version__
        return config_hash(d)

    def manifest(self, tag: str) -> dict:
        m = self.mesh
        return {
            "tag": tag,
            "sensor": [int(v) for v in self.sensor],
            "offsets": "one cell in +x, -x, +y, -y",
            "corpus_hash": self.corpus_hash(),
            "exclude": sorted(self.exclude),
            "mesh": [m.nx, m.ny, m.dx, m.dy, m.dt],
            "eps": self.eps,
            "tool_version": __version__,
        }


def _standardized(ds: Dataset, st):
    return st.apply_inputs(ds.inputs), st.apply_outputs(ds.outputs)


def fit_surrogate(data: Dataset, config: TrainConfig, hidden: int = 10, split_seed: int = 0,
                  init: MlpModel | None = None, manifest: dict | None = None) -> tuple[MlpModel, TrainReport]:
    """Split 70/15/15, standardize on the training part, train with LM."""
    t0 = time.perf_counter()
    train, val, test = split(data, (0.7, 0.15, 0.15), seed=split_seed)
    st = fit_standardizer(train)
    start = None
    if init is not None:
        start = MlpModel(init.layer_sizes, [w.copy() for w in init.weights], [b.copy() for b in init.biases], st)
    sizes = (data.inputs.shape[1], hidden, data.outputs.shape[1])
    model, report = train_levenberg_marquardt(
        _standardized(train, st), _standardized(val, st), config,
        model=start, layer_sizes=sizes, test=_standardized(test, st),
    )
    model.standardizer = st
    model.manifest = dict(manifest or {})
    model.manifest["report"] = report.to_dict()
    model.manifest["train_seconds"] = round(time.perf_counter() - t0, 3)
    return model, report


def train_surrogates(spec: SurrogateSpec, signal=None):
    """Generate both datasets and train the transfer and sensitivity networks.

    The sensitivity network starts from the trained transfer weights: its
    samples are small perturbations of the transfer samples, so this saves
    most of the LM iterations on the twelve-times larger dataset.
    """
    if signal is None:
        signal = builtin_training_signal(spec.mesh.dt, exclude=spec.exclude)
    transfer_ds, sens_ds = generate_datasets(signal, tuple(spec.sensor), spec.eps, spec.mesh, spec.params)
    t_net, t_rep = fit_surrogate(transfer_ds, spec.transfer_config, spec.hidden, spec.split_seed,
                                 manifest=spec.manifest("transfer"))
    s_net, s_rep = fit_surrogate(sens_ds, spec.sensitivity_config, spec.hidden, spec.split_seed,
                                 init=t_net, manifest=spec.manifest("sensitivity"))
    log.info("surrogates for sensor %s: transfer test MSE %.3g (R=%.6f), sensitivity test MSE %.3g",
             spec.sensor, t_rep.test_mse, t_rep.regression_r, s_rep.test_mse)
    return t_net, s_net


def load_or_train(spec: SurrogateSpec, cache=None) -> tuple[MlpModel, MlpModel]:
    """Content-addressed cache around :func:`train_surrogates`."""
    root = cache_dir(cache) / "surrogates" / spec.key()
    t_path, s_path = root / "transfer.json", root / "sensitivity.json"
    if t_path.exists() and s_path.exists():
        return load_model(t_path), load_model(s_path)
    t_net, s_net = train_surrogates(spec)
    root.mkdir(parents=True, exist_ok=True)
    save_model(t_net, t_path)
    save_model(s_net, s_path)
    return t_net, s_net


def surrogate_error(net: MlpModel, data: Dataset) -> float:
    """RMS error in kelvin of a surrogate on raw samples."""
    from .mlp import predict

    return float(np.sqrt(np.mean((predict(net, data.inputs) - data.outputs) ** 2)))
