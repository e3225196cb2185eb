"""Wall heat-flux waveforms: segments, composition, built-in corpora and CSV I/O."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

KINDS = ("step", "triangular", "sinusoidal", "parabolic", "smooth")
PERIODIC_KINDS = ("triangular", "sinusoidal")
TRAINING_FAMILIES = ("sin", "para", "step", "tri")


@dataclass(frozen=True)
class FluxSegment:
    kind: str
    duration: float
    amplitude: float = 0.0
    offset: float = 0.0
    frequency: float | None = None
    control_points: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("segment duration must be > 0")
        if self.kind in PERIODIC_KINDS and not (self.frequency and self.frequency > 0):
            raise ValueError(f"{self.kind} segment needs a positive frequency")
        if self.kind == "smooth":
            pts = np.asarray(self.control_points, dtype=float)
            if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
                raise ValueError("smooth segment needs at least two (t, q) control points")
            if np.any(np.diff(pts[:, 0]) <= 0):
                raise ValueError("control point times must be strictly increasing")
            object.__setattr__(self, "control_points", tuple(map(tuple, pts.tolist())))

    @classmethod
    def from_dict(cls, d: dict) -> "FluxSegment":
        d = dict(d)
        d["control_points"] = tuple(tuple(p) for p in d.get("control_points", ()))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control_points"] = [list(p) for p in self.control_points]
        return d


@dataclass(frozen=True)
class FluxSignal:
    dt: float
    samples: np.ndarray
    # (family, start, stop) sample ranges, informational
    sections: tuple = field(default=(), compare=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("flux samples must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dt

    def section(self, family: str) -> slice:
        for name, start, stop in self.sections:
            if name == family:
                return slice(start, stop)
        raise KeyError(family)


def _sample_count(duration: float, dt: float) -> int:
    n = int(round(duration / dt))
    if n < 1:
        raise ValueError(f"duration {duration} is shorter than half a sample at dt={dt}")
    return n


def _phase(k: np.ndarray, frequency: float, dt: float) -> np.ndarray:
    """Fractional phase in [0, 1); exact when the period is a whole number of samples."""
    per = 1.0 / (frequency * dt)
    n_per = round(per)
    if n_per >= 1 and abs(per - n_per) < 1e-6:
        return (k % n_per) / n_per
    return np.mod(k * dt * frequency, 1.0)


def render_segment(seg: FluxSegment, dt: float) -> FluxSignal:
    n = _sample_count(seg.duration, dt)
    k = np.arange(n)
    t = k * dt
    if seg.kind == "step":
        q = np.full(n, seg.offset + seg.amplitude)
    elif seg.kind == "sinusoidal":
        q = seg.offset + seg.amplitude * np.sin(2.0 * np.pi * _phase(k, seg.frequency, dt))
    elif seg.kind == "triangular":
        ph = _phase(k, seg.frequency, dt)
        q = seg.offset + seg.amplitude * (1.0 - np.abs(2.0 * ph - 1.0))
    elif seg.kind == "parabolic":
        s = t / seg.duration
        q = seg.offset + 4.0 * seg.amplitude * s * (1.0 - s)
    else:
        pts = np.asarray(seg.control_points)
        q = CubicSpline(pts[:, 0], pts[:, 1], bc_type="natural")(t)
    return FluxSignal(dt, q)


def concat(signals, names=None) -> FluxSignal:
    signals = list(signals)
    if not signals:
        raise ValueError("concat needs at least one signal")
    dt = signals[0].dt
    for s in signals[1:]:
        if not np.isclose(s.dt, dt, rtol=1e-12):
            raise ValueError(f"mismatched dt: {s.dt} vs {dt}")
    sections = []
    if names is not None:
        start = 0
        for name, s in zip(names, signals):
            sections.append((name, start, start + len(s)))
            start += len(s)
    return FluxSignal(dt, np.concatenate([s.samples for s in signals]), tuple(sections))


def load_manifest(name: str) -> dict:
    """Load a bundled manifest (``training`` or ``testing``) or a JSON file path."""
    if name in ("training", "testing"):
        text = resources.files("heatflux_eks").joinpath(f"data/{name}_manifest.json").read_text()
    else:
        text = Path(name).read_text()
    return json.loads(text)


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest_segments(manifest: dict, exclude=()) -> list[tuple[str, list[FluxSegment]]]:
    unknown = set(exclude) - {f["family"] for f in manifest["families"]}
    if unknown:
        raise ValueError(f"unknown waveform families: {sorted(unknown)}")
    return [
        (fam["family"], [FluxSegment.from_dict(s) for s in fam["segments"]])
        for fam in manifest["families"]
        if fam["family"] not in exclude
    ]


def render_manifest(manifest: dict, dt: float | None = None, exclude=()) -> FluxSignal:
    dt = manifest["dt"] if dt is None else dt
    families = manifest_segments(manifest, exclude)
    if not families:
        raise ValueError("every waveform family was excluded")
    blocks = [concat([render_segment(s, dt) for s in segs]) for _, segs in families]
    return concat(blocks, names=[name for name, _ in families])


def builtin_training_signal(dt: float = 0.01, exclude=()) -> FluxSignal:
    """6794-step corpus of sinusoidal, parabolic, step and triangular sections."""
    return render_manifest(load_manifest("training"), dt, exclude)


def builtin_testing_signal(dt: float = 0.01) -> FluxSignal:
    """Smooth curve, one step section and a triangular wave (2600 steps)."""
    return render_manifest(load_manifest("testing"), dt)


def signal_triples(manifest: dict) -> set:
    """(kind, amplitude, frequency) triples used by a manifest."""
    return {
        (s.kind, s.amplitude, s.frequency)
        for _, segs in manifest_segments(manifest)
        for s in segs
    }


def resolve_signal(spec: str, dt: float = 0.01) -> FluxSignal:
    """``builtin-train``, ``builtin-test``, a manifest ``.json`` or a ``t,q`` CSV."""
    if spec == "builtin-train":
        return builtin_training_signal(dt)
    if spec == "builtin-test":
        return builtin_testing_signal(dt)
    if spec.endswith(".json"):
        return render_manifest(load_manifest(spec), dt)
    return read_signal_csv(spec)


def write_signal_csv(signal: FluxSignal, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q"])
        for t, q in zip(signal.times, signal.samples):
            w.writerow([repr(float(t)), repr(float(q))])


def read_signal_csv(path) -> FluxSignal:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:2]] != ["t", "q"]:
        raise ValueError(f"{path}: expected header 't,q'")
    data = np.array([[float(a), float(b)] for a, b, *_ in rows[1:]])
    if data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two rows to infer dt")
    steps = np.diff(data[:, 0])
    dt = float(np.median(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * max(dt, 1.0):
        raise ValueError(f"{path}: rows are not uniformly spaced in t")
    return FluxSignal(dt, data[:, 1])
