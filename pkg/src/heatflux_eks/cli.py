"""Command-line interface.

Settings come from three layers, later ones winning: built-in defaults, an
optional ``--config`` file of ``key = value`` lines (keys are the long flag
names with dashes or underscores), and explicit command-line flags.

Exit codes: 0 success, 2 usage error, 3 missing model file, 4 model manifest
mismatch, 5 invalid input (domain or data error), 6 a ``verify`` check failed,
1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("heatflux_eks")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_MODEL = 3
EXIT_MANIFEST = 4
EXIT_INPUT = 5
EXIT_VERIFY = 6


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def derive_seed(root: int, consumer: str) -> int:
    """Deterministic per-consumer seed split from the run's root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(consumer.encode())])
    return int(ss.generate_state(1)[0])


def _pair(text: str, kind=float) -> tuple:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_pair(text):
    return _pair(text, int)


def _names(text: str) -> tuple:
    return tuple(sorted(p.strip() for p in str(text).split(",") if p.strip()))


def _int_list(text: str) -> tuple:
    text = str(text)
    if ":" in text:
        a, b, *step = (int(v) for v in text.split(":"))
        return tuple(range(a, b + 1, step[0] if step else 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_config_file(path) -> dict:
    """Flat ``key = value`` document; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    return str(o)


def run_manifest(args, inputs=(), seeds=None, started=None) -> dict:
    """Provenance record written next to every output artifact.

    ``run_hash`` covers everything except timestamps and the host, so two
    identical runs share it.
    """
    from .physics import get_solver, Mesh, PhysicalParams

    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "started")}
    body = {
        "tool": "heatflux-eks",
        "tool_version": __version__,
        "command": args.command,
        "config": json.loads(json.dumps(config, default=_json_default)),
        "input_hashes": _input_hashes(inputs),
        "seeds": seeds or {},
    }
    run_hash = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    return {
        **body,
        "run_hash": run_hash,
        "host": {"platform": platform.platform(), "python": platform.python_version(), "numpy": np.__version__,
                 "kernel": get_solver(Mesh(), PhysicalParams()).backend, "cpus": os.cpu_count()},
        "started": started,
        "finished": _now(),
    }


def _input_hashes(inputs) -> dict:
    from .signals import load_manifest, manifest_hash

    out = {}
    for p in inputs:
        if not p:
            continue
        if str(p) in ("builtin-train", "builtin-test"):
            out[str(p)] = manifest_hash(load_manifest("training" if str(p) == "builtin-train" else "testing"))
        elif Path(p).is_file():
            out[str(p)] = file_sha256(p)
    return out


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_path, manifest: dict) -> Path:
    out_path = Path(out_path)
    target = out_path / "manifest.json" if out_path.is_dir() else out_path.with_name(out_path.name + ".manifest.json")
    target.write_text(json.dumps(manifest, indent=1, default=_json_default))
    return target


def _sensor_cell(xy, mesh, interior: bool = False):
    """Cell containing point ``xy``; ``interior`` also demands four neighbours."""
    from .datasets import local_cells
    from .physics import node_index

    cell = node_index(xy[0], xy[1], mesh)
    if interior:
        local_cells(cell, mesh)
    return cell


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .physics import Mesh, PhysicalParams, run_transient
    from .signals import resolve_signal

    mesh = Mesh.for_params(PhysicalParams(), nx=args.nx, ny=args.ny, dt=args.dt)
    signal = resolve_signal(args.flux, mesh.dt)
    probes = [_sensor_cell(p, mesh) for p in args.probe] or [_sensor_cell((0.82, 0.089), mesh)]
    res = run_transient(signal, mesh, record=[mesh.flat(*c) for c in probes])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"probe_{n}" for n in range(len(probes))])
        for k in range(len(signal)):
            w.writerow([repr(float(res.times[k]))] + [repr(float(v)) for v in res.probes[k]])
    if args.snapshot:
        # final field, one row per y cell from the heated wall down
        grid = res.final.reshape(mesh.nx, mesh.ny)
        with open(args.snapshot, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y"] + [repr(float(x)) for x in mesh.x_centers()])
            for j in range(mesh.ny - 1, -1, -1):
                w.writerow([repr(float(mesh.y_centers()[j]))] + [repr(float(v)) for v in grid[:, j]])
    write_manifest(args.out, run_manifest(args, [args.flux], started=args.started))
    print(f"wrote {len(signal)} rows for probes {probes} to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .datasets import generate_datasets, write_dataset_csv
    from .physics import Mesh
    from .signals import builtin_training_signal, resolve_signal

    mesh = Mesh()
    sensor = _sensor_cell(args.sensor, mesh, interior=True)
    if args.flux == "builtin-train":
        signal = builtin_training_signal(mesh.dt, exclude=args.exclude)
    else:
        signal = resolve_signal(args.flux, mesh.dt)
    transfer, sens = generate_datasets(signal, sensor, args.eps, mesh)
    write_dataset_csv([transfer, sens], args.out)
    write_manifest(args.out, run_manifest(args, [args.flux], started=args.started))
    print(f"wrote {len(transfer)} transfer and {len(sens)} sensitivity samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .mlp import TrainConfig, save_model
    from .physics import Mesh
    from .surrogates import SurrogateSpec, train_surrogates

    mesh = Mesh()
    sensor = _sensor_cell(args.sensor, mesh, interior=True)
    seed = derive_seed(args.seed, "split")
    spec = SurrogateSpec(sensor=sensor, exclude=args.exclude, hidden=args.hidden, eps=args.eps, split_seed=seed,
                         transfer_config=TrainConfig(max_iterations=args.max_iter, seed=seed),
                         sensitivity_config=TrainConfig(max_iterations=args.max_iter_sens, seed=seed))
    t_net, s_net = train_surrogates(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(t_net, out / "transfer.json")
    save_model(s_net, out / "sensitivity.json")
    write_manifest(out, run_manifest(args, seeds={"root": args.seed, "split": seed}, started=args.started))
    rep = t_net.manifest["report"]
    print(json.dumps({"transfer_test_mse": rep["test_mse"], "transfer_R": rep["regression_r"],
                      "sensitivity_test_mse": s_net.manifest["report"]["test_mse"]}))
    return EXIT_OK


def cmd_invert(args) -> int:
    from .mlp import load_model
    from .physics import Mesh
    from .pipelines import (InversionConfig, NoiseDefaults, run_ann_eks, run_cfd_eks, run_inverse_ann,
                            train_inverse_ann, write_estimates_csv)
    from .signals import resolve_signal

    mesh = Mesh()
    sensor = _sensor_cell(args.sensor, mesh, interior=True)
    noise_seed = derive_seed(args.seed, "noise")
    config = InversionConfig(sensor=sensor, n_f=args.nf, noise=args.noise, seed=noise_seed, algorithm=args.algorithm,
                             models=args.models, n_p=args.np, window=args.window, literal_rts=args.literal_rts,
                             filter=NoiseDefaults(q_std=args.q_std, t_std=args.t_std))
    signal = resolve_signal(args.flux, mesh.dt)
    inputs = [args.flux]
    if args.algorithm == "ann_eks":
        if args.models:
            inputs += [Path(args.models) / "transfer.json", Path(args.models) / "sensitivity.json"]
        result = run_ann_eks(config, signal=signal)
    elif args.algorithm == "cfd_eks":
        result = run_cfd_eks(config, signal=signal)
    else:
        model = None
        if args.models:
            path = Path(args.models) / "inverse.json"
            if not path.exists():
                raise FileNotFoundError(f"model file {path} not found")
            model = load_model(path)
            inputs.append(path)
        else:
            n_p = args.nf if args.np is None else args.np
            model = train_inverse_ann(sensor=sensor, n_p=n_p, n_f=args.nf, noise=args.train_noise,
                                      seed=derive_seed(args.seed, "inverse"), mesh=mesh)
        result = run_inverse_ann(config, model=model, signal=signal)
    summary = result.summary()
    if args.out:
        write_estimates_csv(result, args.out)
        write_manifest(args.out, run_manifest(args, inputs, {"root": args.seed, "noise": noise_seed}, args.started))
    if args.result:
        Path(args.result).write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import experiments as ex
    from .pipelines import InversionConfig
    from .physics import Mesh

    mesh = Mesh()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(derive_seed(args.seed, f"replicate-{i}") for i in range(args.replicates))
    base = InversionConfig(sensor=_sensor_cell(args.sensor, mesh, interior=True), n_f=args.nf, noise=args.noise)
    store = ex.CellStore(out / f"{args.kind}_cells.jsonl")
    jobs = args.jobs or ex.default_jobs()
    if args.kind == "ablation":
        exclusions = ex.TABLE2_EXCLUSIONS if not args.exclusions else tuple(
            _names(s) if s != "none" else () for s in args.exclusions.split(";"))
        summary = {"rows": ex.ablation_study(exclusions, base=base, seeds=seeds, store=store, jobs=jobs)}
    elif args.kind == "sensors":
        res = ex.sensor_location_sweep(base=base, seeds=seeds, stride=args.stride, store=store, jobs=jobs)
        ex.write_heatmap_csv(res["grid"], out / "sensors_heatmap.csv", mesh)
        summary = {"cells": res["cells"]}
    elif args.kind == "nf":
        sensors = [_sensor_cell(p, mesh, interior=True) for p in args.probe] or list(ex.NF_SENSORS)
        # timing cells run one at a time
        summary = ex.future_step_sweep(args.nf_range, sensors, base=base, seeds=seeds, store=store)
    else:
        summary = {"rows": ex.algorithm_comparison(args.noise_levels, base=base, seeds=seeds, store=store,
                                                   include_cfd=not args.no_cfd, inverse_train_noise=args.train_noise)}
    ex.write_long_csv(store.records.values(), out / f"{args.kind}_long.csv")
    ex.write_summary_json(summary, out / f"{args.kind}_summary.json")
    write_manifest(out, run_manifest(args, seeds={"root": args.seed, "replicates": list(seeds)}, started=args.started))
    print(f"wrote {args.kind} results to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatflux-eks", description="Online inverse heat-flux estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="key = value file; explicit flags override it")
    p.add_argument("--log-level", default="WARNING")
    p.add_argument("--cache-dir", help="surrogate cache (default $HEATFLUX_EKS_CACHE or ~/.cache/heatflux_eks)")
    p.add_argument("--seed", type=int, default=0, help="root seed; per-consumer seeds are derived from it")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="forward CFD run, writes probe temperatures")
    s.add_argument("--flux", default="builtin-train", help="builtin-train, builtin-test, manifest .json or t,q CSV")
    s.add_argument("--probe", type=_pair, action="append", default=[], help="x,y in metres (repeatable)")
    s.add_argument("--nx", type=int, default=25)
    s.add_argument("--ny", type=int, default=50)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--snapshot", help="also write the final field as a CSV grid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gen-data", help="transfer and sensitivity samples for one sensor")
    s.add_argument("--flux", default="builtin-train")
    s.add_argument("--sensor", type=_pair, default=(0.82, 0.089))
    s.add_argument("--exclude", type=_names, default=(), help="families to drop from the built-in corpus")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train the transfer and sensitivity networks")
    s.add_argument("--sensor", type=_pair, default=(0.82, 0.089))
    s.add_argument("--exclude", type=_names, default=())
    s.add_argument("--hidden", type=int, default=10)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--max-iter", type=int, default=2000)
    s.add_argument("--max-iter-sens", type=int, default=300)
    s.add_argument("--out", required=True, help="model directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("invert", help="estimate the wall flux from noisy sensor readings")
    s.add_argument("--algorithm", choices=("ann_eks", "cfd_eks", "inverse_ann"), default="ann_eks")
    s.add_argument("--noise", type=float, default=5.0, help="noise level m in K")
    s.add_argument("--nf", type=int, default=18)
    s.add_argument("--np", type=int, default=None, help="inverse-ANN past window (default: nf)")
    s.add_argument("--sensor", type=_pair, default=(0.82, 0.089))
    s.add_argument("--flux", default="builtin-test")
    s.add_argument("--models", help="model directory (default: trained on demand and cached)")
    s.add_argument("--window", type=_int_pair, default=None, help="start,stop sample range")
    s.add_argument("--q-std", type=float, default=50.0, help="flux random-walk std per step")
    s.add_argument("--t-std", type=float, default=0.01, help="temperature process-noise std per step")
    s.add_argument("--train-noise", type=float, default=0.0, help="inverse ANN training-input noise level")
    s.add_argument("--literal-rts", action="store_true", help="use the filtered-state anchor in the RTS update")
    s.add_argument("--out", help="estimate CSV")
    s.add_argument("--result", help="result JSON")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("sweep", help="parameter studies")
    s.add_argument("kind", choices=("ablation", "sensors", "nf", "compare"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replicates", type=int, default=3)
    s.add_argument("--sensor", type=_pair, default=(0.82, 0.089))
    s.add_argument("--nf", type=int, default=18)
    s.add_argument("--noise", type=float, default=5.0)
    s.add_argument("--exclusions", help="ablation rows, ';'-separated family lists ('none' = full corpus)")
    s.add_argument("--stride", type=int, default=1, help="sensor sweep: test every n-th cell")
    s.add_argument("--probe", type=_pair, action="append", default=[], help="nf sweep sensors, x,y (repeatable)")
    s.add_argument("--nf-range", type=_int_list, default=tuple(range(0, 31, 2)), help="a:b[:step] or a,b,c")
    s.add_argument("--noise-levels", type=_float_list, default=(2.0, 5.0, 10.0, 15.0))
    s.add_argument("--train-noise", type=float, default=0.0)
    s.add_argument("--no-cfd", action="store_true", help="compare: skip the CFD-EKS runs")
    s.add_argument("--jobs", type=int, default=0, help="parallel cells (default: all cores; nf sweep runs serially)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("verify", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_verify)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in (*parser._actions, *sub._actions)}
        defaults = {}
        for key, value in values.items():
            action = known.get(key)
            if action is None or key in ("help", "config", "command"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[key] = action.type(value)
            else:
                defaults[key] = value
        top = {a.dest for a in parser._actions}
        parser.set_defaults(**{k: v for k, v in defaults.items() if k in top})
        sub.set_defaults(**{k: v for k, v in defaults.items() if k not in top})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cache_dir:
        os.environ["HEATFLUX_EKS_CACHE"] = args.cache_dir
    args.started = _now()
    from .mlp import ModelMismatchError
    from .physics import DomainError
    from .datasets import StandardizationError

    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_MODEL
    except ModelMismatchError as exc:
        print(f"manifest mismatch: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except (DomainError, StandardizationError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort category
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
