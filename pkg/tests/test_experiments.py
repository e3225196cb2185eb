import csv
import json

import numpy as np
import pytest

from heatflux_eks import experiments as ex
from heatflux_eks.physics import Mesh
from heatflux_eks.pipelines import InversionConfig, InversionResult
from heatflux_eks.signals import builtin_testing_signal


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        ex.SweepSpec("nf", ())
    with pytest.raises(ValueError):
        ex.SweepSpec("nf", (0, 2), seeds=())


def test_exclusion_table():
    assert len(ex.TABLE2_EXCLUSIONS) == 15
    assert ex.TABLE2_EXCLUSIONS[0] == ()
    assert all(len(e) == 3 for e in ex.TABLE2_EXCLUSIONS[11:15])
    assert len({frozenset(e) for e in ex.TABLE2_EXCLUSIONS}) == 15


def test_nf_sensors_distinct():
    assert len(set(ex.NF_SENSORS)) == len(ex.NF_SENSORS)


class TestGrid:
    def test_full(self):
        g = ex.sensor_grid(Mesh())
        assert len(g) == 23 * 48
        assert (0, 5) not in g and (1, 1) in g and (23, 48) in g

    def test_stride(self):
        g = ex.sensor_grid(Mesh(), stride=2)
        assert len(g) == 12 * 24
        with pytest.raises(ValueError):
            ex.sensor_grid(Mesh(), stride=0)


class TestLinearFit:
    def test_exact(self):
        f = ex.linear_fit([0, 1, 2, 3], [1.0, 3.0, 5.0, 7.0])
        assert f["intercept"] == pytest.approx(1.0)
        assert f["slope"] == pytest.approx(2.0)
        assert f["r2"] == pytest.approx(1.0)

    def test_noisy(self, rng):
        x = np.arange(30.0)
        y = 0.5 + 0.1 * x + rng.normal(scale=0.5, size=30)
        f = ex.linear_fit(x, y)
        assert 0 < f["r2"] < 1
        b, a = np.polyfit(x, y, 1)
        assert f["slope"] == pytest.approx(b)


class TestCellStore:
    def test_persist_and_reload(self, tmp_path):
        s = ex.CellStore(tmp_path / "sub" / "cells.jsonl")
        s.put("abc", {"AE": 0.1})
        s2 = ex.CellStore(tmp_path / "sub" / "cells.jsonl")
        assert s2.get("abc") == {"AE": 0.1, "key": "abc"}
        assert s2.get("nope") is None

    def test_ablation_resumes(self, tmp_path, monkeypatch):
        calls = []

        def fake(args):
            exclude, seed, base, cache = args
            calls.append((tuple(exclude), seed))
            bad = len(exclude) == 3
            v = float("inf") if bad else 0.05 + 0.01 * len(exclude) + 0.001 * seed
            return {"exclude": list(exclude), "seed": seed, "smooth": v, "step": v, "tri": v, "overall": v}

        monkeypatch.setattr(ex, "_ablation_cell", fake)
        path = tmp_path / "cells.jsonl"
        excl = [(), ("step",), ("sin", "para", "tri")]
        rows = ex.ablation_study(excl, store=ex.CellStore(path))
        assert len(calls) == 9
        assert rows[0]["overall"] == pytest.approx(0.051)
        assert [r["divergent"] for r in rows] == [False, False, True]
        calls.clear()
        again = ex.ablation_study(excl, store=ex.CellStore(path))
        assert calls == []
        assert again == rows
        ex.ablation_study(excl + [("tri",)], store=ex.CellStore(path))
        assert calls == [(("tri",), s) for s in ex.DEFAULT_SEEDS]

    def test_ablation_unknown_family(self):
        with pytest.raises(ValueError, match="square"):
            ex.ablation_study([("square",)])


def test_sensor_sweep_grid(monkeypatch, tmp_path):
    def fake(args):
        sensor, seed, base, cache = args
        return {"sensor": list(sensor), "seed": seed, "AE": float("inf") if sensor[1] < 3 else sensor[1] / 100}

    monkeypatch.setattr(ex, "_sensor_cell", fake)
    out = ex.sensor_location_sweep([(5, 2), (5, 40)], seeds=(0,))
    assert out["cells"][(5, 2)] == float("inf")
    assert out["cells"][(5, 40)] == 0.4
    assert np.isnan(out["grid"][0, 0])
    ex.write_heatmap_csv(out["grid"], tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert len(rows) == 51 and len(rows[0]) == 26
    assert float(rows[1][0]) == pytest.approx(0.099)
    assert float(rows[50 - 40][6]) == 0.4


def _fake_result(cfg, q_scale=1.0):
    k = np.arange(10)
    q = np.linspace(100, 1000, 10)
    return InversionResult(k=k, q_true=q, q_hat=q * q_scale, measurements=np.zeros(10), ae=abs(q_scale - 1) + 0.01 * cfg.n_f,
                           step_ms=np.full(10, 0.5 + 0.02 * cfg.n_f))


def test_future_step_sweep(monkeypatch):
    monkeypatch.setattr(ex, "load_or_train", lambda spec, cache=None: None)
    monkeypatch.setattr(ex, "run_ann_eks", lambda cfg, networks=None: _fake_result(cfg))
    out = ex.future_step_sweep((0, 4, 8), sensors=[(20, 44), (20, 45)], seeds=(0, 1))
    assert len(out["cells"]) == 6
    fit = out["fit"][(20, 44)]
    assert fit["slope"] == pytest.approx(0.02)
    assert fit["r2"] == pytest.approx(1.0)


def test_algorithm_comparison_is_paired(monkeypatch):
    seen = {}

    def record(name):
        def run(cfg, *, measurements, **kw):
            seen.setdefault((cfg.noise, cfg.seed), {})[name] = measurements
            return _fake_result(cfg)
        return run

    monkeypatch.setattr(ex, "load_or_train", lambda spec, cache=None: None)
    monkeypatch.setattr(ex, "train_inverse_ann", lambda **kw: None)
    monkeypatch.setattr(ex, "run_ann_eks", record("ann"))
    monkeypatch.setattr(ex, "run_inverse_ann", record("inv"))
    monkeypatch.setattr(ex, "run_cfd_eks", record("cfd"))
    rows = ex.algorithm_comparison((2.0, 15.0), seeds=(0, 1))
    assert {r["algorithm"] for r in rows} == {"ann_eks", "inverse_ann", "ann_eks_window", "cfd_eks"}
    assert len(rows) == 8
    for (m, s), ys in seen.items():
        assert set(ys) == {"ann", "inv", "cfd"}
        assert np.array_equal(ys["ann"], ys["inv"]) and np.array_equal(ys["ann"], ys["cfd"])
    assert not np.array_equal(seen[(2.0, 0)]["ann"], seen[(2.0, 1)]["ann"])


def test_safe_ae_divergence():
    def boom():
        raise np.linalg.LinAlgError("singular")

    assert ex._safe_ae(boom) is None
    cfg = InversionConfig()
    r = _fake_result(cfg)
    r.q_hat[3] = np.nan
    assert ex._safe_ae(lambda: r) is None
    assert ex._median([0.1, None, 0.2]) == 0.2


def test_section_errors():
    sig = builtin_testing_signal()
    k = np.arange(len(sig))
    q = sig.samples
    res = InversionResult(k=k, q_true=q, q_hat=q + 0.1 * np.abs(q).max(), measurements=np.zeros(k.size), ae=0.1,
                          step_ms=np.ones(k.size))
    errs = ex.section_errors(res, sig)
    assert set(errs) == {"smooth", "step", "tri", "overall"}
    for name, a, b in sig.sections:
        assert errs[name] == pytest.approx(0.1 * np.abs(q).max() / np.abs(q[a:b]).max())


def test_writers(tmp_path):
    ex.write_long_csv([{"a": 0.1, "b": [1, 2]}, {"a": 0.2, "c": "x"}], tmp_path / "l.csv")
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["a", "b", "c"] and rows[1] == ["0.1", "1 2", ""]
    ex.write_summary_json({"fit": {(20, 44): {"r2": 1.0}}, "grid": np.zeros((2, 2))}, tmp_path / "s.json")
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["fit"]["20,44"]["r2"] == 1.0 and d["grid"] == [[0, 0], [0, 0]]
