import json

import numpy as np
import pytest

from heatflux_eks.signals import (FluxSegment, FluxSignal, builtin_testing_signal, builtin_training_signal, concat,
                                  load_manifest, manifest_hash, manifest_segments, read_signal_csv, render_manifest,
                                  render_segment, resolve_signal, signal_triples, write_signal_csv)


class TestSegments:
    def test_step(self):
        sig = render_segment(FluxSegment("step", 1.0, amplitude=2500.0), 0.01)
        assert len(sig) == 100
        assert np.all(sig.samples == 2500.0)

    def test_sinusoid_starts_at_offset(self):
        sig = render_segment(FluxSegment("sinusoidal", 2.0, amplitude=1234.0, frequency=0.5), 0.01)
        assert sig.samples[0] == 0.0
        t = np.arange(200) * 0.01
        np.testing.assert_allclose(sig.samples, 1234.0 * np.sin(2 * np.pi * 0.5 * t), atol=1e-9)

    def test_parabola_peak_at_midpoint(self):
        a = 3000.0
        sig = render_segment(FluxSegment("parabolic", 3.0, amplitude=a, offset=100.0), 0.01)
        mid = len(sig) // 2
        assert sig.samples[mid] == pytest.approx(100.0 + a, abs=1e-9)
        assert sig.samples.max() == pytest.approx(100.0 + a, abs=1e-9)
        assert sig.samples[0] == 100.0

    def test_triangle_shape(self):
        sig = render_segment(FluxSegment("triangular", 2.0, amplitude=1000.0, frequency=1.0), 0.01)
        # ramps linearly 0 -> 1000 -> 0 over each 100-sample period
        np.testing.assert_allclose(sig.samples[:51], np.linspace(0, 1000, 51), atol=1e-9)
        np.testing.assert_allclose(sig.samples[50:101], np.linspace(1000, 0, 51)[:51][: len(sig.samples[50:101])],
                                   atol=1e-9)

    @pytest.mark.parametrize("kind, freq", [("triangular", 0.5), ("sinusoidal", 0.25), ("sinusoidal", 1 / 4.99)])
    def test_periodic(self, kind, freq):
        dt = 0.01
        sig = render_segment(FluxSegment(kind, 12.0, amplitude=777.0, offset=5.0, frequency=freq), dt)
        period = int(round(1 / (freq * dt)))
        if abs(1 / (freq * dt) - period) < 1e-6:
            np.testing.assert_allclose(sig.samples[period:], sig.samples[:-period], rtol=0, atol=1e-12)

    def test_spline_through_control_points(self):
        pts = ((0.0, 0.0), (1.0, 500.0), (2.5, 100.0), (4.0, 900.0))
        sig = render_segment(FluxSegment("smooth", 4.0, control_points=pts), 0.01)
        for t, q in pts[:-1]:
            assert sig.samples[int(round(t / 0.01))] == pytest.approx(q, abs=1e-9)

    @pytest.mark.parametrize("kwargs", [dict(kind="bogus", duration=1.0), dict(kind="step", duration=0.0),
                                        dict(kind="sinusoidal", duration=1.0),
                                        dict(kind="smooth", duration=1.0, control_points=((0, 1),)),
                                        dict(kind="smooth", duration=1.0, control_points=((0, 1), (0, 2)))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            FluxSegment(**kwargs)

    def test_too_short_for_dt(self):
        with pytest.raises(ValueError):
            render_segment(FluxSegment("step", 0.004), 0.01)

    def test_round_trip_dict(self):
        seg = FluxSegment("smooth", 2.0, control_points=((0, 1), (2, 3)))
        assert FluxSegment.from_dict(seg.to_dict()) == seg


class TestSignal:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            FluxSignal(0.01, np.array([0.0, np.nan]))

    def test_immutable(self):
        sig = FluxSignal(0.01, np.zeros(3))
        with pytest.raises(ValueError):
            sig.samples[0] = 1.0

    def test_concat_identity(self):
        sig = FluxSignal(0.01, np.arange(5.0))
        out = concat([sig])
        assert out.dt == sig.dt
        np.testing.assert_array_equal(out.samples, sig.samples)

    def test_concat_lengths(self):
        blocks = [FluxSignal(0.01, np.ones(n)) for n in (1699, 1698, 1699, 1698)]
        assert len(concat(blocks)) == 6794

    def test_concat_empty(self):
        with pytest.raises(ValueError):
            concat([])

    def test_concat_dt_mismatch(self):
        with pytest.raises(ValueError, match="dt"):
            concat([FluxSignal(0.01, np.ones(2)), FluxSignal(0.02, np.ones(2))])

    def test_csv_round_trip(self, tmp_path):
        sig = builtin_testing_signal()
        write_signal_csv(sig, tmp_path / "q.csv")
        back = read_signal_csv(tmp_path / "q.csv")
        assert back.dt == pytest.approx(0.01)
        np.testing.assert_array_equal(back.samples, sig.samples)

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "q.csv").write_text("a,b\n0,1\n")
        with pytest.raises(ValueError, match="header"):
            read_signal_csv(tmp_path / "q.csv")

    def test_csv_uneven_spacing(self, tmp_path):
        (tmp_path / "q.csv").write_text("t,q\n0,1\n0.01,2\n0.05,3\n")
        with pytest.raises(ValueError, match="uniform"):
            read_signal_csv(tmp_path / "q.csv")


class TestBuiltinCorpora:
    def test_training_length(self):
        assert len(builtin_training_signal()) == 6794

    def test_family_shares(self):
        sig = builtin_training_signal()
        names = [s[0] for s in sig.sections]
        assert sorted(names) == ["para", "sin", "step", "tri"]
        for _, start, stop in sig.sections:
            assert abs((stop - start) - 6794 / 4) <= 2

    def test_nonnegative_and_range(self):
        q = builtin_training_signal().samples
        assert q.min() >= 0.0
        assert q.max() <= 5000.0 + 1e-9
        assert q.max() >= 4500.0

    def test_diversity(self):
        for family, segs in manifest_segments(load_manifest("training")):
            amps = {s.amplitude for s in segs}
            assert len(amps) >= 3, family
            # step and parabolic sections vary their duration in place of a frequency
            rates = {s.frequency if s.frequency else 1 / s.duration for s in segs}
            assert len(rates) >= 2, family

    def test_exclusion(self):
        full = builtin_training_signal()
        sub = builtin_training_signal(exclude=("step",))
        assert len(sub) == len(full) - (full.section("step").stop - full.section("step").start)
        with pytest.raises(ValueError):
            builtin_training_signal(exclude=("sin", "para", "step", "tri"))
        with pytest.raises(ValueError):
            builtin_training_signal(exclude=("square",))

    def test_testing_has_one_step_section(self):
        sig = builtin_testing_signal()
        kinds = [s.kind for _, segs in manifest_segments(load_manifest("testing")) for s in segs]
        assert kinds.count("step") == 1
        assert [n for n, _, _ in sig.sections] == ["smooth", "step", "tri"]

    def test_testing_disjoint_from_training(self):
        assert not (signal_triples(load_manifest("training")) & signal_triples(load_manifest("testing")))

    def test_deterministic(self):
        assert np.array_equal(builtin_training_signal().samples, builtin_training_signal().samples)

    def test_manifest_hash_tracks_content(self):
        m = load_manifest("training")
        h = manifest_hash(m)
        m2 = json.loads(json.dumps(m))
        m2["families"][0]["segments"][0]["amplitude"] += 1
        assert manifest_hash(m2) != h

    def test_resolve(self, tmp_path):
        assert len(resolve_signal("builtin-train")) == 6794
        assert len(resolve_signal("builtin-test")) == len(builtin_testing_signal())
        path = tmp_path / "m.json"
        path.write_text(json.dumps(load_manifest("testing")))
        assert np.array_equal(resolve_signal(str(path)).samples, builtin_testing_signal().samples)
        assert np.array_equal(render_manifest(load_manifest("testing")).samples, builtin_testing_signal().samples)
