import numpy as np
import pytest

from heatflux_eks.datasets import generate_datasets, local_cells
from heatflux_eks.mlp import ModelMismatchError, init_model
from heatflux_eks.physics import Mesh, PhysicalParams, advance_step, field_history, uniform_field
from heatflux_eks.signals import builtin_testing_signal, builtin_training_signal
from heatflux_eks.transfer import (AnnTransferModel, CfdTransferModel, ann_transfer, cfd_transfer, measurement_row,
                                   numeric_jacobian)


class TestNumericJacobian:
    def test_square(self):
        j = numeric_jacobian(lambda x: x ** 2, np.array([2.0]))
        assert j[0, 0] == pytest.approx(4.0, abs=1e-8)

    def test_linear(self, rng):
        a = rng.normal(size=(4, 4))
        j = numeric_jacobian(lambda xs: xs @ a.T, rng.normal(size=4) * 100)
        np.testing.assert_allclose(j, a, atol=1e-9)

    def test_zero_component_floor(self):
        # at x=0 the step falls back to 1e-6; a cubic then has error h^2
        j = numeric_jacobian(lambda x: x ** 3 + x, np.array([0.0]))
        assert j[0, 0] == pytest.approx(1.0, abs=1e-11)


class TestCfdModel:
    def test_uniform_zero_flux_fixed_point(self, mesh, params):
        m = CfdTransferModel((20, 44), mesh, params)
        x = m.initial_mean()
        np.testing.assert_allclose(m.transfer(x), x, rtol=0, atol=1e-10)

    def test_matches_advance_step(self, small_mesh, params, rng):
        field = 300 + 20 * rng.random(small_mesh.size)
        x = np.append(field, 1800.0)
        out = cfd_transfer(x, small_mesh, params)
        np.testing.assert_array_equal(out[:-1], advance_step(field, 1800.0, small_mesh, params))
        assert out[-1] == 1800.0

    def test_measurement_row(self, mesh):
        m = CfdTransferModel((20, 44), mesh)
        h = measurement_row(m)
        assert h.sum() == 1.0 and h[20 * mesh.ny + 44] == 1.0
        x = np.arange(m.dim, dtype=float)
        assert h @ x == 20 * mesh.ny + 44

    def test_jacobian_rows(self, small_mesh, params, rng):
        m = CfdTransferModel((2, 4), small_mesh, params)
        x = np.append(300 + 10 * rng.random(small_mesh.size), 2000.0)
        f = m.jacobian(x)
        assert f.shape == (m.dim, m.dim)
        np.testing.assert_array_equal(f[-1], np.eye(m.dim)[-1])
        # the step is affine, so the finite-difference Jacobian is its matrix
        for c in (0, 7, m.dim - 1):
            e = np.zeros(m.dim)
            e[c] = 1.0
            diff = m.transfer(x + e) - m.transfer(x)
            np.testing.assert_allclose(f[:, c], diff, atol=1e-5)


@pytest.fixture(scope="module")
def ann_model(baseline_networks):
    return AnnTransferModel(*baseline_networks, sensor=(20, 44))


@pytest.fixture(scope="module")
def nominal_states():
    mesh = Mesh()
    q = builtin_testing_signal().samples[:1200]
    hist = field_history(q, mesh, PhysicalParams())
    cells = local_cells((20, 44), mesh)
    return mesh, q, hist, cells


class TestAnnModel:
    def test_measurement_row(self, ann_model):
        np.testing.assert_array_equal(ann_model.measurement_row(), [1, 0, 0, 0, 0, 0])

    def test_q_carried(self, ann_model):
        x = np.array([310.0, 309, 311, 312, 305, 2345.0])
        assert ann_model.transfer(x)[5] == 2345.0
        assert ann_transfer(x, ann_model.transfer_net)[5] == 2345.0

    def test_q_row(self, ann_model):
        f = ann_model.jacobian(np.array([310.0, 309, 311, 312, 305, 2345.0]))
        np.testing.assert_array_equal(f[5], [0, 0, 0, 0, 0, 1])

    def test_nan_input(self, ann_model):
        with pytest.raises(ValueError):
            ann_model.transfer(np.array([np.nan, 300, 300, 300, 300, 0.0]))
        with pytest.raises(ValueError):
            ann_transfer(np.array([np.nan, 300, 300, 300, 300, 0.0]), ann_model.transfer_net)

    def test_held_out_samples_match_cfd(self, ann_model):
        q = builtin_testing_signal().samples
        tr, _ = generate_datasets(q, (20, 44), 1e-4, Mesh())
        pred = ann_model.transfer_batch(tr.inputs)[:, :5]
        assert np.max(np.abs(pred - tr.outputs)) < 0.5

    def test_uniform_start_one_step(self, ann_model, mesh, params):
        field = uniform_field(mesh, params)
        x = np.array([300.0] * 5 + [2500.0])
        cfd_next = advance_step(field, 2500.0, mesh, params)[local_cells((20, 44), mesh)]
        np.testing.assert_allclose(ann_model.transfer(x)[:5], cfd_next, atol=0.5)

    def test_flux_column_nonnegative(self, ann_model, nominal_states):
        mesh, q, hist, cells = nominal_states
        for k in range(0, len(q), 11):
            f = ann_model.jacobian(np.append(hist[k][cells], q[k]))
            assert np.all(f[:4, 5] >= 0), k

    @pytest.mark.xfail(strict=True, reason="the -y neighbour's flux sensitivity (about 8e-7 K per W/m^2 in the CFD "
                                           "model) is below the surrogate's resolution; see the decisions ledger")
    def test_flux_column_nonnegative_all_rows(self, ann_model):
        mesh = Mesh()
        q = builtin_training_signal().samples
        hist = field_history(q, mesh, PhysicalParams())
        cells = local_cells((20, 44), mesh)
        for k in range(0, len(q), 5):
            f = ann_model.jacobian(np.append(hist[k][cells], q[k]))
            assert np.all(f[:5, 5] >= 0), k

    @pytest.mark.xfail(strict=True, reason="the reduced state omits the cells that carry the true partial "
                                           "derivatives; the surrogate's Jacobian is a manifold derivative, not the "
                                           "CFD partial; see the decisions ledger")
    def test_jacobian_vs_cfd_partials(self, ann_model, nominal_states):
        mesh, q, hist, cells = nominal_states
        cfd = CfdTransferModel((20, 44), mesh)
        idx = np.append(cells, mesh.size)
        for k in (300, 700, 1100):
            full = np.append(hist[k], q[k])
            ja = ann_model.jacobian(full[idx])
            h = np.maximum(1e-4 * np.abs(full[idx]), 1e-6)
            jc = np.zeros((6, 6))
            for c in range(6):
                xp, xm = full.copy(), full.copy()
                xp[idx[c]] += h[c]
                xm[idx[c]] -= h[c]
                jc[:, c] = (cfd.transfer(xp)[idx] - cfd.transfer(xm)[idx]) / (2 * h[c])
            big = np.abs(jc) > 1e-2 * np.abs(jc).max()
            assert np.all(np.sign(ja[big]) == np.sign(jc[big]))
            np.testing.assert_allclose(ja[big], jc[big], rtol=0.2)

    def test_mismatched_networks(self, baseline_networks):
        t, s = baseline_networks
        with pytest.raises(ModelMismatchError):
            AnnTransferModel(t, s, sensor=(20, 45))
        odd = init_model((6, 10, 4), standardizer=t.standardizer)
        with pytest.raises(ModelMismatchError):
            AnnTransferModel(t, odd)
        other = s.with_params(s.get_params())
        other.manifest = dict(s.manifest, sensor=[20, 45])
        with pytest.raises(ModelMismatchError):
            AnnTransferModel(t, other)
