import numpy as np
import pytest

from subspace_lab import ops
from subspace_lab.errors import ConfigError, DimensionError
from subspace_lab.gradcheck import check_gradients
from subspace_lab.memory_bank import MemoryBank
from subspace_lab.optim import AdamState, adam_step
from subspace_lab.selfexpress import (
    SelfExpressiveCoefficients,
    project_zero_diag,
    reconstruct_batch,
    reg_loss,
    ridge_self_expression,
    se_loss,
    total_loss,
)
from subspace_lab.tensor import ParameterSet, Tensor, backward


def bank_from(Z):
    bank = MemoryBank(*Z.shape)
    bank.write_batch(np.arange(len(Z)), Z, 0, 0)
    return bank


class TestCoefficients:
    def test_zero_init_and_noise_init_have_zero_diagonal(self):
        assert not SelfExpressiveCoefficients(4).C.data.any()
        c = SelfExpressiveCoefficients(5, init="noise", scale=1e-4, seed=3)
        assert np.all(np.diag(c.C.data) == 0) and c.C.data.any()
        assert np.abs(c.C.data).max() < 1e-3

    def test_unknown_init(self):
        with pytest.raises(ConfigError):
            SelfExpressiveCoefficients(3, init="ones")

    def test_projection(self):
        c = SelfExpressiveCoefficients.from_array(np.zeros((3, 3)))
        c.C.data[...] = np.eye(3)
        project_zero_diag(c)
        assert not c.C.data.any()
        off = np.ones((3, 3)) - np.eye(3)
        c.C.data[...] = off
        project_zero_diag(c)
        np.testing.assert_array_equal(c.C.data, off)


class TestReconstructBatch:
    def test_zero_c_gives_zero(self):
        Z = np.random.default_rng(0).standard_normal((4, 3))
        c = SelfExpressiveCoefficients(4)
        out = reconstruct_batch(c, bank_from(Z), [1, 2], Tensor(Z[[1, 2]]))
        assert not out.data.any()

    def test_duplicate_sample_identity(self):
        z = np.array([0.3, -1.2, 2.0])
        Z = np.stack([z, z])
        c = SelfExpressiveCoefficients.from_array(np.array([[0.0, 1.0], [1.0, 0.0]]))
        out = reconstruct_batch(c, bank_from(Z), [0, 1], Tensor(Z))
        np.testing.assert_array_equal(out.data, Z)

    def test_matches_triple_loop_product(self):
        rng = np.random.default_rng(1)
        Z = rng.standard_normal((3, 4))
        C = rng.standard_normal((3, 3))
        np.fill_diagonal(C, 0)
        c = SelfExpressiveCoefficients.from_array(C)
        idx = [2, 0]
        out = reconstruct_batch(c, bank_from(Z), idx, Tensor(Z[idx]))
        for r, i in enumerate(idx):
            for d in range(4):
                expected = 0.0
                for j in range(3):
                    expected += C[i, j] * Z[j, d]
                assert abs(out.data[r, d] - expected) < 1e-14

    def test_index_out_of_range(self):
        c = SelfExpressiveCoefficients(3)
        with pytest.raises(IndexError):
            reconstruct_batch(c, bank_from(np.ones((3, 2))), [3], Tensor(np.ones((1, 2))))

    def test_width_mismatch(self):
        c = SelfExpressiveCoefficients(3)
        with pytest.raises(DimensionError):
            reconstruct_batch(c, bank_from(np.ones((3, 2))), [0], Tensor(np.ones((1, 3))))

    def test_historical_rows_get_no_gradient_but_change_output(self):
        rng = np.random.default_rng(2)
        Z = rng.standard_normal((4, 2))
        c = SelfExpressiveCoefficients(4, init="noise", scale=1.0, seed=5)
        bank = bank_from(Z)
        live = Tensor(Z[[0]], requires_grad=True)
        out1 = reconstruct_batch(c, bank, [0], live)
        backward(ops.sum(out1))
        # only the live row and row 0 of C receive gradient
        assert live.grad is not None
        assert not c.C.grad[1:].any() and c.C.grad[0].any()
        bank.Z[3] += 1.0
        out2 = reconstruct_batch(c, bank, [0], Tensor(Z[[0]]))
        assert not np.allclose(out1.data, out2.data)

    def test_live_substitution_matches_explicit_concatenation(self):
        rng = np.random.default_rng(3)
        Z = rng.standard_normal((5, 3))
        C = rng.standard_normal((5, 5))
        np.fill_diagonal(C, 0)
        idx = np.array([1, 2])
        new = rng.standard_normal((2, 3))
        bank = bank_from(Z)
        bank.write_batch(idx, new, 1, 1)

        c1 = SelfExpressiveCoefficients.from_array(C)
        z1 = Tensor(new, requires_grad=True)
        backward(ops.sum(ops.mul(reconstruct_batch(c1, bank, idx, z1), Tensor(np.ones((2, 3))))))

        c2 = SelfExpressiveCoefficients.from_array(C)
        z2 = Tensor(new, requires_grad=True)
        full = ops.concat([Tensor(Z[[0]]), z2, Tensor(Z[3:])], axis=0)
        ref = ops.matmul(ops.index_rows(c2.C, idx), full)
        backward(ops.sum(ref))
        np.testing.assert_allclose(c1.C.grad, c2.C.grad, atol=1e-14)
        np.testing.assert_allclose(z1.grad, z2.grad, atol=1e-14)


class TestLosses:
    def test_se_loss_values(self):
        Z = Tensor(np.random.default_rng(4).standard_normal((3, 2)))
        assert se_loss(Z, Z).item() == 0.0
        c = SelfExpressiveCoefficients(3)
        zhat = reconstruct_batch(c, bank_from(Z.data), [0, 1, 2], Z)
        assert se_loss(Z, zhat).item() == pytest.approx(np.sum(Z.data**2), rel=1e-14)

    def test_se_loss_gradient_wrt_c(self):
        rng = np.random.default_rng(5)
        Z = rng.standard_normal((3, 4))
        c = SelfExpressiveCoefficients(3, init="noise", scale=0.5, seed=1)
        bank = bank_from(Z)
        z = Tensor(Z[[1]])
        err = check_gradients(lambda C: se_loss(z, reconstruct_batch(c, bank, [1], z)), [c.C])
        assert err[0] < 1e-6

    def test_reg_loss(self):
        c = SelfExpressiveCoefficients(3)
        assert reg_loss(c).item() == 0.0
        c.C.data[0, 1] = 2.0
        assert reg_loss(c).item() == 4.0
        backward(reg_loss(c))
        np.testing.assert_array_equal(c.C.grad, 2 * c.C.data)

    def test_total_loss_arithmetic(self):
        assert total_loss(1.0, 2.0, 3.0, 50, 1) == 104.0
        assert total_loss(1.5, 2.0, 3.0, 0, 0) == 1.5

    def test_total_loss_orl_weights(self):
        r, s, g = Tensor(0.7), Tensor(0.011), Tensor(3.2)
        assert total_loss(r, s, g, 50.0, 1.0).item() == pytest.approx(0.7 + 50 * 0.011 + 3.2, abs=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 1.0, 1.0, -1.0, 1.0)


class TestOptimizationInvariants:
    def test_diag_stays_zero_over_adam_steps(self):
        rng = np.random.default_rng(6)
        c = SelfExpressiveCoefficients(6, init="noise", scale=0.1, seed=2)
        params = ParameterSet({"C": c.C})
        state = AdamState(lr=0.05)
        for _ in range(10):
            W = Tensor(rng.standard_normal((6, 6)))
            backward(ops.sum(ops.mul(ops.mul(c.C, c.C), W)))
            adam_step(params, state)
            project_zero_diag(c)
            assert np.all(np.diag(c.C.data) == 0.0)

    def test_ridge_minimizer_two_identical_samples(self):
        # alpha ||z - c z||^2 + beta c^2 with unit z has minimizer 0.5 for alpha = beta = 1
        z = np.array([[0.6, 0.8]])
        Z = np.vstack([z, z])
        c = SelfExpressiveCoefficients(2)
        bank = bank_from(Z)
        params = ParameterSet({"C": c.C})
        for _ in range(2000):
            zt = Tensor(z)
            loss = ops.add(se_loss(zt, reconstruct_batch(c, bank, [0], zt)), ops.mul(ops.index_rows(c.C, np.array([0])), ops.index_rows(c.C, np.array([0]))).sum())
            backward(loss)
            c.C.data -= 0.1 * c.C.grad
            params.zero_grad()
            project_zero_diag(c)
        assert abs(c.C.data[0, 1] - 0.5) < 1e-4

    def test_closed_form_ridge_matches_two_sample_formula(self):
        z = np.array([0.6, 0.8])
        C = ridge_self_expression(np.vstack([z, z]), lam=1.0)
        np.testing.assert_allclose(C, [[0.0, 0.5], [0.5, 0.0]], atol=1e-14)

    def test_ridge_normal_equations(self):
        rng = np.random.default_rng(7)
        Z = rng.standard_normal((8, 3))
        C = ridge_self_expression(Z, 0.1)
        assert np.all(np.diag(C) == 0)
        for i in range(8):
            others = [j for j in range(8) if j != i]
            A = Z[others]
            grad = -2 * A @ (Z[i] - C[i, others] @ A) + 2 * 0.1 * C[i, others]
            assert np.abs(grad).max() < 1e-10
