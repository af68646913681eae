import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvqtok.distill import (PROB_FLOOR, AlignLayer, LossWeights, SemanticProjection, acoustic_loss, align_forward,
                            encodec_loss, generator_loss, semantic_loss)
from rvqtok.tensorcore import DimensionError, NumericError, grad_check, numerical_gradient, softmax_rows

from helpers import LossModule
from oracles import kl_direct, semantic_direct

LOG1P_EXP_M1 = 0.31326168751822286  # log(1 + e^-1)
LOG1P_EXP_1 = 1.3132616875182228  # log(1 + e)


class TestSemanticLoss:
    def test_identical(self):
        s = np.random.default_rng(0).normal(size=(10, 6))
        assert semantic_loss(s, s)[0] == pytest.approx(LOG1P_EXP_M1, abs=1e-12)

    def test_negated(self):
        s = np.random.default_rng(1).normal(size=(10, 6))
        assert semantic_loss(-s, s)[0] == pytest.approx(LOG1P_EXP_1, abs=1e-12)

    def test_zero_channel_counts_as_log2(self):
        s = np.random.default_rng(2).normal(size=(5, 2))
        z = s.copy()
        z[:, 1] = 0.0
        loss, g = semantic_loss(z, s)
        assert loss == pytest.approx((LOG1P_EXP_M1 + math.log(2)) / 2, abs=1e-12)
        assert np.all(np.isfinite(g))

    def test_direct_and_finite_differences(self):
        rng = np.random.default_rng(3)
        z, s = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        loss, g = semantic_loss(z, s)
        assert loss == pytest.approx(semantic_direct(z, s), abs=1e-12)
        np.testing.assert_allclose(g, numerical_gradient(lambda v: semantic_loss(v, s)[0], z), rtol=1e-6, atol=1e-10)

    def test_frame_axis(self):
        rng = np.random.default_rng(4)
        z, s = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert semantic_loss(z, s, "frame")[0] == pytest.approx(semantic_direct(z.T, s.T), abs=1e-12)
        with pytest.raises(ValueError):
            semantic_loss(z, s, "diagonal")

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            semantic_loss(np.zeros((3, 2)), np.zeros((4, 2)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_joint_channel_scaling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        z, s = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        c = rng.uniform(0.1, 10.0, 5)
        assert semantic_loss(z * c, s * c)[0] == pytest.approx(semantic_loss(z, s)[0], abs=1e-9)


class TestAcousticLoss:
    def test_equal_is_zero(self):
        z = np.random.default_rng(0).normal(size=(4, 6))
        assert abs(acoustic_loss(z, softmax_rows(z))[0]) < 1e-9

    def test_one_hot_against_uniform(self):
        # softmax of (1000, 0) is (1, 0) to double precision
        assert acoustic_loss([[1000.0, 0.0]], [[0.5, 0.5]])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_direct_and_finite_differences(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(3, 5))
        a = softmax_rows(rng.normal(size=(3, 5)))
        loss, dz, da = acoustic_loss(z, a)
        assert loss == pytest.approx(kl_direct(z, a), abs=1e-12)
        np.testing.assert_allclose(dz, numerical_gradient(lambda v: acoustic_loss(v, a)[0], z), rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(da, numerical_gradient(lambda v: acoustic_loss(z, v)[0], a), rtol=1e-6, atol=1e-10)

    def test_floor_prevents_log_zero(self):
        loss, dz, da = acoustic_loss([[0.0, 0.0]], [[1.0, 0.0]])
        assert math.isfinite(loss) and loss == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / PROB_FLOOR))
        assert np.all(np.isfinite(dz)) and np.all(np.isfinite(da))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(3, 4)) * 5
        a = softmax_rows(rng.normal(size=(3, 4)) * 5)
        assert acoustic_loss(z, a)[0] >= -1e-12


class TestGeneratorLoss:
    def test_all_zero(self):
        assert generator_loss({"time": 0, "freq": 0, "vq": 0, "semantic": 0, "acoustic": 0}, LossWeights())[0] == 0

    def test_reduces_to_encodec(self):
        w = LossWeights(lambda_semantic=0.0, lambda_acoustic=0.0)
        total, parts = generator_loss({"time": 0.3, "freq": 2.0, "vq": 0.1, "semantic": 5.0, "acoustic": 7.0}, w)
        assert total == encodec_loss(0.3, 2.0, 0.1, w) == parts["encodec"]
        assert parts["semantic"] == 5.0 and parts["acoustic"] == 7.0

    def test_default_weights_arithmetic(self):
        total, _ = generator_loss({"encodec": 1.0, "semantic": 0.2, "acoustic": 0.4}, LossWeights())
        assert total == pytest.approx(1.3, abs=1e-15)

    def test_nan_part_is_named(self):
        with pytest.raises(NumericError, match="semantic"):
            generator_loss({"semantic": float("nan")}, LossWeights())

    def test_adversarial_weights_rejected(self):
        with pytest.raises(ValueError, match="discriminator"):
            LossWeights(lambda_adversarial=1.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_time=-1.0)

    def test_distillation_weight_defaults(self):
        w = LossWeights()
        assert (w.lambda_semantic, w.lambda_acoustic) == (0.5, 0.5)


class TestAlignLayer:
    def test_zero_teacher_gives_uniform(self):
        layer = AlignLayer(6, 4, rng=np.random.default_rng(0))
        out = align_forward(layer, np.random.default_rng(1).normal(size=(5, 6)), np.zeros(4))
        np.testing.assert_allclose(out, 1 / 6, atol=1e-15)

    @pytest.mark.parametrize("slots", [1, 4])
    def test_rows_on_simplex(self, slots):
        rng = np.random.default_rng(2)
        layer = AlignLayer(8, 5, slots=slots, rng=rng)
        out = layer.forward(rng.normal(size=(7, 8)), rng.normal(size=5))
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_eight_heads_by_default(self):
        assert AlignLayer(4, 4).heads == 8

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            AlignLayer(4, 4, heads=3, width=32)

    def test_non_finite_parameter(self):
        layer = AlignLayer(4, 3)
        layer.params["q_w"][0, 0] = np.nan
        with pytest.raises(NumericError):
            layer.forward(np.zeros((2, 4)), np.ones(3))

    def test_teacher_dim_checked(self):
        with pytest.raises(DimensionError):
            AlignLayer(4, 3).forward(np.zeros((2, 4)), np.ones(5))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("slots", [1, 4])
    def test_grad_check(self, seed, slots):
        rng = np.random.default_rng(seed)
        layer = AlignLayer(6, 5, heads=8, width=16, slots=slots, rng=rng)
        for k in ("teacher_b", "q_b", "k_b", "v_b", "o_b"):
            layer.params[k] = rng.normal(scale=0.3, size=layer.params[k].shape)
        rep = grad_check(layer, (rng.normal(size=(4, 6)), rng.normal(size=5)), eps=1e-5, tol=1e-4, seed=seed)
        assert rep.passed, rep


class TestLossGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_cosine_loss(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(6, 4))
        mod = LossModule(lambda z: semantic_loss(z, s))
        assert grad_check(mod, rng.normal(size=(6, 4)), eps=1e-5, tol=1e-4).passed

    @pytest.mark.parametrize("seed", range(5))
    def test_kl_loss(self, seed):
        rng = np.random.default_rng(seed)
        mod = LossModule(acoustic_loss)
        a = softmax_rows(rng.normal(size=(3, 5)))
        assert grad_check(mod, (rng.normal(size=(3, 5)), a), eps=1e-5, tol=1e-4).passed

    def test_semantic_projection_identity(self):
        proj = SemanticProjection(4, 4)
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(proj.forward(x), x)
        assert SemanticProjection(4, 6).forward(x).shape == (3, 6)
