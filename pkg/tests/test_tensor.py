import math

import numpy as np
import pytest

from segens.tensor import (Tensor, Adam, backward, no_grad, current_tape, conv2d, relu,
                           sigmoid, softmax_channels, maxpool2d_with_indices, max_unpool2d,
                           upsample_nearest2x, concat_channels, cce_loss, bce_loss)

import reference as ref


def t(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestConv2d:
    def test_zero_input_gives_zero_output(self):
        x = t(np.zeros((1, 2, 6, 6)))
        w = t(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
        b = t(np.zeros(3))
        assert np.all(conv2d(x, w, b, 1, 1).data == 0.0)

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(1)
        x = t(rng.standard_normal((1, 1, 5, 5)))
        w = t(np.ones((1, 1, 1, 1)))
        b = t(np.zeros(1))
        out = conv2d(x, w, b, 1, 0)
        np.testing.assert_allclose(out.data, x.data)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = t(rng.standard_normal((1, 2, 5, 5)))
        w = t(rng.standard_normal((3, 2, 3, 3)))
        b = t(rng.standard_normal(3))
        out = conv2d(x, w, b, 1, 1)
        expected = ref.conv2d_ref(x.data, w.data, b.data, 1, 1)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_channel_mismatch_names_both_shapes(self):
        x = t(np.zeros((1, 3, 4, 4)))
        w = t(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 4, 3, 3\)"):
            conv2d(x, w, None)

    def test_invalid_stride_pad(self):
        x = t(np.zeros((1, 1, 4, 4)))
        w = t(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="stride"):
            conv2d(x, w, None, stride=0)
        with pytest.raises(ValueError, match="pad"):
            conv2d(x, w, None, pad=-1)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = (conv2d(x, w, b, 1, 1) * conv2d(x, w, b, 1, 1)).sum()
        backward(loss)

        def loss_of():
            with no_grad():
                y = conv2d(x, w, b, 1, 1)
                return (y * y).sum().item()

        for p in (x, w, b):
            fd = ref.fd_gradient(loss_of, p.data)
            np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-6)


class TestMaxPool:
    def test_constant_input_ties_to_first(self):
        x = t(np.full((1, 2, 4, 4), 3.5))
        y, idx = maxpool2d_with_indices(x)
        assert np.all(y.data == 3.5)
        assert np.all(idx.values == 0)

    def test_forced_argmax(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, idx = maxpool2d_with_indices(x)
        assert y.data.reshape(()) == 4.0
        assert idx.values.reshape(()) == 3  # window position (1, 1)

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(4)
        x = t(rng.standard_normal((1, 3, 8, 8)))
        y, idx = maxpool2d_with_indices(x)
        y_ref, idx_ref = ref.maxpool2x2_ref(x.data)
        np.testing.assert_allclose(y.data, y_ref)
        np.testing.assert_array_equal(idx.values, idx_ref)

    def test_rejects_odd_dims(self):
        with pytest.raises(ValueError, match="even"):
            maxpool2d_with_indices(t(np.zeros((1, 1, 5, 4))))

    def test_rejects_unsupported_window(self):
        with pytest.raises(ValueError, match="k=2"):
            maxpool2d_with_indices(t(np.zeros((1, 1, 4, 4))), k=3, stride=3)

    def test_backward_routes_to_argmax(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        y, idx = maxpool2d_with_indices(x)
        backward(y.sum())
        _, idx_ref = ref.maxpool2x2_ref(x.data)
        expected = ref.unpool2x2_ref(np.ones_like(y.data), idx_ref)
        np.testing.assert_allclose(x.grad, expected)


class TestUnpool:
    def test_pool_unpool_structural_identity(self):
        # non-negative inputs: pooling always follows a relu in the nets
        rng = np.random.default_rng(6)
        x = t(rng.random((2, 3, 8, 8)))
        y, idx = maxpool2d_with_indices(x)
        up = max_unpool2d(y, idx)
        y2, idx2 = maxpool2d_with_indices(up)
        np.testing.assert_allclose(y2.data, y.data)
        # nonzero only at per-window argmax positions
        _, idx_ref = ref.maxpool2x2_ref(x.data)
        placed = ref.unpool2x2_ref(y.data, idx_ref)
        np.testing.assert_allclose(up.data, placed)

    def test_zero_input(self):
        x = t(np.zeros((1, 2, 4, 4)))
        y, idx = maxpool2d_with_indices(x)
        assert np.all(max_unpool2d(y, idx).data == 0.0)

    def test_random_indices_place_exactly_one_per_window(self):
        rng = np.random.default_rng(7)
        x = t(rng.standard_normal((1, 2, 4, 4)))
        _, idx = maxpool2d_with_indices(t(rng.standard_normal((1, 2, 8, 8))))
        up = max_unpool2d(x, idx)
        np.testing.assert_allclose(up.data, ref.unpool2x2_ref(x.data, idx.values))
        win = up.data.reshape(1, 2, 4, 2, 4, 2)
        nonzero_per_window = (win != 0).sum(axis=(3, 5))
        assert nonzero_per_window.max() <= 1

    def test_conservation(self):
        rng = np.random.default_rng(8)
        x = t(rng.random((1, 2, 4, 4)) + 1.0)
        _, idx = maxpool2d_with_indices(t(rng.standard_normal((1, 2, 8, 8))))
        up = max_unpool2d(x, idx)
        assert up.data.sum() == x.data.sum()

    def test_shape_mismatch_rejected(self):
        x = t(np.zeros((1, 2, 4, 4)))
        _, idx = maxpool2d_with_indices(t(np.zeros((1, 2, 4, 4))))
        with pytest.raises(ValueError, match="does not match"):
            max_unpool2d(x, idx)


class TestUpsample:
    def test_definitional(self):
        x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = upsample_nearest2x(x)
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_allclose(out.data[0, 0], expected)

    def test_constant(self):
        out = upsample_nearest2x(t(np.full((1, 3, 4, 4), 2.5)))
        assert np.all(out.data == 2.5)

    def test_gradient_sums_four_replicas(self):
        x = Tensor(np.random.default_rng(9).standard_normal((1, 2, 3, 3)), requires_grad=True)
        backward(upsample_nearest2x(x).sum())
        assert np.all(x.grad == 4.0)


class TestConcat:
    def test_shapes(self):
        out = concat_channels(t(np.zeros((1, 2, 4, 4))), t(np.ones((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)

    def test_round_trip(self):
        rng = np.random.default_rng(10)
        a = t(rng.standard_normal((1, 2, 4, 4)))
        out = concat_channels(a, t(np.zeros((1, 3, 4, 4))))
        np.testing.assert_allclose(out.data[:, :2], a.data)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            concat_channels(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 2, 8, 8))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        scale = Tensor(rng.standard_normal((1, 3, 3, 3)))
        loss = (concat_channels(a, b) * scale).sum()
        backward(loss)

        def loss_of():
            with no_grad():
                return (concat_channels(a, b) * scale).sum().item()

        for p in (a, b):
            fd = ref.fd_gradient(loss_of, p.data)
            np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-8)


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert sigmoid(t([0.0])).data[0] == 0.5

    def test_sigmoid_range_and_stability(self):
        out = sigmoid(t([-30.0, -5.0, 0.0, 5.0, 30.0])).data
        assert np.all((out > 0) & (out < 1))
        # far outside the representable open interval it saturates, never NaNs
        extreme = sigmoid(t([-1e4, 1e4])).data
        assert not np.any(np.isnan(extreme))

    def test_softmax_uniform_logits(self):
        out = softmax_channels(t(np.zeros((1, 4, 2, 2))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_softmax_requires_two_channels(self):
        with pytest.raises(ValueError, match="C >= 2"):
            softmax_channels(t(np.zeros((1, 1, 2, 2))))

    def test_softmax_normalization_random_cases(self):
        rng = np.random.default_rng(12)
        for _ in range(60):
            c = int(rng.integers(2, 7))
            x = t(rng.standard_normal((1, c, 3, 3)) * rng.uniform(0.1, 50))
            sums = softmax_channels(x).data.sum(axis=1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_relu_gradient_convention(self):
        x = Tensor(np.array([[[[-2.0, 0.0, 3.0, -0.5]]]]), requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_allclose(x.grad, [[[[0.0, 0.0, 1.0, 0.0]]]])


class TestCCE:
    def test_confident_logits_near_zero_loss(self):
        target = np.zeros((1, 2, 2), dtype=np.int64)
        logits = np.zeros((1, 2, 2, 2))
        logits[:, 0] = 20.0
        assert cce_loss(t(logits), target).item() < 0.01

    def test_uniform_logits_gives_ln2(self):
        target = np.random.default_rng(13).integers(0, 2, (1, 3, 3))
        loss = cce_loss(t(np.zeros((1, 2, 3, 3))), target)
        assert abs(loss.item() - math.log(2)) < 1e-9

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(14)
        logits = t(rng.standard_normal((1, 3, 4, 4)) * 3)
        target = rng.integers(0, 3, (1, 4, 4))
        assert abs(cce_loss(logits, target).item() - ref.cce_ref(logits.data, target)) < 1e-6

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ValueError, match="class index"):
            cce_loss(t(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        logits = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        target = rng.integers(0, 3, (1, 3, 3))
        backward(cce_loss(logits, target))

        def loss_of():
            with no_grad():
                return cce_loss(logits, target).item()

        fd = ref.fd_gradient(loss_of, logits.data)
        np.testing.assert_allclose(logits.grad, fd, rtol=1e-4, atol=1e-8)


class TestBCE:
    def test_perfect_agreement(self):
        ones = np.ones((1, 1, 2, 2))
        assert bce_loss(ones, t(ones)).item() < 1e-5

    def test_half_confidence_gives_ln2(self):
        loss = bce_loss(np.ones((1, 1, 2, 2)), t(np.full((1, 1, 2, 2), 0.5)))
        assert abs(loss.item() - math.log(2)) < 1e-9

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(16)
        tt = rng.random((1, 2, 4, 4))
        ss = rng.uniform(0.01, 0.99, (1, 2, 4, 4))
        assert abs(bce_loss(tt, t(ss)).item() - ref.bce_ref(tt, ss)) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            bce_loss(np.zeros((1, 1, 2, 2)), t(np.zeros((1, 1, 4, 4))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        tt = rng.random((1, 1, 3, 3))
        s = Tensor(rng.uniform(0.05, 0.95, (1, 1, 3, 3)), requires_grad=True)
        backward(bce_loss(tt, s))

        def loss_of():
            with no_grad():
                return bce_loss(tt, s).item()

        fd = ref.fd_gradient(loss_of, s.data)
        np.testing.assert_allclose(s.grad, fd, rtol=1e-4, atol=1e-8)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(18).standard_normal((2, 1, 3, 3)), requires_grad=True)
        backward(x.sum())
        assert np.all(x.grad == 1.0)

    def test_quadratic(self):
        x = Tensor(np.random.default_rng(19).standard_normal((1, 1, 4, 4)), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_fanout_accumulates(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward((x + x).sum())
        assert np.all(x.grad == 2.0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x + x)

    def test_tape_consumed(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        loss = x.sum()
        backward(loss)
        assert len(current_tape().nodes) == 0
        backward(loss)  # no-op on an empty tape
        assert np.all(x.grad == 1.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with no_grad():
            y = x * x
        assert y.tape_id is None and not y.requires_grad
        assert len(current_tape().nodes) == 0


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=0.001)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.data[0] - (-0.001 / (1.0 + 1e-8))) < 1e-6

    def test_descends_quadratic(self):
        w = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        opt = Adam([w], lr=0.05)
        for _ in range(50):
            backward(((w + (-3.0)) * (w + (-3.0))).sum())
            opt.step()
        assert abs(w.data.reshape(()) - 3.0) < 3.0

    def test_missing_gradient_rejected(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p])
        with pytest.raises(ValueError, match="missing gradient"):
            opt.step()

    def test_frozen_param_rejected_at_registration(self):
        p = Tensor(np.zeros(2), requires_grad=False)
        with pytest.raises(ValueError, match="does not require gradients"):
            Adam([p])

    def test_gradients_cleared_after_step(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([p])
        p.grad = np.ones(2)
        opt.step()
        assert p.grad is None
