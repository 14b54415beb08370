"""Unit tests for the network engine, optimizers and checkpoints."""

import struct

import numpy as np
import pytest

from fedmeta.errors import (
    CorruptHeaderError,
    FedmetaError,
    LabelError,
    LayoutMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    SpecError,
    TruncatedFileError,
)
from fedmeta.nn_core import (
    BN_EPSILON,
    NetworkSpec,
    OptimizerState,
    ParamVector,
    backward,
    cosine_similarity,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    glorot_bound,
    glorot_init,
    layout_size,
    load_checkpoint,
    one_hot,
    optimizer_step,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)

pytestmark = pytest.mark.unit


def loss_and_grad(params, spec, batch, labels):
    logits, cache = forward(params, spec, batch, mode='train')
    loss, grad = softmax_cross_entropy(logits, one_hot(labels, spec.ways))
    return loss, backward(cache, grad)


def reference_forward(params, spec, batch):
    """Train-mode forward written with direct convolution and explicit loops."""
    x = np.asarray(batch, dtype=np.float64).transpose(0, 3, 1, 2)
    k, p = spec.kernel_size, spec.pool
    pad = k // 2
    for m in range(spec.modules):
        weight = params.segment(f'conv{m}.weight')
        bias = params.segment(f'conv{m}.bias')
        gamma = params.segment(f'bn{m}.gamma')
        beta = params.segment(f'bn{m}.beta')
        n, c, h, w = x.shape
        padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        padded[:, :, pad:pad + h, pad:pad + w] = x
        z = np.zeros((n, spec.filters, h, w))
        for i in range(n):
            for f in range(spec.filters):
                for r in range(h):
                    for col in range(w):
                        z[i, f, r, col] = bias[f] + np.sum(weight[f] * padded[i, :, r:r + k, col:col + k])
        out = np.zeros((n, spec.filters, h // p, w // p))
        for f in range(spec.filters):
            mean = z[:, f].mean()
            var = ((z[:, f] - mean) ** 2).mean()
            relu = np.maximum(gamma[f] * (z[:, f] - mean) / np.sqrt(var + BN_EPSILON) + beta[f], 0.0)
            for i in range(n):
                for r in range(h // p):
                    for col in range(w // p):
                        out[i, f, r, col] = relu[i, r * p:(r + 1) * p, col * p:(col + 1) * p].max()
        x = out
    features = x.reshape(x.shape[0], -1)
    return features @ params.segment('fc.weight') + params.segment('fc.bias')


def central_difference(params, spec, batch, labels, index, eps):
    """Finite-difference derivative, and whether no ReLU or pooling choice flipped."""
    plus, minus = params.copy(), params.copy()
    plus.values[index] += eps
    minus.values[index] -= eps
    targets = one_hot(labels, spec.ways)
    logits_plus, cache_plus = forward(plus, spec, batch)
    logits_minus, cache_minus = forward(minus, spec, batch)
    up, _ = softmax_cross_entropy(logits_plus, targets)
    down, _ = softmax_cross_entropy(logits_minus, targets)
    smooth = all(np.array_equal(a['active'], b['active']) and np.array_equal(a['pool_index'], b['pool_index'])
                 for a, b in zip(cache_plus.modules, cache_minus.modules))
    return (up - down) / (2 * eps), smooth


def numeric_gradient(params, spec, batch, labels, indices, eps=1e-6):
    grads = []
    for i in indices:
        plus, minus = params.copy(), params.copy()
        plus.values[i] += eps
        minus.values[i] -= eps
        up, _ = loss_and_grad(plus, spec, batch, labels)
        down, _ = loss_and_grad(minus, spec, batch, labels)
        grads.append((up - down) / (2 * eps))
    return np.array(grads)


class TestParamVector:
    """Test flat parameter vectors."""

    def test_segments_are_views(self, tiny_spec):
        """Writes through a segment view land in the flat vector."""
        params = ParamVector.zeros(tiny_spec.layout())
        params.segment('fc.bias')[:] = 2.0
        assert params.values[-tiny_spec.ways:].tolist() == [2.0] * tiny_spec.ways

    def test_wrong_size_rejected(self, tiny_spec):
        with pytest.raises(LayoutMismatchError):
            ParamVector(np.zeros(5), tiny_spec.layout())

    def test_arithmetic_keeps_dtype(self, tiny_spec):
        a = glorot_init(tiny_spec, seed=1)
        b = glorot_init(tiny_spec, seed=2)
        assert (a + b).dtype == np.float32
        np.testing.assert_allclose((a - b).values, a.values - b.values, rtol=1e-6)
        np.testing.assert_allclose((a * 3.0).values, 3.0 * a.values, rtol=1e-6)

    def test_layout_mismatch(self, tiny_spec):
        a = glorot_init(tiny_spec, seed=1)
        other = glorot_init(tiny_spec.as_classifier(ways=4), seed=1)
        with pytest.raises(LayoutMismatchError):
            a + other

    def test_non_finite_result(self, tiny_spec):
        a = glorot_init(tiny_spec, seed=1)
        with pytest.raises(NonFiniteError):
            a * float('inf')

    def test_select_drops_segments(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=1)
        kept = params.select([n for n in params.names if not n.startswith('fc.')])
        assert kept.layout == tiny_spec.as_embedding().layout()
        np.testing.assert_array_equal(kept.segment('conv0.weight'), params.segment('conv0.weight'))


class TestNetworkSpec:
    """Test network shape bookkeeping."""

    def test_embedding_dim(self, tiny_spec):
        # 8x8 -> 4x4 -> 2x2 with 3 filters
        assert tiny_spec.embedding_dim == 12

    def test_layout_order(self, tiny_spec):
        names = [name for name, _ in tiny_spec.layout()]
        assert names[:4] == ['conv0.weight', 'conv0.bias', 'bn0.gamma', 'bn0.beta']
        assert names[-2:] == ['fc.weight', 'fc.bias']

    def test_embedding_has_no_classifier(self, tiny_spec):
        assert all(not name.startswith('fc.') for name, _ in tiny_spec.as_embedding().layout())

    def test_too_many_modules(self):
        with pytest.raises(SpecError):
            NetworkSpec(input_shape=(8, 8, 1), modules=4)

    def test_even_kernel_rejected(self):
        with pytest.raises(SpecError):
            NetworkSpec(input_shape=(8, 8, 1), modules=1, kernel_size=2)


class TestForwardBackward:
    """Test forward shapes and analytic gradients."""

    def test_output_shape(self, tiny_spec, tiny_params, random_batch):
        logits, _ = forward(tiny_params, tiny_spec, random_batch)
        assert logits.shape == (6, 3)

    def test_bad_batch_shape(self, tiny_spec, tiny_params):
        with pytest.raises(ShapeMismatchError):
            forward(tiny_params, tiny_spec, np.zeros((2, 7, 8, 1)))

    def test_non_finite_input(self, tiny_spec, tiny_params, random_batch):
        batch = random_batch.copy()
        batch[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            forward(tiny_params, tiny_spec, batch)

    def test_eval_needs_stats(self, tiny_spec, tiny_params, random_batch):
        with pytest.raises(FedmetaError):
            forward(tiny_params, tiny_spec, random_batch, mode='eval')

    def test_eval_with_batch_stats_matches_train(self, tiny_spec, tiny_params, random_batch):
        """Eval mode with the batch's own statistics reproduces train mode."""
        train_out, cache = forward(tiny_params, tiny_spec, random_batch, mode='train')
        eval_out, _ = forward(tiny_params, tiny_spec, random_batch, mode='eval', norm_stats=cache.norm_stats)
        np.testing.assert_allclose(eval_out, train_out, rtol=1e-10, atol=1e-12)

    def test_gradient_matches_finite_differences(self, tiny_spec, tiny_params, random_batch):
        labels = np.array([0, 1, 2, 0, 1, 2])
        _, analytic = loss_and_grad(tiny_params, tiny_spec, random_batch, labels)
        rng = np.random.default_rng(0)
        indices = rng.choice(len(tiny_params), size=40, replace=False)
        numeric = numeric_gradient(tiny_params, tiny_spec, random_batch, labels, indices)
        np.testing.assert_allclose(analytic.values[indices], numeric, rtol=1e-4, atol=1e-7)

    def test_gradient_of_every_segment(self, tiny_spec, tiny_params, random_batch):
        """One finite-difference check per segment, so no segment is skipped."""
        labels = np.array([2, 1, 0, 0, 1, 2])
        _, analytic = loss_and_grad(tiny_params, tiny_spec, random_batch, labels)
        start = 0
        indices = []
        for _, shape in tiny_spec.layout():
            indices.append(start)
            start += int(np.prod(shape))
        numeric = numeric_gradient(tiny_params, tiny_spec, random_batch, labels, indices)
        np.testing.assert_allclose(analytic.values[indices], numeric, rtol=1e-4, atol=1e-7)

    def test_embedding_backward(self, tiny_spec, random_batch):
        """Gradient of a linear functional of the embedding."""
        spec = tiny_spec.as_embedding()
        params = glorot_init(spec, seed=11, dtype=np.float64)
        weights = np.random.default_rng(1).normal(size=(6, spec.embedding_dim))

        def objective(p):
            out, _ = forward(p, spec, random_batch)
            return float((out * weights).sum())

        _, cache = forward(params, spec, random_batch)
        analytic = backward(cache, weights)
        eps = 1e-6
        for i in (0, 5, len(params) - 1):
            plus, minus = params.copy(), params.copy()
            plus.values[i] += eps
            minus.values[i] -= eps
            numeric = (objective(plus) - objective(minus)) / (2 * eps)
            assert abs(analytic.values[i] - numeric) < 1e-5 * max(1.0, abs(numeric))

    def test_matches_direct_convolution(self):
        spec = NetworkSpec(input_shape=(8, 8, 1), modules=2, filters=4, ways=5)
        rng = np.random.default_rng(12)
        params = ParamVector(rng.normal(scale=0.5, size=layout_size(spec.layout())), spec.layout())
        batch = rng.random((3, 8, 8, 1))
        logits, _ = forward(params, spec, batch)
        np.testing.assert_allclose(logits, reference_forward(params, spec, batch), rtol=1e-6, atol=1e-9)

    def test_gradient_suite_over_random_nets(self):
        """20 random nets, 30 components each; components whose step crosses a kink are skipped."""
        rng = np.random.default_rng(2024)
        checked = agreeing = 0
        for net in range(20):
            size = int(rng.choice([8, 16]))
            spec = NetworkSpec(input_shape=(size, size, 1), modules=int(rng.integers(1, 3)),
                               filters=int(rng.integers(2, 9)), ways=5)
            params = glorot_init(spec, seed=net, dtype=np.float64)
            for m in range(spec.modules):
                params.segment(f'conv{m}.bias')[:] = rng.normal(scale=0.1, size=spec.filters)
                params.segment(f'bn{m}.gamma')[:] = 1.0 + rng.normal(scale=0.1, size=spec.filters)
                params.segment(f'bn{m}.beta')[:] = rng.normal(scale=0.1, size=spec.filters)
            batch = rng.random((5, size, size, 1))
            labels = rng.integers(0, 5, size=5)
            _, analytic = loss_and_grad(params, spec, batch, labels)
            for index in rng.choice(len(params), size=min(30, len(params)), replace=False):
                numeric, smooth = central_difference(params, spec, batch, labels, index, eps=1e-5)
                if not smooth:
                    continue
                checked += 1
                gap = abs(analytic.values[index] - numeric)
                agreeing += gap <= 1e-6 or gap <= 1e-4 * abs(numeric)
        assert checked >= 500
        assert agreeing / checked >= 0.999

    def test_dead_path_has_zero_gradient(self, random_batch):
        """A module whose ReLUs are all off passes no gradient to its parameters."""
        spec = NetworkSpec(input_shape=(8, 8, 1), modules=1, filters=3, ways=3)
        params = glorot_init(spec, seed=2, dtype=np.float64)
        params.segment('bn0.gamma')[:] = 0.0
        params.segment('bn0.beta')[:] = -1.0
        _, grads = loss_and_grad(params, spec, random_batch, np.array([0, 1, 2, 0, 1, 2]))
        for name in ('conv0.weight', 'conv0.bias', 'bn0.gamma', 'bn0.beta', 'fc.weight'):
            assert np.all(grads.segment(name) == 0.0)

    def test_backward_is_linear_in_upstream(self, tiny_spec, tiny_params, random_batch):
        _, cache = forward(tiny_params, tiny_spec, random_batch)
        upstream = np.random.default_rng(5).normal(size=(6, 3))
        once = backward(cache, upstream)
        twice = backward(cache, 2.0 * upstream)
        np.testing.assert_allclose(twice.values, 2.0 * once.values, rtol=1e-12, atol=1e-15)

    def test_zero_weights_give_uniform_softmax(self, random_batch):
        spec = NetworkSpec(input_shape=(8, 8, 1), modules=2, filters=3, ways=5)
        logits, _ = forward(ParamVector.zeros(spec.layout(), dtype=np.float64), spec, random_batch)
        assert np.all(logits == logits[0, 0])
        np.testing.assert_allclose(softmax(logits, axis=1), 0.2)

    def test_single_example_matches_batch_in_eval(self, tiny_spec, tiny_params, random_batch):
        """With fixed statistics, an example's logits do not depend on its batch."""
        _, cache = forward(tiny_params, tiny_spec, random_batch)
        batched, _ = forward(tiny_params, tiny_spec, random_batch, mode='eval', norm_stats=cache.norm_stats)
        for i in (0, 2, 5):
            single, _ = forward(tiny_params, tiny_spec, random_batch[i:i + 1], mode='eval',
                                norm_stats=cache.norm_stats)
            np.testing.assert_allclose(single[0], batched[i], rtol=1e-12, atol=1e-14)

    def test_backward_rejects_eval_cache(self, tiny_spec, tiny_params, random_batch):
        _, cache = forward(tiny_params, tiny_spec, random_batch)
        _, eval_cache = forward(tiny_params, tiny_spec, random_batch, mode='eval', norm_stats=cache.norm_stats)
        with pytest.raises(FedmetaError):
            backward(eval_cache, np.zeros((6, 3)))


class TestLoss:
    """Test softmax cross-entropy."""

    def test_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros((2, 4)), one_hot([0, 3], 4))
        assert loss == pytest.approx(np.log(4))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_rejects_non_one_hot(self):
        with pytest.raises(LabelError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.5, 0.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            softmax_cross_entropy(np.zeros((2, 3)), one_hot([0], 3))

    def test_uniform_five_way(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 5)), one_hot([0, 2, 4], 5))
        assert loss == pytest.approx(1.6094379, abs=1e-6)

    def test_large_margin(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 30.0
        loss, _ = softmax_cross_entropy(logits, one_hot([2], 5))
        assert 0.0 <= loss < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(scale=2.0, size=(4, 5))
        labels = one_hot([0, 3, 1, 4], 5)
        _, grad = softmax_cross_entropy(logits, labels)
        numeric = np.zeros_like(logits)
        eps = 1e-6
        for i in range(4):
            for j in range(5):
                plus, minus = logits.copy(), logits.copy()
                plus[i, j] += eps
                minus[i, j] -= eps
                numeric[i, j] = (softmax_cross_entropy(plus, labels)[0]
                                 - softmax_cross_entropy(minus, labels)[0]) / (2 * eps)
        np.testing.assert_allclose(grad, numeric, atol=1e-6)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_softmax_shift_invariant(self):
        logits = np.random.default_rng(9).normal(size=(3, 5))
        np.testing.assert_allclose(softmax(logits + 100.0, axis=1), softmax(logits, axis=1), atol=1e-12)


class TestOptimizer:
    """Test SGD and Adam steps."""

    def test_sgd_step(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=1, dtype=np.float64)
        grads = params.zeros_like()
        grads.values[:] = 1.0
        updated, state = optimizer_step(OptimizerState(kind='sgd', learning_rate=0.1), params, grads)
        np.testing.assert_allclose(updated.values, params.values - 0.1)
        assert state.step == 1

    def test_first_adam_step_is_lr_sized(self, tiny_spec):
        """With bias correction, the first Adam step moves each weight by about lr."""
        params = glorot_init(tiny_spec, seed=1, dtype=np.float64)
        grads = params.zeros_like()
        grads.values[:] = np.linspace(-2, 2, len(params)) + 0.01
        updated, _ = optimizer_step(OptimizerState(kind='adam', learning_rate=0.001), params, grads)
        np.testing.assert_allclose(np.abs(updated.values - params.values), 0.001, rtol=1e-4)

    def test_state_is_not_mutated(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=1, dtype=np.float64)
        grads = params.zeros_like()
        grads.values[:] = 0.5
        state = OptimizerState()
        optimizer_step(state, params, grads)
        assert state.step == 0 and state.m is None

    def test_non_finite_gradient(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=1)
        grads = params.zeros_like()
        grads.values[0] = np.inf
        with pytest.raises(NonFiniteError):
            optimizer_step(OptimizerState(), params, grads)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            OptimizerState(kind='rmsprop')

    def test_sgd_worked_example(self):
        layout = (('w', (2,)),)
        params = ParamVector(np.array([1.0, 2.0]), layout)
        updated, _ = optimizer_step(OptimizerState(kind='sgd', learning_rate=0.5), params,
                                    ParamVector(np.array([2.0, 2.0]), layout))
        np.testing.assert_array_equal(updated.values, [0.0, 1.0])

    def test_adam_trajectory_on_quadratic(self):
        """Five Adam steps on 0.5 * a * (w - c)^2 against a scalar loop."""
        layout = (('w', (2,)),)
        a, c = np.array([2.0, 0.5]), np.array([0.5, 0.3])
        params = ParamVector(np.array([1.0, -2.0]), layout)
        state = OptimizerState(kind='adam', learning_rate=0.1)
        for _ in range(5):
            params, state = optimizer_step(state, params, ParamVector(a * (params.values - c), layout))

        for k, start in enumerate((1.0, -2.0)):
            w, v = start, 0.0
            for t in range(1, 6):
                g = a[k] * (w - c[k])
                v = 0.999 * v + 0.001 * g * g
                w -= 0.1 * g / (np.sqrt(v / (1.0 - 0.999 ** t)) + 1e-8)
            assert abs(params.values[k] - w) < 1e-10

    def test_zero_gradient_decays_moments(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=1, dtype=np.float64)
        grads = params.zeros_like()
        grads.values[:] = np.linspace(-1, 1, len(params))
        params, state = optimizer_step(OptimizerState(kind='adam'), params, grads)
        unchanged, decayed = optimizer_step(state, params, params.zeros_like())
        assert unchanged.values.tobytes() == params.values.tobytes()
        assert np.all(decayed.m == 0.0)
        np.testing.assert_allclose(decayed.v, 0.999 * state.v, rtol=1e-15)


class TestInitialization:
    """Test Glorot initialization."""

    def test_same_seed_same_bits(self, tiny_spec):
        assert glorot_init(tiny_spec, 4).values.tobytes() == glorot_init(tiny_spec, 4).values.tobytes()

    def test_within_bounds(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=3)
        for name, array in params.segments():
            bound = glorot_bound(name, array.shape)
            if bound is not None:
                assert np.abs(array).max() <= bound
            elif name.endswith('.gamma'):
                assert np.all(array == 1.0)
            else:
                assert np.all(array == 0.0)

    def test_large_segment_is_centred(self):
        """The mean of a 10240-weight segment sits within 3 standard errors of 0."""
        spec = NetworkSpec(input_shape=(16, 16, 1), modules=1, filters=32, ways=5)
        within = 0
        for seed in range(10):
            weights = glorot_init(spec, seed=seed, dtype=np.float64).segment('fc.weight')
            assert weights.size == 10240
            standard_error = glorot_bound('fc.weight', weights.shape) / np.sqrt(3.0) / np.sqrt(weights.size)
            within += abs(weights.mean()) <= 3 * standard_error
        assert within >= 9


class TestCosine:
    def test_zero_vector(self):
        assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0

    def test_parallel(self):
        assert cosine_similarity(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == pytest.approx(1.0)


class TestCheckpoint:
    """Test the FMB1 checkpoint container."""

    def test_round_trip(self, tiny_spec, tmp_path):
        params = glorot_init(tiny_spec, seed=9)
        path = str(tmp_path / 'model.fmb')
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.layout == params.layout
        assert loaded.values.tobytes() == params.values.tobytes()

    def test_extra_segments(self, tiny_spec):
        params = glorot_init(tiny_spec, seed=9)
        loaded = decode_checkpoint(encode_checkpoint(params, {'head.scales': np.ones(3)}))
        assert loaded.names[-1] == 'head.scales'
        np.testing.assert_array_equal(loaded.segment('head.scales'), np.ones(3))

    def test_bad_magic(self, tiny_spec):
        data = encode_checkpoint(glorot_init(tiny_spec, seed=9))
        with pytest.raises(CorruptHeaderError):
            decode_checkpoint(b'XXXX' + data[4:])

    def test_truncated_payload(self, tiny_spec):
        data = encode_checkpoint(glorot_init(tiny_spec, seed=9))
        with pytest.raises(TruncatedFileError) as info:
            decode_checkpoint(data[:-8])
        assert info.value.missing == 8

    def test_trailing_bytes(self, tiny_spec):
        data = encode_checkpoint(glorot_init(tiny_spec, seed=9))
        with pytest.raises(CorruptHeaderError):
            decode_checkpoint(data + b'\x00')

    def test_name_not_utf8(self):
        data = (b'FMB1' + struct.pack('<I', 1) + struct.pack('<H', 2) + b'\xff\xfe'
                + struct.pack('<B', 1) + struct.pack('<I', 1) + struct.pack('<f', 0.0))
        with pytest.raises(CorruptHeaderError):
            decode_checkpoint(data)
