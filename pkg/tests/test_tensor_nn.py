"""Tests for the numpy autodiff engine."""

import numpy as np
import pytest

from tools.errors import CheckpointError, ShapeError
from tools.tensor_nn import (
    AdamState,
    FullyConnectedBlock,
    Graph,
    ResidualBlock,
    Tensor,
    adam_step,
    add,
    col2im3x3,
    concat,
    conv3x3,
    conv3x3_forward,
    dense,
    global_max_pool,
    gradient_check,
    im2col3x3,
    load_checkpoint,
    mse,
    precision,
    relu,
    save_checkpoint,
)

LINEAR_EPS = 1e-3
KINK_EPS = 1e-6
TOLERANCE = 1e-4


def _loss(graph, out: Tensor, target: np.ndarray) -> Tensor:
    """Smooth scalar of an op output: MSE against a fixed random target."""
    return mse(graph, out, Tensor(target))


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestKernels:
    def test_conv_matches_direct_loop(self):
        rng = _rng(1)
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = conv3x3_forward(x, w, b)
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros_like(out)
        for n in range(2):
            for f in range(4):
                for i in range(5):
                    for j in range(4):
                        expected[n, f, i, j] = np.sum(padded[n, :, i:i + 3, j:j + 3] * w[f]) + b[f]
        assert out == pytest.approx(expected)

    def test_col2im_is_adjoint_of_im2col(self):
        rng = _rng(2)
        x = rng.normal(size=(1, 2, 4, 5))
        y = rng.normal(size=(1, 18, 20))
        assert np.sum(im2col3x3(x) * y) == pytest.approx(np.sum(x * col2im3x3(y, x.shape)))

    def test_conv_shape_errors(self):
        with pytest.raises(ShapeError):
            conv3x3_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(3))
        with pytest.raises(ShapeError):
            conv3x3_forward(np.zeros((1, 3, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(2))

    def test_global_max_pool_first_index_wins(self):
        x = Tensor(np.array([[[[1.0, 5.0], [5.0, 2.0]]]]), requires_grad=True)
        graph = Graph()
        out = global_max_pool(graph, x)
        graph.backward(out)
        assert out.data.tolist() == [[5.0]]
        assert x.grad.tolist() == [[[[0.0, 1.0], [0.0, 0.0]]]]

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_backward_walks_tape_in_reverse(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        graph = Graph()
        out = relu(graph, add(graph, a, a))
        graph.backward(out)
        assert graph.backward_order == [1, 0]
        assert a.grad.tolist() == [[2.0, 2.0], [2.0, 2.0]]


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


SEEDS = range(20)


def _randomize_biases(module, rng):
    """Nonzero biases keep pre-activations off the ReLU kink."""
    for name, tensor in module.named_parameters().items():
        if name.endswith("bias"):
            tensor.data[...] = rng.uniform(-0.5, 0.5, size=tensor.data.shape)


@pytest.mark.usefixtures("float64")
@pytest.mark.parametrize("seed", SEEDS)
class TestGradients:
    def test_dense(self, seed):
        rng = _rng(seed)
        x, w, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2))
        r = rng.normal(size=(3, 2))
        assert gradient_check(lambda g: _loss(g, dense(g, x, w, b), r), [x, w, b], LINEAR_EPS) < TOLERANCE

    def test_conv(self, seed):
        rng = _rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        w, b = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
        r = rng.normal(size=(2, 3, 4, 4))
        assert gradient_check(lambda g: _loss(g, conv3x3(g, x, w, b), r), [x, w, b], LINEAR_EPS) < TOLERANCE

    def test_concat(self, seed):
        rng = _rng(seed)
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))
        r = rng.normal(size=(2, 5))
        assert gradient_check(lambda g: _loss(g, concat(g, [a, b]), r), [a, b], LINEAR_EPS) < TOLERANCE

    def test_add(self, seed):
        rng = _rng(seed)
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
        r = rng.normal(size=(2, 3))
        assert gradient_check(lambda g: _loss(g, add(g, a, b), r), [a, b], LINEAR_EPS) < TOLERANCE

    def test_relu_and_pool(self, seed):
        rng = _rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        r = rng.normal(size=(2, 3))
        fn = lambda g: _loss(g, global_max_pool(g, relu(g, x)), r)  # noqa: E731
        assert gradient_check(fn, [x], KINK_EPS) < TOLERANCE

    def test_residual_block(self, seed):
        rng = _rng(seed)
        block = ResidualBlock(2, 3, rng, depth=2)
        _randomize_biases(block, rng)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        r = rng.normal(size=(1, 3))
        params = list(block.named_parameters().values())
        fn = lambda g: _loss(g, global_max_pool(g, block(g, x)), r)  # noqa: E731
        assert gradient_check(fn, [x, *params], KINK_EPS) < TOLERANCE

    def test_fully_connected_block(self, seed):
        rng = _rng(seed)
        block = FullyConnectedBlock(6, rng)
        _randomize_biases(block, rng)
        x = Tensor(rng.normal(size=(3, 6)))
        r = rng.normal(size=(3, 1))
        params = list(block.named_parameters().values())
        assert gradient_check(lambda g: _loss(g, block(g, x), r), [x, *params], KINK_EPS) < TOLERANCE

    def test_mse(self, seed):
        rng = _rng(seed)
        pred, target = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 2)))
        assert gradient_check(lambda g: mse(g, pred, target), [pred], LINEAR_EPS) < TOLERANCE


class TestModules:
    def test_parameter_names_and_count(self):
        block = FullyConnectedBlock(10, _rng(0))
        names = list(block.named_parameters())
        assert names[:2] == ["fc0.weight", "fc0.bias"]
        assert names[-1] == "out.bias"
        assert block.parameter_count() == 10 * 32 + 32 + 32 * 16 + 16 + 16 * 8 + 8 + 8 + 1

    def test_residual_skip_only_when_channels_change(self):
        assert "skip.weight" in ResidualBlock(1, 4, _rng(0)).named_parameters()
        assert "skip.weight" not in ResidualBlock(4, 4, _rng(0)).named_parameters()


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        tensor = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        adam_step(state, {"t": tensor}, {"t": np.array([0.5, -4.0, 0.0], dtype=np.float32)})
        assert tensor.data == pytest.approx([0.9, -1.9, 3.0], abs=1e-6)
        assert state.step == 1

    def test_minimizes_quadratic(self):
        tensor = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        for _ in range(500):
            adam_step(state, {"t": tensor}, {"t": 2.0 * tensor.data})
        assert np.abs(tensor.data).max() < 0.05

    def test_gradient_shape_checked(self):
        tensor = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step(AdamState(), {"t": tensor}, {"t": np.zeros(2)})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {"b": Tensor(np.arange(6.0).reshape(2, 3)), "a": Tensor(np.array([1.5]))}
        digest = save_checkpoint(tmp_path / "m.ckpt", tensors, {"variant": "FullMeta"})
        assert len(digest) == 64
        loaded, manifest = load_checkpoint(tmp_path / "m.ckpt")
        assert manifest == {"variant": "FullMeta"}
        assert sorted(loaded) == ["a", "b"]
        assert loaded["b"].tolist() == [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"w": Tensor(np.ones((2, 2)))}, {})
        raw = bytearray(path.read_bytes())
        raw[-40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
