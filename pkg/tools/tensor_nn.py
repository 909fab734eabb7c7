"""
Minimal tensor and reverse-mode autodiff engine on numpy.

Only the layers the estimator needs: 3x3 same-padding convolution, ReLU,
residual blocks, global max pooling, concatenation, dense layers, MSE loss
and Adam. Every op comes as a pair of plain kernels (`*_forward` returns
the output and a cache, `*_backward` maps the output gradient back) and a
taped version that records itself on a `Graph`.

Storage is float32; reductions over the batch accumulate in float64. Use
`precision(np.float64)` for gradient checks.

Checkpoint byte layout (all integers little-endian)
    8 bytes   magic b"NSECKPT\\0"
    u32       format version (1)
    u32       manifest length, then the manifest as UTF-8 JSON
    u32       tensor count
    per tensor, in name order:
      u16     name length, then the name as UTF-8
      u8      rank, then rank x u32 dimensions
      f32[]   row-major little-endian data
    32 bytes  SHA-256 of every preceding byte
"""

import hashlib
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from tools.errors import CheckpointError, ShapeError

logger = logging.getLogger("nse-tensor-nn")

CHECKPOINT_MAGIC = b"NSECKPT\0"
CHECKPOINT_VERSION = 1

_precision = {"dtype": np.float32}


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the storage dtype of newly created tensors."""
    previous = _precision["dtype"]
    _precision["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _precision["dtype"] = previous


def default_dtype():
    return _precision["dtype"]


@dataclass(eq=False)
class Tensor:
    """A dense array of rank <= 4 with an optional gradient buffer."""

    data: np.ndarray
    requires_grad: bool = False
    name: str = ""
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind != "f" or data.dtype.type is not default_dtype():
            data = data.astype(default_dtype())
        if data.ndim > 4:
            raise ShapeError("tensor rank must be <= 4", data.shape)
        self.data = np.ascontiguousarray(data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("gradient shape differs from tensor shape", grad.shape, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])


# -- tape --------------------------------------------------------------------

@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Graph:
    """
    Operation tape of one forward pass.

    Ops append themselves in execution order; `backward` walks the tape in
    exact reverse order.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.backward_order: List[int] = []

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
        output.requires_grad = any(t.requires_grad for t in inputs)
        if output.requires_grad:
            self.nodes.append(_Node(output, tuple(inputs), backward, op))
        return output

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from `output` (a scalar loss by default)."""
        output.grad = np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=output.data.dtype)
        self.backward_order = []
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            self.backward_order.append(index)
            if node.output.grad is None:
                continue
            grads = node.backward(node.output.grad)
            for tensor, g in zip(node.inputs, grads):
                if g is not None and tensor.requires_grad:
                    tensor.accumulate_grad(np.asarray(g, dtype=tensor.data.dtype))


def _new(data: np.ndarray) -> Tensor:
    return Tensor(data)


# -- kernels -----------------------------------------------------------------

def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError("conv3x3 expects (N,C,H,W) input and (F,C,3,3) weights", x.shape, w.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv3x3 channel mismatch", x.shape, w.shape)
    if b.shape != (w.shape[0],):
        raise ShapeError("conv3x3 bias does not match filters", b.shape, w.shape)


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N, C*9, H*W) patch matrix with zero padding 1."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * w)


def col2im3x3(cols: np.ndarray, shape: Tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of im2col3x3."""
    n, c, h, w = shape
    cols = cols.reshape(n, c, 3, 3, h, w)
    padded = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            padded[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return padded[:, :, 1:-1, 1:-1]


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 same-padding cross-correlation."""
    _check_conv_shapes(x, w, b)
    n, _, h, width = x.shape
    cols = im2col3x3(x)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]
    return out.reshape(n, w.shape[0], h, width), (x.shape, cols, w)


def conv3x3_backward(dout: np.ndarray, cache):
    """Gradients for input, weights and bias."""
    x_shape, cols, w = cache
    n, f = dout.shape[:2]
    dmat = dout.reshape(n, f, -1)
    dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64).reshape(w.shape)
    db = dmat.sum(axis=(0, 2), dtype=np.float64)
    dcols = np.matmul(w.reshape(f, -1).T, dmat)
    dx = col2im3x3(dcols, x_shape)
    return dx, dw.astype(w.dtype), db.astype(w.dtype)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def global_max_pool_forward(x: np.ndarray):
    """Per-channel spatial maximum; ties go to the first row-major index."""
    if x.ndim != 4:
        raise ShapeError("global max pool expects (N,C,H,W)", x.shape)
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    index = np.argmax(flat, axis=2)
    out = np.take_along_axis(flat, index[..., None], axis=2)[..., 0]
    return out, (x.shape, index)


def global_max_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, index = cache
    n, c = shape[:2]
    dx = np.zeros((n, c, shape[2] * shape[3]), dtype=dout.dtype)
    np.put_along_axis(dx, index[..., None], dout[..., None], axis=2)
    return dx.reshape(shape)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("dense shape mismatch", x.shape, w.shape, b.shape)
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w.T
    dw = (x.astype(np.float64).T @ dout.astype(np.float64)).astype(w.dtype)
    db = dout.sum(axis=0, dtype=np.float64).astype(w.dtype)
    return dx, dw, db


def concat_forward(parts: Sequence[np.ndarray]):
    """Concatenate (N, k_i) matrices along the feature axis."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError("concat expects (N, k) parts with equal N", *[p.shape for p in parts])
    sizes = [p.shape[1] for p in parts]
    return np.concatenate(parts, axis=1), sizes


def concat_backward(dout: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


def mse_loss_forward(pred: np.ndarray, target: np.ndarray):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError("mse operands differ in shape", pred.shape, target.shape)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff)), diff


def mse_loss_backward(dout: float, diff: np.ndarray) -> np.ndarray:
    return dout * 2.0 * diff / diff.size


def mse_loss(pred, target) -> float:
    """Mean squared error of two equally shaped arrays."""
    return mse_loss_forward(pred, target)[0]


# -- taped ops ---------------------------------------------------------------

def conv3x3(graph: Optional[Graph], x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out, cache = conv3x3_forward(x.data, w.data, b.data)
    result = _new(out)
    if graph is not None:
        graph.record("conv3x3", result, (x, w, b), lambda g: conv3x3_backward(g, cache))
    return result


def relu(graph: Optional[Graph], x: Tensor) -> Tensor:
    out, mask = relu_forward(x.data)
    result = _new(out)
    if graph is not None:
        graph.record("relu", result, (x,), lambda g: (relu_backward(g, mask),))
    return result


def add(graph: Optional[Graph], a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add operands differ in shape", a.shape, b.shape)
    result = _new(a.data + b.data)
    if graph is not None:
        graph.record("add", result, (a, b), lambda g: (g, g))
    return result


def global_max_pool(graph: Optional[Graph], x: Tensor) -> Tensor:
    out, cache = global_max_pool_forward(x.data)
    result = _new(out)
    if graph is not None:
        graph.record("global_max_pool", result, (x,), lambda g: (global_max_pool_backward(g, cache),))
    return result


def dense(graph: Optional[Graph], x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out, cache = dense_forward(x.data, w.data, b.data)
    result = _new(out)
    if graph is not None:
        graph.record("dense", result, (x, w, b), lambda g: dense_backward(g, cache))
    return result


def concat(graph: Optional[Graph], parts: Sequence[Tensor]) -> Tensor:
    out, sizes = concat_forward([p.data for p in parts])
    result = _new(out)
    if graph is not None:
        graph.record("concat", result, tuple(parts), lambda g: concat_backward(g, sizes))
    return result


def mse(graph: Optional[Graph], pred: Tensor, target: Tensor) -> Tensor:
    value, diff = mse_loss_forward(pred.data, target.data)
    result = Tensor(np.array(value))
    if graph is not None:
        graph.record("mse", result, (pred, target), lambda g: (mse_loss_backward(float(g), diff), None))
    return result


# -- modules -----------------------------------------------------------------

class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._parameters: Dict[str, Tensor] = {}
        self._modules: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """Parameters under dotted names, in registration order."""
        params = {}
        for name, tensor in self._parameters.items():
            tensor.name = f"{prefix}{name}"
            params[tensor.name] = tensor
        for name, module in self._modules.items():
            params.update(module.named_parameters(f"{prefix}{name}."))
        return params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv3x3(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_parameter(
            "weight", Tensor(he_uniform(rng, (out_channels, in_channels, 3, 3), in_channels * 9))
        )
        self.bias = self.add_parameter("bias", Tensor(np.zeros(out_channels)))

    def __call__(self, graph: Optional[Graph], x: Tensor) -> Tensor:
        return conv3x3(graph, x, self.weight, self.bias)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_parameter("weight", Tensor(he_uniform(rng, (in_features, out_features), in_features)))
        self.bias = self.add_parameter("bias", Tensor(np.zeros(out_features)))

    def __call__(self, graph: Optional[Graph], x: Tensor) -> Tensor:
        return dense(graph, x, self.weight, self.bias)


class ResidualBlock(Module):
    """
    Five conv+ReLU layers with an additive skip connection.

    When the channel count changes, the skip path is a 3x3 projection.
    """

    def __init__(self, in_channels: int, channels: int, rng: np.random.Generator, depth: int = 5):
        super().__init__()
        self.convs = [
            self.add_module(f"conv{i}", Conv3x3(in_channels if i == 0 else channels, channels, rng))
            for i in range(depth)
        ]
        self.skip = self.add_module("skip", Conv3x3(in_channels, channels, rng)) if in_channels != channels else None

    def __call__(self, graph: Optional[Graph], x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = relu(graph, conv(graph, h))
        shortcut = self.skip(graph, x) if self.skip is not None else x
        return add(graph, h, shortcut)


class FullyConnectedBlock(Module):
    """Dense+ReLU layers followed by a linear output layer."""

    def __init__(self, in_features: int, rng: np.random.Generator, widths=(32, 16, 8), out_features: int = 1):
        super().__init__()
        sizes = [in_features, *widths]
        self.hidden = [
            self.add_module(f"fc{i}", Dense(sizes[i], sizes[i + 1], rng)) for i in range(len(widths))
        ]
        self.out = self.add_module("out", Dense(sizes[-1], out_features, rng))

    def __call__(self, graph: Optional[Graph], x: Tensor) -> Tensor:
        h = x
        for layer in self.hidden:
            h = relu(graph, layer(graph, h))
        return self.out(graph, h)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments and hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Dict[str, Tensor],
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """
    One bias-corrected Adam update, in place.

    Gradients default to each tensor's `grad`; a missing gradient counts as
    zero.
    """
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = grads.get(name) if grads is not None else tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient for {name} has the wrong shape", g.shape, tensor.shape)
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        tensor.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.data.dtype)


# -- gradient checking -------------------------------------------------------

def gradient_check(fn: Callable[[Optional[Graph]], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """
    Largest relative difference between taped and central-difference
    gradients of the scalar `fn` over every element of `inputs`.

    Relative errors use max(|analytic|, |numeric|, 1e-3) as denominator.
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.zero_grad()
    graph = Graph()
    graph.backward(fn(graph))

    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = fn(None).item()
            flat[i] = original - eps
            lower = fn(None).item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-3))
    return worst


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], tensors: Dict[str, Tensor], manifest: Dict[str, Any]) -> str:
    """Write named tensors and a manifest; returns the SHA-256 trailer as hex."""
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(manifest_bytes)),
        manifest_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        data = np.asarray(tensors[name].data)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f4").tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    logger.debug(f"checkpoint {path}: {len(tensors)} tensors")
    return digest.hex()


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint; verifies the hash."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 44 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: hash mismatch")

    offset = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal offset
        values = struct.unpack_from(fmt, body, offset)
        offset += struct.calcsize(fmt)
        return values

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    (manifest_len,) = take("<I")
    manifest = json.loads(body[offset:offset + manifest_len].decode("utf-8"))
    offset += manifest_len

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        tensors[name] = data.astype(np.float32)
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return tensors, manifest
