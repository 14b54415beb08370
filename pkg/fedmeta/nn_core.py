"""
Minimal differentiable network engine.

Conv4-style network: each module is conv (same padding) -> batchnorm -> ReLU ->
max-pool, followed by either a softmax-linear classifier or nothing (embedding
head). Parameters live in a single flat ParamVector; forward returns a cache
that backward turns into a gradient ParamVector with the same layout.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binio import ByteReader
from .errors import (
    CorruptHeaderError,
    FedmetaError,
    LabelError,
    LayoutMismatchError,
    NonFiniteError,
    ShapeMismatchError,
    SpecError,
)

logger = logging.getLogger(__name__)

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]

BN_EPSILON = 1e-5
CLASSIFIER_PREFIX = 'fc.'
CHECKPOINT_MAGIC = b'FMB1'


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout))


def _normalize_layout(layout) -> Layout:
    return tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)


class ParamVector:
    """Flat parameter values with named, shaped segments."""

    def __init__(self, values, layout):
        self.layout: Layout = _normalize_layout(layout)
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float32)
        self.values: np.ndarray = values.reshape(-1)
        expected = layout_size(self.layout)
        if self.values.size != expected:
            raise LayoutMismatchError(
                f"{self.values.size} values do not fill a layout of {expected}")
        self._offsets: Optional[Dict[str, Tuple[int, Tuple[int, ...]]]] = None

    @classmethod
    def zeros(cls, layout, dtype=np.float32) -> 'ParamVector':
        layout = _normalize_layout(layout)
        return cls(np.zeros(layout_size(layout), dtype=dtype), layout)

    @classmethod
    def from_segments(cls, segments: Sequence[Tuple[str, np.ndarray]],
                      dtype=np.float32) -> 'ParamVector':
        layout = tuple((name, tuple(np.shape(array))) for name, array in segments)
        if not segments:
            return cls(np.zeros(0, dtype=dtype), ())
        values = np.concatenate([np.asarray(a, dtype=dtype).reshape(-1) for _, a in segments])
        return cls(values, layout)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        names = ', '.join(name for name, _ in self.layout)
        return f"ParamVector(size={self.values.size}, dtype={self.values.dtype}, segments=[{names}])"

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.layout]

    def _offset_table(self) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
        if self._offsets is None:
            table = {}
            start = 0
            for name, shape in self.layout:
                table[name] = (start, shape)
                start += int(np.prod(shape, dtype=np.int64))
            self._offsets = table
        return self._offsets

    def segment(self, name: str) -> np.ndarray:
        """Shaped view of one segment (writes go through to the vector)."""
        try:
            start, shape = self._offset_table()[name]
        except KeyError:
            raise LayoutMismatchError(f"no segment named {name!r}") from None
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[start:start + size].reshape(shape)

    def segments(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, _ in self.layout:
            yield name, self.segment(name)

    def copy(self) -> 'ParamVector':
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> 'ParamVector':
        return ParamVector(self.values.astype(dtype), self.layout)

    def zeros_like(self) -> 'ParamVector':
        return ParamVector(np.zeros_like(self.values), self.layout)

    def select(self, keep: Iterable[str]) -> 'ParamVector':
        """Sub-vector made of the named segments, in this vector's order."""
        wanted = set(keep)
        missing = wanted - set(self.names)
        if missing:
            raise LayoutMismatchError(f"segments not present: {sorted(missing)}")
        return ParamVector.from_segments(
            [(name, self.segment(name)) for name in self.names if name in wanted],
            dtype=self.dtype)

    def check_compatible(self, other: 'ParamVector'):
        if self.layout != other.layout:
            raise LayoutMismatchError("parameter layouts differ")

    def _combine(self, other: 'ParamVector', sign: float) -> 'ParamVector':
        self.check_compatible(other)
        out = self.values.astype(np.float64) + sign * other.values.astype(np.float64)
        return ParamVector(out.astype(self.dtype), self.layout).ensure_finite('sum')

    def __add__(self, other: 'ParamVector') -> 'ParamVector':
        return self._combine(other, 1.0)

    def __sub__(self, other: 'ParamVector') -> 'ParamVector':
        return self._combine(other, -1.0)

    def __mul__(self, scalar: float) -> 'ParamVector':
        out = self.values.astype(np.float64) * float(scalar)
        return ParamVector(out.astype(self.dtype), self.layout).ensure_finite('scaling')

    __rmul__ = __mul__

    def __neg__(self) -> 'ParamVector':
        return self * -1.0

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def ensure_finite(self, what: str = 'parameters') -> 'ParamVector':
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError(f"non-finite values after {what}")
        return self


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a Conv4-style network."""
    input_shape: Tuple[int, int, int] = (28, 28, 1)
    modules: int = 4
    filters: int = 64
    kernel_size: int = 3
    pool: int = 2
    head: str = 'classifier'
    ways: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'input_shape', tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be (H, W, C) with positive sizes, got {self.input_shape}")
        if self.modules < 0:
            raise SpecError("module count must be >= 0")
        if self.filters < 1:
            raise SpecError("filters per module must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise SpecError("kernel size must be a positive odd number for same padding")
        if self.pool < 1:
            raise SpecError("pool size must be >= 1")
        if self.head not in ('classifier', 'embedding'):
            raise SpecError(f"unknown head kind {self.head!r}")
        if self.head == 'classifier' and self.ways < 1:
            raise SpecError("classifier head needs at least one output")
        height, width = self.spatial_sizes()[-1]
        if height < 1 or width < 1:
            raise SpecError(
                f"{self.modules} pooling modules shrink {self.input_shape[:2]} below 1x1")

    def spatial_sizes(self) -> List[Tuple[int, int]]:
        """Spatial size after every module (index 0 is the input)."""
        height, width = self.input_shape[:2]
        sizes = [(height, width)]
        for _ in range(self.modules):
            height, width = height // self.pool, width // self.pool
            sizes.append((height, width))
        return sizes

    @property
    def channels(self) -> int:
        return self.input_shape[2]

    @property
    def embedding_dim(self) -> int:
        height, width = self.spatial_sizes()[-1]
        depth = self.filters if self.modules else self.channels
        return depth * height * width

    def layout(self) -> Layout:
        segments = []
        in_channels = self.channels
        k = self.kernel_size
        for m in range(self.modules):
            segments.append((f'conv{m}.weight', (self.filters, in_channels, k, k)))
            segments.append((f'conv{m}.bias', (self.filters,)))
            segments.append((f'bn{m}.gamma', (self.filters,)))
            segments.append((f'bn{m}.beta', (self.filters,)))
            in_channels = self.filters
        if self.head == 'classifier':
            segments.append(('fc.weight', (self.embedding_dim, self.ways)))
            segments.append(('fc.bias', (self.ways,)))
        return tuple(segments)

    def as_embedding(self) -> 'NetworkSpec':
        return replace(self, head='embedding')

    def as_classifier(self, ways: Optional[int] = None) -> 'NetworkSpec':
        return replace(self, head='classifier', ways=self.ways if ways is None else ways)


@dataclass
class NormStats:
    """Per-module batchnorm statistics used by eval-mode forward."""
    means: List[np.ndarray]
    variances: List[np.ndarray]


@dataclass
class ForwardCache:
    spec: NetworkSpec
    layout: Layout
    mode: str
    dtype: np.dtype
    batch_size: int
    modules: List[Dict[str, np.ndarray]] = field(default_factory=list)
    features: Optional[np.ndarray] = None
    fc_weight: Optional[np.ndarray] = None
    norm_stats: Optional[NormStats] = None


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    batch, channels, height, width = x.shape
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * height * width, channels * k * k)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int) -> np.ndarray:
    batch, channels, height, width = shape
    pad = k // 2
    patches = cols.reshape(batch, height, width, channels, k, k).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[:, :, i:i + height, j:j + width] += patches[..., i, j]
    return padded[:, :, pad:pad + height, pad:pad + width]


def _max_pool(x: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    batch, channels, height, width = x.shape
    out_h, out_w = height // size, width // size
    cropped = x[:, :, :out_h * size, :out_w * size]
    windows = cropped.reshape(batch, channels, out_h, size, out_w, size)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, out_h, out_w, size * size)
    index = np.argmax(windows, axis=-1)
    pooled = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    return pooled, index


def _max_unpool(grad: np.ndarray, index: np.ndarray, shape: Tuple[int, ...], size: int) -> np.ndarray:
    batch, channels, height, width = shape
    out_h, out_w = grad.shape[2], grad.shape[3]
    windows = np.zeros((batch, channels, out_h, out_w, size * size), dtype=grad.dtype)
    np.put_along_axis(windows, index[..., None], grad[..., None], axis=-1)
    windows = windows.reshape(batch, channels, out_h, out_w, size, size).transpose(0, 1, 2, 4, 3, 5)
    full = np.zeros(shape, dtype=grad.dtype)
    full[:, :, :out_h * size, :out_w * size] = windows.reshape(batch, channels, out_h * size, out_w * size)
    return full


def forward(params: ParamVector, spec: NetworkSpec, batch: np.ndarray, mode: str = 'train',
            norm_stats: Optional[NormStats] = None) -> Tuple[np.ndarray, ForwardCache]:
    """Run the network on a (B, H, W, C) batch.

    Train mode normalizes with the current batch statistics (also for
    fine-tuning); eval mode needs stored NormStats.
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"unknown mode {mode!r}")
    if params.layout != spec.layout():
        raise LayoutMismatchError("parameters do not match the network specification")
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeMismatchError(
            f"batch shape {batch.shape} does not match input shape {spec.input_shape}")
    if batch.shape[0] == 0:
        raise ShapeMismatchError("empty batch")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteError("non-finite input batch")
    if mode == 'eval' and spec.modules and norm_stats is None:
        raise FedmetaError("eval-mode forward needs normalization statistics")

    dtype = np.result_type(params.dtype, np.float32)
    x = batch.astype(dtype).transpose(0, 3, 1, 2)
    cache = ForwardCache(spec=spec, layout=params.layout, mode=mode, dtype=dtype, batch_size=batch.shape[0])
    means, variances = [], []
    k = spec.kernel_size

    for m in range(spec.modules):
        weight = params.segment(f'conv{m}.weight').astype(dtype)
        bias = params.segment(f'conv{m}.bias').astype(dtype)
        gamma = params.segment(f'bn{m}.gamma').astype(dtype)
        beta = params.segment(f'bn{m}.beta').astype(dtype)
        n, c, h, w = x.shape
        cols = _im2col(x, k)
        z = (cols @ weight.reshape(spec.filters, -1).T + bias)
        z = z.reshape(n, h, w, spec.filters).transpose(0, 3, 1, 2)

        if mode == 'train':
            mean = z.mean(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
            var = ((z - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        else:
            mean = np.asarray(norm_stats.means[m], dtype=dtype)
            var = np.asarray(norm_stats.variances[m], dtype=dtype)
        means.append(mean)
        variances.append(var)
        inv_std = 1.0 / np.sqrt(var + dtype.type(BN_EPSILON))
        xhat = (z - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        relu = np.maximum(y, 0)
        pooled, index = _max_pool(relu, spec.pool)

        cache.modules.append({
            'input_shape': np.array(x.shape),
            'cols': cols,
            'weight': weight,
            'gamma': gamma,
            'xhat': xhat,
            'inv_std': inv_std,
            'active': y > 0,
            'pool_index': index,
            'relu_shape': np.array(relu.shape),
        })
        x = pooled

    features = x.reshape(x.shape[0], -1)
    cache.features = features
    cache.norm_stats = NormStats(means, variances)
    if spec.head == 'classifier':
        fc_weight = params.segment('fc.weight').astype(dtype)
        fc_bias = params.segment('fc.bias').astype(dtype)
        cache.fc_weight = fc_weight
        return features @ fc_weight + fc_bias, cache
    return features, cache


def backward(cache: ForwardCache, upstream: np.ndarray) -> ParamVector:
    """Gradient of sum(upstream * output) with respect to every parameter."""
    if cache.mode != 'train':
        raise FedmetaError("backward needs a cache produced in train mode")
    spec = cache.spec
    if spec.layout() != cache.layout:
        raise LayoutMismatchError("cache layout does not match its network specification")
    width = spec.ways if spec.head == 'classifier' else spec.embedding_dim
    upstream = np.asarray(upstream, dtype=cache.dtype)
    if upstream.shape != (cache.batch_size, width):
        raise ShapeMismatchError(
            f"upstream gradient shape {upstream.shape} != {(cache.batch_size, width)}")

    grads: Dict[str, np.ndarray] = {}
    if spec.head == 'classifier':
        grads['fc.weight'] = cache.features.T @ upstream
        grads['fc.bias'] = upstream.sum(axis=0)
        d_features = upstream @ cache.fc_weight.T
    else:
        d_features = upstream

    if spec.modules:
        last = cache.modules[-1]
        relu_shape = tuple(last['relu_shape'])
        h, w = spec.spatial_sizes()[-1]
        d_x = d_features.reshape(cache.batch_size, spec.filters, h, w)

    for m in reversed(range(spec.modules)):
        layer = cache.modules[m]
        relu_shape = tuple(layer['relu_shape'])
        d_relu = _max_unpool(d_x, layer['pool_index'], relu_shape, spec.pool)
        d_y = d_relu * layer['active']
        xhat = layer['xhat']
        grads[f'bn{m}.gamma'] = (d_y * xhat).sum(axis=(0, 2, 3))
        grads[f'bn{m}.beta'] = d_y.sum(axis=(0, 2, 3))
        d_xhat = d_y * layer['gamma'][None, :, None, None]
        count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        sum_d = d_xhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx = (d_xhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        d_z = layer['inv_std'][None, :, None, None] / count * (count * d_xhat - sum_d - xhat * sum_dx)

        d_z_cols = d_z.transpose(0, 2, 3, 1).reshape(-1, spec.filters)
        weight = layer['weight']
        grads[f'conv{m}.weight'] = (d_z_cols.T @ layer['cols']).reshape(weight.shape)
        grads[f'conv{m}.bias'] = d_z_cols.sum(axis=0)
        if m > 0:
            d_cols = d_z_cols @ weight.reshape(spec.filters, -1)
            d_x = _col2im(d_cols, tuple(layer['input_shape']), spec.kernel_size)

    values = np.concatenate([grads[name].reshape(-1) for name, _ in cache.layout]) \
        if cache.layout else np.zeros(0)
    return ParamVector(values.astype(cache.dtype), cache.layout)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def one_hot(labels: Sequence[int], width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, width), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise ShapeMismatchError(f"logits {logits.shape} and labels {labels.shape} differ")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise LabelError("labels must be one-hot rows")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    batch = logits.shape[0]
    loss = float(-(labels * log_probs).sum() / batch)
    grad = (np.exp(log_probs) - labels) / batch
    return loss, grad


@dataclass
class OptimizerState:
    """SGD or Adam state; moments are kept in float64."""
    kind: str = 'adam'
    learning_rate: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0
    layout: Optional[Layout] = None

    def __post_init__(self):
        if self.kind not in ('sgd', 'adam'):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: ParamVector,
                   grads: ParamVector) -> Tuple[ParamVector, OptimizerState]:
    """Apply one update; returns new parameters and a new state."""
    params.check_compatible(grads)
    if state.layout is not None and state.layout != params.layout:
        raise LayoutMismatchError("optimizer moments do not match the parameter layout")
    g = grads.values.astype(np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    p = params.values.astype(np.float64)
    step = state.step + 1

    if state.kind == 'sgd':
        updated = p - state.learning_rate * g
        new_state = replace(state, step=step, layout=params.layout)
    else:
        m = np.zeros_like(g) if state.m is None else state.m
        v = np.zeros_like(g) if state.v is None else state.v
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        updated = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_state = replace(state, m=m, v=v, step=step, layout=params.layout)

    result = ParamVector(updated.astype(params.dtype), params.layout)
    return result.ensure_finite('optimizer step'), new_state


def glorot_bound(name: str, shape: Tuple[int, ...]) -> Optional[float]:
    """Uniform Glorot limit for weight segments, None for biases/norm params."""
    if not name.endswith('.weight'):
        return None
    if len(shape) == 4:
        out_channels, in_channels, kh, kw = shape
        fan_in, fan_out = in_channels * kh * kw, out_channels * kh * kw
    else:
        fan_in, fan_out = shape[0], shape[1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParamVector:
    """Glorot-uniform weights, zero biases, unit batchnorm scales."""
    rng = np.random.default_rng(seed)
    segments = []
    for name, shape in spec.layout():
        bound = glorot_bound(name, shape)
        if bound is not None:
            array = rng.uniform(-bound, bound, size=shape)
        elif name.endswith('.gamma'):
            array = np.ones(shape)
        else:
            array = np.zeros(shape)
        segments.append((name, array))
    return ParamVector.from_segments(segments, dtype=dtype)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between u and v; 0 when either has zero norm."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))


def encode_checkpoint(params: ParamVector, extra: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    segments = [(name, array) for name, array in params.segments()]
    for name, array in (extra or {}).items():
        segments.append((name, np.asarray(array)))
    header = [CHECKPOINT_MAGIC, struct.pack('<I', len(segments))]
    payload = []
    for name, array in segments:
        encoded = name.encode('utf-8')
        shape = np.shape(array)
        header.append(struct.pack('<H', len(encoded)))
        header.append(encoded)
        header.append(struct.pack('<B', len(shape)))
        header.append(struct.pack(f'<{len(shape)}I', *shape))
        payload.append(np.asarray(array, dtype='<f4').reshape(-1).tobytes())
    return b''.join(header + payload)


def decode_checkpoint(data: bytes) -> ParamVector:
    reader = ByteReader(data, 'checkpoint')
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CorruptHeaderError("checkpoint magic is not FMB1")
    count = reader.unpack('I')
    layout = []
    for _ in range(count):
        name_len = reader.unpack('H')
        try:
            name = reader.take(name_len).decode('utf-8')
        except UnicodeDecodeError:
            raise CorruptHeaderError(f"segment name {len(layout)} is not valid UTF-8") from None
        ndim = reader.unpack('B')
        shape = struct.unpack(f'<{ndim}I', reader.take(4 * ndim))
        layout.append((name, shape))
    total = layout_size(_normalize_layout(layout))
    values = np.frombuffer(reader.take(4 * total), dtype='<f4').astype(np.float32)
    if reader.remaining:
        raise CorruptHeaderError(f"{reader.remaining} trailing bytes after checkpoint payload")
    return ParamVector(values, layout)


def save_checkpoint(path: str, params: ParamVector, extra: Optional[Dict[str, np.ndarray]] = None):
    with open(path, 'wb') as f:
        f.write(encode_checkpoint(params, extra))
    logger.debug(f"Wrote checkpoint with {len(params.layout)} segments to {path}")


def load_checkpoint(path: str) -> ParamVector:
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())
