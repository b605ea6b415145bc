"""
Displacement predictor: a fully convolutional encoder-decoder with skip
connections mapping a (moving, fixed) image pair to a displacement field,
with reverse-mode gradients for every parameter.
"""
import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config import NETWORK
from core.errors import InvalidArgumentError, InvalidTapeError, ShapeMismatchError, TooSmallInputError
from core.models import DisplacementField, Image, require_same_dims

logger = logging.getLogger(__name__)

INPUT_CHANNELS = 2
PADDING_MODES = ('zeros', 'wrap')


@dataclass(frozen=True)
class NetConfig:
    """Layer layout of the displacement predictor"""
    ndim: int = 2
    encoder_channels: Tuple[int, ...] = tuple(NETWORK['ENCODER_CHANNELS'])
    decoder_channels: Tuple[int, ...] = tuple(NETWORK['DECODER_CHANNELS'])
    kernel_size: int = NETWORK['KERNEL_SIZE']
    negative_slope: float = NETWORK['NEGATIVE_SLOPE']
    precision: int = NETWORK['PRECISION']
    padding_mode: str = 'zeros'

    def __post_init__(self):
        object.__setattr__(self, 'encoder_channels', tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, 'decoder_channels', tuple(int(c) for c in self.decoder_channels))
        self.validate()

    def validate(self) -> None:
        if self.ndim not in (2, 3):
            raise InvalidArgumentError(f"Network supports 2D or 3D inputs, got ndim={self.ndim}")
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise InvalidArgumentError(
                f"Encoder and decoder need equal level counts, got "
                f"{len(self.encoder_channels)} and {len(self.decoder_channels)}"
            )
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise InvalidArgumentError("Channel widths must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f"Kernel extent must be a positive odd number, got {self.kernel_size}")
        if self.precision not in (32, 64):
            raise InvalidArgumentError(f"Precision must be 32 or 64, got {self.precision}")
        if self.padding_mode not in PADDING_MODES:
            raise InvalidArgumentError(f"Padding mode must be one of {PADDING_MODES}")

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == 64 else np.float32)

    def skip_channels(self, level: int) -> int:
        """Channels concatenated from the encoder at decoder level `level`"""
        source = self.levels - 2 - level
        return self.encoder_channels[source] if source >= 0 else INPUT_CHANNELS

    def layer_specs(self) -> List[Tuple[str, int, int, int]]:
        """(name, in_channels, out_channels, stride) for every convolution in order"""
        specs = []
        in_channels = INPUT_CHANNELS
        for level, width in enumerate(self.encoder_channels):
            specs.append((f"enc{level}", in_channels, width, 2))
            in_channels = width
        for level, width in enumerate(self.decoder_channels):
            specs.append((f"dec{level}", in_channels + self.skip_channels(level), width, 1))
            in_channels = width
        specs.append(("flow", in_channels, self.ndim, 1))
        return specs

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['encoder_channels'] = list(self.encoder_channels)
        data['decoder_channels'] = list(self.decoder_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetConfig':
        return cls(**data)


class NetParams:
    """Ordered weight and bias tensors of one predictor (theta)"""

    def __init__(self, config: NetConfig, tensors: Dict[str, np.ndarray]):
        self.config = config
        self.tensors = dict(tensors)
        expected = self.expected_shapes(config)
        if list(self.tensors) != list(expected):
            raise InvalidArgumentError(f"Parameter names {list(self.tensors)} do not match config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise InvalidArgumentError(f"Parameter {name} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise InvalidArgumentError(f"Parameter {name} has non-finite entries")

    @staticmethod
    def expected_shapes(config: NetConfig) -> Dict[str, Tuple[int, ...]]:
        kernel = (config.kernel_size,) * config.ndim
        shapes = {}
        for name, in_channels, out_channels, _ in config.layer_specs():
            shapes[f"{name}.weight"] = (out_channels, in_channels) + kernel
            shapes[f"{name}.bias"] = (out_channels,)
        return shapes

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> 'NetParams':
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> 'NetParams':
        return NetParams(self.config, tensors)

    def __repr__(self) -> str:
        return f"NetParams(levels={self.config.levels}, parameters={self.num_parameters})"


@dataclass
class TapeState:
    """Activations cached by one forward pass, consumed by one backward pass"""
    config: NetConfig
    input_dims: Tuple[int, ...]
    padded_dims: Tuple[int, ...]
    conv_inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    pre_activations: Dict[str, np.ndarray] = field(default_factory=dict)
    upsample_channels: Dict[str, int] = field(default_factory=dict)
    consumed: bool = False


def init_params(config: NetConfig, seed: int) -> NetParams:
    """
    Deterministic initialization: hidden convolutions uniform with a fan-in
    (Kaiming, leaky slope) bound, biases zero, final layer all zero so the
    fresh predictor outputs the identity field.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    receptive = config.kernel_size ** config.ndim
    gain = 1.0 + config.negative_slope ** 2
    for name, shape in NetParams.expected_shapes(config).items():
        if name.startswith("flow") or name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=config.dtype)
            continue
        fan_in = shape[1] * receptive
        limit = np.sqrt(6.0 / (gain * fan_in))
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(config.dtype)
    return NetParams(config, tensors)


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] + [(pad, pad)] * (x.ndim - 1)
    if mode == 'wrap':
        return np.pad(x, widths, mode='wrap')
    return np.pad(x, widths, mode='constant')


def _unpad_gradient(grad: np.ndarray, pad: int, mode: str) -> np.ndarray:
    """Transpose of _pad: crop, folding wrapped borders back for periodic padding"""
    if pad == 0:
        return grad
    for axis in range(1, grad.ndim):
        size = grad.shape[axis]
        lead = np.take(grad, np.arange(pad), axis=axis)
        trail = np.take(grad, np.arange(size - pad, size), axis=axis)
        core = np.take(grad, np.arange(pad, size - pad), axis=axis)
        if mode == 'wrap':
            extent = core.shape[axis]
            index_tail = [slice(None)] * grad.ndim
            index_head = [slice(None)] * grad.ndim
            index_tail[axis] = slice(extent - pad, extent)
            index_head[axis] = slice(0, pad)
            core[tuple(index_tail)] += lead
            core[tuple(index_head)] += trail
        grad = core
    return grad


def _offset_slices(offset: Tuple[int, ...], out_dims: Tuple[int, ...], stride: int):
    return (slice(None),) + tuple(
        slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offset, out_dims)
    )


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, mode: str):
    """Same-padded strided convolution of a channels-first tensor"""
    ndim = x.ndim - 1
    kernel = weight.shape[2]
    pad = kernel // 2
    padded = _pad(x, pad, mode)
    out_dims = tuple((d + 2 * pad - kernel) // stride + 1 for d in x.shape[1:])
    out = np.zeros((weight.shape[0],) + out_dims, dtype=x.dtype)
    for offset in itertools.product(range(kernel), repeat=ndim):
        patch = padded[_offset_slices(offset, out_dims, stride)]
        out += np.tensordot(weight[(slice(None), slice(None)) + offset], patch, axes=([1], [0]))
    out += bias.reshape((-1,) + (1,) * ndim)
    return out, padded


def _conv_backward(
    padded: np.ndarray,
    weight: np.ndarray,
    grad: np.ndarray,
    stride: int,
    mode: str,
    need_input: bool = True
):
    """Gradients w.r.t. weight, bias and (optionally) the unpadded input"""
    ndim = grad.ndim - 1
    kernel = weight.shape[2]
    pad = kernel // 2
    spatial = list(range(1, ndim + 1))
    out_dims = grad.shape[1:]
    weight_grad = np.zeros_like(weight)
    padded_grad = np.zeros_like(padded) if need_input else None
    for offset in itertools.product(range(kernel), repeat=ndim):
        index = _offset_slices(offset, out_dims, stride)
        patch = padded[index]
        weight_grad[(slice(None), slice(None)) + offset] = np.tensordot(grad, patch, axes=(spatial, spatial))
        if need_input:
            padded_grad[index] += np.tensordot(weight[(slice(None), slice(None)) + offset], grad, axes=([0], [0]))
    bias_grad = grad.sum(axis=tuple(spatial))
    input_grad = _unpad_gradient(padded_grad, pad, mode) if need_input else None
    return input_grad, weight_grad, bias_grad


def _leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _leaky_relu_backward(grad: np.ndarray, pre: np.ndarray, slope: float) -> np.ndarray:
    return grad * np.where(pre > 0, 1.0, slope).astype(grad.dtype)


def _upsample_nearest(x: np.ndarray) -> np.ndarray:
    for axis in range(1, x.ndim):
        x = np.repeat(x, 2, axis=axis)
    return x


def _upsample_nearest_backward(grad: np.ndarray) -> np.ndarray:
    shape = [grad.shape[0]]
    for extent in grad.shape[1:]:
        shape.extend([extent // 2, 2])
    return grad.reshape(shape).sum(axis=tuple(range(2, 2 * grad.ndim, 2)))


def predict_field(params: NetParams, fixed: Image, moving: Image) -> Tuple[DisplacementField, TapeState]:
    """
    Run the predictor on the channel stack [moving, fixed].

    Inputs are edge-padded to a multiple of 2**levels and the padding is
    cropped from the output, so the field lives on the input grid.

    Returns:
        Tuple of (displacement field in input-grid pixels, tape for backward)
    """
    config = params.config
    require_same_dims(fixed.dims, moving.dims, "fixed and moving images")
    if fixed.ndim != config.ndim:
        raise ShapeMismatchError(f"Network expects {config.ndim}D inputs, got {fixed.ndim}D")
    if min(fixed.dims) < NETWORK['MIN_EXTENT']:
        raise TooSmallInputError(f"Input extents {fixed.dims} below minimum {NETWORK['MIN_EXTENT']}")

    dtype = config.dtype
    slope = config.negative_slope
    mode = config.padding_mode
    multiple = 2 ** config.levels
    pad_after = [(-d) % multiple for d in fixed.dims]
    x = np.stack([moving.data, fixed.data]).astype(dtype)
    if any(pad_after):
        x = np.pad(x, [(0, 0)] + [(0, p) for p in pad_after], mode='edge')
    tape = TapeState(config=config, input_dims=fixed.dims, padded_dims=tuple(x.shape[1:]))

    tensors = params.tensors
    features = [x]
    for level in range(config.levels):
        name = f"enc{level}"
        pre, padded = _conv_forward(x, tensors[f"{name}.weight"], tensors[f"{name}.bias"], 2, mode)
        tape.conv_inputs[name] = padded
        tape.pre_activations[name] = pre
        x = _leaky_relu(pre, slope)
        features.append(x)

    for level in range(config.levels):
        name = f"dec{level}"
        upsampled = _upsample_nearest(x)
        stacked = np.concatenate([upsampled, features[config.levels - 1 - level]], axis=0)
        pre, padded = _conv_forward(stacked, tensors[f"{name}.weight"], tensors[f"{name}.bias"], 1, mode)
        tape.conv_inputs[name] = padded
        tape.pre_activations[name] = pre
        tape.upsample_channels[name] = upsampled.shape[0]
        x = _leaky_relu(pre, slope)

    out, padded = _conv_forward(x, tensors["flow.weight"], tensors["flow.bias"], 1, mode)
    tape.conv_inputs["flow"] = padded
    crop = (slice(None),) + tuple(slice(0, d) for d in fixed.dims)
    vectors = np.moveaxis(out[crop], 0, -1)
    return DisplacementField(vectors), tape


def backward(params: NetParams, tape: TapeState, upstream: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Parameter gradients given dLoss/du for the field of a forward pass.

    Args:
        params: Parameters used in the forward pass
        tape: Tape returned by predict_field; consumed by this call
        upstream: Array of shape (*dims, n)

    Returns:
        Dictionary of gradients keyed like params.tensors
    """
    if tape.consumed:
        raise InvalidTapeError("Tape has already been consumed by a backward pass")
    if tape.config != params.config:
        raise InvalidTapeError("Tape was recorded with a different network configuration")
    config = params.config
    upstream = np.asarray(upstream, dtype=config.dtype)
    if upstream.shape != tape.input_dims + (config.ndim,):
        raise ShapeMismatchError(f"Upstream gradient {upstream.shape} does not match field {tape.input_dims}")
    tape.consumed = True

    tensors = params.tensors
    slope = config.negative_slope
    mode = config.padding_mode
    grads: Dict[str, np.ndarray] = {}

    grad = np.zeros((config.ndim,) + tape.padded_dims, dtype=config.dtype)
    grad[(slice(None),) + tuple(slice(0, d) for d in tape.input_dims)] = np.moveaxis(upstream, -1, 0)
    grad, grads["flow.weight"], grads["flow.bias"] = _conv_backward(
        tape.conv_inputs["flow"], tensors["flow.weight"], grad, 1, mode
    )

    skip_grads: Dict[int, np.ndarray] = {}
    for level in reversed(range(config.levels)):
        name = f"dec{level}"
        grad = _leaky_relu_backward(grad, tape.pre_activations[name], slope)
        grad, grads[f"{name}.weight"], grads[f"{name}.bias"] = _conv_backward(
            tape.conv_inputs[name], tensors[f"{name}.weight"], grad, 1, mode
        )
        channels = tape.upsample_channels[name]
        skip_grads[config.levels - 1 - level] = grad[channels:]
        grad = _upsample_nearest_backward(grad[:channels])

    for level in reversed(range(config.levels)):
        name = f"enc{level}"
        if level + 1 in skip_grads:
            grad = grad + skip_grads[level + 1]
        grad = _leaky_relu_backward(grad, tape.pre_activations[name], slope)
        grad, grads[f"{name}.weight"], grads[f"{name}.bias"] = _conv_backward(
            tape.conv_inputs[name], tensors[f"{name}.weight"], grad, 2, mode, need_input=level > 0
        )

    return {name: grads[name] for name in tensors}
