"""
Dense layers with hand-written forward and backward passes.

Tensors are ``numpy.ndarray`` in batch-first layout (N x C x H x W for
feature maps, N x F for vectors). Every functional op returns ``(out, cache)``
and has a matching ``*_backward`` taking the upstream gradient and that cache,
so a single module can be applied many times inside a recurrent rollout and
back-propagated through time. Modules accumulate parameter gradients into
``Parameter.grad``; callers zero them between optimizer steps.
"""

import logging
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import CheckpointError, DimensionError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Cache = Any

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_EPS = 1e-7


# --------------------------------------------------------------------------
# Functional ops
# --------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """floor((size + 2 * padding - kernel) / stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    """Pooled extent in floor mode: trailing rows a full window cannot cover are dropped."""
    return conv_output_size(size, kernel, stride)


def im2col(x: Tensor, kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Unfold sliding windows into rows.

    Returns:
        (N * out_h * out_w, C * kernel_h * kernel_w) matrix; rows ordered
        (n, out_y, out_x), columns ordered (c, ky, kx)
    """
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kernel_h, stride, padding)
    out_w = conv_output_size(w, kernel_w, stride, padding)

    img = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)]) if padding else x
    col = np.empty((n, c, kernel_h, kernel_w, out_h, out_w), dtype=x.dtype)
    for y in range(kernel_h):
        y_max = y + stride * out_h
        for x_ in range(kernel_w):
            x_max = x_ + stride * out_w
            col[:, :, y, x_, :, :] = img[:, :, y:y_max:stride, x_:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)


def col2im(col: Tensor, input_shape: Tuple[int, ...], kernel_h: int, kernel_w: int,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Fold rows produced by im2col back into an image, summing overlaps."""
    n, c, h, w = input_shape
    out_h = conv_output_size(h, kernel_h, stride, padding)
    out_w = conv_output_size(w, kernel_w, stride, padding)

    col = col.reshape(n, out_h, out_w, c, kernel_h, kernel_w).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding + stride - 1, w + 2 * padding + stride - 1),
                   dtype=col.dtype)
    for y in range(kernel_h):
        y_max = y + stride * out_h
        for x_ in range(kernel_w):
            x_max = x_ + stride * out_w
            img[:, :, y:y_max:stride, x_:x_max:stride] += col[:, :, y, x_, :, :]
    return img[:, :, padding:padding + h, padding:padding + w]


def conv2d_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
                   padding: int = 0) -> Tuple[Tensor, Cache]:
    """
    2-D cross-correlation.

    Args:
        x: (N, C_in, H, W) input
        weight: (C_out, C_in, k, k) kernels
        bias: (C_out,) bias or None
        stride: Window stride
        padding: Zero padding on every side

    Returns:
        (N, C_out, H', W') output and the backward cache

    Raises:
        DimensionError: On rank, channel, bias or spatial mismatch
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}", axis="rank"
        )
    n, c, h, w = x.shape
    filters, c_w, k_h, k_w = weight.shape
    if c != c_w:
        raise DimensionError(
            f"conv2d input has {c} channels, weight expects {c_w}", axis="channels"
        )
    if bias is not None and bias.shape != (filters,):
        raise DimensionError(
            f"conv2d bias shape {bias.shape} does not match {filters} filters", axis="bias"
        )
    out_h = conv_output_size(h, k_h, stride, padding)
    out_w = conv_output_size(w, k_w, stride, padding)
    if out_h < 1:
        raise DimensionError(f"conv2d height {h} too small for kernel {k_h}", axis="height")
    if out_w < 1:
        raise DimensionError(f"conv2d width {w} too small for kernel {k_w}", axis="width")

    col = im2col(x, k_h, k_w, stride, padding)
    w_col = weight.reshape(filters, -1)
    out = col @ w_col.T
    if bias is not None:
        out += bias
    out = out.reshape(n, out_h, out_w, filters).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, col, weight, stride, padding)


def conv2d_backward(dout: Tensor, cache: Cache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (dx, dweight, dbias) for conv2d_forward."""
    x_shape, col, weight, stride, padding = cache
    filters, _, k_h, k_w = weight.shape

    dout_flat = dout.transpose(0, 2, 3, 1).reshape(-1, filters)
    dbias = dout_flat.sum(axis=0)
    dweight = (dout_flat.T @ col).reshape(weight.shape)
    dcol = dout_flat @ weight.reshape(filters, -1)
    dx = col2im(dcol, x_shape, k_h, k_w, stride, padding)
    return dx, dweight, dbias


def maxpool2d_forward(x: Tensor, kernel: int = 3, stride: int = 2) -> Tuple[Tensor, Cache]:
    """
    Max pooling without padding, in floor mode.

    Ties resolve to the first maximal element in row-major window order, which
    is also where the gradient is routed.

    Raises:
        DimensionError: If the window does not fit the input
    """
    n, c, h, w = x.shape
    if kernel > h:
        raise DimensionError(f"maxpool window {kernel} larger than height {h}", axis="height")
    if kernel > w:
        raise DimensionError(f"maxpool window {kernel} larger than width {w}", axis="width")

    out_h = pool_output_size(h, kernel, stride)
    out_w = pool_output_size(w, kernel, stride)
    col = im2col(x.reshape(n * c, 1, h, w), kernel, kernel, stride)
    argmax = col.argmax(axis=1)
    out = col[np.arange(col.shape[0]), argmax].reshape(n, c, out_h, out_w)
    return out, (x.shape, argmax, kernel, stride)


def maxpool2d_backward(dout: Tensor, cache: Cache) -> Tensor:
    x_shape, argmax, kernel, stride = cache
    n, c, h, w = x_shape
    dcol = np.zeros((argmax.size, kernel * kernel), dtype=dout.dtype)
    dcol[np.arange(argmax.size), argmax] = dout.reshape(-1)
    dx = col2im(dcol, (n * c, 1, h, w), kernel, kernel, stride)
    return dx.reshape(n, c, h, w)


def batchnorm2d_forward(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                        running_var: Tensor, training: bool, momentum: float = BN_MOMENTUM,
                        eps: float = BN_EPS) -> Tuple[Tensor, Cache]:
    """
    Per-channel batch normalization.

    Train mode normalizes with the batch mean and population variance and
    updates the running statistics in place (running variance uses the
    unbiased estimate). Eval mode uses the running statistics.

    Raises:
        DimensionError: In train mode with a single value per channel
    """
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count <= 1:
            raise DimensionError(
                "batchnorm2d in train mode needs more than one value per channel", axis="batch"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma.reshape(1, -1, 1, 1) * x_hat + beta.reshape(1, -1, 1, 1)
    return out, (x_hat, gamma, inv_std, training)


def batchnorm2d_backward(dout: Tensor, cache: Cache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (dx, dgamma, dbeta) for batchnorm2d_forward."""
    x_hat, gamma, inv_std, training = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * x_hat).sum(axis=(0, 2, 3))
    dx_hat = dout * gamma.reshape(1, -1, 1, 1)
    scale = inv_std.reshape(1, -1, 1, 1)
    if not training:
        return dx_hat * scale, dgamma, dbeta

    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (scale / count) * (
        count * dx_hat
        - dx_hat.sum(axis=(0, 2, 3), keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def linear_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tuple[Tensor, Cache]:
    """y = x W^T + b for x of shape (N, in) and W of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear input {x.shape} does not match weight {weight.shape}", axis="features"
        )
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight)


def linear_backward(dout: Tensor, cache: Cache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (dx, dweight, dbias) for linear_forward."""
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def relu_forward(x: Tensor) -> Tuple[Tensor, Cache]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: Tensor, cache: Cache) -> Tensor:
    """Subgradient 0 at exactly 0."""
    return dout * cache


def sigmoid_forward(x: Tensor) -> Tuple[Tensor, Cache]:
    out = expit(x)
    return out, out


def sigmoid_backward(dout: Tensor, cache: Cache) -> Tensor:
    return dout * cache * (1.0 - cache)


def upsample2x_forward(x: Tensor) -> Tuple[Tensor, Cache]:
    """Nearest-neighbor upsampling by a factor of 2 on both spatial axes."""
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2x_backward(dout: Tensor, cache: Cache) -> Tensor:
    n, c, h, w = cache
    return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def _fit_axis(size: int, target: int) -> Tuple[int, int]:
    """Return (crop_start, pad_before) to center size onto target."""
    if size >= target:
        return (size - target) // 2, 0
    return 0, (target - size) // 2


def center_fit_forward(x: Tensor, height: int, width: int) -> Tuple[Tensor, Cache]:
    """
    Center-crop or symmetrically zero-pad feature maps to (height, width).

    An odd size difference puts the extra row/column at the bottom/right.
    """
    n, c, h, w = x.shape
    crop_y, pad_y = _fit_axis(h, height)
    crop_x, pad_x = _fit_axis(w, width)
    src = x[:, :, crop_y:crop_y + min(h, height), crop_x:crop_x + min(w, width)]
    out = np.zeros((n, c, height, width), dtype=x.dtype)
    out[:, :, pad_y:pad_y + src.shape[2], pad_x:pad_x + src.shape[3]] = src
    return out, (x.shape, crop_y, crop_x, pad_y, pad_x, src.shape)


def center_fit_backward(dout: Tensor, cache: Cache) -> Tensor:
    x_shape, crop_y, crop_x, pad_y, pad_x, src_shape = cache
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, crop_y:crop_y + src_shape[2], crop_x:crop_x + src_shape[3]] = \
        dout[:, :, pad_y:pad_y + src_shape[2], pad_x:pad_x + src_shape[3]]
    return dx


def _lstm_gates(gates: Tensor, hidden: int, axis: int) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split packed pre-activations in (input, forget, cell-candidate, output) order."""
    i, f, g, o = np.split(gates, 4, axis=axis)
    return expit(i), expit(f), np.tanh(g), expit(o)


def _lstm_state_backward(dh_new: Tensor, dc_new: Tensor, gate_cache: Cache,
                         axis: int) -> Tuple[Tensor, Tensor]:
    """Back-propagate through the elementwise LSTM update; return (dgates, dc_prev)."""
    c_prev, i, f, g, o, tanh_c = gate_cache
    d_o = dh_new * tanh_c
    dc = dc_new + dh_new * o * (1.0 - tanh_c ** 2)
    d_i = dc * g
    d_f = dc * c_prev
    d_g = dc * i
    dgates = np.concatenate([
        d_i * i * (1.0 - i),
        d_f * f * (1.0 - f),
        d_g * (1.0 - g ** 2),
        d_o * o * (1.0 - o),
    ], axis=axis)
    return dgates, dc * f


def lstm_cell_forward(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor,
                      b_ih: Tensor, b_hh: Tensor) -> Tuple[Tensor, Tensor, Cache]:
    """
    One LSTM step with packed gate parameters in (i, f, g, o) order.

    Args:
        x: (N, D) input
        h_prev: (N, H) hidden state
        c_prev: (N, H) cell state
        w_ih: (4H, D) input weights
        w_hh: (4H, H) recurrent weights
        b_ih: (4H,) input bias
        b_hh: (4H,) recurrent bias

    Returns:
        New hidden state, new cell state, backward cache
    """
    hidden = h_prev.shape[1]
    if w_ih.shape != (4 * hidden, x.shape[1]) or w_hh.shape != (4 * hidden, hidden):
        raise DimensionError(
            f"lstm_cell weights {w_ih.shape}/{w_hh.shape} do not match input {x.shape} "
            f"and hidden {h_prev.shape}", axis="features"
        )
    if c_prev.shape != h_prev.shape or x.shape[0] != h_prev.shape[0]:
        raise DimensionError(
            f"lstm_cell state shapes {h_prev.shape}/{c_prev.shape} do not match batch "
            f"{x.shape[0]}", axis="batch"
        )
    gates = x @ w_ih.T + b_ih + h_prev @ w_hh.T + b_hh
    i, f, g, o = _lstm_gates(gates, hidden, axis=1)
    c_new = f * c_prev + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, (x, h_prev, w_ih, w_hh, (c_prev, i, f, g, o, tanh_c))


def lstm_cell_backward(dh_new: Tensor, dc_new: Tensor,
                       cache: Cache) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Return (dx, dh_prev, dc_prev, dw_ih, dw_hh, dbias); dbias applies to both biases."""
    x, h_prev, w_ih, w_hh, gate_cache = cache
    dgates, dc_prev = _lstm_state_backward(dh_new, dc_new, gate_cache, axis=1)
    dx = dgates @ w_ih
    dh_prev = dgates @ w_hh
    return dx, dh_prev, dc_prev, dgates.T @ x, dgates.T @ h_prev, dgates.sum(axis=0)


def convlstm_cell_forward(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor,
                          bias: Tensor, w_h: Tensor) -> Tuple[Tensor, Tensor, Cache]:
    """
    One ConvLSTM step: LSTM equations with same-padded convolutions.

    Args:
        x: (N, C, H, W) input
        h_prev: (N, Hc, H, W) hidden state
        c_prev: (N, Hc, H, W) cell state
        w_x: (4Hc, C, k, k) input-to-gate kernels
        bias: (4Hc,) gate bias
        w_h: (4Hc, Hc, k, k) hidden-to-gate kernels

    Returns:
        New hidden state, new cell state, backward cache
    """
    if x.shape[2:] != h_prev.shape[2:] or c_prev.shape != h_prev.shape:
        axis = "height" if x.shape[2] != h_prev.shape[2] else "width"
        raise DimensionError(
            f"convlstm_cell input {x.shape} and state {h_prev.shape}/{c_prev.shape} "
            f"disagree spatially", axis=axis
        )
    padding = w_x.shape[2] // 2
    gates_x, cache_x = conv2d_forward(x, w_x, bias, 1, padding)
    gates_h, cache_h = conv2d_forward(h_prev, w_h, None, 1, padding)
    i, f, g, o = _lstm_gates(gates_x + gates_h, h_prev.shape[1], axis=1)
    c_new = f * c_prev + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, (cache_x, cache_h, (c_prev, i, f, g, o, tanh_c))


def convlstm_cell_backward(dh_new: Tensor, dc_new: Tensor,
                           cache: Cache) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Return (dx, dh_prev, dc_prev, dw_x, dbias, dw_h)."""
    cache_x, cache_h, gate_cache = cache
    dgates, dc_prev = _lstm_state_backward(dh_new, dc_new, gate_cache, axis=1)
    dx, dw_x, dbias = conv2d_backward(dgates, cache_x)
    dh_prev, dw_h, _ = conv2d_backward(dgates, cache_h)
    return dx, dh_prev, dc_prev, dw_x, dbias, dw_h


def bce_loss(pred: Tensor, target: Tensor, eps: float = BCE_EPS) -> Tuple[float, Tensor]:
    """
    Mean binary cross-entropy over all elements, with its gradient.

    Predictions are clamped to [eps, 1 - eps]; the gradient is zero where the
    clamp is active.

    Returns:
        Scalar loss and d(loss)/d(pred)

    Raises:
        DimensionError: On empty input or shape mismatch
    """
    if pred.size == 0:
        raise DimensionError("bce_loss needs at least one prediction", axis="N")
    if pred.shape != target.shape:
        raise DimensionError(
            f"bce_loss prediction {pred.shape} and target {target.shape} differ", axis="N"
        )
    p = np.clip(pred, eps, 1.0 - eps)
    t = target.astype(p.dtype)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    inside = (pred >= eps) & (pred <= 1.0 - eps)
    grad = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) / pred.size
    return float(loss), grad.astype(pred.dtype)


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------

class Parameter:
    """A trainable tensor with its accumulated gradient."""

    def __init__(self, data: Tensor):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Module:
    """
    Base class holding parameters, buffers and sub-modules.

    Parameters and sub-modules are discovered from instance attributes (lists
    of modules included) in assignment order; buffers live in ``_buffers``
    and are excluded from optimization.
    """

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, Tensor] = {}

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(param.data.size for param in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def astype(self, dtype: Any) -> "Module":
        """Convert parameters, gradients and buffers to dtype in place."""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = param.grad.astype(dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype: Any):
        for name in list(self._buffers):
            self._buffers[name] = self._buffers[name].astype(dtype)
        for _, child in self._children():
            child._cast_buffers(dtype)

    def state_dict(self) -> Dict[str, Tensor]:
        state = {name: param.data.copy() for name, param in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def buffer_names(self) -> List[str]:
        return [name for name, _ in self.named_buffers()]

    def load_state_dict(self, state: Dict[str, Tensor]):
        """
        Copy tensors into parameters and buffers by name.

        Raises:
            CheckpointError: On missing or unexpected names
            DimensionError: On shape mismatch
        """
        params = dict(self.named_parameters())
        expected = set(params) | set(self.buffer_names())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing {missing}, unexpected {unexpected}")

        for name, param in params.items():
            _check_shape(name, param.data, state[name])
            param.data = np.array(state[name], dtype=param.data.dtype)
            param.zero_grad()
        self._load_buffers(state, "")

    def _load_buffers(self, state: Dict[str, Tensor], prefix: str):
        for name in list(self._buffers):
            _check_shape(prefix + name, self._buffers[name], state[prefix + name])
            self._buffers[name] = np.array(state[prefix + name], dtype=self._buffers[name].dtype)
        for name, child in self._children():
            child._load_buffers(state, f"{prefix}{name}.")


def _check_shape(name: str, current: Tensor, incoming: Tensor):
    if tuple(current.shape) != tuple(incoming.shape):
        raise DimensionError(
            f"{name}: expected shape {current.shape}, got {incoming.shape}", axis=name
        )


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
               dtype: Any) -> Tensor:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], bound: float,
             dtype: Any) -> Tensor:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: Optional[np.random.Generator] = None,
                 dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_he_normal(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        bias = self.bias.data if self.bias is not None else None
        return conv2d_forward(x, self.weight.data, bias, self.stride, self.padding)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        dx, dweight, dbias = conv2d_backward(dout, cache)
        self.weight.grad += dweight
        if self.bias is not None:
            self.bias.grad += dbias
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def running_mean(self) -> Tensor:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> Tensor:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        return batchnorm2d_forward(x, self.weight.data, self.bias.data, self.running_mean,
                                   self.running_var, self.training, self.momentum, self.eps)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        dx, dgamma, dbeta = batchnorm2d_backward(dout, cache)
        self.weight.grad += dgamma
        self.bias.grad += dbeta
        return dx


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_he_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        return linear_forward(x, self.weight.data, self.bias.data)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        dx, dweight, dbias = linear_backward(dout, cache)
        self.weight.grad += dweight
        self.bias.grad += dbias
        return dx


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 3, stride: int = 2):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        return maxpool2d_forward(x, self.kernel_size, self.stride)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        return maxpool2d_backward(dout, cache)


class LSTMCell(Module):
    """Single LSTM cell with separate input and recurrent biases."""

    def __init__(self, input_size: int, hidden_size: int,
                 rng: Optional[np.random.Generator] = None, dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden_size)
        self.hidden_size = hidden_size
        self.weight_ih = Parameter(_uniform(rng, (4 * hidden_size, input_size), bound, dtype))
        self.weight_hh = Parameter(_uniform(rng, (4 * hidden_size, hidden_size), bound, dtype))
        self.bias_ih = Parameter(_uniform(rng, (4 * hidden_size,), bound, dtype))
        self.bias_hh = Parameter(_uniform(rng, (4 * hidden_size,), bound, dtype))

    def initial_state(self, batch: int, dtype: Any = None) -> Tuple[Tensor, Tensor]:
        dtype = dtype or self.weight_ih.data.dtype
        zeros = np.zeros((batch, self.hidden_size), dtype=dtype)
        return zeros, zeros.copy()

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor, Cache]:
        return lstm_cell_forward(x, h, c, self.weight_ih.data, self.weight_hh.data,
                                 self.bias_ih.data, self.bias_hh.data)

    def backward(self, dh: Tensor, dc: Tensor, cache: Cache) -> Tuple[Tensor, Tensor, Tensor]:
        dx, dh_prev, dc_prev, dw_ih, dw_hh, dbias = lstm_cell_backward(dh, dc, cache)
        self.weight_ih.grad += dw_ih
        self.weight_hh.grad += dw_hh
        self.bias_ih.grad += dbias
        self.bias_hh.grad += dbias
        return dx, dh_prev, dc_prev


class ConvLSTMCell(Module):
    """ConvLSTM cell; gate convolutions are same-padded so H x W is preserved."""

    def __init__(self, input_channels: int, hidden_channels: int, kernel_size: int = 3,
                 rng: Optional[np.random.Generator] = None, dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt((input_channels + hidden_channels) * kernel_size * kernel_size)
        gates = 4 * hidden_channels
        self.hidden_channels = hidden_channels
        self.weight_x = Parameter(_uniform(
            rng, (gates, input_channels, kernel_size, kernel_size), bound, dtype))
        self.bias = Parameter(np.zeros(gates, dtype=dtype))
        self.weight_h = Parameter(_uniform(
            rng, (gates, hidden_channels, kernel_size, kernel_size), bound, dtype))

    def initial_state(self, batch: int, height: int, width: int,
                      dtype: Any = None) -> Tuple[Tensor, Tensor]:
        dtype = dtype or self.weight_x.data.dtype
        zeros = np.zeros((batch, self.hidden_channels, height, width), dtype=dtype)
        return zeros, zeros.copy()

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor, Cache]:
        return convlstm_cell_forward(x, h, c, self.weight_x.data, self.bias.data,
                                     self.weight_h.data)

    def backward(self, dh: Tensor, dc: Tensor, cache: Cache) -> Tuple[Tensor, Tensor, Tensor]:
        dx, dh_prev, dc_prev, dw_x, dbias, dw_h = convlstm_cell_backward(dh, dc, cache)
        self.weight_x.grad += dw_x
        self.bias.grad += dbias
        self.weight_h.grad += dw_h
        return dx, dh_prev, dc_prev


class ConvBlock(Module):
    """conv -> batch norm -> ReLU -> max pool."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 padding: int, pool_kernel: int, pool_stride: int,
                 rng: Optional[np.random.Generator] = None, dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, padding,
                           rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(out_channels, dtype=dtype)
        self.pool = MaxPool2d(pool_kernel, pool_stride)

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        out, conv_cache = self.conv.forward(x)
        out, norm_cache = self.norm.forward(out)
        out, relu_cache = relu_forward(out)
        out, pool_cache = self.pool.forward(out)
        return out, (conv_cache, norm_cache, relu_cache, pool_cache)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        conv_cache, norm_cache, relu_cache, pool_cache = cache
        dout = self.pool.backward(dout, pool_cache)
        dout = relu_backward(dout, relu_cache)
        dout = self.norm.backward(dout, norm_cache)
        return self.conv.backward(dout, conv_cache)


class UpConvBlock(Module):
    """Optional 2x nearest upsample -> 3x3 same conv -> batch norm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, upsample: bool = True,
                 kernel_size: int = 3, rng: Optional[np.random.Generator] = None,
                 dtype: Any = DEFAULT_DTYPE):
        super().__init__()
        self.upsample = upsample
        self.conv = Conv2d(in_channels, out_channels, kernel_size, 1, kernel_size // 2,
                           rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, Cache]:
        up_cache = None
        if self.upsample:
            x, up_cache = upsample2x_forward(x)
        out, conv_cache = self.conv.forward(x)
        out, norm_cache = self.norm.forward(out)
        out, relu_cache = relu_forward(out)
        return out, (up_cache, conv_cache, norm_cache, relu_cache)

    def backward(self, dout: Tensor, cache: Cache) -> Tensor:
        up_cache, conv_cache, norm_cache, relu_cache = cache
        dout = relu_backward(dout, relu_cache)
        dout = self.norm.backward(dout, norm_cache)
        dout = self.conv.backward(dout, conv_cache)
        if self.upsample:
            dout = upsample2x_backward(dout, up_cache)
        return dout
