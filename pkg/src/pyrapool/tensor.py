"""Dense NCHW tensor primitives: convolution, max pooling, fully-connected,
ReLU, softmax cross-entropy, and dropout, each with an explicit backward pass.

Activations are plain numpy arrays in (batch, channels, height, width) layout.
Values are stored in 32-bit floats during training; every reduction (matmul,
sum) accumulates in 64-bit and casts back, so gradient checks run to tight
tolerances when fed float64 inputs.

Max ties are broken by the first index in row-major scan order, which makes
backward routing deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass(frozen=True)
class Tensor:
    """A value array with an optional gradient of identical shape.

    Used for parameter slots; layer functions below take and return bare
    ndarrays.
    """

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ConvSpec:
    """Convolution hyper-parameters: `out_channels` p×p filters (`kernel` = p),
    square stride, and symmetric zero padding per side."""

    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid conv spec {self}")

    def out_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent: floor((size + 2*padding - kernel) / stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _acc_matmul(a: np.ndarray, b: np.ndarray, out_dtype) -> np.ndarray:
    # 64-bit accumulation regardless of storage dtype
    r = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return r.astype(out_dtype, copy=False)


def _im2col(xp: np.ndarray, kernel: int, stride: int):
    """(B,C,Hp,Wp) -> (B,OH,OW,C*K*K) patch matrix of the padded input."""
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,OH,OW,K,K)
    b, c, oh, ow, k, _ = win.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * k * k)


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 spec: ConvSpec) -> np.ndarray:
    """Cross-correlate `x` (B,C,H,W) with `weights` (O,C,K,K) plus bias.

    Output spatial dims follow `conv_out_size`.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-d NCHW, got shape {x.shape}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weights.shape
    if (o, kh, kw) != (spec.out_channels, spec.kernel, spec.kernel):
        raise ShapeError(
            f"weights shaped {weights.shape} do not match spec "
            f"{spec.out_channels}x{spec.kernel}x{spec.kernel}")
    if c != cw:
        raise ShapeError(f"conv input has {c} channels but weights expect {cw}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shaped {bias.shape}, expected ({o},)")
    if h + 2 * spec.padding < spec.kernel or w + 2 * spec.padding < spec.kernel:
        raise ShapeError(
            f"padded input {h + 2 * spec.padding}x{w + 2 * spec.padding} is "
            f"smaller than the {spec.kernel}x{spec.kernel} kernel")

    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, spec.kernel, spec.stride)
    wmat = weights.reshape(o, -1)
    out = _acc_matmul(cols.reshape(-1, cols.shape[-1]), wmat.T, x.dtype)
    oh = spec.out_size(h)
    ow = spec.out_size(w)
    out = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    return out + bias.reshape(1, o, 1, 1).astype(x.dtype, copy=False)


def conv_backward(grad_out: np.ndarray, saved_input: np.ndarray,
                  weights: np.ndarray, spec: ConvSpec):
    """Gradients of conv_forward w.r.t. input, weights, and bias.

    `saved_input` must be the forward pass's input; `grad_out` must match the
    forward output shape.
    """
    if saved_input is None:
        raise ShapeError("conv_backward requires the saved forward input")
    b, c, h, w = saved_input.shape
    o = weights.shape[0]
    oh = spec.out_size(h)
    ow = spec.out_size(w)
    if grad_out.shape != (b, o, oh, ow):
        raise ShapeError(
            f"grad_out shaped {grad_out.shape}, expected {(b, o, oh, ow)}")

    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(saved_input, ((0, 0), (0, 0), (p, p), (p, p))) if p else saved_input

    g64 = grad_out.astype(np.float64, copy=False)
    grad_bias = g64.sum(axis=(0, 2, 3)).astype(saved_input.dtype)

    cols = _im2col(xp, k, s).reshape(-1, c * k * k)
    gmat = g64.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_weights = (gmat.T @ cols.astype(np.float64, copy=False))
    grad_weights = grad_weights.reshape(o, c, k, k).astype(weights.dtype)

    gxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    w64 = weights.astype(np.float64, copy=False)
    for dy in range(k):
        for dx in range(k):
            t = np.tensordot(g64, w64[:, :, dy, dx], axes=([1], [0]))
            gxp[:, :, dy:dy + s * oh:s, dx:dx + s * ow:s] += t.transpose(0, 3, 1, 2)
    grad_input = gxp[:, :, p:p + h, p:p + w].astype(saved_input.dtype)
    return grad_input, grad_weights, grad_bias


def maxpool_forward(x: np.ndarray, window, stride, padding=(0, 0)):
    """Max pool (B,C,H,W) over `window`=(wh,ww) at `stride`=(sh,sw).

    Returns the pooled map and an argmax map of flat row*W+col indices into the
    unpadded input plane; ties go to the first cell in row-major order. Padded
    border cells are -inf and can never win.
    """
    wh, ww = window
    sh, sw = stride
    ph, pw = padding
    if wh < 1 or ww < 1:
        raise ShapeError(f"pool window must be positive, got {window}")
    if min(sh, sw) < 1:
        raise ShapeError(f"pool stride must be positive, got {stride}")
    if wh <= ph or ww <= pw:
        raise ShapeError(f"pool window {window} must exceed padding {padding}")
    b, c, h, w = x.shape
    if h + 2 * ph < wh or w + 2 * pw < ww:
        raise ShapeError(
            f"pool window {window} does not fit padded input "
            f"{h + 2 * ph}x{w + 2 * pw}")

    if ph or pw:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=-np.inf)
    else:
        xp = x
    win = sliding_window_view(xp, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, oh, ow, wh * ww)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    oy = np.arange(oh).reshape(1, 1, oh, 1)
    ox = np.arange(ow).reshape(1, 1, 1, ow)
    row = oy * sh + local // ww - ph
    col = ox * sw + local % ww - pw
    argmax = row * w + col
    return out, argmax


def maxpool_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape):
    """Route `grad_out` to the argmax cells; overlapping windows accumulate."""
    b, c, h, w = input_shape
    if grad_out.shape != argmax.shape:
        raise ShapeError(
            f"grad_out {grad_out.shape} does not match argmax map {argmax.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() >= h * w):
        raise ShapeError(
            f"argmax map indexes outside a {h}x{w} plane; stale map?")
    grad = np.zeros((b, c, h * w), dtype=np.float64)
    bi = np.arange(b).reshape(b, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1)
    np.add.at(grad, (bi, ci, argmax), grad_out.astype(np.float64, copy=False))
    return grad.reshape(b, c, h, w).astype(grad_out.dtype)


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (B,D) @ weights (O,D).T + bias (O,)."""
    if x.ndim != 2:
        raise ShapeError(f"fc input must be (batch, features), got {x.shape}")
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"fc input has {x.shape[1]} features but weights expect "
            f"{weights.shape[1]}")
    out = _acc_matmul(x, weights.T, x.dtype)
    return out + bias.astype(x.dtype, copy=False)


def fc_backward(grad_out: np.ndarray, saved_input: np.ndarray,
                weights: np.ndarray):
    if grad_out.shape != (saved_input.shape[0], weights.shape[0]):
        raise ShapeError(
            f"fc grad_out shaped {grad_out.shape}, expected "
            f"{(saved_input.shape[0], weights.shape[0])}")
    grad_input = _acc_matmul(grad_out, weights, saved_input.dtype)
    grad_weights = _acc_matmul(grad_out.T, saved_input, weights.dtype)
    grad_bias = grad_out.astype(np.float64).sum(axis=0).astype(weights.dtype)
    return grad_input, grad_weights, grad_bias


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; each output row is non-negative and sums to one."""
    z = logits.astype(np.float64, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.astype(logits.dtype, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, n = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shaped {labels.shape}, expected ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ShapeError(
            f"label out of range [0, {n}): got {labels.min()}..{labels.max()}")
    z = logits.astype(np.float64, copy=False)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float((logsum - z[np.arange(b), labels]).mean())
    p = np.exp(z - logsum[:, None])
    p[np.arange(b), labels] -= 1.0
    return loss, (p / b).astype(logits.dtype, copy=False)


def dropout(x: np.ndarray, rate: float, train_mode: bool,
            rng: np.random.Generator):
    """Inverted dropout: kept units are scaled by 1/(1-rate) at train time so
    eval mode is the identity. Returns (output, mask); mask is None in eval."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    mask = mask.astype(x.dtype)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask
