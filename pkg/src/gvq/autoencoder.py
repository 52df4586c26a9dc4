"""Desk-scale convolutional autoencoder with hand-derived gradients.

Layout is channels-last: images are (H, W, 3) in [0, 1], feature maps are
(h, w, d) with h = H/4, w = W/4. The encoder is two stride-2 3x3 convs
(3 -> 32 -> d) with a ReLU between them; the feature map itself is left
unconstrained so codes can match it on both sides of zero. The decoder
mirrors it with nearest-neighbor x2 upsampling followed by a 3x3 conv
(d -> 32 -> 3, ReLU after each) and a final 1x1 conv + sigmoid.

All forward helpers return the caches their backward counterparts need;
there is no autodiff graph. Everything is dtype-generic: float32 in
training, float64 on gradient-check paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import DEFAULT_DTYPE, RngStream
from .quantizer import ste_gradient

DOWNSAMPLE_FACTOR = 4
HIDDEN_CHANNELS = 32

AE_TENSOR_NAMES = (
    "enc.conv1.W",
    "enc.conv1.b",
    "enc.conv2.W",
    "enc.conv2.b",
    "dec.conv1.W",
    "dec.conv1.b",
    "dec.conv2.W",
    "dec.conv2.b",
    "dec.head.W",
    "dec.head.b",
)


@dataclass
class AutoencoderParams:
    """Named conv tensors plus the fixed downsampling factor."""

    tensors: dict[str, np.ndarray]
    d: int
    f: int = DOWNSAMPLE_FACTOR

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value


def init_autoencoder_params(d: int, rng: RngStream, dtype=DEFAULT_DTYPE) -> AutoencoderParams:
    """He-normal conv weights, zero biases; draw order follows AE_TENSOR_NAMES."""
    h = HIDDEN_CHANNELS

    def he(shape):
        fan_in = shape[0] * shape[1] * shape[2]
        return rng.standard_normal(shape, dtype=dtype) * dtype(np.sqrt(2.0 / fan_in))

    tensors = {
        "enc.conv1.W": he((3, 3, 3, h)),
        "enc.conv1.b": np.zeros(h, dtype=dtype),
        "enc.conv2.W": he((3, 3, h, d)),
        "enc.conv2.b": np.zeros(d, dtype=dtype),
        "dec.conv1.W": he((3, 3, d, h)),
        "dec.conv1.b": np.zeros(h, dtype=dtype),
        "dec.conv2.W": he((3, 3, h, 3)),
        "dec.conv2.b": np.zeros(3, dtype=dtype),
        "dec.head.W": he((1, 1, 3, 3)),
        "dec.head.b": np.zeros(3, dtype=dtype),
    }
    return AutoencoderParams(tensors=tensors, d=d)


# ---------------------------------------------------------------------------
# primitive layers


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """NHWC conv via im2col; returns (output, column matrix for backward)."""
    B, H, W, Cin = x.shape
    kh, kw, cin_w, Cout = w.shape
    if cin_w != Cin:
        raise ShapeError(f"conv input channels {Cin} do not match weight shape {w.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, Cin, kh, kw)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * Cin)
    out = cols @ w.reshape(kh * kw * Cin, Cout) + b
    return out.reshape(B, Ho, Wo, Cout), cols


def conv2d_backward(d_out: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray, stride: int, pad: int):
    """Gradients w.r.t. weights, bias, and input for conv2d_forward."""
    B, H, W, Cin = x_shape
    kh, kw, _, Cout = w.shape
    Ho, Wo = d_out.shape[1], d_out.shape[2]
    d_flat = d_out.reshape(-1, Cout)
    dw = (cols.T @ d_flat).reshape(kh, kw, Cin, Cout)
    db = d_flat.sum(axis=0)
    d_cols = d_flat @ w.reshape(kh * kw * Cin, Cout).T
    d_win = d_cols.reshape(B, Ho, Wo, kh, kw, Cin)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, Cin), dtype=d_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride, :] += d_win[:, :, :, i, j, :]
    dx = dxp[:, pad : pad + H, pad : pad + W, :] if pad else dxp
    return dw, db, dx


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(d_out: np.ndarray) -> np.ndarray:
    B, H2, W2, C = d_out.shape
    return d_out.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class EncoderCache:
    x_shape: tuple
    cols1: np.ndarray
    pre1: np.ndarray
    r1_shape: tuple
    cols2: np.ndarray


@dataclass
class DecoderCache:
    q_shape: tuple
    u1_shape: tuple
    cols1: np.ndarray
    pre1: np.ndarray
    u2_shape: tuple
    cols2: np.ndarray
    pre2: np.ndarray
    r2_shape: tuple
    cols3: np.ndarray
    out: np.ndarray


def _check_image_batch(x: np.ndarray, f: int):
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got shape {x.shape}")
    if x.shape[1] % f or x.shape[2] % f:
        raise ShapeError(f"image size {x.shape[1]}x{x.shape[2]} not divisible by downsampling factor {f}")


def encoder_forward(params: AutoencoderParams, x: np.ndarray):
    """Images (B, H, W, 3) -> features (B, H/4, W/4, d) plus backward cache."""
    _check_image_batch(x, params.f)
    p = params.tensors
    pre1, cols1 = conv2d_forward(x, p["enc.conv1.W"], p["enc.conv1.b"], stride=2, pad=1)
    r1 = np.maximum(pre1, 0)
    z, cols2 = conv2d_forward(r1, p["enc.conv2.W"], p["enc.conv2.b"], stride=2, pad=1)
    return z, EncoderCache(x_shape=x.shape, cols1=cols1, pre1=pre1, r1_shape=r1.shape, cols2=cols2)


def decoder_forward(params: AutoencoderParams, q: np.ndarray):
    """Quantized features (B, h, w, d) -> images (B, 4h, 4w, 3) in (0, 1)."""
    if q.ndim != 4 or q.shape[3] != params.d:
        raise ShapeError(f"expected (B, h, w, {params.d}) features, got shape {q.shape}")
    p = params.tensors
    u1 = upsample2_forward(q)
    pre1, cols1 = conv2d_forward(u1, p["dec.conv1.W"], p["dec.conv1.b"], stride=1, pad=1)
    r1 = np.maximum(pre1, 0)
    u2 = upsample2_forward(r1)
    pre2, cols2 = conv2d_forward(u2, p["dec.conv2.W"], p["dec.conv2.b"], stride=1, pad=1)
    r2 = np.maximum(pre2, 0)
    logits, cols3 = conv2d_forward(r2, p["dec.head.W"], p["dec.head.b"], stride=1, pad=0)
    out = sigmoid(logits)
    cache = DecoderCache(
        q_shape=q.shape,
        u1_shape=u1.shape,
        cols1=cols1,
        pre1=pre1,
        u2_shape=u2.shape,
        cols2=cols2,
        pre2=pre2,
        r2_shape=r2.shape,
        cols3=cols3,
        out=out,
    )
    return out, cache


def encode(image: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Single image (H, W, 3) or batch (B, H, W, 3) to feature map(s)."""
    image = np.asarray(image)
    single = image.ndim == 3
    batch = image[None] if single else image
    z, _ = encoder_forward(params, batch)
    return z[0] if single else z


def decode(q_map: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Feature map(s) back to image(s); values lie in (0, 1)."""
    q_map = np.asarray(q_map)
    single = q_map.ndim == 3
    batch = q_map[None] if single else q_map
    out, _ = decoder_forward(params, batch)
    return out[0] if single else out


def autoencoder_backward(
    params: AutoencoderParams,
    enc_cache: EncoderCache,
    dec_cache: DecoderCache,
    d_image_hat: np.ndarray,
    d_z_direct: np.ndarray,
):
    """Parameter gradients given the loss gradients on the reconstruction
    and directly on the features (the commitment term).

    The reconstruction path re-enters the encoder through the
    straight-through identity; decoder parameters see only the
    reconstruction gradient. Returns (grads by tensor name, gradient on Z).
    """
    if d_image_hat.shape != dec_cache.out.shape:
        raise ShapeError(
            f"reconstruction gradient shape {d_image_hat.shape} does not match cached forward {dec_cache.out.shape}"
        )
    p = params.tensors
    grads: dict[str, np.ndarray] = {}

    # decoder: sigmoid head, then the two upsample+conv blocks in reverse
    y = dec_cache.out
    d_logits = d_image_hat * (y * (1.0 - y))
    grads["dec.head.W"], grads["dec.head.b"], d_r2 = conv2d_backward(
        d_logits, dec_cache.r2_shape, p["dec.head.W"], dec_cache.cols3, stride=1, pad=0
    )
    d_pre2 = d_r2 * (dec_cache.pre2 > 0)
    grads["dec.conv2.W"], grads["dec.conv2.b"], d_u2 = conv2d_backward(
        d_pre2, dec_cache.u2_shape, p["dec.conv2.W"], dec_cache.cols2, stride=1, pad=1
    )
    d_r1 = upsample2_backward(d_u2)
    d_pre1 = d_r1 * (dec_cache.pre1 > 0)
    grads["dec.conv1.W"], grads["dec.conv1.b"], d_u1 = conv2d_backward(
        d_pre1, dec_cache.u1_shape, p["dec.conv1.W"], dec_cache.cols1, stride=1, pad=1
    )
    d_q = upsample2_backward(d_u1)

    # straight-through splice plus the direct (commitment) gradient on Z
    d_z = ste_gradient(d_q) + d_z_direct

    # encoder
    grads["enc.conv2.W"], grads["enc.conv2.b"], d_er1 = conv2d_backward(
        d_z, enc_cache.r1_shape, p["enc.conv2.W"], enc_cache.cols2, stride=2, pad=1
    )
    d_epre1 = d_er1 * (enc_cache.pre1 > 0)
    grads["enc.conv1.W"], grads["enc.conv1.b"], _ = conv2d_backward(
        d_epre1, enc_cache.x_shape, p["enc.conv1.W"], enc_cache.cols1, stride=2, pad=1
    )
    return grads, d_z
