"""Per-frame local feature extraction.

The extractor is local contrast normalization followed by a single valid
convolution, a rectified-linear nonlinearity, and spatial mean pooling.
Filters start from a seeded zero-mean Gaussian (std 0.01) and stay
trainable; the backward pass returns exact gradients for the frames,
filters, and biases.  Precomputed feature maps can bypass this module
entirely (the pipeline accepts feature-map tensors as input).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LCN_WINDOW = 9
LCN_EPS = 1e-6
FILTER_INIT_STD = 0.01


@dataclass
class ExtractorConfig:
    num_filters: int
    kernel_h: int
    kernel_w: int
    in_channels: int
    pool_window: int
    pool_stride: int

    def __post_init__(self):
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("kernel dims must be odd")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ValueError("pool window/stride must be >= 1")


@dataclass
class ConvExtractorParams:
    """Trainable filters (d, k_h, k_w, in_c) and biases (d,), plus pooling."""
    filters: np.ndarray
    biases: np.ndarray
    pool_window: int
    pool_stride: int


def init_extractor(cfg, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    filters = rng.normal(
        0.0, FILTER_INIT_STD,
        size=(cfg.num_filters, cfg.kernel_h, cfg.kernel_w, cfg.in_channels))
    biases = np.zeros(cfg.num_filters)
    return ConvExtractorParams(filters, biases, cfg.pool_window, cfg.pool_stride)


def _normalize_channel(img, window, eps):
    """(value - local mean) / (local std + eps) with clipped box windows.

    Uses zero-padded summed-area tables so each pixel's statistics cover
    exactly the in-bounds part of its window; the image is centered by
    its global mean first, which changes nothing mathematically but keeps
    the mean subtraction accurate for large-offset inputs.
    """
    h, w = img.shape
    half = window // 2
    ones = np.ones((h, w))

    def box_sum(a):
        c = np.cumsum(np.cumsum(a, axis=0), axis=1)
        c = np.pad(c, ((1, 0), (1, 0)))
        r0 = np.clip(np.arange(h) - half, 0, h)
        r1 = np.clip(np.arange(h) + half + 1, 0, h)
        c0 = np.clip(np.arange(w) - half, 0, w)
        c1 = np.clip(np.arange(w) + half + 1, 0, w)
        return (c[np.ix_(r1, c1)] - c[np.ix_(r0, c1)]
                - c[np.ix_(r1, c0)] + c[np.ix_(r0, c0)])

    centered = img - img.mean()
    count = box_sum(ones)
    mean = box_sum(centered) / count
    var = box_sum(centered * centered) / count - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    return (centered - mean) / (std + eps)


def lcn(frame, window=LCN_WINDOW, eps=LCN_EPS):
    """Local contrast normalization of one frame (1, H, W, C).

    Each value becomes (v - local mean) / (local std + eps), with the
    window statistics taken per channel over the clipped box around the
    pixel.  A constant frame maps to all zeros.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 4 or frame.shape[0] != 1:
        raise ValueError(f"lcn expects a single-frame tensor, got {frame.shape}")
    out = np.empty_like(frame)
    for c in range(frame.shape[3]):
        out[0, :, :, c] = _normalize_channel(frame[0, :, :, c], window, eps)
    return out


def lcn_video(frames, window=LCN_WINDOW, eps=LCN_EPS):
    """Apply :func:`lcn` to every frame of an (L, H, W, C) tensor."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.empty_like(frames)
    for f in range(frames.shape[0]):
        out[f:f + 1] = lcn(frames[f:f + 1], window, eps)
    return out


def _conv_valid(frames, filters):
    # frames (L, H, W, C), filters (d, kh, kw, C) -> (L, H-kh+1, W-kw+1, d)
    kh, kw = filters.shape[1], filters.shape[2]
    windows = sliding_window_view(frames, (kh, kw), axis=(1, 2))
    # windows: (L, Fh, Fw, C, kh, kw)
    return np.tensordot(windows, filters, axes=([3, 4, 5], [3, 1, 2]))


def _pool_mean(maps, window, stride):
    if window == 1 and stride == 1:
        return maps
    wins = sliding_window_view(maps, (window, window), axis=(1, 2))
    return wins[:, ::stride, ::stride].mean(axis=(-2, -1))


@dataclass
class ExtractCache:
    frames: np.ndarray
    pre_activation: np.ndarray
    activation: np.ndarray


def extract(frames, params):
    """Feature maps for LCN-preprocessed frames: conv, ReLU, mean pooling."""
    out, _ = extract_with_cache(frames, params)
    return out


def extract_with_cache(frames, params):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"extract expects (L, H, W, C), got {frames.shape}")
    d, kh, kw, c = params.filters.shape
    if frames.shape[1] < kh or frames.shape[2] < kw:
        raise ValueError(
            f"frame {frames.shape[1]}x{frames.shape[2]} smaller than "
            f"filter {kh}x{kw}")
    if frames.shape[3] != c:
        raise ValueError(
            f"frame channels {frames.shape[3]} != filter channels {c}")
    z = _conv_valid(frames, params.filters) + params.biases
    a = np.maximum(z, 0.0)
    out = _pool_mean(a, params.pool_window, params.pool_stride)
    return out, ExtractCache(frames, z, a)


def extract_backward(upstream, cache, params):
    """Gradients of a scalar loss through pooling, ReLU, and the convolution.

    Returns (grad wrt frames, grad wrt filters, grad wrt biases).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    z = cache.pre_activation
    pw, ps = params.pool_window, params.pool_stride
    if pw == 1 and ps == 1:
        if upstream.shape != z.shape:
            raise ValueError(
                f"upstream shape {upstream.shape} != conv output {z.shape}")
        g_act = upstream
    else:
        ph = (z.shape[1] - pw) // ps + 1
        pw_out = (z.shape[2] - pw) // ps + 1
        expected = (z.shape[0], ph, pw_out, z.shape[3])
        if upstream.shape != expected:
            raise ValueError(
                f"upstream shape {upstream.shape} != pooled output {expected}")
        g_act = np.zeros_like(z)
        scale = upstream / (pw * pw)
        rows = ps * np.arange(ph)
        cols = ps * np.arange(pw_out)
        for u in range(pw):
            for v in range(pw):
                g_act[:, rows[:, None] + u, cols[None, :] + v, :] += scale

    g_z = g_act * (z > 0.0)
    grad_biases = g_z.sum(axis=(0, 1, 2))

    frames = cache.frames
    d, kh, kw, c = params.filters.shape
    fh, fw = g_z.shape[1], g_z.shape[2]
    grad_frames = np.zeros_like(frames)
    grad_filters = np.zeros_like(params.filters)
    for a in range(kh):
        for b in range(kw):
            patch = frames[:, a:a + fh, b:b + fw, :]
            # (d, c) contribution of kernel offset (a, b)
            grad_filters[:, a, b, :] = np.tensordot(
                g_z, patch, axes=([0, 1, 2], [0, 1, 2]))
            grad_frames[:, a:a + fh, b:b + fw, :] += np.tensordot(
                g_z, params.filters[:, a, b, :], axes=([3], [0]))
    return grad_frames, grad_filters, grad_biases
