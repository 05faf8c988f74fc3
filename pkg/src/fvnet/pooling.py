"""Spatio-temporal mean pooling of feature-map stacks into descriptors.

A window of ``window_frames`` feature maps is divided into an
n_sigma x n_sigma x n_tau grid of cells, each of spatial size
cell_h x cell_w and temporal length window_frames / n_tau.  Every cell is
mean-pooled per channel and the cells are concatenated temporal-major,
then row, then column, then channel, giving one descriptor of dimension
D = n_sigma^2 * n_tau * d per grid position.  The window spans
n_sigma * cell_h by n_sigma * cell_w feature-map units and slides with
stride ``spatial_stride``.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class PoolConfig:
    n_sigma: int
    n_tau: int
    cell_h: int
    cell_w: int
    window_frames: int
    spatial_stride: int

    def __post_init__(self):
        if self.n_sigma < 1 or self.n_tau < 1:
            raise ValueError("cell counts must be >= 1")
        if self.cell_h < 1 or self.cell_w < 1:
            raise ValueError("cell sizes must be >= 1")
        if self.spatial_stride < 1:
            raise ValueError("spatial stride must be >= 1")
        if self.window_frames % self.n_tau != 0:
            raise ValueError(
                f"window_frames {self.window_frames} not divisible by "
                f"n_tau {self.n_tau}")

    @property
    def span_h(self):
        return self.n_sigma * self.cell_h

    @property
    def span_w(self):
        return self.n_sigma * self.cell_w

    def descriptor_dim(self, channels):
        return self.n_sigma * self.n_sigma * self.n_tau * channels


def output_dims(f_h, f_w, cfg):
    """Grid size produced by sliding the pooling window over an f_h x f_w map."""
    if f_h < cfg.span_h or f_w < cfg.span_w:
        raise ValueError(
            f"pooling window {cfg.span_h}x{cfg.span_w} larger than "
            f"feature map {f_h}x{f_w}")
    return ((f_h - cfg.span_h) // cfg.spatial_stride + 1,
            (f_w - cfg.span_w) // cfg.spatial_stride + 1)


def pool(maps, cfg):
    """Pool (t, F_h, F_w, d) feature maps into an (F_h', F_w', D) tensor."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4:
        raise ValueError(f"pool expects (t, F_h, F_w, d), got {maps.shape}")
    t, f_h, f_w, d = maps.shape
    if t != cfg.window_frames:
        raise ValueError(f"got {t} frames, config expects {cfg.window_frames}")
    out_h, out_w = output_dims(f_h, f_w, cfg)
    tau_len = t // cfg.n_tau

    tmeans = maps.reshape(cfg.n_tau, tau_len, f_h, f_w, d).mean(axis=1)
    cells = sliding_window_view(
        tmeans, (cfg.cell_h, cfg.cell_w), axis=(1, 2)).mean(axis=(-2, -1))
    # cells: (n_tau, f_h - cell_h + 1, f_w - cell_w + 1, d)

    rows = (cfg.spatial_stride * np.arange(out_h)[:, None]
            + cfg.cell_h * np.arange(cfg.n_sigma)[None, :])
    cols = (cfg.spatial_stride * np.arange(out_w)[:, None]
            + cfg.cell_w * np.arange(cfg.n_sigma)[None, :])
    sel = cells[:, rows][:, :, :, cols]
    # sel: (n_tau, out_h, n_sigma, out_w, n_sigma, d)
    sel = sel.transpose(1, 3, 0, 2, 4, 5)
    return np.ascontiguousarray(
        sel.reshape(out_h, out_w, cfg.descriptor_dim(d)))


def pool_backward(upstream, cfg, input_dims):
    """Adjoint of :func:`pool` for feature maps of shape ``input_dims``.

    Each input entry receives 1/cell-size times the sum of the upstream
    entries of every cell that contains it (windows may overlap).
    """
    t, f_h, f_w, d = input_dims
    out_h, out_w = output_dims(f_h, f_w, cfg)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (out_h, out_w, cfg.descriptor_dim(d)):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match pooled dims "
            f"{(out_h, out_w, cfg.descriptor_dim(d))}")
    tau_len = t // cfg.n_tau
    cell_size = cfg.cell_h * cfg.cell_w * tau_len
    n_s = cfg.n_sigma

    g_cells = upstream.reshape(out_h, out_w, cfg.n_tau, n_s, n_s, d) / cell_size
    grad = np.zeros(input_dims)
    for gi in range(out_h):
        r0 = gi * cfg.spatial_stride
        for gj in range(out_w):
            c0 = gj * cfg.spatial_stride
            block = np.broadcast_to(
                g_cells[gi, gj][:, None, :, None, :, None, :],
                (cfg.n_tau, tau_len, n_s, cfg.cell_h, n_s, cfg.cell_w, d))
            grad[:, r0:r0 + cfg.span_h, c0:c0 + cfg.span_w, :] += block.reshape(
                t, cfg.span_h, cfg.span_w, d)
    return grad
