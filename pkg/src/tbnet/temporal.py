"""Temporal aggregation over (N, T, C, H, W) clip batches.

All windowed operators share one boundary rule: positions before the first
or after the last frame read the nearest valid frame (replicate padding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    _make,
    conv_nd,
    reshape,
    transpose,
)


@dataclass(frozen=True)
class TemporalWindow:
    k: int
    l: int
    r: int

    def offsets(self) -> range:
        return range(self.l, self.r + 1)


def temporal_window_bounds(k: int) -> TemporalWindow:
    """Offsets ``l <= j <= r`` of a ``k``-frame window around the current frame."""
    if k < 1:
        raise ContractError(f"temporal kernel size must be >= 1, got {k}")
    return TemporalWindow(k=k, l=1 - (k + 1) // 2, r=k // 2)


def window_indices(T: int, k: int, stride: int = 1) -> np.ndarray:
    """(T_out, k) frame indices read by each output frame, clamped to [0, T)."""
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    win = temporal_window_bounds(k)
    centers = np.arange(0, T, stride)
    idx = centers[:, None] + np.arange(win.l, win.r + 1)[None, :]
    return np.clip(idx, 0, T - 1)


def _check_clip(x: Tensor) -> None:
    if x.ndim != 5:
        raise DimensionError(f"expected a (N, T, C, H, W) clip batch, got shape {x.shape}")


def temporal_pool(x: Tensor, k: int, stride: int = 1, mode: str = "max") -> Tensor:
    _check_clip(x)
    if mode not in ("max", "avg"):
        raise ContractError(f"pooling mode must be 'max' or 'avg', got {mode!r}")
    idx = window_indices(x.shape[1], k, stride)
    gathered = x.data[:, idx]  # (N, T', k, C, H, W)
    if mode == "avg":
        out = gathered.mean(axis=2)

        def backward(g):
            gx = np.zeros_like(x.data)
            share = g / k
            for j in range(k):
                np.add.at(gx, (slice(None), idx[:, j]), share)
            return (gx,)
    else:
        arg = gathered.argmax(axis=2)
        out = np.take_along_axis(gathered, arg[:, :, None], axis=2)[:, :, 0]
        src = idx[np.arange(idx.shape[0])[None, :, None, None, None], arg]  # frame index per output

        def backward(g):
            gx = np.zeros_like(x.data)
            n, t, c, h, w = np.indices(g.shape, sparse=True)
            np.add.at(gx, (n, src, c, h, w), g)
            return (gx,)

    return _make(out, (x,), backward, f"temporal_pool_{mode}")


def temporal_conv(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Learned linear mix of a replicate-padded temporal window.

    ``w`` has layout (C_out, k, C_in): ``w[:, j - l]`` multiplies frame
    ``i + j``, so a k=1 kernel is a plain channel mixer.
    """
    _check_clip(x)
    if w.ndim != 3:
        raise DimensionError(f"temporal_conv weight must be (C_out, k, C_in), got {w.shape}")
    c_out, k, c_in = w.shape
    if x.shape[2] != c_in:
        raise DimensionError(f"channel extent {x.shape[2]} of {x.shape} != C_in of weight {w.shape}")
    N, T, C, H, W = x.shape
    idx = window_indices(T, k, stride)
    T_out = idx.shape[0]
    wmat = w.data.reshape(c_out, k * c_in)
    # (N, T', k, C, H*W) -> (k*C, N*T'*H*W) patch matrix
    gathered = x.data.reshape(N, T, C, H * W)[:, idx]
    cols = np.ascontiguousarray(gathered.transpose(2, 3, 0, 1, 4)).reshape(k * c_in, -1)
    out = (wmat @ cols).reshape(c_out, N, T_out, H, W)
    out = np.ascontiguousarray(out.transpose(1, 2, 0, 3, 4))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(2, 0, 1, 3, 4)).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(k, c_in, N, T_out, H * W)
            gx = np.zeros((N, T, C * H * W), dtype=g.dtype)
            for j in range(k):
                route = np.zeros((T, T_out), dtype=g.dtype)
                route[idx[:, j], np.arange(T_out)] = 1.0
                contrib = gcols[j].transpose(1, 2, 0, 3).reshape(N, T_out, -1)
                gx += route @ contrib
            gx = gx.reshape(x.shape)
        return gx, gw

    return _make(out, (x, w), backward, "temporal_conv")


def conv3d(x: Tensor, w: Tensor, stride_t: int = 1, stride_s: int = 1,
           pad: int | Sequence[int] = 0) -> Tensor:
    """Spatio-temporal convolution with zero padding on (T, H, W).

    ``w`` is (C_out, C_in, k_t, k, k); ``pad`` is one int or a (t, h, w) triple.
    """
    _check_clip(x)
    if w.ndim != 5:
        raise DimensionError(f"conv3d weight must be rank 5, got {w.shape}")
    if x.shape[2] != w.shape[1]:
        raise DimensionError(f"channel extent {x.shape[2]} of {x.shape} != C_in of weight {w.shape}")
    pad = (pad, pad, pad) if isinstance(pad, int) else tuple(pad)
    xc = transpose(x, (0, 2, 1, 3, 4))  # (N, C, T, H, W)
    y = conv_nd(xc, w, (stride_t, stride_s, stride_s), pad, "conv3d")
    return transpose(y, (0, 2, 1, 3, 4))


def _shift_backward(g: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(g)
    gx[:, 1:] += g[:, :-1]
    gx[:, -1] += g[:, -1]
    return gx


def temporal_shift(x: Tensor) -> Tensor:
    """Frame ``t`` takes the content of frame ``t + 1``; the last frame repeats."""
    _check_clip(x)
    T = x.shape[1]
    if T == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "temporal_shift")
    out = np.concatenate([x.data[:, 1:], x.data[:, -1:]], axis=1)
    return _make(out, (x,), lambda g: (_shift_backward(g),), "temporal_shift")


def frame_reshape(x: Tensor) -> Tensor:
    """(N, T, C, H, W) -> (N*T, C, H, W)."""
    return reshape(x, (x.shape[0] * x.shape[1],) + x.shape[2:])
