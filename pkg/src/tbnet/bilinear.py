"""Temporal bilinear interactions between adjacent frames.

Each output channel ``c`` computes ``x_t^T F_c^T F_c x_{t+1}`` with a
low-rank factor matrix ``F_c`` of shape (p, C_in). The factorized path is
built from engine ops: a 1x1 convolution with C_out*p filters, a temporal
shift, an element-wise product and a sum over the factor axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as te
from .layers import Layer, Module, TemporalConv, _rng
from .temporal import temporal_conv, temporal_shift
from .tensor import ContractError, DimensionError, Tensor

DEFAULT_FACTORS = 20
DEFAULT_KEEP = 0.5


@dataclass
class TBConfig:
    c_in: int
    c_out: int | None = None
    p: int = DEFAULT_FACTORS
    dropfactor_keep: float = DEFAULT_KEEP
    bottleneck_reduction: int = 4
    temporal_kernel: int = 3

    def __post_init__(self):
        if self.c_out is None:
            self.c_out = self.c_in
        if self.p < 1:
            raise ContractError(f"factor count must be >= 1, got {self.p}")
        if not 0.0 < self.dropfactor_keep <= 1.0:
            raise ContractError(f"keep probability must lie in (0, 1], got {self.dropfactor_keep}")

    @property
    def mid(self) -> int:
        if self.c_out % self.bottleneck_reduction or self.c_out < self.bottleneck_reduction:
            raise ContractError(
                f"channels {self.c_out} not divisible by bottleneck reduction {self.bottleneck_reduction}")
        return self.c_out // self.bottleneck_reduction


@dataclass(frozen=True)
class DropFactorMask:
    keep: np.ndarray  # bool, length p
    keep_prob: float

    @property
    def scale(self) -> float:
        return 1.0 / self.keep_prob

    @property
    def p(self) -> int:
        return self.keep.shape[0]

    def weights(self, dtype=np.float64) -> np.ndarray:
        return self.keep.astype(dtype) * self.scale

    @classmethod
    def identity(cls, p: int) -> "DropFactorMask":
        return cls(np.ones(p, dtype=bool), 1.0)


def dropfactor_sample(p: int, keep: float, seed=None) -> DropFactorMask:
    """Independent Bernoulli(keep) per factor, with inverted 1/keep scaling."""
    if not 0.0 < keep <= 1.0:
        raise ContractError(f"keep probability must lie in (0, 1], got {keep}")
    if keep == 1.0:
        return DropFactorMask.identity(p)
    return DropFactorMask(_rng(seed).random(p) < keep, keep)


def bilinear_dense_oracle(x_i, x_next, W) -> float:
    """``x_i^T W x_next`` by an explicit double loop over plain floats."""
    x_i = [float(v) for v in np.asarray(x_i).reshape(-1)]
    x_next = [float(v) for v in np.asarray(x_next).reshape(-1)]
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (len(x_i), len(x_next)):
        raise DimensionError(f"W {W.shape} does not match x_i ({len(x_i)},) and x_next ({len(x_next)},)")
    rows = W.tolist()
    total = 0.0
    for j, a in enumerate(x_i):
        row = rows[j]
        for k, b in enumerate(x_next):
            total += a * row[k] * b
    return total


def expand_interaction_weights(F, c: int) -> np.ndarray:
    """Dense (C_in, C_in) matrix whose (j, k) entry is <f_j, f_k> for channel ``c``."""
    F = F.data if isinstance(F, Tensor) else np.asarray(F)
    if not 0 <= c < F.shape[0]:
        raise IndexError(f"channel {c} out of range for {F.shape[0]} output channels")
    Fc = F[c]
    return Fc.T @ Fc


def tb_forward(x: Tensor, F: Tensor, mask: DropFactorMask | None = None) -> Tensor:
    """Factorized temporal bilinear map of a (N, T, C_in, H, W) clip batch.

    ``F`` is (C_out, p, C_in). Output is (N, T, C_out, H, W); the last frame
    pairs with itself.
    """
    if x.ndim != 5:
        raise DimensionError(f"expected a (N, T, C, H, W) clip batch, got {x.shape}")
    if F.ndim != 3:
        raise DimensionError(f"factor weight must be (C_out, p, C_in), got {F.shape}")
    c_out, p, c_in = F.shape
    if x.shape[2] != c_in:
        raise DimensionError(f"channel extent {x.shape[2]} of {x.shape} != C_in of factors {F.shape}")
    if mask is not None and mask.p != p:
        raise ContractError(f"mask length {mask.p} != factor count {p}")
    N, T, _, H, W = x.shape
    # rows ordered (c, q): filter c*p + q holds F[c, q]
    filters = te.reshape(F, (c_out * p, c_in, 1, 1))
    z = te.conv2d_spatial(x, filters)
    prod = te.mul(z, temporal_shift(z))
    prod = te.reshape(prod, (N, T, c_out, p, H, W))
    if mask is not None and not (mask.keep_prob == 1.0 and mask.keep.all()):
        weights = Tensor(mask.weights(x.dtype).reshape(p, 1, 1))
        prod = te.mul(prod, weights)
    return te.reduce_sum(prod, 3)


def temporal_rfs(layers: Iterable) -> int:
    """Frames seen by one output of a temporally stride-1 stack.

    ``layers`` holds ``(kind, k)`` pairs or bare ``kind`` strings; a TB module
    always spans 2 frames.
    """
    rfs = 1
    for layer in layers:
        kind, k = (layer, None) if isinstance(layer, str) else tuple(layer)
        if kind in ("tb", "tb_module"):
            k = 2
        elif k is None:
            k = 1
        rfs += int(k) - 1
    return rfs


class TBModule(Layer):
    """Factorized TB layer holding a (C_out, p, C_in) weight."""

    kind = "tb"

    def __init__(self, c_in: int, c_out: int, p: int = DEFAULT_FACTORS, keep: float = DEFAULT_KEEP,
                 seed=None, dtype=np.float64):
        self.c_in, self.c_out, self.p, self.keep = c_in, c_out, p, keep
        rng = _rng(seed)
        self.factors = te.he_init((c_out, p, c_in), c_in * p, rng, dtype)
        self._mask_rng = np.random.default_rng(rng.integers(2**63))

    def forward(self, x):
        mask = None
        if self.training and self.keep < 1.0:
            mask = dropfactor_sample(self.p, self.keep, self._mask_rng)
        return tb_forward(x, self.factors, mask)


def bottleneck_tb_block(x: Tensor, w_reduce: Tensor, F: Tensor, w_expand: Tensor,
                        mask: DropFactorMask | None = None) -> Tensor:
    """temporal_conv (C -> C/r) -> tb_forward -> temporal_conv (C/r -> C)."""
    h = temporal_conv(x, w_reduce)
    h = tb_forward(h, F, mask)
    return temporal_conv(h, w_expand)


class BottleneckTB(Module):
    """Temporal bottleneck around one TB module; no bias or normalization inside."""

    kind = "bottleneck_tb"

    def __init__(self, cfg: TBConfig, seed=None, dtype=np.float64):
        rng = _rng(seed)
        self.cfg = cfg
        mid = cfg.mid
        self.reduce = TemporalConv(cfg.c_in, mid, cfg.temporal_kernel, seed=rng, dtype=dtype)
        self.tb = TBModule(mid, mid, cfg.p, cfg.dropfactor_keep, seed=rng, dtype=dtype)
        self.expand = TemporalConv(mid, cfg.c_out, cfg.temporal_kernel, seed=rng, dtype=dtype)

    def forward(self, x):
        return self.expand(self.tb(self.reduce(x)))

    def rfs(self) -> int:
        k = self.cfg.temporal_kernel
        return temporal_rfs([("temporal_conv", k), "tb", ("temporal_conv", k)])

    def tb_parameters(self) -> list[Tensor]:
        return [self.reduce.weight, self.tb.factors, self.expand.weight]
