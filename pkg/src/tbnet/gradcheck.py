"""Central finite-difference checks for every differentiable op.

Each case builds a scalar loss ``sum(op(...) * R)`` with a random projection
``R`` so that every output element contributes. The analytic gradient from
``backward`` is compared against central differences with the relative error
``||a - n|| / max(||a||, ||n||)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as te
from .bilinear import bottleneck_tb_block, dropfactor_sample, tb_forward
from .network import NetworkConfig, assemble_network
from .temporal import conv3d, temporal_conv, temporal_pool, temporal_shift
from .tensor import Tensor

EPS = 1e-6
OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3


@dataclass
class Case:
    loss: Callable[[], Tensor]
    params: list[Tensor]
    max_coords: int | None = None  # sample this many coordinates per tensor instead of all


@dataclass
class CheckResult:
    op: str
    seed: int
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tolerance)


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    cache = {}

    def loss():
        out = out_fn()
        if "R" not in cache:
            cache["R"] = rng.standard_normal(out.shape)
        return te.sum_all(te.mul(out, Tensor(cache["R"])))

    return loss


def _clip(rng, N=None, T=None, C=None, H=None, W=None) -> tuple:
    return (N or int(rng.integers(1, 3)), T or int(rng.integers(2, 5)), C or int(rng.integers(1, 4)),
            H or int(rng.integers(1, 4)), W or int(rng.integers(1, 4)))


def case_elementwise(rng) -> Case:
    shape = _clip(rng)
    a = _param(rng, shape)
    b = _param(rng, shape[2:] if rng.random() < 0.5 else shape)
    kind = "add" if rng.random() < 0.5 else "mul"
    return Case(_projected(lambda: te.elementwise(a, b, kind), rng), [a, b])


def case_relu(rng) -> Case:
    # keep inputs away from the kink
    data = rng.standard_normal(_clip(rng))
    data += np.sign(data) * 0.1
    a = Tensor(data, requires_grad=True)
    return Case(_projected(lambda: te.relu(a), rng), [a])


def case_reduce_sum(rng) -> Case:
    a = _param(rng, _clip(rng))
    axis = int(rng.integers(0, 5))
    return Case(_projected(lambda: te.reduce_sum(a, axis), rng), [a])


def case_mean(rng) -> Case:
    a = _param(rng, _clip(rng))
    return Case(_projected(lambda: te.mean(a, (1, 3, 4)), rng), [a])


def case_conv2d(rng) -> Case:
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    N, T, C, H, W = _clip(rng, H=int(rng.integers(3, 6)), W=int(rng.integers(3, 6)))
    x = _param(rng, (N, T, C, H, W))
    w = _param(rng, (int(rng.integers(1, 4)), C, k, k))
    return Case(_projected(lambda: te.conv2d_spatial(x, w, stride, pad), rng), [x, w])


def case_conv3d(rng) -> Case:
    kt = int(rng.choice([1, 3]))
    st, ss = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    N, T, C, H, W = _clip(rng, T=int(rng.integers(3, 5)), H=int(rng.integers(3, 5)), W=int(rng.integers(3, 5)))
    x = _param(rng, (N, T, C, H, W))
    w = _param(rng, (int(rng.integers(1, 3)), C, kt, 3, 3))
    return Case(_projected(lambda: conv3d(x, w, st, ss, (kt // 2, 1, 1)), rng), [x, w])


def case_temporal_conv(rng) -> Case:
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    N, T, C, H, W = _clip(rng, T=int(rng.integers(1, 6)))
    x = _param(rng, (N, T, C, H, W))
    w = _param(rng, (int(rng.integers(1, 4)), k, C))
    return Case(_projected(lambda: temporal_conv(x, w, stride), rng), [x, w])


def case_temporal_pool(rng) -> Case:
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    mode = "max" if rng.random() < 0.5 else "avg"
    x = _param(rng, _clip(rng, T=int(rng.integers(2, 6))))
    return Case(_projected(lambda: temporal_pool(x, k, stride, mode), rng), [x])


def case_temporal_shift(rng) -> Case:
    x = _param(rng, _clip(rng))
    return Case(_projected(lambda: temporal_shift(x), rng), [x])


def case_tb_forward(rng) -> Case:
    N, T, C, H, W = _clip(rng)
    x = _param(rng, (N, T, C, H, W))
    F = _param(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 4)), C))
    mask = dropfactor_sample(F.shape[1], 0.5, rng) if rng.random() < 0.5 else None
    return Case(_projected(lambda: tb_forward(x, F, mask), rng), [x, F])


def case_bottleneck_tb(rng) -> Case:
    C, mid, p = int(rng.integers(2, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    x = _param(rng, _clip(rng, C=C))
    w1 = _param(rng, (mid, 3, C), 0.5)
    F = _param(rng, (mid, p, mid), 0.5)
    w2 = _param(rng, (C, 3, mid), 0.5)
    return Case(_projected(lambda: bottleneck_tb_block(x, w1, F, w2), rng), [x, w1, F, w2])


def case_linear(rng) -> Case:
    x = _param(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 5))))
    w = _param(rng, (int(rng.integers(1, 4)), x.shape[1]))
    b = _param(rng, (w.shape[0],))
    return Case(_projected(lambda: te.linear(x, w, b), rng), [x, w, b])


def case_softmax_cross_entropy(rng) -> Case:
    N, K = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = _param(rng, (N, K))
    labels = rng.integers(0, K, N)
    return Case(lambda: te.softmax_cross_entropy(logits, labels), [logits])


def case_batch_norm(rng) -> Case:
    N, T, C, H, W = _clip(rng, N=2)
    x = _param(rng, (N, T, C, H, W))
    gamma, beta = _param(rng, (C,)), _param(rng, (C,))
    rm, rv = np.zeros(C), np.ones(C)
    return Case(_projected(lambda: te.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), True), rng),
                [x, gamma, beta])


def case_sample_norm(rng) -> Case:
    N, T, C, H, W = _clip(rng, T=int(rng.integers(1, 4)), C=int(rng.integers(2, 4)))
    x = _param(rng, (N, T, C, H, W))
    gamma, beta = _param(rng, (C,)), _param(rng, (C,))
    return Case(_projected(lambda: te.sample_norm(x, gamma, beta), rng), [x, gamma, beta])


def tiny_network(seed: int, arch: str = "wtbn"):
    cfg = NetworkConfig(arch=arch, widths=(4, 4, 8, 8), num_classes=3, clip_shape=(3, 8, 8), p=2,
                        dropfactor_keep=1.0, seed=seed)
    return assemble_network(cfg, np.float64)


def case_network(rng) -> Case:
    arch = str(rng.choice(["c2d", "c3d", "wtbn", "dtbn"]))
    model = tiny_network(int(rng.integers(1 << 30)), arch)
    x = Tensor(rng.standard_normal((2, 3, 3, 8, 8)))
    labels = rng.integers(0, 3, 2)
    return Case(lambda: te.softmax_cross_entropy(model(x), labels), model.parameters(), max_coords=3)


OPS: dict[str, tuple[Callable[[np.random.Generator], Case], float]] = {
    "elementwise": (case_elementwise, OP_TOLERANCE),
    "relu": (case_relu, OP_TOLERANCE),
    "reduce_sum": (case_reduce_sum, OP_TOLERANCE),
    "mean": (case_mean, OP_TOLERANCE),
    "conv2d": (case_conv2d, OP_TOLERANCE),
    "conv3d": (case_conv3d, OP_TOLERANCE),
    "temporal_conv": (case_temporal_conv, OP_TOLERANCE),
    "temporal_pool": (case_temporal_pool, OP_TOLERANCE),
    "temporal_shift": (case_temporal_shift, OP_TOLERANCE),
    "tb_forward": (case_tb_forward, OP_TOLERANCE),
    "bottleneck_tb": (case_bottleneck_tb, OP_TOLERANCE),
    "linear": (case_linear, OP_TOLERANCE),
    "softmax_cross_entropy": (case_softmax_cross_entropy, OP_TOLERANCE),
    "batch_norm": (case_batch_norm, OP_TOLERANCE),
    "sample_norm": (case_sample_norm, OP_TOLERANCE),
    "network": (case_network, NETWORK_TOLERANCE),
}


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def check_case(case: Case, rng: np.random.Generator, eps: float = EPS) -> float:
    for p in case.params:
        p.grad = None
    case.loss().backward()
    analytic, numeric = [], []
    for p in case.params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if case.max_coords is not None and flat.size > case.max_coords:
            coords = rng.choice(flat.size, case.max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with te.no_grad():
                flat[i] = orig + eps
                up = case.loss().item()
                flat[i] = orig - eps
                down = case.loss().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(grad.reshape(-1)[i])
    return relative_error(np.asarray(analytic), np.asarray(numeric))


def run(ops=None, seeds: int = 20, base_seed: int = 0) -> list[CheckResult]:
    names = list(OPS) if not ops else list(ops)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; known: {sorted(OPS)}")
    results = []
    for name in names:
        build, tol = OPS[name]
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, s, sum(map(ord, name))])
            err = check_case(build(rng), rng)
            results.append(CheckResult(name, s, err, tol))
    return results


def worst_by_op(results: list[CheckResult]) -> dict[str, CheckResult]:
    worst: dict[str, CheckResult] = {}
    for r in results:
        if r.op not in worst or r.rel_error > worst[r.op].rel_error:
            worst[r.op] = r
    return worst
