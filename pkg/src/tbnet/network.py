"""ResNet-18 style video backbones with optional temporal bilinear blocks.

Four stages ``res1..res4`` follow a strided stem. Plain blocks are per-frame
2-D (C2D) or full 3-D (C3D); TB blocks add a bottleneck TB path to a plain
2-D block either in parallel with the convolutions (wide) or after them
(deep).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as te
from .bilinear import BottleneckTB, TBConfig
from .layers import BatchNorm, Conv2d, Conv3d, Layer, Linear, Module, SampleNorm
from .tensor import ContractError, DimensionError, Tensor

STAGES = ("res1", "res2", "res3", "res4")
ARCHS = ("c2d", "c3d", "wtbn", "dtbn")
BLOCK_KINDS = ("resnet2d", "resnet3d", "wide_tb", "deep_tb")
CKPT_MAGIC = b"TBNCKPT1"


class ConfigurationError(ValueError):
    pass


@dataclass
class BlockSpec:
    kind: str
    c_in: int
    c_out: int
    stride: int = 1
    temporal_stride: int = 1
    tb: TBConfig | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2) or self.temporal_stride not in (1, 2):
            raise ConfigurationError(f"block strides must be 1 or 2, got {self.stride}/{self.temporal_stride}")
        if self.kind in ("wide_tb", "deep_tb"):
            if self.temporal_stride != 1:
                raise ConfigurationError("TB blocks are temporally stride-1")
            if self.tb is None:
                self.tb = TBConfig(self.c_in, self.c_out)


@dataclass
class NetworkConfig:
    arch: str = "c2d"
    widths: tuple = (64, 128, 256, 512)
    width_factor: float = 1.0
    blocks_per_stage: int | tuple = 2
    clip_shape: tuple = (8, 112, 112)
    in_channels: int = 3
    num_classes: int = 200
    tb_stages: tuple = ("res2", "res3", "res4")
    p: int = 20
    dropfactor_keep: float = 0.5
    bottleneck_reduction: int = 4
    temporal_kernel: int = 3
    backbone: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.clip_shape = tuple(self.clip_shape)
        self.tb_stages = tuple(self.tb_stages)
        if isinstance(self.blocks_per_stage, list):
            self.blocks_per_stage = tuple(self.blocks_per_stage)
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for s in self.tb_stages:
            if s not in STAGES:
                raise ConfigurationError(f"unknown stage {s!r} in tb_stages")
        if self.backbone is None:
            self.backbone = "c3d" if self.arch == "c3d" else "c2d"
        if self.backbone not in ("c2d", "c3d"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")

    @property
    def stage_widths(self) -> tuple:
        return tuple(max(1, int(round(w * self.width_factor))) for w in self.widths)

    @property
    def stage_depths(self) -> tuple:
        if isinstance(self.blocks_per_stage, int):
            return (self.blocks_per_stage,) * len(STAGES)
        return tuple(self.blocks_per_stage)

    @property
    def tb_kind(self) -> str | None:
        return {"wtbn": "wide_tb", "dtbn": "deep_tb"}.get(self.arch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def block_specs(self) -> list[list[BlockSpec]]:
        """Per-stage block specs, validating shape propagation stage by stage."""
        widths = self.stage_widths
        T, H, W = self.clip_shape
        H, W = _down(H, 7, 2, 3), _down(W, 7, 2, 3)
        if min(T, H, W) < 1:
            raise ConfigurationError(f"stem: clip {self.clip_shape} too small for a stride-2 7x7 stem")
        c = widths[0]
        specs = []
        for i, (name, width, depth) in enumerate(zip(STAGES, widths, self.stage_depths)):
            stage = []
            for b in range(depth):
                stride = 2 if (i > 0 and b == 0) else 1
                t_stride = stride if self.backbone == "c3d" else 1
                kind = "resnet3d" if self.backbone == "c3d" else "resnet2d"
                tb = None
                if self.tb_kind and name in self.tb_stages:
                    kind = self.tb_kind
                    t_stride = 1
                    try:
                        tb = TBConfig(c, width, self.p, self.dropfactor_keep,
                                      self.bottleneck_reduction, self.temporal_kernel)
                        tb.mid
                    except ContractError as e:
                        raise ConfigurationError(f"{name}: {e}") from e
                stage.append(BlockSpec(kind, c, width, stride, t_stride, tb))
                H, W = _down(H, 3, stride, 1), _down(W, 3, stride, 1)
                T = _down(T, 3, t_stride, 1) if kind == "resnet3d" else T
                if min(T, H, W) < 1:
                    raise ConfigurationError(f"{name}: feature map vanishes (T, H, W)=({T}, {H}, {W}) "
                                             f"for clip {self.clip_shape}")
                c = width
            specs.append(stage)
        return specs

    def expected_stage_shapes(self) -> list[tuple]:
        """(T, H, W) after the stem and after each stage."""
        T, H, W = self.clip_shape
        H, W = _down(H, 7, 2, 3), _down(W, 7, 2, 3)
        shapes = [(T, H, W)]
        for stage in self.block_specs():
            for spec in stage:
                H, W = _down(H, 3, spec.stride, 1), _down(W, 3, spec.stride, 1)
                if spec.kind == "resnet3d":
                    T = _down(T, 3, spec.temporal_stride, 1)
            shapes.append((T, H, W))
        return shapes

    def num_tb_blocks(self) -> int:
        return sum(spec.kind in ("wide_tb", "deep_tb") for stage in self.block_specs() for spec in stage)


def _down(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _seeded(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


class ResNetBlock(Module):
    """Two 3x3 (or 3x3x3) convolutions with post-activation and a residual sum."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        c_in, c_out, s, ts = spec.c_in, spec.c_out, spec.stride, spec.temporal_stride
        if spec.kind == "resnet3d":
            self.conv1 = Conv3d(c_in, c_out, (3, 3, 3), (ts, s), seed=rng, dtype=dtype)
            self.conv2 = Conv3d(c_out, c_out, (3, 3, 3), (1, 1), seed=rng, dtype=dtype)
        else:
            self.conv1 = Conv2d(c_in, c_out, 3, s, seed=rng, dtype=dtype)
            self.conv2 = Conv2d(c_out, c_out, 3, 1, seed=rng, dtype=dtype)
        self.bn1 = BatchNorm(c_out, dtype=dtype)
        self.bn2 = BatchNorm(c_out, dtype=dtype)
        self.proj = None
        if c_in != c_out or s != 1 or ts != 1:
            if spec.kind == "resnet3d":
                self.proj = Conv3d(c_in, c_out, (1, 1, 1), (ts, s), pad=(0, 0, 0), seed=rng, dtype=dtype)
            else:
                self.proj = Conv2d(c_in, c_out, 1, s, pad=0, seed=rng, dtype=dtype)
            self.proj_bn = BatchNorm(c_out, dtype=dtype)

    def conv_path(self, x: Tensor) -> Tensor:
        h = te.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(h))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.proj is None:
            return x
        return self.proj_bn(self.proj(x))

    def forward(self, x):
        return te.relu(te.add(self.conv_path(x), self.shortcut(x)))


def _subsample(x: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return x
    return te.getitem(x, (slice(None), slice(None), slice(None), slice(None, None, stride),
                          slice(None, None, stride)))


class TBPath(Module):
    """Bottleneck TB block between an input batch norm and a per-sample output norm.

    The input norm keeps the quadratic map fed with unit-scale features. The
    output norm is per sample, so a scale error at evaluation time (running
    statistics lagging the weights) is not squared again by the next TB block.
    All-zero parameters give an exactly zero path.
    """

    def __init__(self, cfg: TBConfig, rng: np.random.Generator, dtype=np.float64):
        self.bn_in = BatchNorm(cfg.c_in, dtype=dtype)
        self.bottleneck = BottleneckTB(cfg, seed=rng, dtype=dtype)
        self.bn_out = SampleNorm(cfg.c_out, dtype=dtype)

    def forward(self, x):
        return self.bn_out(self.bottleneck(self.bn_in(x)))


class WideTBBlock(ResNetBlock):
    """Plain block plus a TB path reading the block input, joined at the residual sum."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, tb_rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__(BlockSpec("resnet2d", spec.c_in, spec.c_out, spec.stride), rng, dtype)
        self.spec = spec
        self.tb = TBPath(spec.tb, tb_rng, dtype)

    def forward(self, x):
        plain = te.add(self.conv_path(x), self.shortcut(x))
        return te.relu(te.add(plain, self.tb(_subsample(x, self.spec.stride))))


class DeepTBBlock(ResNetBlock):
    """Plain block whose conv output also feeds a TB path; the conv output keeps an identity path."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, tb_rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__(BlockSpec("resnet2d", spec.c_in, spec.c_out, spec.stride), rng, dtype)
        self.spec = spec
        tb = spec.tb
        self.tb = TBPath(TBConfig(spec.c_out, spec.c_out, tb.p, tb.dropfactor_keep,
                                  tb.bottleneck_reduction, tb.temporal_kernel), tb_rng, dtype)

    def forward(self, x):
        c = self.conv_path(x)
        plain = te.add(c, self.shortcut(x))
        return te.relu(te.add(plain, self.tb(c)))


def build_resnet_block(spec: BlockSpec, seed=0, dtype=np.float64) -> ResNetBlock:
    if spec.kind not in ("resnet2d", "resnet3d"):
        raise ConfigurationError(f"build_resnet_block needs a plain block spec, got {spec.kind!r}")
    return ResNetBlock(spec, _rng_of(seed), dtype)


def build_wide_tb_block(spec: BlockSpec, seed=0, dtype=np.float64) -> WideTBBlock:
    if spec.kind != "wide_tb":
        raise ConfigurationError(f"expected a wide_tb spec, got {spec.kind!r}")
    return WideTBBlock(spec, _rng_of(seed), _tb_rng_of(seed), dtype)


def build_deep_tb_block(spec: BlockSpec, seed=0, dtype=np.float64) -> DeepTBBlock:
    if spec.kind != "deep_tb":
        raise ConfigurationError(f"expected a deep_tb spec, got {spec.kind!r}")
    return DeepTBBlock(spec, _rng_of(seed), _tb_rng_of(seed), dtype)


def _rng_of(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else _seeded(seed, 0)


def _tb_rng_of(seed) -> np.random.Generator:
    return _seeded(seed, 1) if isinstance(seed, (int, np.integer)) else np.random.default_rng(seed.integers(2**63))


class Network(Module):
    def __init__(self, cfg: NetworkConfig, dtype=np.float64):
        self.cfg = cfg
        widths = cfg.stage_widths
        seed = cfg.seed
        stem_rng = _seeded(seed, 0, 0)
        if cfg.backbone == "c3d":
            self.stem = Conv3d(cfg.in_channels, widths[0], (3, 7, 7), (1, 2), pad=(1, 3, 3),
                               seed=stem_rng, dtype=dtype)
        else:
            self.stem = Conv2d(cfg.in_channels, widths[0], 7, 2, pad=3, seed=stem_rng, dtype=dtype)
        self.stem_bn = BatchNorm(widths[0], dtype=dtype)
        self.stages = []
        for i, stage_specs in enumerate(cfg.block_specs()):
            blocks = []
            for b, spec in enumerate(stage_specs):
                rng = _seeded(seed, 1, i, b)
                tb_rng = _seeded(seed, 2, i, b)
                if spec.kind == "wide_tb":
                    blocks.append(WideTBBlock(spec, rng, tb_rng, dtype))
                elif spec.kind == "deep_tb":
                    blocks.append(DeepTBBlock(spec, rng, tb_rng, dtype))
                else:
                    blocks.append(ResNetBlock(spec, rng, dtype))
            self.stages.append(_Stage(blocks))
        self.fc = Linear(widths[-1], cfg.num_classes, seed=_seeded(seed, 3), dtype=dtype)

    def features(self, x: Tensor) -> list[Tensor]:
        """Feature maps after the stem and after each stage."""
        h = te.relu(self.stem_bn(self.stem(x)))
        outs = [h]
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return outs

    def forward(self, x):
        h = self.features(x)[-1]
        pooled = te.mean(h, (1, 3, 4))
        return self.fc(pooled)

    def tb_blocks(self) -> list[BottleneckTB]:
        return [m for _, m in self.modules() if isinstance(m, BottleneckTB)]

    def check_input(self, clips) -> None:
        T, H, W = self.cfg.clip_shape
        shape = clips.shape
        if len(shape) != 5 or shape[1] != T or shape[2] != self.cfg.in_channels or shape[3:] != (H, W):
            raise DimensionError(f"clip batch {tuple(shape)} does not match configured "
                                 f"(N, {T}, {self.cfg.in_channels}, {H}, {W})")


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def assemble_network(cfg: NetworkConfig, dtype=np.float64) -> Network:
    cfg.block_specs()
    return Network(cfg, dtype)


def forward_classify(model: Network, clips) -> np.ndarray:
    """Eval-mode logits for a (N, T, C, H, W) batch; restores the previous mode."""
    model.check_input(clips)
    was_training = model.training
    model.eval()
    try:
        with te.no_grad():
            x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=model.fc.weight.dtype))
            return model(x).data
    finally:
        model.train(was_training)


def zero_tb_paths(model: Module) -> None:
    """Zero every parameter on TB paths (bottleneck weights and the path's norms)."""
    for path in [m for _, m in model.modules() if isinstance(m, (TBPath, BottleneckTB))]:
        for p in path.parameters():
            p.data[...] = 0.0


def leaf_layers(model: Module) -> list[tuple[str, Layer]]:
    return [(name, m) for name, m in model.modules() if isinstance(m, Layer)]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: Module, path, meta: dict | None = None) -> None:
    """Write magic, a u64 manifest length, a JSON manifest, then raw little-endian buffers."""
    entries, blobs, offset = [], [], 0
    for name, arr in model.state_dict().items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (n,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + n])
    base = 16 + n
    state = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise ValueError(f"{path}: truncated buffer for {e['name']} at byte {start}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        state[e["name"]] = arr.reshape(e["shape"]).copy()
    return state, manifest["meta"]


def load_checkpoint(path, dtype=None) -> tuple[Network, dict]:
    state, meta = read_checkpoint(path)
    if "network" not in meta:
        raise ValueError(f"{path}: checkpoint carries no network config")
    cfg = NetworkConfig.from_dict(meta["network"])
    dtype = dtype or np.dtype(state["fc.weight"].dtype)
    model = Network(cfg, dtype)
    model.load_state_dict(state)
    return model, meta
