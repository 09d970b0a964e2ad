"""Synthetic order-sensitive videos and the clip pipeline.

Classes come in pairs whose members are exact time reversals of each other:
converging/diverging blobs, A-leads-B/B-leads-A, clockwise/counter-clockwise.
A single frame (or any unordered set of frames) therefore carries no
information about which member of a pair produced it; only frame-to-frame
transitions do. Pairs differ in blob colours, so the pair itself is visible
per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TBNVID1\0"
HEADER_BYTES = 12
RECORD_HEADER_BYTES = 20

MOTIFS = ("converge", "lead", "orbit")
CLASS_NAMES = ("converging", "diverging", "a_leads_b", "b_leads_a", "clockwise", "counterclockwise")
# blob colours (RGB) per motif; each pair has its own palette
PALETTES = {
    "converge": ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
    "lead": ((1.0, 0.15, 0.15), (0.15, 1.0, 0.15)),
    "orbit": ((0.2, 0.3, 1.0), (1.0, 0.9, 0.1)),
}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MotionProgram:
    class_id: int
    noise: float = 0.05
    frames: int = 64
    height: int = 32
    width: int = 32

    @property
    def motif(self) -> str:
        return MOTIFS[self.class_id // 2]

    @property
    def order(self) -> int:
        """+1 for the forward-time member of a pair, -1 for its reversal."""
        return 1 if self.class_id % 2 == 0 else -1

    @property
    def pair(self) -> int:
        return self.class_id // 2


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (T_raw, C, H, W) float32 in [0, 1]
    label: int
    seed: int | tuple | None = None


@dataclass
class VideoDataset:
    videos: np.ndarray  # (N, T_raw, C, H, W)
    labels: np.ndarray  # (N,)
    class_names: tuple = field(default=CLASS_NAMES[:4])

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _gaussian(cy, cx, sigma, H, W):
    """(T, H, W) blobs centred at real-valued (cy, cx) per frame."""
    ys = np.arange(H, dtype=np.float64)[None, :, None]
    xs = np.arange(W, dtype=np.float64)[None, None, :]
    d2 = (ys - cy[:, None, None]) ** 2 + (xs - cx[:, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _trajectories(motif: str, rng: np.random.Generator, T: int, H: int, W: int):
    t = np.arange(T, dtype=np.float64)
    tc = t - (T - 1) / 2.0
    scale = min(H, W) / 32.0
    theta = rng.uniform(0, 2 * np.pi)
    u = np.array([np.sin(theta), np.cos(theta)])
    if motif == "converge":
        centre = np.array([H, W]) / 2.0 + rng.uniform(-3, 3, 2) * scale
        d_far = rng.uniform(14, 20) * scale
        d_near = rng.uniform(2, 5) * scale
        sep = d_far + (d_near - d_far) * t / (T - 1)
        a = centre[:, None] + 0.5 * sep[None, :] * u[:, None]
        b = centre[:, None] - 0.5 * sep[None, :] * u[:, None]
    elif motif == "lead":
        speed = rng.uniform(0.25, 0.35) * scale
        lag = rng.uniform(12, 20)
        centre = np.array([H, W]) / 2.0 + rng.uniform(-2, 2, 2) * scale
        a = centre[:, None] + (tc * speed)[None, :] * u[:, None] + 0.5 * lag * speed * u[:, None]
        b = a - lag * speed * u[:, None]
    elif motif == "orbit":
        centre = np.array([H, W]) / 2.0 + rng.uniform(-3, 3, 2) * scale
        radius = rng.uniform(6, 10) * scale
        omega = rng.uniform(0.04, 0.07)
        ang = theta + omega * t
        off = radius * np.stack([np.sin(ang), np.cos(ang)])
        a = centre[:, None] + off
        b = centre[:, None] - 0.6 * off
    else:
        raise ValueError(f"unknown motif {motif!r}")
    return a, b


def generate_video(program: MotionProgram, seed) -> SyntheticVideo:
    """Render two moving Gaussian blobs; odd classes are the time reversal of even ones.

    The same ``seed`` yields the same forward-time rendering for both members
    of a pair, so their frame sets coincide exactly.
    """
    rng = np.random.default_rng(seed)
    T, H, W = program.frames, program.height, program.width
    a, b = _trajectories(program.motif, rng, T, H, W)
    scale = min(H, W) / 32.0
    sigma = rng.uniform(1.3, 2.0) * scale
    gains = rng.uniform(0.6, 1.0, 2)
    background = rng.uniform(0.0, 0.2)
    blob_a = gains[0] * _gaussian(a[0], a[1], sigma, H, W)
    blob_b = gains[1] * _gaussian(b[0], b[1], sigma, H, W)
    col_a, col_b = (np.asarray(c)[None, :, None, None] for c in PALETTES[program.motif])
    frames = background + col_a * blob_a[:, None] + col_b * blob_b[:, None]
    frames = frames + program.noise * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    if program.order < 0:
        frames = np.ascontiguousarray(frames[::-1])
    return SyntheticVideo(frames, program.class_id, seed)


def class_labels(count: int, num_classes: int, seed: int) -> np.ndarray:
    """Balanced labels in a seed-determined order."""
    labels = np.arange(count) % num_classes
    return np.random.default_rng([seed, 99]).permutation(labels)


def generate_dataset(count: int, num_classes: int = 4, seed: int = 0, frames: int = 64,
                     height: int = 32, width: int = 32, noise: float = 0.05) -> VideoDataset:
    """Video ``i`` draws its geometry from ``(seed, i)``."""
    if num_classes < 2 or num_classes % 2 or num_classes > len(CLASS_NAMES):
        raise ValueError(f"class count must be an even number in [2, {len(CLASS_NAMES)}], got {num_classes}")
    labels = class_labels(count, num_classes, seed)
    videos = np.empty((count, frames, 3, height, width), dtype=np.float32)
    for i, label in enumerate(labels):
        program = MotionProgram(int(label), noise, frames, height, width)
        videos[i] = generate_video(program, (seed, i)).frames
    return VideoDataset(videos, labels.astype(np.int64), CLASS_NAMES[:num_classes])


# -- clip pipeline --------------------------------------------------------------

def clip_indices(start: int, T: int = 8, stride: int = 4) -> np.ndarray:
    return start + stride * np.arange(T)


def max_start(num_frames: int, T: int = 8, stride: int = 4) -> int:
    span = (T - 1) * stride + 1
    if num_frames < span:
        raise ValueError(f"video has {num_frames} frames, needs at least {span} for T={T}, stride={stride}")
    return num_frames - span


def sample_clip(video: np.ndarray, T: int = 8, stride: int = 4, seed=None, start: int | None = None):
    """Gather ``T`` frames ``stride`` apart from a uniformly random (or given) start."""
    frames = video.frames if isinstance(video, SyntheticVideo) else video
    last = max_start(frames.shape[0], T, stride)
    if start is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        start = int(rng.integers(0, last + 1))
    if not 0 <= start <= last:
        raise ValueError(f"start {start} outside [0, {last}]")
    idx = clip_indices(start, T, stride)
    return frames[idx], idx


def crop_offsets(H: int, W: int, crop: int, mode: str, rng: np.random.Generator | None = None):
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} larger than frame {H}x{W}")
    if mode == "train":
        return int(rng.integers(0, H - crop + 1)), int(rng.integers(0, W - crop + 1))
    return (H - crop) // 2, (W - crop) // 2


def flip(clip: np.ndarray) -> np.ndarray:
    return clip[..., ::-1]


def augment(clip: np.ndarray, mode: str = "train", seed=None, crop: int = 28) -> np.ndarray:
    """Train: random crop + horizontal flip (p=0.5), shared by all frames. Eval: centre crop."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    H, W = clip.shape[-2:]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y, x = crop_offsets(H, W, crop, mode, rng)
    out = clip[..., y:y + crop, x:x + crop]
    if mode == "train" and rng.random() < 0.5:
        out = flip(out)
    return np.ascontiguousarray(out)


# -- file format ----------------------------------------------------------------

def write_dataset(path, dataset: VideoDataset) -> None:
    """``TBNVID1\\0``, u32 count, then per video: u32 label, u32 T, C, H, W, float32 frames."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(dataset)))
        for label, video in zip(dataset.labels, dataset.videos):
            f.write(struct.pack("<5I", int(label), *video.shape))
            f.write(np.ascontiguousarray(video, dtype="<f4").tobytes())


def expected_file_size(shapes) -> int:
    return HEADER_BYTES + sum(RECORD_HEADER_BYTES + 4 * int(np.prod(s)) for s in shapes)


def read_dataset(path, class_names=None) -> VideoDataset:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
        if len(head) < HEADER_BYTES:
            raise FormatError("truncated header", len(head))
        if head[:8] != MAGIC:
            raise FormatError(f"bad magic {head[:8]!r}", 0)
        (count,) = struct.unpack_from("<I", head, 8)
        if count == 0:
            return VideoDataset(np.zeros((0, 0, 0, 0, 0), np.float32), np.zeros(0, np.int64),
                                tuple(class_names or ()))
        rec = f.read(RECORD_HEADER_BYTES)
        if len(rec) < RECORD_HEADER_BYTES:
            raise FormatError("truncated record header", HEADER_BYTES + len(rec))
    _, *shape = struct.unpack("<5I", rec)
    record_bytes = RECORD_HEADER_BYTES + 4 * int(np.prod(shape))
    expected = HEADER_BYTES + count * record_bytes
    if size < expected:
        bad = HEADER_BYTES + (size - HEADER_BYTES) // record_bytes * record_bytes
        raise FormatError(f"file holds {size} bytes, {count} records need {expected}", bad)
    if size > expected:
        raise FormatError(f"{size - expected} trailing bytes or inconsistent record shapes", expected)
    rec_dtype = np.dtype([("label", "<u4"), ("shape", "<u4", (4,)), ("frames", "<f4", tuple(shape))])
    records = np.memmap(path, dtype=rec_dtype, mode="r", offset=HEADER_BYTES, shape=(count,))
    bad = np.nonzero((records["shape"] != np.asarray(shape, dtype=np.uint32)).any(axis=1))[0]
    if bad.size:
        raise FormatError("record shape differs from the first record", HEADER_BYTES + int(bad[0]) * record_bytes)
    labels = records["label"].astype(np.int64)
    videos = np.array(records["frames"], dtype=np.float32)
    del records
    num_classes = int(labels.max()) + 1
    num_classes += num_classes % 2
    names = tuple(class_names) if class_names else CLASS_NAMES[:num_classes]
    return VideoDataset(videos, labels, names)
