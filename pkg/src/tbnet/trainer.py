"""Momentum SGD training and multi-clip evaluation on synthetic video sets."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as te
from .data import VideoDataset, augment, crop_offsets, flip, max_start, sample_clip
from .layers import Linear, Module
from .network import Network, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    milestones: tuple = (0.3, 0.6, 125 / 150)
    decay: float = 0.1
    clip_len: int = 8
    frame_stride: int = 4
    crop: int = 28
    seed: int = 0
    eval_every: int = 1

    def milestone_epochs(self) -> list[int]:
        return [int(round(f * self.epochs)) for f in self.milestones]


@dataclass
class EvalProtocol:
    clips_per_video: int = 6
    crops_per_clip: int = 2
    top_k: int = 2
    batch_size: int = 64

    def describe(self) -> str:
        return (f"{self.clips_per_video} uniformly spaced clips x {self.crops_per_clip} crops per video, "
                f"mean softmax score")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base rate times ``decay`` per milestone already passed."""
    passed = sum(epoch >= m for m in cfg.milestone_epochs())
    return cfg.base_lr * cfg.decay ** passed


def is_norm_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


class SGD:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}
        self.steps = 0

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {name} at step {self.steps}")
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sgd_step(p.data, g, self.velocity[name], lr, self.momentum,
                     0.0 if is_norm_param(name) else self.weight_decay)
        self.steps += 1


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float, weight_decay: float) -> None:
    """In-place momentum update of ``param`` and ``velocity``."""
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


def _train_batch(dataset: VideoDataset, indices, epoch: int, cfg: TrainConfig) -> np.ndarray:
    clips = []
    for i in indices:
        rng = np.random.default_rng([cfg.seed, 1, epoch, int(i)])
        clip, _ = sample_clip(dataset.videos[i], cfg.clip_len, cfg.frame_stride, rng)
        clips.append(augment(clip, "train", rng, cfg.crop))
    return np.stack(clips)


def parameter_checksum(model: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def train(model: Network, dataset: VideoDataset, cfg: TrainConfig, eval_set: VideoDataset | None = None,
          log_path=None, checkpoint_path=None, meta: dict | None = None) -> list[dict]:
    """Run ``cfg.epochs`` epochs of clip-sampled SGD; returns one record per epoch.

    Shuffle order, clip starts, crops, flips and DropFactor masks all derive from
    ``cfg.seed`` (and the model seed), so equal seeds give identical runs.
    """
    dtype = model.fc.weight.dtype
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    records = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            model.train()
            order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(len(dataset))
            total_loss, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = Tensor(_train_batch(dataset, idx, epoch, cfg).astype(dtype, copy=False))
                y = dataset.labels[idx]
                logits = model(x)
                loss = te.softmax_cross_entropy(logits, y)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"loss became {value} at epoch {epoch}, step {opt.steps} (lr {lr})")
                model.zero_grad()
                loss.backward()
                opt.step(lr)
                total_loss += value * len(idx)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(idx)
            record = {"epoch": epoch + 1, "lr": lr, "train_loss": round(total_loss / seen, 6),
                      "train_acc": round(correct / seen, 6), "eval_acc": None}
            if eval_set is not None and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0
                                                            or epoch + 1 == cfg.epochs):
                quick = evaluate(model, eval_set, EvalProtocol(1, 1), cfg)
                record["eval_acc"] = round(quick["top1"], 6)
            records.append(record)
            log.info("epoch %d lr %.4g loss %.4f train_acc %.3f eval_acc %s", record["epoch"], lr,
                     record["train_loss"], record["train_acc"], record["eval_acc"])
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, {**(meta or {}), "network": model.cfg.to_dict(),
                                                 "train": asdict(cfg), "epochs_done": cfg.epochs})
    return records


def _crops(clip: np.ndarray, n: int, crop: int) -> list[np.ndarray]:
    H, W = clip.shape[-2:]
    cy, cx = crop_offsets(H, W, crop, "eval")
    corners = [(cy, cx), (0, 0), (0, W - crop), (H - crop, 0), (H - crop, W - crop)]
    views = []
    for y, x in corners:
        view = clip[..., y:y + crop, x:x + crop]
        views.append(view)
        views.append(flip(view))
    return [np.ascontiguousarray(v) for v in views[:n]]


def clip_starts(num_frames: int, n: int, T: int, stride: int) -> list[int]:
    last = max_start(num_frames, T, stride)
    if n == 1:
        return [last // 2]
    return [int(round(s)) for s in np.linspace(0, last, n)]


def video_scores(model: Network, dataset: VideoDataset, proto: EvalProtocol, cfg: TrainConfig,
                 clip_lists: list | None = None) -> np.ndarray:
    """(N, K) softmax scores averaged over each video's clips and crops."""
    dtype = model.fc.weight.dtype
    views, owner = [], []
    for v in range(len(dataset)):
        video = dataset.videos[v]
        starts = clip_lists[v] if clip_lists is not None else clip_starts(
            video.shape[0], proto.clips_per_video, cfg.clip_len, cfg.frame_stride)
        for s in starts:
            clip, _ = sample_clip(video, cfg.clip_len, cfg.frame_stride, start=s)
            for view in _crops(clip, proto.crops_per_clip, cfg.crop):
                views.append(view)
                owner.append(v)
    owner = np.asarray(owner)
    was_training = model.training
    model.eval()
    probs = []
    try:
        with te.no_grad():
            for b in range(0, len(views), proto.batch_size):
                x = Tensor(np.stack(views[b:b + proto.batch_size]).astype(dtype, copy=False))
                probs.append(te.softmax(model(x).data.astype(np.float64)))
    finally:
        model.train(was_training)
    probs = np.concatenate(probs) if probs else np.zeros((0, dataset.num_classes))
    scores = np.zeros((len(dataset), probs.shape[1]))
    np.add.at(scores, owner, probs)
    counts = np.bincount(owner, minlength=len(dataset))[:, None]
    return scores / np.maximum(counts, 1)


def accuracy_metrics(scores: np.ndarray, labels: np.ndarray, top_k: int = 2) -> dict:
    pred = scores.argmax(axis=1)
    k = min(top_k, scores.shape[1])
    topk = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    partner = labels ^ 1
    rows = np.arange(len(labels))
    # two-way decision between a video's class and its time-reversed partner
    order_ok = scores[rows, labels] > scores[rows, partner]
    pairs = labels // 2
    return {
        "top1": float(np.mean(pred == labels)) if len(labels) else 0.0,
        f"top{k}": float(np.mean((topk == labels[:, None]).any(axis=1))) if len(labels) else 0.0,
        "pair_acc": float(np.mean(order_ok)) if len(labels) else 0.0,
        "pair_acc_by_pair": [float(np.mean(order_ok[pairs == q])) for q in range(scores.shape[1] // 2)],
    }


def evaluate(model: Network, dataset: VideoDataset, proto: EvalProtocol | None = None,
             cfg: TrainConfig | None = None) -> dict:
    """Top-1 / top-k / pair accuracy from clip- and crop-averaged softmax scores."""
    proto = proto or EvalProtocol()
    cfg = cfg or TrainConfig()
    scores = video_scores(model, dataset, proto, cfg)
    out = accuracy_metrics(scores, dataset.labels, proto.top_k)
    out["protocol"] = proto.describe()
    return out


# -- frame-marginal baseline -----------------------------------------------------

def frame_features(clips: np.ndarray, pool: int = 4) -> np.ndarray:
    """Order-free clip descriptor: per-frame pooled pixels and their squares, averaged over frames."""
    N, T, C, H, W = clips.shape
    h, w = H // pool, W // pool
    pooled = clips[..., :h * pool, :w * pool].reshape(N, T, C, h, pool, w, pool).mean(axis=(4, 6))
    flat = pooled.reshape(N, T, -1)
    return np.concatenate([flat, flat ** 2], axis=2).mean(axis=1)


@dataclass
class BaselineConfig:
    clips_per_video: int = 4
    iterations: int = 400
    lr: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0


def frame_marginal_baseline(train_set: VideoDataset, test_set: VideoDataset,
                            cfg: TrainConfig | None = None, bcfg: BaselineConfig | None = None) -> dict:
    """Multinomial logistic regression on frame-averaged features."""
    cfg = cfg or TrainConfig()
    bcfg = bcfg or BaselineConfig()

    def clips_of(ds, n, key):
        out, labels = [], []
        for v in range(len(ds)):
            rng = np.random.default_rng([bcfg.seed, key, v])
            for _ in range(n):
                clip, _ = sample_clip(ds.videos[v], cfg.clip_len, cfg.frame_stride, rng)
                out.append(augment(clip, "eval", rng, cfg.crop))
                labels.append(ds.labels[v])
        return frame_features(np.stack(out)), np.asarray(labels)

    Xtr, ytr = clips_of(train_set, bcfg.clips_per_video, 0)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0) + 1e-6
    Xtr = (Xtr - mu) / sd
    K = train_set.num_classes
    clf = Linear(Xtr.shape[1], K, seed=bcfg.seed)
    clf.weight.data[...] = 0.0
    opt = SGD(clf.named_parameters(), momentum=0.9, weight_decay=bcfg.weight_decay)
    x = Tensor(Xtr)
    for _ in range(bcfg.iterations):
        loss = te.softmax_cross_entropy(clf(x), ytr)
        clf.zero_grad()
        loss.backward()
        opt.step(bcfg.lr)
    scores = []
    for v in range(len(test_set)):
        video = test_set.videos[v]
        feats = []
        for s in clip_starts(video.shape[0], 6, cfg.clip_len, cfg.frame_stride):
            clip, _ = sample_clip(video, cfg.clip_len, cfg.frame_stride, start=s)
            feats.append(augment(clip, "eval", None, cfg.crop))
        f = (frame_features(np.stack(feats)) - mu) / sd
        scores.append(te.softmax(clf(Tensor(f)).data).mean(axis=0))
    return accuracy_metrics(np.asarray(scores), test_set.labels)
