"""``tbnet <command> [flags]``: gen, audit, gradcheck, train, eval.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import FormatError, generate_dataset, read_dataset, write_dataset
from .network import ConfigurationError, NetworkConfig, assemble_network, load_checkpoint
from .tensor import ContractError, DimensionError
from .trainer import EvalProtocol, TrainConfig, TrainingError, evaluate, train

TRAIN_FILE, TEST_FILE = "train.tbv", "test.tbv"


class UsageError(Exception):
    pass


@dataclass
class GenConfig:
    classes: int = 4
    train: int = 2000
    test: int = 500
    frames: int = 64
    height: int = 32
    width: int = 32
    noise: float = 0.05
    seed: int = 0


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(width_factor=0.125))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    gen: GenConfig = field(default_factory=GenConfig)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: {e}")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}; expected {sorted(sections)}")
        cfg = cls()
        for name, values in raw.items():
            current = getattr(cfg, name)
            allowed = {f.name for f in fields(current)}
            bad = set(values) - allowed
            if bad:
                raise UsageError(f"unknown keys in [{name}]: {sorted(bad)}")
            merged = {**asdict(current), **values}
            try:
                setattr(cfg, name, type(current)(**merged))
            except (TypeError, ConfigurationError, ContractError) as e:
                raise UsageError(f"[{name}]: {e}")
        return cfg


def _stages(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tbnet", description="Temporal bilinear networks on synthetic video.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write train/test synthetic dataset files")
    g.add_argument("--out", required=True, help="existing output directory")
    g.add_argument("--classes", type=int)
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")

    a = sub.add_parser("audit", help="parameter / FLOP / RFS report")
    a.add_argument("--table1", action="store_true", help="print the closed-form per-block rows")
    a.add_argument("--C", type=int, default=64)
    a.add_argument("--p", type=int, default=20)
    a.add_argument("--arch", choices=["c2d", "c3d", "wtbn", "dtbn"])
    a.add_argument("--tb-stages", type=_stages)
    a.add_argument("--width-factor", type=float)
    a.add_argument("--classes", type=int)
    a.add_argument("--clip", type=int, nargs=3, metavar=("T", "H", "W"))
    a.add_argument("--json", help="write the structured report here")
    a.add_argument("--config")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--ops", type=lambda s: [o for o in s.split(",") if o])
    c.add_argument("--seeds", type=int, default=20)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="directory holding train.tbv (and test.tbv)")
    t.add_argument("--out", required=True, help="directory for log.jsonl and model.ckpt")
    t.add_argument("--arch", choices=["c2d", "c3d", "wtbn", "dtbn"])
    t.add_argument("--tb-stages", type=_stages)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--width-factor", type=float)
    t.add_argument("--p", type=int)
    t.add_argument("--keep", type=float, help="DropFactor keep probability")
    t.add_argument("--config")

    e = sub.add_parser("eval", help="multi-clip evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset file or directory holding test.tbv")
    e.add_argument("--clips", type=int)
    e.add_argument("--crops", type=int)
    e.add_argument("--config")
    return ap


def _load_config(args) -> RunConfig:
    return RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()


def _override(obj, **values):
    changes = {k: v for k, v in values.items() if v is not None}
    if not changes:
        return obj
    try:
        return type(obj)(**{**asdict(obj), **changes})
    except (ConfigurationError, ContractError) as e:
        raise UsageError(str(e))


def cmd_gen(args) -> int:
    cfg = _override(_load_config(args).gen, classes=args.classes, train=args.train, test=args.test,
                    frames=args.frames, noise=args.noise, seed=args.seed)
    out = Path(args.out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    kw = dict(num_classes=cfg.classes, frames=cfg.frames, height=cfg.height, width=cfg.width, noise=cfg.noise)
    try:
        train_set = generate_dataset(cfg.train, seed=cfg.seed, **kw)
        test_set = generate_dataset(cfg.test, seed=cfg.seed + 1, **kw)
    except ValueError as e:
        raise UsageError(str(e))
    write_dataset(out / TRAIN_FILE, train_set)
    write_dataset(out / TEST_FILE, test_set)
    print(f"wrote {len(train_set)} train and {len(test_set)} test videos to {out}")
    for i, name in enumerate(train_set.class_names):
        print(f"  class {i}: {name} (train {int(np.sum(train_set.labels == i))}, "
              f"test {int(np.sum(test_set.labels == i))})")
    return 0


def cmd_audit(args) -> int:
    from .complexity import audit_report, render_table1, table1_rows

    if args.table1:
        print(render_table1(table1_rows(args.C, args.p)))
        return 0
    run = _load_config(args)
    net = _override(run.network, arch=args.arch, tb_stages=args.tb_stages, width_factor=args.width_factor,
                    num_classes=args.classes, clip_shape=tuple(args.clip) if args.clip else None)
    try:
        model = assemble_network(net)
    except (ConfigurationError, ContractError) as e:
        raise UsageError(str(e))
    T, H, W = net.clip_shape
    text, _ = audit_report(model, (1, T, net.in_channels, H, W), args.json)
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run, worst_by_op

    try:
        results = run(args.ops, args.seeds)
    except KeyError as e:
        raise UsageError(str(e.args[0]))
    failed = [r for r in results if not r.passed]
    for op, r in worst_by_op(results).items():
        print(f"{op:24s} worst rel err {r.rel_error:.2e} (seed {r.seed}, tol {r.tolerance:g}) "
              f"{'ok' if r.passed else 'FAIL'}")
    for r in failed:
        print(f"FAIL {r.op} seed {r.seed}: rel err {r.rel_error:.3e} >= {r.tolerance:g}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _dataset_file(path: Path, default: str) -> Path:
    return path / default if path.is_dir() else path


def _read(path: Path):
    if not path.exists():
        raise UsageError(f"dataset file {path} not found")
    try:
        return read_dataset(path)
    except FormatError as e:
        raise UsageError(f"{path}: {e}")


def cmd_train(args) -> int:
    run = _load_config(args)
    data = Path(args.data)
    train_set = _read(_dataset_file(data, TRAIN_FILE))
    test_path = data / TEST_FILE if data.is_dir() else None
    test_set = _read(test_path) if test_path is not None and test_path.exists() else None
    tcfg = _override(run.train, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr)
    net = _override(run.network, arch=args.arch, tb_stages=args.tb_stages, seed=args.seed,
                    width_factor=args.width_factor, p=args.p, dropfactor_keep=args.keep,
                    num_classes=train_set.num_classes, in_channels=train_set.videos.shape[2],
                    clip_shape=(tcfg.clip_len, tcfg.crop, tcfg.crop))
    frames, H, W = train_set.videos.shape[1], *train_set.videos.shape[3:]
    if tcfg.crop > min(H, W) or (tcfg.clip_len - 1) * tcfg.frame_stride + 1 > frames:
        raise UsageError(f"videos of {frames} frames at {H}x{W} cannot supply {tcfg.clip_len}-frame clips "
                         f"(stride {tcfg.frame_stride}) with {tcfg.crop}px crops")
    try:
        model = assemble_network(net, np.float32)
    except (ConfigurationError, ContractError) as e:
        raise UsageError(str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"training {net.arch} ({net.num_tb_blocks()} TB blocks) on {len(train_set)} videos, seed {tcfg.seed}")
    records = train(model, train_set, tcfg, test_set, out / "log.jsonl", out / "model.ckpt",
                    meta={"class_names": list(train_set.class_names)})
    last = records[-1]
    print(f"final epoch {last['epoch']}: loss {last['train_loss']:.4f} train_acc {last['train_acc']:.3f} "
          f"eval_acc {last['eval_acc']}")
    return 0


def cmd_eval(args) -> int:
    run = _load_config(args)
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    except (ValueError, KeyError) as e:
        raise UsageError(f"checkpoint {args.checkpoint}: {e}")
    dataset = _read(_dataset_file(Path(args.data), TEST_FILE))
    tcfg = TrainConfig(**{**asdict(TrainConfig()), **meta.get("train", {}),
                          "milestones": tuple(meta.get("train", {}).get("milestones", TrainConfig().milestones))})
    cfg = model.cfg
    if dataset.num_classes != cfg.num_classes:
        raise UsageError(f"dataset has {dataset.num_classes} classes, checkpoint expects {cfg.num_classes}")
    frames, C, H, W = dataset.videos.shape[1:]
    if C != cfg.in_channels or min(H, W) < tcfg.crop or frames < (tcfg.clip_len - 1) * tcfg.frame_stride + 1:
        raise UsageError(f"dataset videos {(frames, C, H, W)} do not fit checkpoint input "
                         f"{cfg.in_channels} channels, {tcfg.clip_len} frames, {tcfg.crop}px crop")
    proto = _override(run.eval, clips_per_video=args.clips, crops_per_clip=args.crops)
    metrics = evaluate(model, dataset, proto, tcfg)
    print(f"protocol: {metrics.pop('protocol')}")
    for k, v in metrics.items():
        print(f"{k}: {v:.4f}" if np.isscalar(v) else f"{k}: {' '.join(f'{x:.4f}' for x in v)}")
    return 0


COMMANDS = {"gen": cmd_gen, "audit": cmd_audit, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tbnet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, DimensionError) as e:
        print(f"tbnet {args.command}: failed: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"tbnet {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
