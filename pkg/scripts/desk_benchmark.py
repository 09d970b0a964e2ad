"""Desk-scale order-sensitivity benchmark and TB block-count ablation.

Runs the frame-marginal baseline, C2D, WTBN and DTBN over several seeds plus
WTBN with 2 and 4 TB blocks, writing results (with wall time) to a JSON file
after every run so an interrupted benchmark resumes where it stopped.

    python scripts/desk_benchmark.py --out results/desk.json
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from tbnet.data import generate_dataset
from tbnet.network import NetworkConfig, assemble_network, forward_classify, zero_tb_paths
from tbnet.trainer import EvalProtocol, TrainConfig, evaluate, frame_marginal_baseline, train

PLACEMENTS = {2: ("res4",), 4: ("res3", "res4"), 6: ("res2", "res3", "res4")}


def network_config(arch: str, seed: int, args, tb_stages=("res2", "res3", "res4")) -> NetworkConfig:
    return NetworkConfig(arch=arch, width_factor=args.width, num_classes=args.classes,
                         clip_shape=(8, args.crop, args.crop), tb_stages=tb_stages, seed=seed)


def zero_path_check(args) -> dict:
    """WTBN with zeroed TB paths against C2D built from the same seed."""
    c2d = assemble_network(network_config("c2d", 0, args), np.float64)
    wtbn = assemble_network(network_config("wtbn", 0, args), np.float64)
    zero_tb_paths(wtbn)
    x = np.random.default_rng(5).standard_normal((4, 8, 3, args.crop, args.crop))
    diff = float(np.max(np.abs(forward_classify(c2d, x) - forward_classify(wtbn, x))))
    return {"max_abs_diff": diff, "exact": diff == 0.0}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk.json")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=500)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--width", type=float, default=0.125)
    ap.add_argument("--crop", type=int, default=28)
    ap.add_argument("--archs", nargs="+", default=["c2d", "wtbn", "dtbn"])
    ap.add_argument("--ablation", type=int, nargs="*", default=[2, 4])
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    results = json.loads(out.read_text()) if out.exists() else {}
    results.setdefault("runs", {})
    results["settings"] = vars(args)
    spent = results.get("wall_seconds", 0.0)

    def save():
        out.write_text(json.dumps(results, indent=2, sort_keys=True))

    t0 = time.perf_counter()
    train_set = generate_dataset(args.train, args.classes, seed=args.data_seed)
    test_set = generate_dataset(args.test, args.classes, seed=args.data_seed + 1)
    tcfg = TrainConfig(epochs=args.epochs, crop=args.crop)

    if "baseline" not in results["runs"]:
        results["runs"]["baseline"] = frame_marginal_baseline(train_set, test_set, tcfg)
        logging.info("baseline %s", results["runs"]["baseline"])
    if "zero_tb" not in results:
        results["zero_tb"] = zero_path_check(args)

    # seed-major so a partial run already covers every configuration
    jobs = [(arch, n, s) for s in args.seeds
            for arch, n in [(a, 6) for a in args.archs] + [("wtbn", n) for n in args.ablation]]
    for arch, blocks, seed in jobs:
        key = f"{arch}_tb{blocks}_seed{seed}" if arch != "c2d" and arch != "c3d" else f"{arch}_seed{seed}"
        if key in results["runs"]:
            continue
        start = time.perf_counter()
        model = assemble_network(network_config(arch, seed, args, PLACEMENTS[blocks]), np.float32)
        log = train(model, train_set, TrainConfig(epochs=args.epochs, crop=args.crop, seed=seed), test_set)
        metrics = evaluate(model, test_set, EvalProtocol(), TrainConfig(crop=args.crop))
        metrics.update(seconds=time.perf_counter() - start, log=log, tb_blocks=model.cfg.num_tb_blocks())
        results["runs"][key] = metrics
        results["wall_seconds"] = spent + time.perf_counter() - t0
        logging.info("%s top1 %.3f pair %.3f (%.0fs)", key, metrics["top1"], metrics["pair_acc"],
                     metrics["seconds"])
        save()
    results["wall_seconds"] = spent + time.perf_counter() - t0
    results["summary"] = summarize(results, args)
    save()
    print(json.dumps(results["summary"], indent=2))
    return 0


def summarize(results: dict, args) -> dict:
    runs = results["runs"]

    def mean(prefix, field):
        vals = [runs[k][field] for k in runs if k.startswith(prefix)]
        return float(np.mean(vals)) if vals else None

    summary = {"baseline_pair_acc": runs["baseline"]["pair_acc"], "wall_seconds": results["wall_seconds"],
               "zero_tb_exact": results["zero_tb"]["exact"]}
    for arch in args.archs:
        prefix = f"{arch}_seed" if arch in ("c2d", "c3d") else f"{arch}_tb6_"
        summary[f"{arch}_top1"] = mean(prefix, "top1")
        summary[f"{arch}_pair_acc"] = mean(prefix, "pair_acc")
    summary["ablation_top1"] = {n: mean(f"wtbn_tb{n}_", "top1") for n in sorted(set(args.ablation) | {6})}
    return summary


if __name__ == "__main__":
    raise SystemExit(main())
