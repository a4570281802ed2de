"""Command-line entry point: ``xlsor {gen-data,augment,train,eval,bench,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 invalid config or data, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import augment as aug
from . import cca, gradcheck, metrics, segnet
from .data import MaskPair, load_pairs, read_manifest, split_assignment, write_dataset
from .errors import ConfigError, DataError, StateError

log = logging.getLogger("xlsor")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_CHECK = 0, 1, 2, 3

# section -> (required keys, optional keys)
_SCHEMA = {
    "data": ({"H", "W", "n_phantoms", "seed"}, {"test_corruption"}),
    "augment": ({"n_normal", "seed"}, {"per_normal", "block"}),
    "model": ({"seed"}, {"input_size", "base_channels", "encoder_stride", "cca_passes", "upsample"}),
    "train": (
        {"seed"},
        {"initial_lr", "momentum", "weight_decay", "power", "batch_size", "max_iter", "val_every"},
    ),
    "eval": (set(), {"threshold"}),
}
_CORRUPTION_KEYS = {"intensity", "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_config(path, need=()) -> Dict:
    """Read a run config, rejecting unknown keys and missing seeds."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section in need:
        if section not in cfg:
            raise ConfigError(f"config lacks the '{section}' section")
    for section, body in cfg.items():
        required, optional = _SCHEMA[section]
        if not isinstance(body, dict):
            raise ConfigError(f"section '{section}' must be an object")
        bad = set(body) - required - optional
        if bad:
            raise ConfigError(f"unknown keys in '{section}': {sorted(bad)}")
        missing = required - set(body)
        if missing:
            raise ConfigError(f"missing keys in '{section}': {sorted(missing)}")
    corruption = cfg.get("data", {}).get("test_corruption")
    if corruption is not None and set(corruption) != _CORRUPTION_KEYS:
        raise ConfigError(f"data.test_corruption needs exactly {sorted(_CORRUPTION_KEYS)}")
    return cfg


def _model_config(cfg) -> segnet.SegmentorConfig:
    try:
        return segnet.SegmentorConfig(**cfg["model"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg) -> segnet.TrainConfig:
    try:
        return segnet.TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, need=("data",))
    d = cfg["data"]
    H, W, n, seed = int(d["H"]), int(d["W"]), int(d["n_phantoms"]), int(d["seed"])
    if n < 1:
        raise ConfigError("data.n_phantoms must be >= 1")
    splits = split_assignment(n, seed)
    records, images, masks = [], [], []
    corruption = d.get("test_corruption")
    style_rng = np.random.default_rng(int(corruption["seed"])) if corruption else None
    for i in range(n):
        pseed = aug.phantom_seed(seed, 0, i)
        phantom = aug.generate_phantom(H, W, pseed)
        pid = f"p{i:04d}"
        records.append(
            {"id": pid, "split": splits[i], "style": aug.NORMAL, "phantom_seed": pseed, "source_id": pid}
        )
        images.append(phantom.image)
        masks.append(phantom.true_mask)
        if corruption and splits[i] == "test":
            for style_id in aug.STYLES:
                style = aug.AbnormalityStyle(
                    style_id, float(corruption["intensity"]), int(style_rng.integers(2**63))
                )
                records.append(
                    {
                        "id": f"{pid}_{style_id}",
                        "split": "test",
                        "style": style_id,
                        "intensity": style.intensity,
                        "style_seed": style.seed,
                        "phantom_seed": pseed,
                        "source_id": pid,
                    }
                )
                images.append(aug.synthesize_abnormal(phantom, style))
                masks.append(phantom.true_mask)
    header = {"kind": "phantoms", "height": H, "width": W, "seed": seed}
    write_dataset(args.out, records, images, masks, header)
    log.info("wrote %d pairs to %s", len(records), args.out)
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args.config, need=("augment",))
    a = cfg["augment"]
    n_normal, per_normal = int(a["n_normal"]), int(a.get("per_normal", 5))
    block, seed = int(a.get("block", 0)), int(a["seed"])
    manifest = read_manifest(args.data)
    H, W = int(manifest["height"]), int(manifest["width"])
    normals = [r for r in manifest["pairs"] if r.get("style", aug.NORMAL) == aug.NORMAL]
    chosen = normals[block * n_normal:(block + 1) * n_normal]
    if n_normal < 1 or len(chosen) < n_normal:
        raise DataError(
            f"{args.data} has {len(normals)} normal pairs; block {block} of {n_normal} is not available"
        )
    model = segnet.load_checkpoint(args.checkpoint)
    phantoms = [aug.generate_phantom(H, W, int(r["phantom_seed"])) for r in chosen]
    pair_seed = int(np.random.default_rng([seed, block, 2**31]).integers(2**63))
    pairs = aug.augment_phantoms(model, phantoms, [r["id"] for r in chosen], per_normal, pair_seed)

    records, counts = [], {}
    for p in pairs:
        k = counts[p.source_id] = counts.get(p.source_id, -1) + 1
        rec = {"id": f"{p.source_id}_a{k}", "split": "train", "style": p.style_name, "source_id": p.source_id}
        if not isinstance(p.style, str):
            rec.update(intensity=p.style.intensity, style_seed=p.style.seed)
        records.append(rec)
    header = {"kind": "augmented", "height": H, "width": W, "seed": seed, "block": block}
    write_dataset(args.out, records, [p.image for p in pairs], [p.pseudo_mask for p in pairs], header)
    log.info("wrote %d augmented pairs to %s", len(pairs), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, need=("model", "train"))
    seg_cfg, train_cfg = _model_config(cfg), _train_config(cfg)
    if not Path(args.data, "manifest.json").is_file():
        raise DataError(f"no dataset manifest under {args.data}")
    train_set: List[MaskPair] = [] if args.aug_only else load_pairs(args.data, split="train")
    for extra in args.aug or []:
        train_set += load_pairs(extra)
    val_set = load_pairs(args.data, split="val", style=aug.NORMAL)
    if not train_set:
        raise DataError("no training pairs found")
    model, history = segnet.train(train_set, val_set, seg_cfg, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    segnet.save_checkpoint(model, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    log_path.write_text(history.to_csv())
    log.info("best validation checkpoint at iter %s -> %s", history.best_iter, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    threshold = 0.5
    if args.config:
        threshold = float(load_config(args.config).get("eval", {}).get("threshold", 0.5))
    model = segnet.load_checkpoint(args.checkpoint)
    style = None if args.style == "all" else args.style
    pairs = load_pairs(args.data, split=args.split, style=style)
    if not pairs:
        raise DataError(f"no '{args.split}' pairs matching style '{args.style}' in {args.data}")
    prob = model.predict(np.stack([p.image for p in pairs]))
    preds = segnet.binarize(prob[:, 0], threshold)
    report = metrics.evaluate_dataset(list(preds), [p.mask for p in pairs])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    log.info("DICE %.4f over %d images", report.mean("dice"), len(pairs))
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"bad --sizes: {exc}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive integers")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        rows = cca.benchmark(sizes, channels=args.channels, repeats=args.repeats)
    _write_json(args.out, {"channels": args.channels, "repeats": args.repeats, "results": rows})
    for r in rows:
        log.info("size %d: op ratio %.2f, time ratio %.2f", r["size"], r["op_ratio"], r["time_ratio"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_suite(cases=args.cases)
    failed = [r for r in results if not r.passed]
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        tol = gradcheck.MODEL_TOLERANCE if name == "segmentor" else gradcheck.OP_TOLERANCE
        print(f"{'PASS' if err < tol else 'FAIL'} {name:22s} max rel err {err:.3e} (tol {tol:g})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xlsor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a phantom dataset with a 70/10/20 split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("augment", help="build abnormal pairs with propagated pseudo masks")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset supplying the normal source images")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train", help="train a segmentor")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="real dataset (train split; val split for selection)")
    p.add_argument("--aug", action="append", help="augmented dataset directory (repeatable)")
    p.add_argument("--aug-only", action="store_true", help="train on --aug sets only")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log (default: checkpoint path with .csv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config supplying eval.threshold")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument(
        "--style", default="all", choices=("all", aug.NORMAL, "abnormal") + aug.STYLES
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="time criss-cross vs non-local attention")
    p.add_argument("--sizes", default="16,32,64")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--cases", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s"
        )
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
