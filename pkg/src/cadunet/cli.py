"""Command line entry point: ``cadunet <command> ...``.

Exit codes: 0 success, 1 invalid input or a failed check, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("cadunet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _override(config: dict, **flags) -> dict:
    config = dict(config)
    config.update({k: v for k, v in flags.items() if v is not None})
    return config


# ----------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data import SyntheticSpec, save_dataset, synth_generate

    conf = _override(_read_json(args.config), size=args.size, seed=args.seed)
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(conf) - known
    if unknown:
        raise ValueError(f"unknown synthetic options: {sorted(unknown)}")
    if "size" in conf and "lesion_radius" not in conf:
        # default radii are in pixels for 128x128 slices
        lo, hi = SyntheticSpec.lesion_radius
        conf["lesion_radius"] = (lo * conf["size"] / 128, hi * conf["size"] / 128)
    for key in ("lung_axes", "lesion_count", "lesion_radius"):
        if key in conf:
            conf[key] = tuple(conf[key])
    spec = SyntheticSpec(**conf)
    samples = synth_generate(spec, args.n)
    path = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} slices to {path}")
    return EXIT_OK


def _load(manifest: str, strict: bool = True):
    from .data import load_dataset

    samples, errors = load_dataset(manifest)
    if errors and strict:
        raise ValueError(f"{manifest}: {len(errors)} invalid entries, first: {errors[0]}")
    if not samples:
        raise ValueError(f"{manifest}: no usable slices")
    return samples


def cmd_train(args) -> int:
    from .data import undersample_noninfected
    from .train import TrainConfig, train

    conf = _read_json(args.config)
    conf = _override(conf, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     max_steps=args.max_steps, seed=args.seed, threshold=args.threshold)
    if args.no_augment:
        conf["augment"] = False
    model_conf = dict(conf.get("model", {}))
    model_conf = _override(model_conf, base_channels=args.base_channels, num_classes=args.num_classes)
    conf["model"] = model_conf
    config = TrainConfig.from_dict(conf)
    samples = _load(args.train)
    if args.undersample is not None:
        before = len(samples)
        samples = undersample_noninfected(samples, args.undersample, config.seed)
        log.info("undersampled non-infected slices: %d -> %d", before, len(samples))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "undersampling.json").write_text(json.dumps({
            "applied_to": "training manifest only; validation manifest untouched",
            "target_fraction": args.undersample,
            "slices_before": before,
            "slices_after": len(samples),
            "noninfected_after": sum(not s.infected for s in samples),
        }, indent=2))
    val = _load(args.val) if args.val else None
    size = samples[0].image.shape
    if any(s.image.shape != size for s in samples + (val or [])):
        raise ValueError("all slices must share one size")

    def progress(step, model, record):
        if step % args.log_every == 0:
            row = record.steps[-1]
            log.info("step %d epoch %d lr %.2e loss %.4f", step, row["epoch"], row["lr"], row["loss_total"])
        return False

    result = train(config, samples, val, args.out, callback=progress)
    print(f"trained {len(result.record.steps)} steps; checkpoints in {args.out}")
    if result.best_f1 is not None:
        print(f"best validation F1 {result.best_f1:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    samples = _load(args.data)
    result = evaluate(args.checkpoint, samples, args.out, threshold=args.threshold, run=args.run,
                      dataset=args.dataset, overlays=not args.no_overlays, num_classes=args.num_classes)
    spreads = result.mean_std()
    for k, cls in enumerate(result.classes):
        pooled = result.pooled[k]
        print(f"{cls}: " + "  ".join(f"{m} {getattr(pooled, m):.2f} ({spreads[cls][m]})"
                                     for m in ("f1", "iou", "recall", "spec", "prec")))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import BLOCKS, OPS, run_case

    names = [*OPS, *BLOCKS] if args.all else args.op
    if not names:
        raise ValueError("name at least one --op or pass --all")
    unknown = [n for n in names if n not in OPS and n not in BLOCKS]
    if unknown:
        raise ValueError(f"unknown ops {unknown}; known: {sorted([*OPS, *BLOCKS])}")
    ok = True
    print(f"{'op':<24} {'max_rel_err':>12} {'tol':>8} {'skipped':>8}  status")
    for name in names:
        reports = [run_case(name, seed) for seed in range(args.seed, args.seed + args.seeds)]
        worst = max(r.max_rel_err for r in reports)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(f"{name:<24} {worst:12.3e} {reports[0].tol:8.0e} {sum(r.skipped for r in reports):8d}  "
              f"{'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def _read_mask(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


def cmd_metrics(args) -> int:
    from .metrics import METRIC_NAMES, confusion, metrics

    pred, gt = _read_mask(args.pred), _read_mask(args.gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    scores = metrics(confusion(pred > 0, gt > 0))
    print("  ".join(f"{m} {getattr(scores, m):.2f}" for m in METRIC_NAMES))
    if scores.vacuous:
        print(f"vacuous (zero denominator, reported as 100): {', '.join(scores.vacuous)}")
    return EXIT_OK


def _score_column(path: str, metric: str, cls: str | None) -> list[float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or metric not in rows[0]:
        raise ValueError(f"{path}: no '{metric}' column")
    if cls is not None and "class" in rows[0]:
        rows = [r for r in rows if r["class"] == cls]
    values = [float(r[metric]) for r in rows]
    if not values:
        raise ValueError(f"{path}: no scores for class {cls!r}")
    return values


def cmd_compare(args) -> int:
    from .metrics import format_mean_std, wilcoxon_rank_sum

    a = _score_column(args.a, args.metric, args.cls)
    b = _score_column(args.b, args.metric, args.cls)
    p = wilcoxon_rank_sum(a, b, args.alternative)
    print(f"a: {format_mean_std(a)} (n={len(a)})  b: {format_mean_std(b)} (n={len(b)})")
    print(f"exact rank-sum {args.alternative} p = {p:.5f}")
    return EXIT_OK


def cmd_severity(args) -> int:
    from collections import Counter

    from .metrics import severity

    samples = _load(args.data)
    missing = [s.source for s in samples if s.lung_mask is None]
    if missing:
        raise ValueError(f"severity needs lung masks; missing for {len(missing)} slices, e.g. {missing[0]}")
    grades = [severity(s.infection_mask, s.lung_mask, args.spacing).value for s in samples]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "severity"])
            w.writerows(zip((s.source for s in samples), grades))
    for grade, count in sorted(Counter(grades).items()):
        print(f"{grade:<22} {count}")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    parser = _Parser(prog="cadunet", description="CAD-Unet segmentation toolkit", parents=[common])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=int)
    p.add_argument("--config", help="JSON with synthetic generator options")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train", required=True, help="training manifest.json")
    p.add_argument("--val", help="validation manifest.json (enables best-checkpoint selection)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--num-classes", type=int, choices=(1, 2))
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--undersample", type=float, metavar="FRACTION",
                   help="drop non-infected training slices down to this fraction")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--run", default="run")
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--num-classes", type=int, choices=(1, 2))
    p.add_argument("--no-overlays", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--all", action="store_true")
    p.add_argument("--op", action="append", default=[])
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", parents=[common], help="score one predicted mask against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", parents=[common], help="exact rank-sum test between two score lists")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", default="f1")
    p.add_argument("--class", dest="cls")
    p.add_argument("--alternative", choices=("two-sided", "less", "greater"), default="two-sided")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("severity", parents=[common], help="grade every slice of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--spacing", type=float, help="pixel spacing in mm")
    p.add_argument("--out", help="per-slice CSV")
    p.set_defaults(func=cmd_severity)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    if not hasattr(args, "seed"):
        args.seed = 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
