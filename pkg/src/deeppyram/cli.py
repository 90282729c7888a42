"""``deeppyram`` command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure (non-finite loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import __version__, checkpoint, suites
from .config import RunConfig, load_config
from .data.io import load_dataset, read_split, save_dataset
from .data.synth import SynthSpec, synth_generate
from .errors import ConfigError, DataError, NumericalError, UsageError
from .metrics import binarize, dice, image_scores
from .tensor import Tensor, no_grad
from .train import TrainLog, ablate, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config: Optional[str]
    output: str
    seed: Optional[int]
    engine_version: str = __version__
    created: str = ""
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        self.created = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _split_or_all(root, split: str):
    try:
        return load_dataset(root, split)
    except DataError:
        if (Path(root) / "split.txt").exists():
            raise
        return load_dataset(root)


def _optional_split(root, split: str):
    try:
        read_split(root, split)
    except DataError:
        return None
    return load_dataset(root, split)


# commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    h, w = args.size
    spec = SynthSpec(height=h, width=w, num_classes=args.classes)
    out = Path(args.out)
    if (out / "split.txt").exists():
        (out / "split.txt").unlink()
    start = 0
    for split, n in (("train", args.count), ("val", args.val), ("test", args.test)):
        if n:
            save_dataset(synth_generate(spec, args.seed, n, start), out, split)
            start += n
    RunManifest("synth", None, str(out), args.seed).write(out)
    _say(f"wrote {start} samples ({args.count} train, {args.val} val, {args.test} test) to {out}")
    return EXIT_OK


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.train = type(cfg.train)(**{**cfg.train.to_dict(), "epochs": args.epochs})
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    train_set = _split_or_all(args.data, "train")
    val_set = _optional_split(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    RunManifest("train", args.config, str(out), cfg.seed).write(out)
    res = train(cfg.model, cfg.train, train_set, val_set, cfg.loss, cfg.augment, progress=_say)
    res.save(out)
    _say(f"best epoch {res.best_epoch + 1}: validation IoU {res.best_iou:.4f}; checkpoint {out / 'best.ckpt'}")
    if args.plots:
        from .plotting import plot_training

        for p in plot_training(res.log, out):
            _say(f"wrote {p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    data = _split_or_all(args.data, args.split)
    report = evaluate(model, data)
    rep = Path(args.report)
    rep.parent.mkdir(parents=True, exist_ok=True)
    rep.write_text(report.to_json() if rep.suffix == ".json" else report.to_text(), encoding="utf-8")
    rep.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    RunManifest("eval", None, str(rep.parent), None).write(rep.parent)
    _say(report.to_text().rstrip())
    if args.dump_masks:
        from .plotting import overlay_figure

        dump = Path(args.dump_masks)
        (dump / "overlays").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(data):
            with no_grad():
                probs = model.predict(Tensor(s.image[None])).data
            pred = binarize(probs)[0].astype(np.uint8)
            Image.fromarray(pred, "L").save(dump / f"{s.ident}.png")
            if model.config.num_classes == 1:
                d = dice(pred == 1, s.mask == 1)
            else:
                d = image_scores(pred, s.mask, model.config.num_classes)[1]
            overlay_figure(s.image, s.mask, pred, d, dump / "overlays" / f"{s.ident}.png", index=i + 1)
        _say(f"wrote {len(data)} predicted masks and overlays to {dump}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    train_set = _split_or_all(args.data, "train")
    test_set = _optional_split(args.data, "test") or train_set
    val_set = _optional_split(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    RunManifest("ablate", args.config, str(out), cfg.seed).write(out)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    groups = tuple(args.groups.split(",")) if args.groups else ("modules", "alternatives", "upsampling")
    table = ablate(cfg.model, cfg.train, train_set, test_set, seeds, val_set, cfg.loss, cfg.augment, groups, _say)
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
    from .plotting import plot_ablation, read_ablation_csv

    plot_ablation(read_ablation_csv(table.to_csv()), out / "ablation.png")
    _say(table.to_text().rstrip())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = [args.seed + i for i in range(args.seeds)]
    try:
        cases = suites.select(args.ops)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    failed = 0
    _say(f"{'operation':<28}{'group':<10}{'max rel err':>12}  result")
    for case in cases:
        worst = max((suites.run_case(case, s) for s in seeds), key=lambda r: r.max_rel_error)
        ok = worst.passed
        failed += not ok
        _say(f"{case.name:<28}{case.group:<10}{worst.max_rel_error:>12.3e}  {'PASS' if ok else 'FAIL'}")
    _say(f"{len(cases) - failed}/{len(cases)} passed over seeds {seeds}")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_plot(args) -> int:
    from .plotting import plot_ablation, plot_training, read_ablation_csv

    out = Path(args.out)
    for log_path in args.log:
        try:
            text = Path(log_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {log_path}: {exc}") from exc
        header = text.split("\n", 1)[0]
        if header.startswith("kind,"):
            written = plot_training(TrainLog.from_csv(text), out)
        elif header.startswith("group,config"):
            written = [plot_ablation(read_ablation_csv(text), out / f"{Path(log_path).stem}.png")]
        else:
            raise DataError(f"{log_path} is neither a training log nor an ablation table")
        for p in written:
            _say(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deeppyram", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"deeppyram {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic PNG dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True, help="training images")
    s.add_argument("--val", type=int, default=0, help="validation images")
    s.add_argument("--test", type=int, default=0, help="test images")
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--plots", action="store_true", help="also render training curves")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help=".json for JSON, anything else for text; a .csv is written next to it")
    s.add_argument("--split", default="test")
    s.add_argument("--dump-masks", metavar="DIR")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="module, alternative and upsampling ablations")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--groups", help="comma list of modules,alternatives,upsampling")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--ops", default="all", choices=("all",) + suites.GROUPS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="render figures from a training log or ablation table")
    s.add_argument("--log", required=True, action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
