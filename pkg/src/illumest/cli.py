"""``illum-est`` command line: estimate, train, evaluate, correct, synth.

Exit status is 0 on success, 2 on usage errors (bad or out-of-range flags)
and 1 on runtime failures.  Every file output is written atomically.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import defaults
from ._io import atomic_write_text, read_key_value
from .chroma import FEATURES, HistogramGeometry, build_histogram, format_histogram
from .evaluation import (
    GroundTruthTable,
    Sample,
    cross_validate,
    evaluate,
    gray_world_baseline,
    resolve_image,
)
from .ffcc import TrainConfig, estimate_ffcc, load_model, make_sample, save_model, train
from .grayness import GiConfig, estimate_gi
from .imaging import PreprocessConfig, apply_white_balance, downsample, load_image, save_png16
from .synth import SpecRanges, generate_dataset

log = logging.getLogger("illumest")

IMAGE_SUFFIXES = {".png", ".ppm"}
METHODS = ("gi", "ffcc", "grayworld")
JOBS_ENV = "ILLUM_EST_JOBS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _add_preprocess(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("preprocessing")
    g.add_argument("--black-level", default="0",
                   help="black level in raw counts, scalar or r,g,b (default: %(default)s)")
    g.add_argument("--white-point", type=float, default=None,
                   help="raw full-scale count (default: file maximum code value)")
    g.add_argument("--saturation-fraction", type=float, default=defaults.SATURATION_FRACTION,
                   help="normalized clip level (default: %(default)s)")
    g.add_argument("--dark-threshold", type=float, default=defaults.DARK_THRESHOLD,
                   help="normalized dark level (default: %(default)s)")
    g.add_argument("--gamma", type=float, default=None,
                   help="decode v -> v**gamma after loading (default: input is linear)")
    g.add_argument("--allow-8bit", action="store_true",
                   help="accept 8-bit files as linear data (default: reject)")
    g.add_argument("--downsample", type=int, default=1,
                   help="box-filter factor applied after loading (default: %(default)s)")


def _add_method(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("estimator")
    g.add_argument("--method", choices=METHODS, default="gi", help="estimator (default: %(default)s)")
    g.add_argument("--model", default=None, help="trained model file for --method ffcc")
    g.add_argument("--sigma", type=float, default=defaults.GI_SIGMA,
                   help="GI LoG scale in pixels (default: %(default)s)")
    g.add_argument("--top-fraction", type=float, default=defaults.GI_TOP_FRACTION,
                   help="GI share of grayest pixels (default: %(default)s)")
    g.add_argument("--min-pixels", type=int, default=defaults.GI_MIN_PIXELS,
                   help="GI minimum selected pixels (default: %(default)s)")
    g.add_argument("--epsilon", type=float, default=defaults.GI_EPSILON,
                   help="GI log floor and flatness guard (default: %(default)s)")


def _add_geometry(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("histogram")
    g.add_argument("--bins", type=int, default=defaults.HIST_BINS,
                   help="bins per axis, power of two >= 8 (default: %(default)s)")
    g.add_argument("--bin-size", type=float, default=defaults.HIST_BIN_SIZE,
                   help="log-chroma units per bin (default: %(default)s)")


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=defaults.EPOCHS, help="(default: %(default)s)")
    g.add_argument("--learning-rate", type=float, default=defaults.LEARNING_RATE, help="(default: %(default)s)")
    g.add_argument("--momentum", type=float, default=defaults.MOMENTUM, help="(default: %(default)s)")
    g.add_argument("--l2-filter", type=float, default=defaults.L2_FILTER, help="(default: %(default)s)")
    g.add_argument("--l2-bias", type=float, default=defaults.L2_BIAS, help="(default: %(default)s)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value file of flag defaults")
    p.add_argument("--jobs", type=int, default=None,
                   help=f"parallel workers (default: ${JOBS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="illum-est", description="Scene illuminant estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("estimate", help="estimate illuminants, one CSV row path,r,g,b per image")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--out", default=None, help="CSV output file (default: standard output)")
    p.add_argument("--dump-histogram", default=None, metavar="DIR",
                   help="write each image's chroma histograms into DIR")
    _add_method(p)
    _add_geometry(p)
    _add_preprocess(p)
    _add_common(p)

    p = sub.add_parser("train", help="train an FFCC model on a labelled directory")
    p.add_argument("--data", required=True, help="image directory")
    p.add_argument("--gt", required=True, help="ground-truth CSV image,r,g,b")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", default=None, help="optional CSV of per-epoch loss")
    p.add_argument("--seed", type=int, default=defaults.SEED, help="(default: %(default)s)")
    _add_geometry(p)
    _add_training(p)
    _add_preprocess(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="angular-error report against ground truth")
    p.add_argument("--data", required=True, help="image directory")
    p.add_argument("--gt", required=True, help="ground-truth CSV image,r,g,b")
    p.add_argument("--out", default=None, help="report file (default: standard output)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of CSV")
    p.add_argument("--folds", type=int, default=None,
                   help="k-fold cross-validation (default: 3 for ffcc without --model, else off)")
    p.add_argument("--seed", type=int, default=defaults.SEED, help="fold shuffle seed (default: %(default)s)")
    _add_method(p)
    _add_geometry(p)
    _add_training(p)
    _add_preprocess(p)
    _add_common(p)

    p = sub.add_parser("correct", help="white-balance images and write 16-bit PNG")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--out", required=True, help="output file (single input) or directory")
    p.add_argument("--illuminant", default=None, help="fixed illuminant r,g,b instead of estimating")
    _add_method(p)
    _add_geometry(p)
    _add_preprocess(p)
    _add_common(p)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10, help="(default: %(default)s)")
    p.add_argument("--seed", type=int, default=defaults.SEED, help="(default: %(default)s)")
    p.add_argument("--ranges", default=None, help="key=value file overriding scene ranges")
    _add_common(p)

    parser.subcommands = dict(sub.choices)
    return parser


# ---------------------------------------------------------------------------
# validation and config


def _parse_floats(text: str, flag: str, count: tuple[int, ...]) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in count:
        raise UsageError(f"{flag}: expected {' or '.join(map(str, count))} values, got {len(vals)}")
    return vals


def _check(cond: bool, flag: str, msg: str) -> None:
    if not cond:
        raise UsageError(f"{flag}: {msg}")


def _validate(args: argparse.Namespace) -> None:
    a = vars(args)
    if "black_level" in a:
        bl = _parse_floats(args.black_level, "--black-level", (1, 3))
        _check(min(bl) >= 0, "--black-level", "must be >= 0")
        _check(0 < args.saturation_fraction <= 1, "--saturation-fraction", "must be in (0, 1]")
        _check(args.dark_threshold >= 0, "--dark-threshold", "must be >= 0")
        _check(args.gamma is None or args.gamma > 0, "--gamma", "must be > 0")
        _check(args.downsample >= 1, "--downsample", "must be >= 1")
        _check(args.white_point is None or args.white_point > max(bl), "--white-point",
               "must exceed the black level")
    if "sigma" in a:
        _check(args.sigma > 0, "--sigma", "must be > 0")
        _check(0 < args.top_fraction <= 1, "--top-fraction", "must be in (0, 1]")
        _check(args.min_pixels >= 1, "--min-pixels", "must be >= 1")
        _check(args.epsilon > 0, "--epsilon", "must be > 0")
    if "bins" in a:
        _check(args.bins >= 8 and args.bins & (args.bins - 1) == 0, "--bins", "must be a power of two >= 8")
        _check(args.bin_size > 0, "--bin-size", "must be > 0")
    if "epochs" in a:
        _check(args.epochs >= 1, "--epochs", "must be >= 1")
        _check(args.learning_rate >= 0, "--learning-rate", "must be >= 0")
        _check(0 <= args.momentum < 1, "--momentum", "must be in [0, 1)")
        _check(args.l2_filter >= 0, "--l2-filter", "must be >= 0")
        _check(args.l2_bias >= 0, "--l2-bias", "must be >= 0")
    if a.get("folds") is not None:
        _check(args.folds >= 2, "--folds", "must be >= 2")
    if "count" in a:
        _check(args.count >= 1, "--count", "must be >= 1")
    if a.get("illuminant") is not None:
        rgb = _parse_floats(args.illuminant, "--illuminant", (3,))
        _check(min(rgb) > 0, "--illuminant", "components must be > 0")
    if args.command in ("estimate", "correct") and a.get("illuminant") is None:
        _check(args.method != "ffcc" or args.model is not None, "--model", "required with --method ffcc")
    if args.command == "evaluate" and args.method != "ffcc":
        _check(args.model is None, "--model", "only meaningful with --method ffcc")
    if args.jobs is not None:
        _check(args.jobs >= 1, "--jobs", "must be >= 1")


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load ``--config`` key=value pairs as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in parser.subcommands:
        return
    sub = parser.subcommands[known.command]
    dests = {a.dest: a for a in sub._actions}
    try:
        pairs = read_key_value(known.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from None
    overrides = {}
    for key, value in pairs.items():
        dest = key.replace("-", "_")
        action = dests.get(dest)
        if action is None or dest in ("config", "help", "inputs"):
            raise UsageError(f"--config: unknown key {key!r}")
        if action.type is not None:
            try:
                value = action.type(value)
            except ValueError:
                raise UsageError(f"--config: bad value for {key!r}: {value!r}") from None
        elif isinstance(action, argparse._StoreTrueAction):
            value = value.lower() in ("1", "true", "yes", "on")
        overrides[dest] = value
    sub.set_defaults(**overrides)


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get(JOBS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"--jobs: ${JOBS_ENV} must be an integer, got {env!r}") from None
        _check(n >= 1, "--jobs", f"${JOBS_ENV} must be >= 1")
        return n
    return 1


def _preprocess(args) -> PreprocessConfig:
    bl = _parse_floats(args.black_level, "--black-level", (1, 3))
    return PreprocessConfig(
        black_level=bl[0] if len(bl) == 1 else tuple(bl),
        white_point=args.white_point,
        saturation_fraction=args.saturation_fraction,
        dark_threshold=args.dark_threshold,
        gamma=args.gamma,
        allow_8bit=args.allow_8bit,
    )


def _geometry(args) -> HistogramGeometry:
    return HistogramGeometry(args.bins, args.bin_size)


def _gi_config(args) -> GiConfig:
    return GiConfig(args.sigma, args.top_fraction, args.min_pixels, args.epsilon)


def _train_config(args) -> TrainConfig:
    return TrainConfig(args.learning_rate, args.momentum, args.epochs, args.l2_filter, args.l2_bias,
                       getattr(args, "seed", defaults.SEED))


# ---------------------------------------------------------------------------
# helpers


def _expand_inputs(inputs: Iterable[str]) -> list[Path]:
    out: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return sorted(out, key=str)


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _loader(args) -> Callable[[Path], object]:
    cfg = _preprocess(args)

    def load(path: Path):
        img = load_image(path, cfg)
        return downsample(img, args.downsample) if args.downsample > 1 else img

    return load


def _estimator(args):
    """Callable image -> unit illuminant for --method."""
    if args.method == "gi":
        cfg = _gi_config(args)
        return lambda img: estimate_gi(img, cfg)
    if args.method == "grayworld":
        return gray_world_baseline
    model = load_model(args.model)
    return lambda img: estimate_ffcc(model, img, args.dark_threshold)


def _fmt_rgb(rgb) -> str:
    return ",".join(f"{x:.10f}" for x in rgb)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _load_labelled(args) -> list[Sample]:
    table = GroundTruthTable.read_csv(args.gt)
    if not table:
        raise ValueError(f"{args.gt}: no ground-truth rows")
    load = _loader(args)
    keys = list(table)
    paths = [resolve_image(args.data, k) for k in keys]
    images = _pmap(load, paths, _jobs(args))
    return [Sample(k, table[k], img) for k, img in zip(keys, images)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_estimate(args) -> None:
    paths = _expand_inputs(args.inputs)
    if not paths:
        raise ValueError("no input images found")
    load = _loader(args)
    estimate = _estimator(args)
    geom = _geometry(args)

    def one(path: Path):
        img = load(path)
        if args.dump_histogram:
            out_dir = Path(args.dump_histogram)
            out_dir.mkdir(parents=True, exist_ok=True)
            for feature in FEATURES:
                h = build_histogram(img, geom, feature, args.dark_threshold)
                atomic_write_text(out_dir / f"{path.stem}.{feature.value}.txt", format_histogram(h))
        return estimate(img)

    rows = _pmap(one, paths, _jobs(args))
    _emit("".join(f"{p},{_fmt_rgb(e)}\n" for p, e in zip(paths, rows)), args.out)


def cmd_train(args) -> None:
    samples = _load_labelled(args)
    geom = _geometry(args)
    labelled = [make_sample(s.image, s.truth, geom, s.source_path, args.dark_threshold) for s in samples]
    model = train(labelled, _train_config(args),
                  on_epoch=lambda e, v: log.debug("epoch %d loss %.8f", e, v))
    save_model(model, args.out)
    if args.trace:
        lines = ["epoch,loss"] + [f"{i},{v:.12g}" for i, v in enumerate(model.loss_trace, 1)]
        atomic_write_text(args.trace, "\n".join(lines) + "\n")
    log.info("trained on %d images, final loss %.6f", len(samples), model.loss_trace[-1])


def cmd_evaluate(args) -> None:
    samples = _load_labelled(args)
    folds = args.folds
    if args.method == "ffcc" and args.model is None:
        folds = folds or 3
        geom = _geometry(args)
        cfg = _train_config(args)
        feats = {id(s): make_sample(s.image, s.truth, geom, s.source_path, args.dark_threshold)
                 for s in samples}

        def trainer(train_set):
            model = train([feats[id(s)] for s in train_set], cfg)
            return lambda s: estimate_ffcc(model, s.image, args.dark_threshold)

        report = cross_validate(samples, folds, trainer, args.seed)
    else:
        estimate = _estimator(args)
        by_sample = lambda s: estimate(s.image)  # noqa: E731
        if folds:
            report = cross_validate(samples, folds, lambda _train: by_sample, args.seed)
        else:
            report = evaluate(samples, by_sample)
    _emit(report.to_json() if args.json else report.to_csv(), args.out)


def cmd_correct(args) -> None:
    paths = _expand_inputs(args.inputs)
    if not paths:
        raise ValueError("no input images found")
    out = Path(args.out)
    single = len(paths) == 1 and not out.is_dir()
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    load = _loader(args)
    fixed = None
    if args.illuminant is not None:
        fixed = np.array(_parse_floats(args.illuminant, "--illuminant", (3,)))
    estimate = None if fixed is not None else _estimator(args)

    def one(path: Path):
        img = load(path)
        est = fixed if fixed is not None else estimate(img)
        target = out if single else out / (path.stem + ".png")
        save_png16(apply_white_balance(img, est), target)

    _pmap(one, paths, _jobs(args))


def cmd_synth(args) -> None:
    ranges = SpecRanges.from_file(args.ranges) if args.ranges else SpecRanges()
    generate_dataset(args.out, args.count, ranges, args.seed)


COMMANDS = {
    "estimate": cmd_estimate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "correct": cmd_correct,
    "synth": cmd_synth,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        _validate(args)
        _jobs(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
