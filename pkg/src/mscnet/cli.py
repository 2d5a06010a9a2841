"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
PROG = "mscnet"

log = logging.getLogger("mscnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} ({' '.join(self.format_usage().split())})")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Multi-modal bi-temporal change detection toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--threads", type=int, default=1, help="worker threads for parallel stages")
        return sp

    g = add("generate", "write a synthetic RGB+NIR change-detection dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratio-spec", help="JSON file of generator settings (buckets, camouflage_fraction, ...)")

    t = add("train", "train a model and keep the best-validation checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="model/training config JSON")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=("rgb", "nir", "rgbnir"))

    e = add("eval", "print micro-averaged metrics for one split as JSON")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    pr = add("predict", "write the probability map of one sample")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--sample", required=True)
    pr.add_argument("--data", required=True, help="dataset directory holding the sample")
    pr.add_argument("--out", required=True)
    pr.add_argument("--raw", action="store_true", help="write a float32 MMCT tensor instead of an 8-bit PGM")

    r = add("render", "colour-code prediction outcomes against a label")
    r.add_argument("--pred", required=True)
    r.add_argument("--label", required=True)
    r.add_argument("--out", required=True)

    s = add("stats", "change-ratio statistics of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--format", choices=("json", "table"), default="json")

    gc = add("gradcheck", "run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    return p


def _configure_logging() -> None:
    level_name = os.environ.get("MSCD_LOG", "info").strip().lower() or "info"
    if level_name not in LOG_LEVELS:
        raise UsageError(f"MSCD_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[level_name])
    log.propagate = False


def _check_threads(n: int) -> int:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def cmd_generate(args) -> int:
    from .data.synth import GenConfig, generate_dataset

    settings = {}
    if args.ratio_spec:
        try:
            settings = json.loads(Path(args.ratio_spec).read_text())
        except OSError as exc:
            raise DataError(f"{args.ratio_spec}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.ratio_spec}: invalid JSON ({exc.msg})") from exc
        if not isinstance(settings, dict):
            raise ConfigError(f"{args.ratio_spec}: expected a JSON object")
    settings.update(count=args.count, size=args.size, seed=args.seed)
    cfg = GenConfig.from_dict(settings)
    generate_dataset(cfg, args.out, threads=_check_threads(args.threads))
    return EXIT_OK


def _dataset_size(data_dir) -> int:
    from .data.dataset import load_sample, read_manifest

    entries = read_manifest(data_dir)
    if not entries:
        raise DataError(f"{data_dir}: empty manifest")
    return int(load_sample(entries[0], data_dir).size[0])


def cmd_train(args) -> int:
    from .config import ModelConfig
    from .train import train

    size = _dataset_size(args.data)
    if args.config:
        config = ModelConfig.load(args.config)
        if config.image_size != size:
            raise DataError(f"config image_size {config.image_size} does not match data size {size}")
    else:
        config = ModelConfig(image_size=size)
    if args.mode:
        config = config.replace(mode=args.mode)
    if args.iters is not None and args.iters < 1:
        raise UsageError("--iters must be >= 1")
    result = train(config, args.data, args.out, seed=args.seed, iters=args.iters, log_fn=log.info)
    log.info(f"best val F1 {result.best_f1:.2f} at iteration {result.best_iteration}; wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.dataset import Dataset
    from .metrics import report_json
    from .train import evaluate_report, load_model

    model, _ = load_model(args.ckpt)
    data = Dataset(args.data, args.split, model.config.nir_channels)
    if len(data) == 0:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    print(report_json(evaluate_report(model, data.samples)))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data.dataset import load_sample, read_manifest
    from .formats import save_mmct, write_pgm
    from .train import load_model, predict_probs

    model, _ = load_model(args.ckpt)
    matches = [e for e in read_manifest(args.data) if e["id"] == args.sample]
    if not matches:
        raise DataError(f"sample {args.sample!r} not found in {args.data}")
    sample = load_sample(matches[0], args.data)
    prob = predict_probs(model, [sample])[0]
    if args.raw:
        save_mmct(args.out, prob.astype(np.float32))
    else:
        write_pgm(args.out, np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8))
    return EXIT_OK


def cmd_render(args) -> int:
    from .formats import read_pnm, write_ppm
    from .metrics import render_diagnostic

    pred, label = read_pnm(args.pred), read_pnm(args.label)
    for path, img in ((args.pred, pred), (args.label, label)):
        if img.ndim != 2:
            raise DataError(f"{path}: expected a greyscale (P5) image")
    if pred.shape != label.shape:
        raise DataError(f"{args.pred}: size {pred.shape} differs from label {label.shape}")
    write_ppm(args.out, render_diagnostic(pred >= 128, label >= 128))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .data.dataset import read_manifest
    from .data.stats import ascii_table, change_ratio_stats

    stats = change_ratio_stats(read_manifest(args.data), args.data)
    print(json.dumps(stats) if args.format == "json" else ascii_table(stats))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite, worst_per_group

    worst = worst_per_group(run_suite(args.seed))
    for group, err in worst.items():
        print(f"{group:<6} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    failed = [g for g, e in worst.items() if not e < TOLERANCE]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "render": cmd_render, "stats": cmd_stats, "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _configure_logging()
        args = _build_parser().parse_args(argv)
        _check_threads(args.threads)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (DataError, ShapeError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    print(f"{PROG}: error: {' '.join(msg.split())}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
