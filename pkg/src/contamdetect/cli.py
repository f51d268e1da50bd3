"""Command line entry point: ``contamdetect <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence or internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

from . import imaging

log = logging.getLogger("contamdetect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(path) -> Path:
    """Output path with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _load_annotated(directory):
    from .pipeline import load_annotated_dir

    return [(imaging.read_image(p), ann) for p, ann in load_annotated_dir(directory)]


# subcommands


def cmd_synth(args) -> int:
    from .mtfilter import CalibrationProfile
    from .synth import SceneSpec, generate_crop_dataset, write_dataset

    spec = SceneSpec.load(args.spec) if args.spec else SceneSpec()
    seed = args.seed if args.seed is not None else spec.seed
    if args.crops:
        n_tc, n_fc = args.crops
        profile = CalibrationProfile.load(args.profile) if args.profile else None
        _, labels, _ = generate_crop_dataset(n_tc, n_fc, spec, seed, profile=profile, out_dir=args.out)
        print(f"wrote {len(labels)} crops to {args.out}")
    else:
        paths = write_dataset(args.out, spec, args.n, seed, fmt=args.format)
        print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .mtfilter import CalibrationConfig, calibrate

    config = CalibrationConfig.from_dict(_read_json(args.grid)) if args.grid else CalibrationConfig()
    report = calibrate(_load_annotated(args.data), config)
    report.profile.save(_out(args.out))
    summary = {"recall": report.recall, "false_positives": report.false_positives,
               "n_contaminations": report.n_contaminations, "excluded": len(report.excluded),
               "grid_size": report.grid_size}
    if args.report:
        _write_json(args.report, {**summary, "grid": report.grid})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .mtfilter import CalibrationProfile, detect
    from .pipeline import ImageReport, classify_detections, write_annotated

    img = imaging.read_image(args.image)
    profile = CalibrationProfile.load(args.profile)
    t0 = time.perf_counter()
    dets = detect(img, profile)
    if args.model:
        from .cnn.model import CnnModel

        dets = classify_detections(img, dets, CnnModel.load(args.model))
    report = ImageReport(Path(args.image).name, dets, time.perf_counter() - t0, img.shape)
    out = report.to_dict()
    if args.out:
        _write_json(args.out, out)
    else:
        print(json.dumps(out, indent=2, sort_keys=True))
    if args.annotated:
        write_annotated(_out(args.annotated), img, dets)
    log.info("%d detections in %.2f s", len(dets), report.duration_s)
    return EXIT_OK


def _hyperparams(args):
    from .cnn.model import Hyperparams

    hp = Hyperparams.from_dict(_read_json(args.hyperparams)) if args.hyperparams else Hyperparams()
    if args.seed is not None:
        hp.seed = args.seed
    return hp


def cmd_train(args) -> int:
    from .cnn.dataset import read_crop_dataset
    from .cnn.training import train

    crops, labels = read_crop_dataset(args.manifest)
    hp = _hyperparams(args)
    res = train(crops, labels, hp, progress=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    res.model.save(_out(args.out))
    if args.trace:
        with open(_out(args.trace), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "loss"])
            wr.writerows([i, repr(v)] for i, v in enumerate(res.loss_trace))
    print(f"trained {res.model.n_parameters()} parameters, final loss {res.loss_trace[-1]:.5f}")
    return EXIT_OK


def cmd_search(args) -> int:
    from .cnn.dataset import read_crop_dataset
    from .cnn.training import predict_batch, train
    from .evaluation import ConfusionMatrix, MetricsRow, SearchSpace, holdout_split, random_search

    crops, labels = read_crop_dataset(args.manifest)
    space = SearchSpace.from_dict(_read_json(args.space)) if args.space else SearchSpace()
    seed = args.seed if args.seed is not None else 0
    tr, te = holdout_split(labels, args.test_fraction, seed)
    table, best = random_search(space, args.l, args.k, crops[tr], labels[tr], seed)
    table.to_csv(_out(args.out_table))
    table.to_json(Path(args.out_table).with_suffix(".json"))
    if best is None:
        print("every combination diverged", file=sys.stderr)
        return EXIT_INTERNAL
    _write_json(args.out_best, best.to_dict())
    if args.model:
        # final model: retrained on the search set only, scored once on the held-out test set
        model = train(crops[tr], labels[tr], best).model
        model.save(_out(args.model))
        cm = ConfusionMatrix.from_labels(labels[te], predict_batch(model, crops[te]) >= 0.5)
        row = MetricsRow.from_cm(cm)
        _write_json(Path(args.model).with_suffix(".test.json"), {k: v for k, v in row.flat().items()})
    print(json.dumps({k: table.best().flat()[k] for k in ("f2", "recall", "precision")}, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .cnn.model import CnnModel
    from .mtfilter import CalibrationProfile
    from .pipeline import PipelineConfig, evaluate_pipeline, load_annotated_dir, run_batch

    profile, model = CalibrationProfile.load(args.profile), CnnModel.load(args.model)
    pairs = load_annotated_dir(args.data)
    cfg = PipelineConfig(budget_s=args.budget)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reports = run_batch([(p.name, p) for p, _ in pairs], profile, model, cfg, threads=args.threads)
    ev = evaluate_pipeline(reports, [a for _, a in pairs], cfg.match_radius)
    _write_json(args.out, ev.to_dict())
    if args.csv:
        with open(_out(args.csv), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["image", "contaminations", "candidates", "true_contamination", "contaminated", "duration_s"])
            for r, (_, a) in zip(reports, pairs):
                wr.writerow([r.image, len(a.contaminations), len(r.detections), r.n_true, int(r.positive),
                             f"{r.duration_s:.4f}"])
    print(json.dumps(ev.to_dict(timing=False)["pipeline"], sort_keys=True))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .cnn.model import CnnModel
    from .mtfilter import CalibrationProfile
    from .pipeline import PipelineConfig, run_batch, write_annotated

    profile, model = CalibrationProfile.load(args.profile), CnnModel.load(args.model)
    src = Path(args.images)
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".pgm")) if src.is_dir() else [src]
    if not paths:
        raise FileNotFoundError(f"no .png/.pgm images in {src}")
    cfg = PipelineConfig(budget_s=args.budget)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reports = run_batch([(p.name, p) for p in paths], profile, model, cfg, threads=args.threads)
    for w in caught:
        log.warning("%s", w.message)
    for p, r in zip(paths, reports):
        _write_json(out / f"{p.stem}.report.json", r.to_dict())
        if args.annotated:
            write_annotated(out / f"{p.stem}.annotated.png", imaging.read_image(p), r.detections)
    summary = {
        "n_images": len(reports),
        "contaminated": [r.image for r in reports if r.positive],
        "over_budget": [r.image for r in reports if r.over_budget],
        "max_duration_s": max(r.duration_s for r in reports),
    }
    _write_json(out / "summary.json", summary)
    print(f"{len(summary['contaminated'])}/{len(reports)} images flagged")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contamdetect", description="Two-stage X-ray contamination detector.")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides seeds in spec/hyper-parameter files)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for batch runs")
    p.add_argument("--config", help="JSON file of option defaults, flat or keyed by subcommand")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic image set or crop dataset")
    s.add_argument("--spec", help="SceneSpec JSON (defaults: full-size scene)")
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=10, help="number of images")
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.add_argument("--crops", type=int, nargs=2, metavar=("N_TC", "N_FC"), help="write a crop dataset instead")
    s.add_argument("--profile", help="calibration profile; FC crops are then taken at filter false alarms")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="fit an MT-Filter profile to an annotated image directory")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--grid", help="CalibrationConfig JSON")
    s.add_argument("--report", help="write the full grid with scores here")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect", help="run the MT-Filter on one image")
    s.add_argument("image")
    s.add_argument("--profile", required=True)
    s.add_argument("--model", help="also classify candidates with this model")
    s.add_argument("--out", help="JSON report path (default: stdout)")
    s.add_argument("--annotated", help="write a PNG with circled detections")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("train", help="train the crop classifier")
    s.add_argument("manifest")
    s.add_argument("--hyperparams", help="Hyperparams JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="loss trace CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="random hyper-parameter search with K-fold CV")
    s.add_argument("manifest")
    s.add_argument("--space", help="SearchSpace JSON")
    s.add_argument("-l", type=int, default=10, help="combinations to try")
    s.add_argument("-k", type=int, default=5, help="folds")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--out-table", required=True)
    s.add_argument("--out-best", required=True)
    s.add_argument("--model", help="retrain the best combination on the search set and save it here")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("evaluate", help="image-level metrics of filter and pipeline on an annotated directory")
    s.add_argument("data")
    s.add_argument("--profile", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv", help="per-image CSV")
    s.add_argument("--budget", type=float, default=5.0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", help="batch run: per-image JSON reports and a summary")
    s.add_argument("images", help="image file or directory")
    s.add_argument("--profile", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--annotated", action="store_true")
    s.add_argument("--budget", type=float, default=5.0)
    s.set_defaults(func=cmd_pipeline)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = _read_json(args.config)
    if not isinstance(cfg, dict):
        raise ValueError(f"{args.config}: config must be a JSON object")
    section = cfg.get(args.command, cfg)
    flat = {k.replace("-", "_"): v for k, v in section.items() if not isinstance(v, dict)}
    # values given on the command line win over the config file
    defaults = vars(parser.parse_args([args.command] + _required_stub(parser, args.command)))
    for key, value in flat.items():
        if key not in defaults:
            raise UsageError(f"config key {key!r} is not an option of {args.command!r}")
        if getattr(args, key) == defaults[key]:
            setattr(args, key, value)
    return args


def _required_stub(parser, command) -> list[str]:
    """Placeholder values so the subcommand's defaults can be read without its required options."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    out = []
    for a in sub._actions:
        if a.required and a.option_strings:
            out += [a.option_strings[0], "x"]
        elif a.required and not a.option_strings and a.dest != "help":
            out.append("x")
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"contamdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"contamdetect: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("contamdetect: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    from .cnn.training import TrainingDivergedError
    from .synth import PlacementError

    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"contamdetect: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OSError, ValueError, KeyError, PlacementError, imaging.InvalidCoordinatesError) as exc:
        print(f"contamdetect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"contamdetect: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
