"""
Command-line front end.

Subcommands: ``generate``, ``train``, ``eval``, ``detect``, ``noise-sweep``.
Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from irformer import baselines, data, metrics, report
from irformer.config import RunConfig, load_config, write_config
from irformer.errors import (ConfigError, ContractError, DatasetError, DimensionError,
                             NumericalError)
from irformer.model import Detector
from irformer.train import train

log = logging.getLogger("irformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BASELINES = ("tophat", "maxmean", "maxmedian")


class UsageError(Exception):
    pass


def _variance_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed variance list {text!r}") from None
    if not values or any(not np.isfinite(v) or v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"variances must be finite and >= 0, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irformer", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="run config file (INI)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="first scene index")
    g.add_argument("--noise-variance", type=float, default=None,
                   help="also write a noisy copy (variance on the 0-255 scale) under OUT/noise-V")
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="run config file (INI)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="evaluate a detector or a baseline on a dataset")
    e.add_argument("--config", help="run config file (metrics/baseline sections are used)")
    e.add_argument("--weights")
    e.add_argument("--baseline", choices=BASELINES)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)

    d = sub.add_parser("detect", help="run the detector on one image")
    d.add_argument("--config", help="run config file (metrics section is used)")
    d.add_argument("--weights", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True, help="output directory")

    n = sub.add_parser("noise-sweep", help="evaluate under added Gaussian noise")
    n.add_argument("--config", help="run config file (INI)")
    n.add_argument("--weights")
    n.add_argument("--baseline", choices=BASELINES)
    n.add_argument("--data", required=True)
    n.add_argument("--variances", type=_variance_list, required=True,
                   help="comma-separated variances on the 0-255 scale")
    n.add_argument("--out", required=True)
    n.add_argument("--seed", type=int, default=None)
    return p


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_images(root) -> tuple[np.ndarray, np.ndarray]:
    samples = data.load_dataset(root)
    if not samples:
        raise DatasetError(f"dataset {root} is empty")
    return data.stack(samples)


def _confidence_maps(args, cfg: RunConfig, images: np.ndarray) -> tuple[np.ndarray, str]:
    if bool(args.weights) == bool(args.baseline):
        raise UsageError("give exactly one of --weights or --baseline")
    if args.baseline:
        maps = np.stack([baselines.baseline_map(args.baseline, im, cfg.baseline.size)
                         for im in images])
        return maps, args.baseline
    model = _load_model(args.weights)
    _check_size(model, images.shape[1:])
    return model.predict(images), "model"


def _load_model(path) -> Detector:
    if not Path(path).is_file():
        raise DatasetError(f"weights file {path} not found")
    return Detector.load(path)


def _check_size(model: Detector, shape) -> None:
    if tuple(shape) != tuple(model.cfg.input_size):
        raise DimensionError(f"images are {tuple(shape)} but the model expects "
                             f"{tuple(model.cfg.input_size)}")


def _evaluate(cfg: RunConfig, maps, masks) -> metrics.EvalReport:
    m = cfg.metrics
    return metrics.evaluate(list(maps), list(masks), k_sigma=m.k_sigma, floor=m.floor,
                            dist_thresh=m.dist_thresh, thresholds=m.thresholds)


def _emit_report(rep: metrics.EvalReport, out: Path, label: str, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_report_csv(rep, out / "report.csv")
    report.write_summary(rep, out / "summary.txt", extra)
    report.plot_pd_fa({label: rep.curve}, out / "pd_fa.svg")
    report.plot_f1_threshold(rep, out / "f1_threshold.svg", label)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    if args.count < 0 or args.start < 0:
        raise UsageError("--count and --start must be >= 0")
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    samples = data.generate_dataset(cfg.generate, args.count, args.start)
    data.save_dataset(samples, out, cfg.generate)
    if args.noise_variance is not None:
        if args.noise_variance < 0:
            raise UsageError("--noise-variance must be >= 0")
        noisy = data.noisy_copy(samples, args.noise_variance, cfg.seed)
        data.save_dataset(noisy, out / f"noise-{args.noise_variance:.2f}", cfg.generate,
                          noise_variance=args.noise_variance)
    log.info("wrote %d samples to %s", len(samples), out)


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.seed)
    images, masks = _load_images(args.data)
    model = Detector(cfg.model)
    _check_size(model, images.shape[1:])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini")
    records = train(model, images, masks, cfg.train, out_dir=out)
    log.info("trained %d steps, final loss %.4f", len(records), records[-1].loss)


def cmd_eval(args) -> None:
    cfg = load_config(args.config)
    images, masks = _load_images(args.data)
    maps, label = _confidence_maps(args, cfg, images)
    rep = _evaluate(cfg, maps, masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini")
    _emit_report(rep, out, label, {"detector": label})
    log.info("pd %.4f fa %.4f auc %s", rep.pd, rep.fa, report.fmt(rep.auc))


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"image {path} not found")
    try:
        return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def overlay(image: np.ndarray, mask: np.ndarray, centroids) -> Image.Image:
    """Gray image with the mask tinted red and a green cross on each centroid."""
    gray = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    rgb[mask] = (255, 0, 0)
    img = Image.fromarray(rgb)
    draw = ImageDraw.Draw(img)
    for r, c in centroids:
        r, c = int(round(r)), int(round(c))
        draw.line([(c - 3, r), (c + 3, r)], fill=(0, 255, 0))
        draw.line([(c, r - 3), (c, r + 3)], fill=(0, 255, 0))
    return img


def cmd_detect(args) -> None:
    cfg = load_config(args.config)
    image = _read_image(args.image)
    model = _load_model(args.weights)
    _check_size(model, image.shape)
    conf = model.predict(image)
    mask = metrics.adaptive_threshold(conf, cfg.metrics.k_sigma, cfg.metrics.floor)
    comps = metrics.connected_components(mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(conf * 255).astype(np.uint8)).save(out / "confidence.png")
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(out / "mask.png")
    centroids = [c.centroid for c in comps.components]
    overlay(image, mask, centroids).save(out / "overlay.png")
    with open(out / "detections.csv", "w", newline="") as fh:
        fh.write("# irformer detections v1\n")
        w = csv.writer(fh)
        w.writerow(["row", "col", "area", "peak_confidence"])
        for comp in comps.components:
            peak = conf[comp.pixels[:, 0], comp.pixels[:, 1]].max()
            w.writerow([repr(comp.centroid[0]), repr(comp.centroid[1]), comp.area, repr(float(peak))])
    log.info("%d detections", len(comps))


def cmd_noise_sweep(args) -> None:
    cfg = load_config(args.config, args.seed)
    samples = data.load_dataset(args.data)
    if not samples:
        raise DatasetError(f"dataset {args.data} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.ini")
    rows = []
    for v in args.variances:
        noisy = data.noisy_copy(samples, v, cfg.seed)
        images, masks = data.stack(noisy)
        maps, label = _confidence_maps(args, cfg, images)
        rep = _evaluate(cfg, maps, masks)
        _emit_report(rep, out / f"variance-{v:.2f}", label,
                     {"detector": label, "noise_variance": v})
        rows.append((v, rep))
        log.info("variance %.2f: pd %.4f auc %s", v, rep.pd, report.fmt(rep.auc))
    with open(out / "noise_sweep.csv", "w", newline="") as fh:
        fh.write(report.SWEEP_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["variance", "pd", "fa", "auc", "pd_at_fa_0.2", "f1_target", "f1_pixel"])
        for v, rep in rows:
            w.writerow([repr(float(v)), report.fmt(rep.pd), report.fmt(rep.fa), report.fmt(rep.auc),
                        report.fmt(rep.pd_at_fa), report.fmt(rep.f1_target),
                        report.fmt(rep.f1_pixel)])
    variances = [v for v, _ in rows]
    report.plot_noise_sweep(variances, {
        "Pd": [r.pd for _, r in rows],
        "AUC": [r.auc for _, r in rows],
        "F1 target": [r.f1_target for _, r in rows],
        "F1 pixel": [r.f1_pixel for _, r in rows],
    }, out / "noise_sweep.svg")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "noise-sweep": cmd_noise_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"irformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, DimensionError, ContractError, FileNotFoundError) as exc:
        print(f"irformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"irformer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
