"""``plateflow`` command line.

Subcommands ``synth``, ``train``, ``calibrate``, ``run`` and ``eval``.  Every
command is deterministic for a fixed seed and configuration; wall-clock
timestamps appear only under ``meta`` keys.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one JSON object ``{"error": ..., "message": ..., "exit_code": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, build_config
from .data_io import AnnotatedImage, parse_voc, read_manifest, split_dataset, write_manifest, write_voc
from .detect import read_detection_record, write_detection_record
from .errors import CalibrationError, ConfigError, DataError, NumericError
from .imaging import load_image, save_image
from .metrics import EvalReport, LevenshteinStats, read_pairs_csv
from .pipeline import Models, calibrate, evaluate, result_from_json, score_image, train_models
from .recognize import write_label_map
from .scoring import write_calibration_csv
from .synth import oracle_detections, random_plate_spec, synth_plate

log = logging.getLogger("plateflow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _meta() -> dict:
    return {"timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__}


def _dump(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out_dir is None:
        raise ConfigError("out_dir is not set (use --out)")
    d = Path(cfg.out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {d}: {exc}") from exc
    return d


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> List[dict]:
    """Write ``cfg.n_images`` synthetic scenes with annotations and detection records."""
    out = _out_dir(cfg)
    for sub in ("images", "annotations", "detections"):
        (out / sub).mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    anns: List[AnnotatedImage] = []
    for i in range(cfg.n_images):
        spec = random_plate_spec(rng, layout_sampling=cfg.layout_sampling, class_sampling=cfg.class_sampling,
                                 noise=(cfg.noise_std_frac, cfg.noise_std_frac), rotation=cfg.rotation_max_deg,
                                 distractor_prob=cfg.distractor_prob_frac)
        s = image_seed(cfg.seed, i)
        image, ann, _ = synth_plate(spec, s, image_id=f"img_{i:05d}")
        ann.path = f"images/{ann.image_id}.png"
        save_image(image, out / ann.path)
        record = oracle_detections(ann, s, jitter=cfg.detector_jitter_px, spurious_chars=cfg.spurious_chars)
        write_detection_record(record, out / "detections" / f"{ann.image_id}.json")
        anns.append(ann)

    if len(anns) >= 5:
        train, test, val = split_dataset(anns, cfg.seed, labels=[a.layout for a in anns])
        for part, name in ((train, "train"), (test, "test"), (val, "validation")):
            for a in part:
                a.split = name
    else:
        for a in anns:
            a.split = "train"
    entries = []
    for a in anns:
        write_voc(a, out / "annotations" / f"{a.image_id}.xml")
        entries.append({"image_id": a.image_id, "image": a.path, "annotation": f"annotations/{a.image_id}.xml",
                        "detections": f"detections/{a.image_id}.json", "split": a.split,
                        "layout": a.layout, "plate_text": a.plate_text})
    write_manifest(entries, out / "manifest.json")
    write_label_map(out / "labels.txt")
    return entries


def _load_split(cfg: RunConfig, split: str):
    """``(image, annotation, manifest entry)`` for every manifest entry in ``split``."""
    cfg.require("data_dir")
    root = Path(cfg.data_dir)
    entries = read_manifest(root / "manifest.json")
    chosen = [e for e in entries if split == "all" or e.get("split") == split]
    out = []
    for e in sorted(chosen, key=lambda e: e["image_id"]):
        ann_path = root / e["annotation"]
        try:
            ann = parse_voc(ann_path.read_text(), source=ann_path.name)
        except OSError as exc:
            raise DataError(f"{ann_path}: {exc}") from exc
        try:
            image = load_image(root / e["image"])
        except OSError as exc:
            raise DataError(f"{e['image']}: cannot read image: {exc}") from exc
        out.append((image, ann, e))
    return out


def cmd_train(cfg: RunConfig) -> Models:
    items = _load_split(cfg, cfg.train_split)
    if not items:
        raise DataError(f"no images in split {cfg.train_split!r}")
    models = train_models([(img, ann) for img, ann, _ in items], cfg.pipeline())
    out = Path(cfg.models_dir or cfg.out_dir or "")
    if cfg.models_dir is None and cfg.out_dir is None:
        raise ConfigError("models_dir is not set (use --models or --out)")
    models.save(out)
    for name, trace in models.traces.items():
        with open(out / f"loss_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log_index", "loss"])
            for i, v in enumerate(trace):
                w.writerow([i, repr(v)])
    _dump({"n_images": len(items), "split": cfg.train_split, "config": cfg.to_text(), "meta": _meta()},
          out / "train.json")
    return models


def _models(cfg: RunConfig) -> Models:
    cfg.require("models_dir")
    return Models.load(cfg.models_dir)


def _scored(cfg: RunConfig, split: str):
    models = _models(cfg)
    pcfg = cfg.pipeline()
    root = Path(cfg.data_dir)
    items = _load_split(cfg, split)
    scored = []
    for image, ann, e in items:
        record = read_detection_record(root / e["detections"])
        scored.append(score_image(image, record, models, pcfg))
    return scored, [ann for _, ann, _ in items]


def cmd_calibrate(cfg: RunConfig):
    out = _out_dir(cfg)
    scored, anns = _scored(cfg, cfg.calibrate_split)
    if not scored:
        raise DataError(f"no images in split {cfg.calibrate_split!r}")
    try:
        cal = calibrate(scored, anns, cfg.theta_grid, cfg.score_mode)
    except CalibrationError as exc:
        if exc.partial is not None:
            write_calibration_csv(exc.partial, out / "theta_curve.partial.csv")
        raise
    write_calibration_csv(cal, out / "theta_curve.csv")
    _dump({"chosen_theta": cal.chosen, "objective": "average_levenshtein", "grid": list(cal.grid),
           "split": cfg.calibrate_split, "meta": _meta()}, out / "calibration.json")
    return cal


def cmd_run(cfg: RunConfig) -> List[dict]:
    out = _out_dir(cfg)
    scored, _ = _scored(cfg, cfg.run_split)
    docs = []
    for s in scored:
        doc = s.decide(cfg.theta_char).to_json(meta=_meta())
        doc["theta_char"] = cfg.theta_char
        doc["theta_plate"] = cfg.theta_plate
        _dump(doc, out / f"{s.image_id}.json")
        docs.append(doc)
    return docs


def cmd_eval(cfg: RunConfig) -> EvalReport:
    out = _out_dir(cfg)
    if cfg.pairs_csv is not None:
        cfg.require("pairs_csv")
        try:
            rows = read_pairs_csv(cfg.pairs_csv)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if not rows:
            raise DataError(f"{cfg.pairs_csv}: no rows")
        report = EvalReport(levenshtein=LevenshteinStats.from_pairs([(p, t) for _, p, t in rows]))
        report.meta = {"n_pairs": len(rows), "source": Path(cfg.pairs_csv).name}
    else:
        cfg.require("data_dir", "predictions_dir")
        items = _load_split(cfg, cfg.run_split)
        anns = [ann for _, ann, _ in items]
        results = []
        for a in anns:
            p = Path(cfg.predictions_dir) / f"{a.image_id}.json"
            if p.exists():
                try:
                    results.append(result_from_json(json.loads(p.read_text())))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataError(f"{p.name}: invalid plate record: {exc}") from exc
        report = evaluate(results, anns, cfg.iou_match_frac)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    return report


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate, "run": cmd_run, "eval": cmd_eval}


# -- argument handling -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plateflow", description="Plate reading with flow-verified detections.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", help="random seed (mandatory here or in the config)")
        sp.add_argument("--theta", help="character acceptance threshold (theta_char)")
        sp.add_argument("--margin-plate", help="plate crop margin as a fraction of the box size")
        sp.add_argument("--margin-char", help="character crop margin as a fraction of the box size")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--data", help="dataset directory (with manifest.json)")
        sp.add_argument("--models", help="models directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    overrides = {"seed": args.seed, "theta_char": args.theta, "margin_plate_frac": args.margin_plate,
                 "margin_char_frac": args.margin_char, "out_dir": args.out, "data_dir": args.data,
                 "models_dir": args.models}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return build_config(args.config, overrides)


def _fail(exc: Exception, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    step = getattr(exc, "step", None)
    if step is not None:
        doc["step"] = step
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except NumericError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DataError, CalibrationError, OSError) as exc:
        return _fail(exc, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
