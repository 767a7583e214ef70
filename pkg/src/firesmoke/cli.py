"""Command-line entry point.

Every subcommand accepts ``--config FILE``, ``--seed N`` and ``--out DIR``
plus ``--<key> VALUE`` for any config key (see ``firesmoke <cmd> --help``).
Exit codes: 0 success, 2 usage/config/data errors, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .boxmetrics import CLASSES, BIWeights
from .checkpoint import file_digest
from .dataingest import (
    SynthSpec, ingest_videos, load_dataset, load_manifest, read_image, save_manifest, synth_dataset, synth_transparent,
)
from .detector import detector_stats, format_loss_csv, format_stats, load_detector, loss_trend
from .estimator import FireSmokeDetector
from .evalharness import (
    RunRecord, ablate, bi_record, bi_summary, cam, config_digest, format_bi_table, format_report_table, report,
    run_dir, run_inference, save_heatmap, write_report, write_run_record,
)
from .exceptions import ConfigurationError, FireSmokeError, NumericError
from .runconfig import SCHEMA, RunConfig, read_config_file
from .seeding import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _synth_spec(cfg: RunConfig, count: int, seed: int, name: str) -> SynthSpec:
    return SynthSpec(
        count=count, image_size=cfg["image_size"], alpha_range=(cfg["alpha_min"], cfg["alpha_max"]),
        objects_per_image=(cfg["objects_min"], cfg["objects_max"]), background_mode=cfg["background"],
        seed=seed, name=name,
    )


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _out(args)
    full, train, test = ingest_videos(args.inputs, cfg["budget"], cfg.seed, out, cfg["name"], cfg["train_fraction"])
    cfg.write_record(out, "ingest")
    for m in (full, train, test):
        print(f"{m.name}.manifest  {m.split:5s}  {len(m)} images")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out(args)
    manifest = synth_transparent(_synth_spec(cfg, cfg["count"], cfg.seed, cfg["name"]), out)
    save_manifest(manifest, out / f"{manifest.name}.manifest")
    cfg.write_record(out, "synth")
    print(f"{manifest.name}.manifest  {len(manifest)} images, "
          f"{sum(len(r.annotations) for r in manifest.records)} boxes")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    data = load_dataset(manifest)
    out = _out(args)
    est = FireSmokeDetector(**cfg.estimator_params()).fit([d[0] for d in data], [d[1] for d in data])
    ckpt = out / "checkpoint.safetensors"
    est.save(ckpt)
    (out / "loss.csv").write_text(format_loss_csv(est.loss_trace_), encoding="utf-8")
    cfg.write_record(out, "train", {"checkpoint_digest": file_digest(ckpt), "dataset": manifest.name})
    first, last = loss_trend(est.loss_trace_)
    trend = "decreasing" if last < first else "not decreasing"
    print(f"loss {first:.4f} -> {last:.4f} ({trend}) over {len(est.loss_trace_)} steps")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    expected = FireSmokeDetector(**cfg.estimator_params()).detector_config() if cfg.sets_architecture() else None
    start = time.perf_counter()
    model = load_detector(args.checkpoint, expected)
    digest = config_digest(model.config, file_digest(args.checkpoint))
    out = run_dir(_out(args), digest, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    store = run_inference(model, manifest, out_path=out / "detections.txt")
    rep = report(store, manifest, BIWeights(cfg["w1"], cfg["w2"]))
    model_id = Path(args.checkpoint).stem
    write_report(rep, out, model_id, manifest.name)
    write_run_record(out, RunRecord(model_id, manifest.name, cfg.seed, digest, "detections.txt",
                                    wall_time=time.perf_counter() - start))
    print(format_report_table(rep, model_id, manifest.name), end="")
    print(f"run directory {out}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    if not cfg["seeds"]:
        raise ConfigurationError("no seeds given")
    if args.train_manifest:
        train_m = load_manifest(args.train_manifest)
        if not args.test_manifest:
            raise ConfigurationError("--train-manifest needs --test-manifest")
        test_m = load_manifest(args.test_manifest)
        train_data, test_data, name = load_dataset(train_m), load_dataset(test_m), train_m.name
    else:
        name = cfg["name"]
        train_data = synth_dataset(_synth_spec(cfg, cfg["train_count"], derive_seed(cfg.seed, "ablate:train"), name))
        test_data = synth_dataset(_synth_spec(cfg, cfg["test_count"], derive_seed(cfg.seed, "ablate:test"), name))
    est = FireSmokeDetector(**cfg.estimator_params())
    config = est.detector_config()
    out = run_dir(_out(args), config_digest(config), cfg.seed)
    table = ablate(train_data, test_data, config, cfg["variants"], cfg["seeds"], est.train_config(), name)
    table.write(out)
    cfg.write_record(out, "ablate")
    print(table.format_text(), end="")
    print(f"run directory {out}")
    return EXIT_OK


def cmd_bi(args, cfg: RunConfig) -> int:
    weights = BIWeights(cfg["w1"], cfg["w2"])
    summary = bi_summary(args.detections, args.ground_truth, weights, cfg["pairing"])
    out = _out(args)
    text = format_bi_table(summary, weights)
    (out / "bi.txt").write_text(text, encoding="utf-8")
    (out / "bi.jsonl").write_text(bi_record(summary, weights), encoding="utf-8")
    cfg.write_record(out, "bi")
    print(text, end="")
    return EXIT_OK


def cmd_cam(args, cfg: RunConfig) -> int:
    unknown = [c for c in cfg["classes"] if c not in CLASSES]
    if unknown:
        raise ConfigurationError(f"unknown classes {unknown}; choose from {CLASSES}")
    model = load_detector(args.checkpoint)
    out = _out(args)
    for path in map(Path, args.images):
        image = read_image(path)
        for category in cfg["classes"]:
            heatmap = cam(model, image, category, cfg["level"])
            save_heatmap(out / f"{path.stem}_{category}.png", heatmap)
            if args.overlay:
                save_heatmap(out / f"{path.stem}_{category}_overlay.png", heatmap, overlay_on=image)
            print(f"{path.stem}_{category}.png")
    cfg.write_record(out, "cam", {"checkpoint_digest": file_digest(args.checkpoint)})
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    config = FireSmokeDetector(**cfg.estimator_params()).detector_config()
    text = format_stats(detector_stats(config, cfg["stats_sizes"]))
    out = _out(args)
    (out / "stats.txt").write_text(text, encoding="utf-8")
    cfg.write_record(out, "stats")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("--out", default="firesmoke-out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config keys (override the config file)")
    for key, setting in SCHEMA.items():
        keys.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg:{key}", metavar="V", default=argparse.SUPPRESS,
                          help=f"{setting.help} (default {setting.default})")

    parser = argparse.ArgumentParser(prog="firesmoke", description="Fire and smoke detection toolkit")
    parser.add_argument("--version", action="version", version=f"firesmoke {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="extract frames from videos and write manifests")
    p.add_argument("inputs", nargs="+", help="video files or directories of videos")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic transparent fire/smoke set")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a detector on a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="run inference and report AP, mAP and avg BI")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="attention on/off comparison over seeds")
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bi", parents=[common], help="average burning intensity of a detection store")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.set_defaults(func=cmd_bi)

    p = sub.add_parser("cam", parents=[common], help="class activation heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--overlay", action="store_true", help="also write a colour overlay on the input")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("stats", parents=[common], help="parameter and mult-add counts")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("cfg:")}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = RunConfig.build(file_values, overrides, args.seed)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"firesmoke: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FireSmokeError, OSError) as exc:
        print(f"firesmoke: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
