"""Command-line entry point: ``c2ftcn <command> [flags]``.

Exit codes: 0 success, 1 self-check failed, 2 usage error, 3 missing file,
4 configuration error, 5 malformed input file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import selfcheck
from .data import (FormatError, SyntheticSpec, load_dataset, load_labels, load_mapping, load_split, make_synthetic,
                   save_dataset)
from .metrics import calibration_curve, to_segments
from .model import C2FTCN, CheckpointError, load_checkpoint, save_checkpoint
from .trainer import (TrainConfig, evaluate, fit, per_layer_reports, recognition_accuracy, train_recognition)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_FORMAT = 5

GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("c2ftcn")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config files

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(v) for v in raw.replace(",", " ").split())
        if name == "subsets":
            if raw.lower() == "none":
                return None
            return tuple(tuple(int(v) for v in grp.replace(",", " ").split()) for grp in raw.split(";"))
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def apply_settings(obj, settings: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``settings`` coerced to field types."""
    fields = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(settings) - fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {k: _coerce(k, v, getattr(obj, k)) for k, v in settings.items()}
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def format_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple) and v and isinstance(v[0], tuple):
            v = ";".join(",".join(str(x) for x in grp) for grp in v)
        elif isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(base, args, fallback: Path | None = None):
    """Config file (or ``fallback`` if present), then ``--set`` overrides, then ``--seed``."""
    settings = {}
    path = Path(args.config) if args.config else fallback
    if path is not None and (args.config or path.exists()):
        settings.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    settings.update(_parse_overrides(args.set))
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    return apply_settings(base, settings)


# ------------------------------------------------------------------ outputs

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "seed": getattr(cfg, "seed", None),
        "config": json.loads(json.dumps(dataclasses.asdict(cfg))),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write(path: Path, text: str, artifacts: list[Path]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    artifacts.append(path)


def _metric_lines(metrics: dict[str, float]) -> str:
    return "".join(f"{k} {v:.6f}\n" for k, v in metrics.items())


def _load_data(args):
    if not args.data:
        raise ConfigError("--data is required for this command")
    ids = load_split(args.split) if args.split else None
    return load_dataset(args.data, ids)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    return Path(args.checkpoint)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    spec = resolve_config(SyntheticSpec(), args)
    out = _out_dir(args)
    ds = make_synthetic(spec)
    save_dataset(ds, out)
    artifacts = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    write_manifest(out, "synth", spec, artifacts)
    print(f"wrote {len(ds.videos)} videos to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_data(args)
    cfg = resolve_config(TrainConfig(), args)
    if args.no_test_augment:
        cfg = dataclasses.replace(cfg, test_augment=False)
    out = _out_dir(args)
    artifacts: list[Path] = []
    _write(out / "config.txt", format_config(cfg), artifacts)

    eval_rows = []

    def monitor(epoch, model):
        report = evaluate(model, ds, dataclasses.replace(cfg, test_augment=False))
        eval_rows.append((epoch, report.metrics))
        log.info("epoch %d train mof %.2f edit %.2f", epoch, report.metrics["mof"], report.metrics["edit"])
        return False

    def progress(epoch, stats):
        log.info("epoch %d loss %.5f", epoch, stats["total"])

    res = fit(ds, cfg, stop=monitor if cfg.eval_every else None, on_epoch=progress)
    lines = ["epoch\tce\ttr\tal\ttotal\n"]
    lines += [f"{h['epoch']}\t{h['ce']!r}\t{h['tr']!r}\t{h['al']!r}\t{h['total']!r}\n" for h in res.history]
    _write(out / "loss_log.tsv", "".join(lines), artifacts)
    if eval_rows:
        keys = list(eval_rows[0][1])
        rows = ["epoch\t" + "\t".join(keys) + "\n"]
        rows += [f"{e}\t" + "\t".join(f"{m[k]:.6f}" for k in keys) + "\n" for e, m in eval_rows]
        _write(out / "eval_log.tsv", "".join(rows), artifacts)
    if cfg.recognition_epochs:
        history = train_recognition(res.model, ds, dataclasses.replace(cfg, epochs=cfg.recognition_epochs))
        _write(out / "recognition_log.tsv",
               "epoch\tloss\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(history, 1)), artifacts)
    save_checkpoint(res.model, out / "model.ckpt")
    artifacts.append(out / "model.ckpt")
    if res.state.skipped:
        print(f"warning: {res.state.skipped} optimizer steps skipped on non-finite gradients", file=sys.stderr)
    write_manifest(out, "train", cfg, artifacts)
    print(f"final loss {res.history[-1]['total']:.6f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _model_and_config(args) -> tuple[C2FTCN, TrainConfig]:
    ckpt = _checkpoint(args)
    model = load_checkpoint(ckpt)
    cfg = resolve_config(TrainConfig(), args, fallback=ckpt.parent / "config.txt")
    if args.no_test_augment:
        cfg = dataclasses.replace(cfg, test_augment=False)
    return model, cfg


def _segment_dump(pred, names) -> str:
    return "".join(f"{s.start} {s.end} {names[s.label]}\n" for s in to_segments(pred.tolist()))


def _calibration_table(bins) -> str:
    rows = ["lower\tupper\tcount\taccuracy\tmean_confidence\tacc_minus_mid\tempty\n"]
    for b in bins:
        diff = b.accuracy - b.midpoint if not b.empty else float("nan")
        rows.append(f"{b.lower:.4f}\t{b.upper:.4f}\t{b.count}\t{b.accuracy:.6f}\t{b.mean_confidence:.6f}"
                    f"\t{diff:.6f}\t{int(b.empty)}\n")
    return "".join(rows)


def cmd_eval(args) -> int:
    ds = _load_data(args)
    model, cfg = _model_and_config(args)
    out = _out_dir(args)
    artifacts: list[Path] = []
    if args.per_layer:
        reports = per_layer_reports(model, ds, cfg)
        report = reports["ensemble"]
        keys = list(report.metrics)
        rows = ["layer\t" + "\t".join(keys) + "\n"]
        rows += [f"{name}\t" + "\t".join(f"{r.metrics[k]:.6f}" for k in keys) + "\n" for name, r in reports.items()]
        _write(out / "per_layer.tsv", "".join(rows), artifacts)
    else:
        report = evaluate(model, ds, cfg)
    metrics = dict(report.metrics)
    if cfg.recognition_epochs:
        metrics["activity_accuracy"] = recognition_accuracy(model, ds, cfg)
    _write(out / "metrics.txt", _metric_lines(metrics), artifacts)
    keys = list(next(iter(report.per_video.values())))
    rows = ["video\t" + "\t".join(keys) + "\n"]
    rows += [f"{vid}\t" + "\t".join(f"{s[k]:.6f}" for k in keys) + "\n" for vid, s in report.per_video.items()]
    _write(out / "per_video.tsv", "".join(rows), artifacts)
    _write(out / "calibration.tsv", _calibration_table(report.calibration), artifacts)
    _write(out / "entropy.tsv", "entropy\n" + "".join(f"{h:.8f}\n" for h in report.entropy), artifacts)
    for vid, (pred, _) in report.predictions.items():
        _write(out / "segments" / f"{vid}.txt", _segment_dump(pred, ds.class_names), artifacts)
    write_manifest(out, "eval", cfg, artifacts)
    sys.stdout.write(_metric_lines(metrics))
    return EXIT_OK


def cmd_predict(args) -> int:
    ds = _load_data(args)
    model, cfg = _model_and_config(args)
    out = _out_dir(args)
    artifacts: list[Path] = []
    report = evaluate(model, ds, cfg)
    for vid, (pred, conf) in report.predictions.items():
        text = "".join(f"{t} {ds.class_names[k]} {c:.8f}\n" for t, (k, c) in enumerate(zip(pred, conf)))
        _write(out / "predictions" / f"{vid}.txt", text, artifacts)
    write_manifest(out, "predict", cfg, artifacts)
    print(f"wrote predictions for {len(report.predictions)} videos to {out / 'predictions'}")
    return EXIT_OK


def read_prediction_dump(path: Path, mapping: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    labels, conf = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            t, name, c = int(parts[0]), parts[1], float(parts[2])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: expected 'frame_index label confidence'") from exc
        if t != len(labels):
            raise FormatError(f"{path}:{lineno}: frame index {t}, expected {len(labels)}")
        if name not in mapping:
            raise FormatError(f"{path}:{lineno}: unknown action {name!r}")
        labels.append(mapping[name])
        conf.append(c)
    return np.asarray(labels, dtype=np.int64), np.asarray(conf)


def cmd_calibrate(args) -> int:
    if not args.predictions:
        raise ConfigError("--predictions is required for calibrate")
    if not args.data:
        raise ConfigError("--data is required for calibrate")
    cfg = resolve_config(TrainConfig(), args)
    root = Path(args.data)
    mapping = load_mapping(root / "mapping.txt")
    out = _out_dir(args)
    confs, correct = [], []
    dumps = sorted(Path(args.predictions).glob("*.txt"))
    if not dumps:
        raise FileNotFoundError(f"no prediction dumps in {args.predictions}")
    for dump in dumps:
        pred, conf = read_prediction_dump(dump, mapping)
        gt = load_labels(root / "labels" / dump.name, mapping)
        if len(gt) != len(pred):
            raise FormatError(f"{dump}: {len(pred)} frames but ground truth has {len(gt)}")
        confs.append(conf)
        correct.append(pred == gt)
    bins = calibration_curve(np.concatenate(confs), np.concatenate(correct), cfg.calibration_bins)
    artifacts: list[Path] = []
    _write(out / "calibration.tsv", _calibration_table(bins), artifacts)
    write_manifest(out, "calibrate", cfg, artifacts)
    sys.stdout.write(_calibration_table(bins))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    settings = _parse_overrides(args.set)
    allowed = {"op_trials", "model_trials", "step", "model_step", "model_entries"}
    unknown = sorted(set(settings) - allowed)
    if unknown:
        raise ConfigError(f"unknown gradcheck key(s): {', '.join(unknown)}")
    try:
        kwargs = {k: (float(v) if "step" in k else int(v)) for k, v in settings.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res = selfcheck.run_suite(seed=args.seed or 0, **kwargs)
    for name, err in res.per_check.items():
        print(f"{name}\t{res.trials[name]}\t{err:.3e}")
    ok = res.max_rel_error < GRADCHECK_TOLERANCE
    print(f"max relative error {res.max_rel_error:.3e} ({'ok' if ok else 'FAILED'}; "
          f"{res.resamples} kink resamples, {res.seconds:.1f}s)")
    if args.out:
        out = _out_dir(args)
        rows = "check\ttrials\tmax_rel_error\n" + "".join(
            f"{n}\t{res.trials[n]}\t{e!r}\n" for n, e in res.per_check.items())
        (out / "gradcheck.tsv").write_text(rows, encoding="utf-8")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset directory"),
    "train": (cmd_train, "train a segmentation model"),
    "eval": (cmd_eval, "evaluate a checkpoint and write metric reports"),
    "predict": (cmd_predict, "write per-frame label/confidence dumps"),
    "calibrate": (cmd_calibrate, "recompute calibration from prediction dumps"),
    "gradcheck": (cmd_gradcheck, "finite-difference self-check of the autodiff ops and model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2ftcn", description="Coarse-to-fine temporal action segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--checkpoint", help="model checkpoint (eval, predict)")
        p.add_argument("--split", help="file listing the video ids to use")
        p.add_argument("--predictions", help="directory of prediction dumps (calibrate)")
        p.add_argument("--per-layer", action="store_true", help="eval: also score each decoder layer alone")
        p.add_argument("--no-test-augment", action="store_true", help="single-resolution inference at w0")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CheckpointError) as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return EXIT_FORMAT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
