"""``mcdet`` command line: generate-data, train, eval, compare, export-plots.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evaluation, plots
from .data import DatasetFormatError, GeneratorConfig, SceneGenerationError, generate_dataset
from .model import CheckpointError, load_checkpoint
from .train import (
    ConfigMismatch,
    TrainConfig,
    TrainData,
    TrainingAborted,
    check_comparable,
    compare,
    evaluate,
    read_runlog,
    run,
)

log = logging.getLogger("mcdet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration -------------------------------------------------------------


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def parse_value(text: str):
    """TOML scalar/array syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {item!r}")
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = parse_value(value.strip())
    return d


def build_configs(d: dict) -> tuple[TrainConfig, GeneratorConfig]:
    d = dict(d)
    data = dict(d.pop("data", {}) or {})
    known = {f.name for f in dataclasses.fields(GeneratorConfig)}
    bad = sorted(set(data) - known)
    if bad:
        raise UsageError(f"unknown config keys: {['data.' + k for k in bad]}")
    if d.get("force_threshold") == "none":
        d["force_threshold"] = None
    try:
        train_cfg = TrainConfig.from_dict(d)
        gen_cfg = GeneratorConfig(**data)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return train_cfg, gen_cfg


def effective_config(args) -> tuple[TrainConfig, GeneratorConfig, dict]:
    d = load_config_file(args.config) if args.config else {}
    d = apply_overrides(d, args.override)
    if args.seed is not None:
        d["seed"] = args.seed
    train_cfg, gen_cfg = build_configs(d)
    block = {**train_cfg.to_dict(), "data": gen_cfg.to_dict()}
    return train_cfg, gen_cfg, block


def print_block(block: dict, out_dir: Path | None) -> None:
    text = json.dumps(block, indent=2, sort_keys=True)
    print("# effective config")
    print(text)
    print("# end effective config", flush=True)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.json").write_text(text + "\n")


# -- dataset helpers -----------------------------------------------------------


def _split_dir(root: Path, split: str) -> Path | None:
    if (root / split / "annotations.json").is_file():
        return root / split
    return None


def load_split(root, split: str, required: bool = True) -> TrainData | None:
    root = Path(root)
    if not root.exists():
        raise UsageError(f"dataset path does not exist: {root}")
    path = _split_dir(root, split)
    if path is None:
        if required:
            raise UsageError(f"dataset {root} has no '{split}' split")
        return None
    return TrainData.load(path)


def load_eval_split(path, split: str | None) -> TrainData:
    """``path`` may be a split directory or a dataset root."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset path does not exist: {path}")
    if split is None and (path / "annotations.json").is_file():
        return TrainData.load(path)
    return load_split(path, split or "test")


# -- subcommands ----------------------------------------------------------------


def cmd_generate_data(args) -> int:
    _, gen_cfg, block = effective_config(args)
    out = Path(args.out)
    print_block(block, None)
    manifest = generate_dataset(gen_cfg, block["seed"], out)
    (out / "effective_config.json").write_text(json.dumps(block, indent=2, sort_keys=True) + "\n")
    counts = manifest["counts"]
    print(f"wrote {out}: train={counts['train']} val={counts['val']} test={counts['test']} "
          f"config_hash={manifest['config_hash']}")
    return 0


def epoch_line(entry: dict) -> str:
    thr = entry["threshold"]
    total = entry["total"]
    parts = [
        f"epoch {entry['epoch'] + 1:>4}",
        f"loss {total:.4f}" if total is not None else "loss -",
        f"gated {100.0 * entry['gated_fraction']:5.1f}%",
        f"N(t) {thr:.4f}" if thr is not None else "N(t) -",
        f"lr {entry['lr']:.6f}",
        f"size {entry.get('input_size', '-')}",
    ]
    if "val" in entry:
        ap = entry["val"].get("ap50")
        parts.append(f"val AP50 {ap:.4f}" if ap is not None else "val AP50 -")
    return "  ".join(parts)


def _progress(entry: dict) -> None:
    print(epoch_line(entry), flush=True)


def cmd_train(args) -> int:
    train_cfg, _, block = effective_config(args)
    train = load_split(args.dataset, "train")
    val = load_split(args.dataset, "val", required=False)
    test = load_split(args.dataset, "test", required=False)
    out = Path(args.out)
    print_block(block, out)
    result = run(train_cfg, train, val, out, len(train.class_names) or None, progress=_progress)
    if test is not None and len(test):
        report = evaluate(result.detector, test, train_cfg)
        report.write_json(out / "test_report.json")
        report.write_per_class_csv(out / "test_per_class.csv", test.class_names)
        print(_report_line("test", report))
    print(f"wrote {out / 'final.mcdet'} and {out / 'runlog.jsonl'}")
    return 0


def _report_line(label: str, report: evaluation.APReport) -> str:
    def fmt(v):
        return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"

    return f"{label}: " + "  ".join(f"{k} {fmt(v)}" for k, v in report.metrics().items())


def parse_thresholds(text: str | None):
    if text is None:
        return evaluation.COCO_IOU_THRESHOLDS
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"--iou-thresholds: {exc}") from exc
    if not values or not all(0.0 < v <= 1.0 for v in values):
        raise UsageError("--iou-thresholds needs comma-separated values in (0, 1]")
    return values


def cmd_eval(args) -> int:
    train_cfg, _, block = effective_config(args)
    if args.conf_threshold is not None:
        train_cfg = dataclasses.replace(train_cfg, conf_threshold=args.conf_threshold)
    if args.nms_iou is not None:
        train_cfg = dataclasses.replace(train_cfg, nms_iou=args.nms_iou)
    block.update(conf_threshold=train_cfg.conf_threshold, nms_iou=train_cfg.nms_iou)
    thresholds = parse_thresholds(args.iou_thresholds)
    block["iou_thresholds"] = list(thresholds)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    detector, header = load_checkpoint(ckpt)
    _check_checkpoint_matches(detector, header, train_cfg, args, ckpt)
    data = load_eval_split(args.dataset, args.split)
    if data.class_names and len(data.class_names) != detector.config.num_classes:
        raise ConfigMismatch(
            f"dataset has {len(data.class_names)} classes but checkpoint was trained for {detector.config.num_classes}")
    out = Path(args.out)
    print_block(block, out)
    report = evaluate(detector, data, train_cfg, thresholds)
    report.write_json(out / "report.json")
    report.write_per_class_csv(out / "per_class.csv", data.class_names)
    print(_report_line("eval", report))
    return 0


def _check_checkpoint_matches(detector, header, train_cfg, args, ckpt: Path) -> None:
    run_meta = ckpt.parent / "run.json"
    if run_meta.is_file():
        meta = json.loads(run_meta.read_text())
        stored = meta.get("detector_config_hash")
        if stored is not None and stored != header["config_hash"]:
            raise ConfigMismatch(f"{ckpt}: checkpoint config hash {header['config_hash']} "
                                 f"differs from the run's recorded {stored}")
    if args.config or args.override:
        m, c = train_cfg.model, detector.config
        want = (m.input_size, tuple(m.channel_widths), m.anchors_per_scale, tuple(m.strides))
        have = (c.input_size, tuple(c.channel_widths), c.anchors_per_scale, tuple(c.strides))
        if want != have:
            raise ConfigMismatch(f"{ckpt}: model settings {have} do not match the given config {want}")


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds must list at least one integer")
    return seeds


def cmd_compare(args) -> int:
    train_cfg, _, block = effective_config(args)
    baseline = dataclasses.replace(train_cfg, mc_enabled=False, force_threshold=None)
    mc = dataclasses.replace(train_cfg, mc_enabled=True)
    if args.baseline_epochs is not None:
        baseline = dataclasses.replace(baseline, epochs=args.baseline_epochs)
    seeds = parse_seeds(args.seeds) if args.seeds else [train_cfg.seed]
    block.update(seeds=seeds, baseline_epochs=baseline.epochs, equal_epoch_mode=args.equal_epoch_mode)
    train = load_split(args.dataset, "train")
    val = load_split(args.dataset, "val", required=False)
    test = load_split(args.dataset, "test")
    out = Path(args.out)
    print_block(block, out)
    result = compare(baseline, mc, train, test, seeds, val, out, args.equal_epoch_mode, progress=_progress)
    print(result.table("mc"))
    if result.equal_epoch:
        print("equal-epoch comparison:")
        print(result.table("equal"))
    return 0


# -- export-plots ----------------------------------------------------------------


def _load_run(path: Path) -> dict:
    if not (path / "runlog.jsonl").is_file() or not (path / "run.json").is_file():
        raise UsageError(f"{path} is not a run directory (needs runlog.jsonl and run.json)")
    meta = json.loads((path / "run.json").read_text())
    report = None
    if (path / "test_report.json").is_file():
        report = evaluation.APReport.from_dict(json.loads((path / "test_report.json").read_text()))
    return {"name": path.name, "log": read_runlog(path / "runlog.jsonl"), "config": TrainConfig.from_dict(meta["config"]),
            "meta": meta, "report": report}


def _expand_runs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "runlog.jsonl").is_file():
            out.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / "runlog.jsonl").is_file())
            if not subs:
                raise UsageError(f"no run directories under {p}")
            out.extend(subs)
        else:
            raise UsageError(f"run directory not found: {p}")
    return out


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _class_deltas(runs: list[dict]) -> tuple[list[int], list[float]] | None:
    """Mean per-class AP50:95 of mc runs minus baseline runs (or second minus first)."""
    with_reports = [r for r in runs if r["report"] is not None]
    if len(with_reports) < 2:
        return None
    base = [r for r in with_reports if not r["config"].mc_enabled]
    mc = [r for r in with_reports if r["config"].mc_enabled]
    if not base or not mc:
        if len(with_reports) != 2:
            return None
        base, mc = [with_reports[0]], [with_reports[1]]
    for r in mc:
        check_comparable(base[0]["config"], r["config"])
    for r in base[1:]:
        check_comparable(base[0]["config"], r["config"])
    classes = sorted(base[0]["report"].per_class)
    for r in base + mc:
        if sorted(r["report"].per_class) != classes:
            raise ConfigMismatch(f"run {r['name']} reports a different class set")

    def mean(group, k):
        vals = [r["report"].per_class[k] for r in group if not math.isnan(r["report"].per_class[k])]
        return math.fsum(vals) / len(vals) if vals else math.nan

    return classes, [mean(mc, k) - mean(base, k) for k in classes]


def cmd_export_plots(args) -> int:
    runs = [_load_run(p) for p in _expand_runs(args.runs)]
    seen: dict[str, int] = {}
    for r in runs:
        n = seen[r["name"]] = seen.get(r["name"], 0) + 1
        if n > 1:
            r["name"] = f"{r['name']}#{n}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    block = {"runs": [r["name"] for r in runs]}
    print_block(block, out)
    loss_rows, gated_rows, thr_rows = [], [], []
    loss_series, gated_series, thr_series = {}, {}, {}
    for r in runs:
        name, entries = r["name"], [e for e in r["log"] if e.get("total") is not None]
        for e in r["log"]:
            if e.get("total") is not None:
                loss_rows.append([name, e["epoch"], e["total"], e["classification"], e["regression"], e["objectness"]])
            gated_rows.append([name, e["epoch"], e["gated_fraction"]])
            thr_rows.append([name, e["epoch"], "" if e["threshold"] is None else e["threshold"]])
        loss_series[name] = {k: [e[k] for e in entries] for k in ("epoch", "total", "classification", "regression", "objectness")}
        gated_series[name] = ([e["epoch"] for e in r["log"]], [e["gated_fraction"] for e in r["log"]])
        thr_series[name] = ([e["epoch"] for e in r["log"]], [e["threshold"] for e in r["log"]])
    _write_rows(out / "loss_curves.csv", ["run", "epoch", "total", "classification", "regression", "objectness"], loss_rows)
    _write_rows(out / "gated_fraction.csv", ["run", "epoch", "gated_fraction"], gated_rows)
    _write_rows(out / "threshold.csv", ["run", "epoch", "threshold"], thr_rows)
    written = ["loss_curves.csv", "gated_fraction.csv", "threshold.csv"]
    plots.loss_curves(loss_series, out / "loss_curves.png")
    plots.epoch_curve(gated_series, out / "gated_fraction.png", "gated fraction", "gated matches per epoch")
    plots.epoch_curve(thr_series, out / "threshold.png", "N(t)", "gating threshold")
    written += ["loss_curves.png", "gated_fraction.png", "threshold.png"]
    deltas = _class_deltas(runs)
    if deltas is not None:
        classes, values = deltas
        names = _class_names_for(runs, classes)
        _write_rows(out / "per_class_delta.csv", ["class_id", "class_name", "delta_ap50_95"],
                    [[k, n, "" if math.isnan(v) else f"{v:.6f}"] for k, n, v in zip(classes, names, values)])
        plots.per_class_delta(names, [0.0 if math.isnan(v) else v for v in values], out / "per_class_delta.png")
        written += ["per_class_delta.csv", "per_class_delta.png"]
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _class_names_for(runs, classes) -> list[str]:
    names = runs[0]["meta"].get("class_names") or []
    return [names[k] if k < len(names) else str(k) for k in classes]


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcdet", description="Desk-scale detector training with threshold-gated classification loss.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, dataset=True):
        p.add_argument("--config", help="TOML (or JSON) file of config keys")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config key, e.g. model.channel_widths=[8,16,32,64,64,128,128]; repeatable")
        p.add_argument("--seed", type=int, help="master seed for every random stream")
        p.add_argument("--out", required=True, help="output directory")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset root written by generate-data")

    common(sub.add_parser("generate-data", help="write the synthetic train/val/test splits"), dataset=False)
    common(sub.add_parser("train", help="train one detector"))
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split to evaluate when --dataset is a dataset root (default test)")
    p.add_argument("--iou-thresholds", help="comma-separated IoU thresholds (default 0.50:0.05:0.95)")
    p.add_argument("--conf-threshold", type=float)
    p.add_argument("--nms-iou", type=float)
    p = sub.add_parser("compare", help="baseline versus gated training over several seeds")
    common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--baseline-epochs", type=int, help="train the baseline arm for this many epochs")
    p.add_argument("--equal-epoch-mode", choices=("truncate", "rescale"), default="truncate")
    p = sub.add_parser("export-plots", help="CSV series and PNG figures from run directories")
    p.add_argument("--runs", nargs="+", required=True, help="run directories (or directories holding runs)")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mcdet: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigMismatch, CheckpointError, DatasetFormatError) as exc:
        print(f"mcdet: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, SceneGenerationError, FloatingPointError, OSError) as exc:
        print(f"mcdet: aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
