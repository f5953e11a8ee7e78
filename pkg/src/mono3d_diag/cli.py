"""
Command-line front end.

Subcommands: eval, range-eval, diagnose, loc-error, stats, loss-check.

Exit codes: 0 success, 1 configuration error, 2 some per-image files failed
to parse (the rest are still evaluated), 3 a loss property check failed.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import diagnosis, gradcheck, reports
from .diagnosis import attach_raw_outputs
from .evaluation import (
    DEFAULT_IOU_THRESHOLD,
    Difficulty,
    EvalConfig,
    Task,
    ap40,
    rangewise_eval,
)
from .kitti_io import Category, KittiParseError, parse_calib_file, parse_label_file, parse_raw_outputs
from .losses import SampleWeightParams, WeightScheme, sample_weight

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_PROPERTY = 0, 1, 2, 3
JOBS_ENV = "MONO3D_DIAG_JOBS"

EVAL_COLUMNS = ["task", "category", "difficulty", "iou_threshold", "bucket", "ap40",
                "num_gt", "num_pred", "num_ignored", "num_tp", "num_fp", "flag"]


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    gt_dir: Path | None = None
    pred_dir: Path | None = None
    calib_dir: Path | None = None
    raw_outputs_dir: Path | None = None
    categories: list[str] = field(default_factory=lambda: ["Car"])
    tasks: list[str] = field(default_factory=lambda: ["3d", "bev", "2d", "aos"])
    thresholds: list[float] = field(default_factory=list)
    difficulties: list[str] = field(default_factory=lambda: ["easy", "moderate", "hard"])
    range_interval: float = 10.0
    weight_scheme: SampleWeightParams = field(default_factory=SampleWeightParams)
    output_dir: Path | None = None
    format: str = "both"
    jobs: int | None = None
    bucket_first: bool = False
    seed: int = 0
    trials: int = 1000

    def eval_configs(self) -> list[EvalConfig]:
        out = []
        for task, cat, diff in itertools.product(self.tasks, self.categories, self.difficulties):
            thresholds = self.thresholds or [DEFAULT_IOU_THRESHOLD.get(Category(cat), 0.5)]
            for thr in thresholds:
                out.append(EvalConfig(Task(task), Category(cat), thr, Difficulty(diff),
                                      bucket_first=self.bucket_first))
        return out


_PATH_KEYS = {"gt_dir", "pred_dir", "calib_dir", "raw_outputs_dir", "output_dir"}


def load_config_file(path: Path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data = dict(data.get("run", data))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in _PATH_KEYS & set(data):
        p = Path(data[key])
        data[key] = p if p.is_absolute() else (path.parent / p)
    if "weight_scheme" in data:
        data["weight_scheme"] = SampleWeightParams(**data["weight_scheme"])
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(Path(args.config)))
    flag_map = {
        "gt": "gt_dir", "pred": "pred_dir", "calib": "calib_dir", "raw": "raw_outputs_dir",
        "out": "output_dir", "format": "format", "jobs": "jobs", "interval": "range_interval",
        "category": "categories", "difficulty": "difficulties", "threshold": "thresholds",
        "task": "tasks", "seed": "seed", "trials": "trials",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = Path(value) if key in _PATH_KEYS else value
    if getattr(args, "bucket_first", False):
        values["bucket_first"] = True
    if getattr(args, "weight", None):
        scheme, *params = args.weight.split(":")
        nums = [float(p) for p in params]
        if scheme == "hard":
            values["weight_scheme"] = SampleWeightParams(WeightScheme.HARD, *(nums[:1]))
        else:
            center, temp = (nums + [60.0, 1.0][len(nums):])[:2]
            values["weight_scheme"] = SampleWeightParams(WeightScheme.SOFT, center=center, temperature=temp)
    try:
        cfg = RunConfig(**values)
        cfg.eval_configs()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.format not in ("csv", "json", "both"):
        raise ConfigError(f"unknown format {cfg.format!r}")
    return cfg


def resolve_jobs(cfg: RunConfig) -> int:
    if cfg.jobs is not None:
        jobs = cfg.jobs
    elif os.environ.get(JOBS_ENV):
        try:
            jobs = int(os.environ[JOBS_ENV])
        except ValueError:
            raise ConfigError(f"{JOBS_ENV} must be an integer") from None
    else:
        jobs = os.cpu_count() or 1
    if jobs < 1:
        raise ConfigError("jobs must be at least 1")
    return jobs


def _pmap(fn, items: Sequence, jobs: int) -> list:
    """Order-preserving map, in worker processes when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# data loading


@dataclass
class Dataset:
    gts: dict
    preds: dict
    raws: dict
    calibs: dict
    failures: list


def _require_dir(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not Path(path).is_dir():
        raise ConfigError(f"{what} directory not found: {path}")
    return Path(path)


def _load_frame(job):
    stem, gt_path, calib_path, pred_path, raw_path = job
    try:
        gts = parse_label_file(gt_path.read_bytes())
        calib = parse_calib_file(calib_path.read_bytes())
        preds = parse_label_file(pred_path.read_bytes()) if pred_path and pred_path.exists() else []
        raws = parse_raw_outputs(raw_path.read_bytes()) if raw_path and raw_path.exists() else None
        if raws is not None and len(raws) != len(preds):
            raise KittiParseError(f"{len(preds)} predictions but {len(raws)} raw-output records")
    except (KittiParseError, OSError) as exc:
        return stem, None, f"{stem}: {exc}"
    return stem, (gts, preds, raws, calib), None


def load_dataset(cfg: RunConfig, jobs: int, need_pred: bool = True) -> Dataset:
    gt_dir = _require_dir(cfg.gt_dir, "gt")
    calib_dir = _require_dir(cfg.calib_dir, "calib")
    pred_dir = _require_dir(cfg.pred_dir, "pred") if need_pred or cfg.pred_dir else None
    raw_dir = _require_dir(cfg.raw_outputs_dir, "raw") if cfg.raw_outputs_dir else None
    gt_stems = {p.stem for p in gt_dir.glob("*.txt")}
    calib_stems = {p.stem for p in calib_dir.glob("*.txt")}
    stems = sorted(gt_stems & calib_stems)
    if not stems:
        raise ConfigError("no image stems shared by the ground-truth and calibration directories")
    jobs_list = [
        (s, gt_dir / f"{s}.txt", calib_dir / f"{s}.txt",
         pred_dir / f"{s}.txt" if pred_dir else None,
         raw_dir / f"{s}.json" if raw_dir else None)
        for s in stems
    ]
    data = Dataset({}, {}, {}, {}, [])
    for stem, frame, err in _pmap(_load_frame, jobs_list, jobs):
        if err:
            data.failures.append(err)
            continue
        gts, preds, raws, calib = frame
        data.gts[stem], data.preds[stem], data.raws[stem], data.calibs[stem] = gts, preds, raws, calib
    return data


def _report_failures(data: Dataset) -> int:
    for msg in data.failures:
        print(f"parse failure: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if data.failures else EXIT_OK


def _result_row(res, bucket="all") -> dict:
    c = res.config
    return {
        "task": c.task.value, "category": c.category.value, "difficulty": c.difficulty.value,
        "iou_threshold": c.iou_threshold, "bucket": bucket, "ap40": res.ap40, "num_gt": res.num_gt,
        "num_pred": res.num_pred, "num_ignored": res.num_ignored, "num_tp": res.num_tp,
        "num_fp": res.num_fp, "flag": res.flag,
    }


# ---------------------------------------------------------------------------
# subcommands


def _eval_one(job):
    gts, preds, config = job
    return _result_row(ap40(gts, preds, config))


def cmd_eval(cfg: RunConfig) -> int:
    jobs = resolve_jobs(cfg)
    data = load_dataset(cfg, jobs)
    configs = cfg.eval_configs()
    rows = _pmap(_eval_one, [(data.gts, data.preds, c) for c in configs], jobs)
    print(reports.format_table(
        [(r["task"], r["category"], r["difficulty"], r["iou_threshold"], f"{r['ap40']:.2f}") for r in rows],
        ["task", "category", "difficulty", "iou", "AP40"]))
    if cfg.output_dir:
        reports.write_report(cfg.output_dir, "eval", rows, EVAL_COLUMNS, cfg.format,
                             {"frames": len(data.gts), "failures": data.failures})
    return _report_failures(data)


def _range_one(job):
    gts, preds, config, interval = job
    return [_result_row(res, center) for center, res in rangewise_eval(gts, preds, config, interval)]


def cmd_range_eval(cfg: RunConfig) -> int:
    jobs = resolve_jobs(cfg)
    data = load_dataset(cfg, jobs)
    configs = cfg.eval_configs()
    blocks = _pmap(_range_one, [(data.gts, data.preds, c, cfg.range_interval) for c in configs], jobs)
    rows = [r for block in blocks for r in block]
    print(reports.format_table(
        [(r["task"], r["category"], r["difficulty"], r["bucket"], f"{r['ap40']:.2f}", r["num_gt"]) for r in rows],
        ["task", "category", "difficulty", "bucket", "AP40", "gt"]))
    if cfg.output_dir:
        meta = {
            "interval": cfg.range_interval,
            "bucket_bounds": "half-open [center - interval/2, center + interval/2)",
            "out_of_bucket_gt": "excluded" if cfg.bucket_first else "ignored",
            "order": "bucket-then-difficulty" if cfg.bucket_first else "difficulty-then-bucket",
            "failures": data.failures,
        }
        reports.write_report(cfg.output_dir, "range_eval", rows, EVAL_COLUMNS, cfg.format, meta)
        series = []
        for block in blocks:
            if block:
                head = block[0]
                name = f"{head['task']} {head['category']} {head['difficulty']} iou={head['iou_threshold']}"
                series.append((name, [(r["bucket"], r["ap40"] if r["flag"] is None else None) for r in block]))
        reports.write_series(Path(cfg.output_dir) / "range_eval.dat", series)
    return _report_failures(data)


def cmd_diagnose(cfg: RunConfig) -> int:
    jobs = resolve_jobs(cfg)
    data = load_dataset(cfg, jobs)
    config = cfg.eval_configs()[0]
    if config.task is not Task.DETECT_3D:
        config = replace(config, task=Task.DETECT_3D)
    dets = {fid: attach_raw_outputs(data.preds[fid], data.raws[fid]) for fid in data.gts}
    try:
        report = diagnosis.run_table1(dets, data.gts, data.calibs, config)
    except diagnosis.SubstitutionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    degraded = report.degraded
    print(reports.format_table([(k, f"{v:.2f}") for k, v in report.grid.items()], ["setting", "AP40"]))
    if degraded:
        print("note: no raw head outputs; projected centers derived from predicted 3D locations (Degraded)")
    if cfg.output_dir:
        rows = [{"setting": k, "ap40": v} for k, v in report.grid.items()]
        meta = dict(report.metadata, degraded=degraded, failures=data.failures)
        reports.write_report(cfg.output_dir, "table1", rows, ["setting", "ap40"], cfg.format, meta)
    return _report_failures(data)


def _parse_shift(text: str) -> tuple[float, float]:
    try:
        du, dv = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shift must be 'du,dv', got {text!r}") from None
    return du, dv


def cmd_loc_error(args: argparse.Namespace) -> int:
    shifts = args.shift or list(diagnosis.TABLE3_SHIFTS)
    depths = args.depth or list(diagnosis.TABLE3_DEPTHS)
    if args.focal <= 0 or any(z <= 0 for z in depths):
        print("error: focal length and depths must be positive", file=sys.stderr)
        return EXIT_CONFIG
    table = diagnosis.loc_error_table(shifts, depths, args.focal)
    header = ["du", "dv"] + [f"{z:g}m" for z in depths]
    print(reports.format_table(
        [[f"{du:g}", f"{dv:g}"] + [f"{v:.2f}" for v in row] for (du, dv), row in zip(shifts, table)], header))
    if args.out:
        rows = [dict({"du": du, "dv": dv}, **{f"{z:g}m": v for z, v in zip(depths, row)})
                for (du, dv), row in zip(shifts, table)]
        reports.write_report(Path(args.out), "loc_error", rows, header, args.format or "both",
                             {"focal": args.focal, "unit": "meter"})
    return EXIT_OK


def cmd_stats(cfg: RunConfig) -> int:
    jobs = resolve_jobs(cfg)
    data = load_dataset(cfg, jobs, need_pred=False)
    interval = cfg.range_interval
    mis = diagnosis.misalignment_stats(data.gts, data.calibs, interval)
    has_preds = any(data.preds.values())
    depth = diagnosis.depth_error_stats(data.preds, data.gts, interval) if has_preds else None

    weights = [sample_weight(lab.depth, cfg.weight_scheme)
               for frame in data.gts.values() for lab in frame if not lab.is_dontcare]
    print(reports.format_table(
        [(f"{b.bucket_center:g}", b.count, "-" if b.mean_abs_error is None else f"{b.mean_abs_error:.2f}",
          "-" if b.std is None else f"{b.std:.2f}") for b in mis],
        ["depth", "count", "misalign_px", "std"]))
    if depth is not None:
        print()
        print(reports.format_table(
            [(f"{b.bucket_center:g}", b.count, "-" if b.mean_abs_error is None else f"{b.mean_abs_error:.2f}",
              "-" if b.std is None else f"{b.std:.2f}") for b in depth],
            ["depth", "count", "depth_err_m", "std"]))
    print(f"\nsample weights ({cfg.weight_scheme.scheme.value}): {sum(weights):.2f} effective of {len(weights)}")

    if cfg.output_dir:
        out = Path(cfg.output_dir)
        cols = ["bucket_center", "count", "mean_abs_error", "std"]
        reports.write_report(out, "misalignment", [asdict(b) for b in mis], cols, cfg.format,
                             {"unit": "pixel", "reference_point": "volumetric", "skipped": mis.skipped})
        series = [("misalignment_px", [(b.bucket_center, b.mean_abs_error) for b in mis])]
        if depth is not None:
            reports.write_report(out, "depth_error", [asdict(b) for b in depth], cols, cfg.format, {"unit": "meter"})
            series.append(("depth_error_m", [(b.bucket_center, b.mean_abs_error) for b in depth]))
        reports.write_series(out / "stats.dat", series)
        ws = cfg.weight_scheme
        reports.write_report(out, "sample_weights",
                             [{"objects": len(weights), "effective": sum(weights)}],
                             ["objects", "effective"], cfg.format,
                             {"scheme": ws.scheme.value, "threshold": ws.threshold, "center": ws.center,
                              "temperature": ws.temperature})
    return _report_failures(data)


def cmd_loss_check(args: argparse.Namespace) -> int:
    if args.trials < 1:
        print("error: --trials must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    results = gradcheck.run_all(args.seed, args.trials, corrupt=args.corrupt_gradient)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}: worst={r.worst:.3e} (tol {r.tolerance:.0e}, {r.trials} trials)")
    failed = [r for r in results if not r.passed]
    for r in failed:
        err, inputs = max(r.failures, key=lambda f: f[0])
        print(f"failing case for {r.name}: error={err:.3e} inputs={inputs!r}", file=sys.stderr)
    return EXIT_PROPERTY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration; flags override it")
    p.add_argument("--gt", help="ground-truth label directory")
    p.add_argument("--pred", help="prediction directory (KITTI format, 16 fields)")
    p.add_argument("--calib", help="calibration directory")
    p.add_argument("--raw", help="raw head-output JSON directory")
    p.add_argument("--out", help="report output directory")
    p.add_argument("--format", choices=["csv", "json", "both"])
    p.add_argument("--jobs", type=int, help=f"worker processes (default: ${JOBS_ENV} or CPU count)")
    p.add_argument("--interval", type=float, help="depth bucket width in meters")
    p.add_argument("--category", action="append", choices=[c.value for c in Category])
    p.add_argument("--difficulty", action="append", choices=[d.value for d in Difficulty])
    p.add_argument("--threshold", action="append", type=float)
    p.add_argument("--task", action="append", choices=[t.value for t in Task])
    p.add_argument("--bucket-first", action="store_true",
                   help="range-eval: drop out-of-bucket ground truths instead of ignoring them")
    p.add_argument("--weight", help="stats: sample weighting, 'hard:S' or 'soft:C:T'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mono3d-diag", description="Localization-error diagnostics for monocular 3D detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [
        ("eval", "AP40 / AOS grid over tasks, difficulties and thresholds"),
        ("range-eval", "AP40 per depth bucket"),
        ("diagnose", "ground-truth substitution error analysis"),
        ("stats", "center misalignment and depth error per depth bucket"),
    ]:
        _data_flags(sub.add_parser(name, help=help_))
    loc = sub.add_parser("loc-error", help="localization error caused by image-plane center shifts")
    loc.add_argument("--focal", type=float, default=diagnosis.DEFAULT_FOCAL)
    loc.add_argument("--shift", action="append", type=_parse_shift, help="'du,dv' in pixels (repeatable)")
    loc.add_argument("--depth", action="append", type=float, help="depth in meters (repeatable)")
    loc.add_argument("--out")
    loc.add_argument("--format", choices=["csv", "json", "both"])
    chk = sub.add_parser("loss-check", help="finite-difference and identity checks of the losses")
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--trials", type=int, default=1000)
    chk.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


_CONFIG_COMMANDS = {
    "eval": cmd_eval,
    "range-eval": cmd_range_eval,
    "diagnose": cmd_diagnose,
    "stats": cmd_stats,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "loc-error":
        return cmd_loc_error(args)
    if args.command == "loss-check":
        return cmd_loss_check(args)
    try:
        cfg = build_config(args)
        return _CONFIG_COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
