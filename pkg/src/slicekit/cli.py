"""Command-line entry point: ``slicekit <subcommand> ...``.

Global flags (``--config``, ``--seed``, ``--jobs``) are accepted before or after
the subcommand. Command-line values win over the config file, which wins over
module defaults. Validation failures exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import filtering, kernel_checks, metrics, phantom, predictions, prompts, report, slc, slicer
from . import volume_io as vio
from .errors import ConfigError, IoError, SlicekitError

CONFIG_KEYS = {"tau", "delta", "top_percent", "epsilon", "window", "threshold"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    window = cfg.get("window")
    if window is not None and not (isinstance(window, dict) and set(window) <= {"lo", "hi"}):
        raise ConfigError("config window must be an object with keys lo, hi")
    for key in ("delta", "top_percent"):
        if key in cfg and not isinstance(cfg[key], list):
            raise ConfigError(f"config {key} must be a list")
    return cfg


def _pick(cli_value, cfg: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    return cfg.get(key, default)


def _threshold(cli_value, cfg: dict) -> tuple[float, dict[str, float]]:
    """Global threshold plus per-organ overrides (config may map organ names to thresholds)."""
    raw = cfg.get("threshold", 0.5)
    overrides: dict[str, float] = {}
    if isinstance(raw, dict):
        overrides = {k: float(v) for k, v in raw.items() if k != "default"}
        raw = raw.get("default", 0.5)
    value = float(cli_value if cli_value is not None else raw)
    for t in [value, *overrides.values()]:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"threshold {t} outside [0, 1]")
    return value, overrides


def volume_id(path: str | Path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii", ".img"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _seg_paths(items: list[str]) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found = sorted(q for q in p.iterdir() if q.name.endswith((".nii", ".nii.gz")))
            if not found:
                raise IoError(f"no NIfTI files in {p}")
            paths.extend(found)
        else:
            paths.append(p)
    return paths


def _load_segs(items: list[str]) -> dict[str, vio.SegMap]:
    segs = {}
    for p in _seg_paths(items):
        vid = volume_id(p)
        if vid in segs:
            raise ConfigError(f"duplicate volume id {vid!r}")
        segs[vid] = vio.read_nifti(p, label=True)
    return segs


def _maybe_report(args, **sections) -> None:
    if args.report is not None:
        report.emit_report(args.report, fmt=args.format, **sections)


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args, cfg) -> int:
    vol, seg = phantom.random_phantom(args.seed, dims=args.dims)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    ext = ".nii.gz" if args.gz else ".nii"
    vio.write_nifti(vol, out / f"vol{ext}")
    vio.write_nifti(seg, out / f"seg{ext}")
    written = [f"vol{ext}", f"seg{ext}"]
    if args.scores:
        preds = predictions.area_predictions(seg, "seg", noise=args.noise,
                                             rng=np.random.default_rng(args.seed))
        predictions.write_predictions(preds, out / "scores.csv")
        written.append("scores.csv")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_filter(args, cfg) -> int:
    tau = float(_pick(args.tau, cfg, "tau", filtering.DEFAULT_TAU))
    segs = _load_segs(args.seg)
    if args.scores is not None:
        thr, _ = _threshold(args.threshold, cfg)
        rep = filtering.scorer_retention(filtering.FileScorer(args.scores), segs, thr)
    else:
        per_volume = []
        label_rows = []
        for vid, seg in segs.items():
            entry = {}
            for view in slicer.VIEWS:
                labels = filtering.filter_volume(seg, view, tau)
                entry[view] = labels
                label_rows += [{"volume_id": vid, "view": view.value, "slice_index": lab.slice_index,
                                "foreground_ratio": lab.foreground_ratio, "label": int(lab.label)}
                               for lab in labels]
            per_volume.append(entry)
        rep = filtering.retention_report(per_volume)
        if args.labels_out is not None:
            report.write_csv(args.labels_out,
                             ["volume_id", "view", "slice_index", "foreground_ratio", "label"], label_rows)
    filtering.write_retention_csv(rep, args.out)
    _maybe_report(args, retention=rep)
    for row in rep.rows:
        print(f"{row.view.value:9s} {row.total_slices:8.2f} -> {row.retained_slices:8.2f}"
              f"  retention {row.retention_rate:.2f}  reduction {row.reduction_pct:.2f}%")
    return 0


def cmd_stats(args, cfg) -> int:
    segs = _load_segs(args.seg)
    stats = vio.organ_stats(list(segs.values()), jobs=args.jobs)
    vio.write_stats_csv(stats, args.out)
    print(f"wrote {len(stats)} organ rows to {args.out}")
    return 0


def cmd_prompts(args, cfg) -> int:
    organs = args.organ or prompts.btcv_organ_names()
    text = prompts.bank_to_json(prompts.build_prompts(organs))
    if args.out is None:
        print(text)
    else:
        try:
            Path(args.out).write_text(text + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {args.out}: {exc}") from exc
    return 0


def cmd_slice(args, cfg) -> int:
    window = cfg.get("window") or {}
    lo = float(window.get("lo", -50.0))
    hi = float(window.get("hi", 200.0))
    vol = vio.read_nifti(args.vol)
    if not vol.normalized:
        vol = vio.percentile_normalize(vio.window_hu(vol, lo, hi))
    seg = vio.read_nifti(args.seg, label=True) if args.seg else None
    explicit = {slicer.View.AXIAL: args.axial, slicer.View.CORONAL: args.coronal,
                slicer.View.SAGITTAL: args.sagittal}
    indices = {}
    for view, idx in explicit.items():
        if idx is None:
            if seg is not None:
                fg = np.count_nonzero(seg.labels, axis=slc._SUM_AXES[view])
                idx = int(np.argmax(fg))
            else:
                idx = slicer.slice_count(vol, view) // 2
        indices[view] = idx
    tensor = slicer.build_tensor(vol, indices)
    aug = {"p_hflip": args.p_hflip, "p_vflip": args.p_vflip, "max_angle_deg": args.max_angle}
    if any(aug.values()):
        tensor = slicer.augment(tensor, args.seed, aug)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    for name, channel in zip(slicer.MultiViewTensor.CHANNEL_ORDER, tensor.channels):
        stem = name.replace("-", "_prev").replace("+", "_next")
        slicer.write_image(channel, out / f"{stem}.{args.format}")
    slicer.dump_tensor(tensor, out / "tensor.f32")
    desc = ", ".join(f"{v.value}={i}" for v, i in indices.items())
    print(f"wrote 9 channels ({desc}) to {out}")
    return 0


def cmd_slc(args, cfg) -> int:
    deltas = _pick(args.delta, cfg, "delta", list(slc.DEFAULT_DELTAS))
    tops = _pick(args.top, cfg, "top_percent", list(slc.DEFAULT_TOP_PERCENTS))
    epsilon = float(_pick(args.epsilon, cfg, "epsilon", slc.DEFAULT_EPSILON))
    threshold = None
    if args.threshold is not None or "threshold" in cfg:
        threshold, _ = _threshold(args.threshold, cfg)
    segs = _load_segs(args.seg)
    preds = predictions.read_predictions(args.pred, score_column=args.score_column)
    pred_ids = preds.volume_ids()
    if len(segs) == 1 and len(pred_ids) == 1:
        segs = {pred_ids[0]: next(iter(segs.values()))}
    table = slc.slc_sweep(segs, preds, deltas, tops, threshold=threshold, epsilon=epsilon,
                          model=args.model, jobs=args.jobs)
    report.write_csv(args.out, slc.SWEEP_COLUMNS, report.sweep_rows(table))
    _maybe_report(args, slc=table)
    for delta in table.deltas:
        cells = "  ".join(f"{sel}:{table.overall(delta, sel):.4f}" for sel in table.selections)
        print(f"delta={delta:g}  {cells}")
    return 0


def cmd_eval(args, cfg) -> int:
    thr, overrides = _threshold(args.threshold, cfg)
    preds = predictions.read_predictions(args.pred)
    labels = predictions.read_predictions(args.labels) if args.labels else None
    rep = metrics.evaluate(preds, labels, threshold=thr, organ_thresholds=overrides)
    out = Path(args.out)
    if out.suffix.lower() == ".json":
        try:
            out.write_text(json.dumps({r["organ"]: r for r in report.metrics_rows(rep)}, indent=2) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {out}: {exc}") from exc
    else:
        report.write_csv(out, metrics.METRIC_COLUMNS, report.metrics_rows(rep))
    _maybe_report(args, metrics=rep)
    o = rep["overall"]
    print(f"overall  P={o.precision:.4f} R={o.recall:.4f} F1={o.f1:.4f} n={o.count}")
    return 0


def cmd_kernels_check(args, cfg) -> int:
    results = kernel_checks.run_kernel_checks(args.seeds)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} {r.value:.3e}  (tol {r.tolerance:g})")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# parser

def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON config file")
    parser.add_argument("--seed", type=int, default=d(0), help="random seed")
    parser.add_argument("--jobs", type=int, default=d(1), help="parallel volumes")


def _report_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report", help="also emit a report into this directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicekit", description="CT slice selection and SLC toolkit")
    _globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 48), metavar=("H", "W", "D"))
    p.add_argument("--gz", action="store_true", help="gzip the NIfTI outputs")
    p.add_argument("--scores", action="store_true", help="also write area-based scores.csv")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("filter", parents=[common], help="informativeness labels and retention")
    p.add_argument("--seg", action="append", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--scores", help="score CSV; retention from scores instead of ground truth")
    p.add_argument("--threshold", type=float)
    p.add_argument("--labels-out", help="per-slice label CSV")
    p.add_argument("--out", required=True)
    _report_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("stats", parents=[common], help="organ volume statistics")
    p.add_argument("--seg", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prompts", parents=[common], help="emit the prompt bank as JSON")
    p.add_argument("--organ", action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("slice", parents=[common], help="export a standardized 2.5D tensor")
    p.add_argument("--vol", required=True)
    p.add_argument("--seg", help="pick each view's slice at the foreground peak")
    p.add_argument("--axial", type=int)
    p.add_argument("--coronal", type=int)
    p.add_argument("--sagittal", type=int)
    p.add_argument("--p-hflip", type=float, default=0.0)
    p.add_argument("--p-vflip", type=float, default=0.0)
    p.add_argument("--max-angle", type=float, default=0.0)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("slc", parents=[common], help="SLC sweep over delta and selection rules")
    p.add_argument("--seg", action="append", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--delta", type=float, action="append")
    p.add_argument("--top", type=float, action="append")
    p.add_argument("--threshold", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--score-column", default="score")
    p.add_argument("--model", default="model")
    p.add_argument("--out", required=True)
    _report_flags(p)
    p.set_defaults(func=cmd_slc)

    p = sub.add_parser("eval", parents=[common], help="classification metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    _report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kernels-check", parents=[common], help="run the gradient/invariant suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_kernels_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(args, load_config(args.config))
    except SlicekitError as exc:
        print(f"slicekit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
