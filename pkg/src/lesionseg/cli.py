"""``lesionseg`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plots
from .config import ConfigError, RunConfig, load_config
from .data import DataError, DatasetIndex, SampleSource
from .lesions import LESION_ORDER, LesionType
from .losses import compute_focal_alphas
from .metrics import MetricsReport, aggregate
from .numerics import NonFiniteError, WeightFormatError
from .synth import SynthSpec, generate, imbalance_stats
from .trainer import (
    CONFIG_FILE,
    TrainConfig,
    evaluate_detailed,
    load_run_model,
    run_is_complete,
    train,
)
from .verify import BaselineError, format_checks, load_baselines, verify

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4

log = logging.getLogger("lesionseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _lesions(arg: str | None, configured: list[str], default: str) -> list[LesionType]:
    if arg is not None:
        names = [t.value for t in LESION_ORDER] if arg == "all" else [arg]
    elif configured:
        names = [t.value for t in LESION_ORDER] if configured == ["all"] else configured
    else:
        names = [default]
    try:
        return [LesionType.parse(n) for n in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _report_files(report: MetricsReport, out: Path, stem: str = "report") -> None:
    _write(out / f"{stem}.json", report.to_json() + "\n")
    _write(out / f"{stem}.txt", report.to_text() + "\n")
    _write(out / f"{stem}.csv", report.to_csv())


def _apply_weights_file(cfg: TrainConfig, path: str) -> TrainConfig:
    info = json.loads(Path(path).read_text())
    weights = [float(info["pos_weight"][t.value]) for t in LESION_ORDER]
    d = cfg.to_dict()
    d["loss"]["pos_weight"] = weights
    d["loss"]["weights"] = "fixed"
    if any(w > 0 for w in weights):
        d["loss"]["alpha"] = compute_focal_alphas(weights)
    return TrainConfig.from_dict(d)


def _run_dir(out: Path, cfg: TrainConfig) -> Path:
    return out / f"{cfg.lesion}-{cfg.config_hash()}"


def _train_one(cfg: TrainConfig, data: Path, run_dir: Path, resume: bool) -> dict:
    """Train (or resume / reuse) one run; returns a summary row."""
    if run_dir.exists() and any(run_dir.iterdir()):
        if not resume:
            raise UsageError(f"{run_dir} already exists; pass --resume to continue or reuse it")
        if run_is_complete(run_dir):
            _, _, ckpt = load_run_model(run_dir)
            log.info("%s: complete run found, reusing", run_dir.name)
            return {"run": run_dir.name, "best_val_rank": ckpt.best_val_rank, "epoch": ckpt.epoch}
    size = cfg.input_size
    tr = SampleSource(DatasetIndex.load(data, "train"), size)
    va = SampleSource(DatasetIndex.load(data, "val"), size)
    ckpt = train(cfg, tr, va, out_dir=run_dir, resume=resume, log=lambda m: log.info("%s: %s", run_dir.name, m))
    return {"run": run_dir.name, "best_val_rank": ckpt.best_val_rank, "epoch": ckpt.epoch}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    d = load_config(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    if not args.out:
        raise UsageError("synth needs --out")
    indices = generate(spec, args.out)
    for split, ix in indices.items():
        print(f"{split}: {len(ix)} images")
    return EXIT_OK


def cmd_weights(args) -> int:
    if not args.data:
        raise UsageError("weights needs --data")
    index = DatasetIndex.load(args.data, args.split)
    stats = imbalance_stats(index)
    weights = {t.value: s.pos_weight for t, s in stats.items()}
    info = {
        "split": args.split,
        "pos_weight": weights,
        "num_pos": {t.value: s.num_pos for t, s in stats.items()},
        "num_neg": {t.value: s.num_neg for t, s in stats.items()},
    }
    out = Path(args.out) if args.out else Path(args.data)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "weights.json"
    path.write_text(json.dumps(info, indent=2) + "\n")
    for name, w in weights.items():
        print(f"{name:<12}{w:12.3f}")
    print(f"written {path}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.data:
        rc.data = args.data
    if args.out:
        rc.out = args.out
    if rc.data is None or rc.out is None:
        raise UsageError("--data and --out are required (on the command line or in the config)")
    return rc


def _configs_for(rc: RunConfig, lesions, seeds) -> list[TrainConfig]:
    out = []
    for lesion in lesions:
        for seed in seeds:
            d = rc.train.to_dict()
            d["lesion"] = lesion.value
            d["seed"] = seed
            cfg = TrainConfig.from_dict(d)
            if rc.weights_file:
                cfg = _apply_weights_file(cfg, rc.weights_file)
            out.append(cfg)
    return out


def cmd_train(args) -> int:
    rc = _run_config(args)
    lesions = _lesions(args.lesion, rc.lesions, rc.train.lesion)
    seeds = [args.seed] if args.seed is not None else (rc.seeds or [rc.train.seed])
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [_train_one(cfg, Path(rc.data), _run_dir(out, cfg), args.resume) for cfg in _configs_for(rc, lesions, seeds)]
    for r in rows:
        print(f"{r['run']}: best val rank {r['best_val_rank']:.4f} at epoch {r['epoch']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint RUN_DIR [RUN_DIR ...]")
    if not args.data:
        raise UsageError("eval needs --data")
    per_lesion = []
    for run in args.checkpoint:
        run = Path(run)
        if not (run / CONFIG_FILE).is_file():
            raise DataError(f"{run} is not a training run directory")
        model, cfg, _ = load_run_model(run)
        index = DatasetIndex.load(args.data, args.split)
        res = evaluate_detailed(model, SampleSource(index, cfg.input_size), cfg.lesion, cfg.threshold, None, cfg.batch_size)
        per_lesion.append(res.metrics)
        print(f"{run.name}: dice {res.metrics.dice:.4f}  f1 {res.metrics.f1:.4f}  rank {res.metrics.rank:.6f}")
    weights = [float(m.n_roi_images) for m in per_lesion]
    if sum(weights) == 0:
        weights = [1.0] * len(per_lesion)
    report = aggregate(per_lesion, weights)
    out = Path(args.out) if args.out else Path(args.checkpoint[0]) / f"eval_{args.split}"
    _report_files(report, out)
    print(report.to_text())
    return EXIT_OK


# -- sweep ------------------------------------------------------------------


def _grid_points(rc: RunConfig) -> list[tuple[str, float | None]]:
    grid = rc.grid or {rc.train.loss.kind: []}
    points = []
    for kind, values in grid.items():
        if kind not in ("weighted_bce", "focal", "dice", "tversky"):
            raise UsageError(f"unknown loss kind in grid: {kind!r}")
        if kind in ("focal", "tversky") and values:
            points.extend((kind, float(v)) for v in values)
        else:
            points.append((kind, None))
    return points


def _point_config(base: TrainConfig, kind: str, value: float | None) -> TrainConfig:
    d = base.to_dict()
    d["loss"]["kind"] = kind
    if kind == "focal" and value is not None:
        d["loss"]["gamma"] = value
    if kind == "tversky" and value is not None:
        d["loss"]["tversky_alpha"] = value
        d["loss"]["tversky_beta"] = 1.0 - value
    return TrainConfig.from_dict(d)


def _sweep_job(job: dict) -> dict:
    cfg = TrainConfig.from_dict(job["config"])
    run_dir = Path(job["run_dir"])
    row = {k: job[k] for k in ("kind", "param", "lesion", "seed")}
    row["run"] = run_dir.name
    try:
        _train_one(cfg, Path(job["data"]), run_dir, job["resume"])
        model, cfg, _ = load_run_model(run_dir)
        index = DatasetIndex.load(job["data"], "val")
        res = evaluate_detailed(model, SampleSource(index, cfg.input_size), cfg.lesion, cfg.threshold, None, cfg.batch_size)
        report = aggregate([res.metrics], [1.0])
        _report_files(report, run_dir)
        row.update(
            status="ok",
            dice=res.metrics.dice,
            f1=res.metrics.f1,
            rank=res.metrics.rank,
            empty_positive_rate=res.empty_image_positive_rate,
            error="",
        )
    except Exception as exc:  # a failed grid point is recorded, the sweep goes on
        row.update(status="failed", dice="", f1="", rank="", empty_positive_rate="", error=f"{type(exc).__name__}: {exc}")
    return row


def _label(kind: str, param) -> str:
    if param in (None, ""):
        return kind
    return f"{kind}({'a' if kind == 'tversky' else 'g'}={float(param):g})"


def summarize_sweep(rows: list[dict], lesions: list[str]) -> tuple[str, dict[str, dict[str, dict[str, float]]]]:
    """Best-parameter table text and the per-lesion metrics of each loss at its best setting."""
    ok = [r for r in rows if r["status"] == "ok"]
    by_point: dict[tuple, list[dict]] = {}
    for r in ok:
        by_point.setdefault((r["kind"], r["param"], r["lesion"]), []).append(r)
    means = {k: {m: float(np.mean([float(r[m]) for r in v])) for m in ("dice", "f1", "rank")} for k, v in by_point.items()}
    kinds = sorted({k[0] for k in means}, key=lambda k: ("weighted_bce", "dice", "tversky", "focal").index(k))
    best: dict[str, dict[str, dict[str, float]]] = {}
    lines = [f"{'loss':<14}" + "".join(f"{l:>13}" for l in lesions)]
    for kind in kinds:
        cells = []
        best[kind] = {}
        for lesion in lesions:
            cands = [(p, v) for (k, p, l), v in means.items() if k == kind and l == lesion]
            if not cands:
                cells.append(f"{'-':>13}")
                continue
            # highest mean rank; ties go to the smaller parameter
            p, v = max(cands, key=lambda pv: (pv[1]["rank"], -(pv[0] if pv[0] is not None else 0.0)))
            best[kind][lesion] = v
            cells.append(f"{('-' if p is None else f'{p:g}'):>13}")
        lines.append(f"{kind:<14}" + "".join(cells))
    return "\n".join(lines) + "\n", best


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    lesions = _lesions(args.lesion, rc.lesions, rc.train.lesion)
    seeds = [args.seed] if args.seed is not None else (rc.seeds or [rc.train.seed])
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for kind, value in _grid_points(rc):
        base = _point_config(rc.train, kind, value)
        point_rc = RunConfig(base, rc.data, rc.out, rc.weights_file)
        for cfg in _configs_for(point_rc, lesions, seeds):
            jobs.append(
                {
                    "config": cfg.to_dict(),
                    "run_dir": str(_run_dir(out / "runs", cfg)),
                    "data": rc.data,
                    "resume": args.resume,
                    "kind": kind,
                    "param": value,
                    "lesion": cfg.lesion,
                    "seed": cfg.seed,
                }
            )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    rows.sort(key=lambda r: (r["kind"], -1.0 if r["param"] is None else r["param"], r["lesion"], r["seed"]))

    cols = ["kind", "param", "lesion", "seed", "run", "status", "dice", "f1", "rank", "empty_positive_rate", "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
    _write(out / "sweep_results.csv", buf.getvalue())

    names = [l.value for l in lesions]
    table, best = summarize_sweep(rows, names)
    _write(out / "best_parameters.txt", table)
    for metric in ("dice", "f1", "rank"):
        series = {k: [best[k].get(l, {}).get(metric, 0.0) for l in names] for k in best}
        if series:
            svg = plots.grouped_bar_svg(f"Validation {metric} per lesion and loss", names, series, metric, ymax=1.0)
            _write(out / f"sweep_{metric}.svg", svg)
    n_failed = sum(r["status"] != "ok" for r in rows)
    print(table)
    print(f"{len(rows) - n_failed}/{len(rows)} runs succeeded; results in {out}")
    return EXIT_OK if n_failed == 0 else EXIT_NUMERIC


# -- verify-paper -------------------------------------------------------------


def cmd_verify_paper(args) -> int:
    data = load_baselines(args.baselines)
    checks = verify(data)
    print(format_checks(checks))
    if args.out:
        out = Path(args.out)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "column", "row", "quantity", "printed", "recomputed", "abs_diff", "passed"])
        for c in checks:
            w.writerow([c.table, c.column, c.row, c.quantity, c.printed, repr(c.recomputed), repr(c.diff), c.passed])
        _write(out / "verify_paper.csv", buf.getvalue())
        names = [t.value for t in LESION_ORDER]
        for table in data["tables"]:
            for metric in ("dice", "f1", "rank"):
                series = {c["name"]: [c["lesions"][n][metric] for n in names] for c in table["columns"]}
                svg = plots.grouped_bar_svg(f"{table['id']}: {metric}", names, series, metric, ymax=1.0)
                _write(out / f"{table['id']}_{metric}.svg", svg)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lesionseg", description="Per-lesion U-Net segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, data=True, seed=True, lesion=False, jobs=False):
        sp.add_argument("--config", help="flat key-value or JSON config file")
        if data:
            sp.add_argument("--data", help="dataset root")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)
        if lesion:
            sp.add_argument("--lesion", help="lesion name or 'all'")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel training processes")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic dataset"), data=False)
    w = common(sub.add_parser("weights", help="positive-class weights of a split"), seed=False)
    w.add_argument("--split", default="train", choices=("train", "val", "test"))
    t = common(sub.add_parser("train", help="train per-lesion models"), lesion=True)
    t.add_argument("--resume", action="store_true", help="resume or reuse an existing run directory")
    e = sub.add_parser("eval", help="evaluate trained runs on a split")
    e.add_argument("--checkpoint", nargs="+", help="run directories")
    e.add_argument("--data", help="dataset root")
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--out", help="report directory")
    s = common(sub.add_parser("sweep", help="train a loss-parameter grid"), lesion=True, jobs=True)
    s.add_argument("--resume", action="store_true", help="reuse completed runs")
    v = sub.add_parser("verify-paper", help="check Rank and average arithmetic of baseline tables")
    v.add_argument("--baselines", help="baselines JSON (packaged copy by default)")
    v.add_argument("--out", help="write CSV and SVG charts here")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "weights": cmd_weights,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "verify-paper": cmd_verify_paper,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lesionseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, BaselineError, WeightFormatError, FileNotFoundError) as exc:
        print(f"lesionseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"lesionseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
