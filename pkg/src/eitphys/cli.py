"""Batch entry point: generate, align, train, eval, report, run, config.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from eitphys import __version__, sigproc
from eitphys import nets
from eitphys.config import ExperimentConfig
from eitphys.errors import ConfigError, EitPhysError, NumericalError
from eitphys.nets import Variant
from eitphys.phantom import dataset as phantom_ds
from eitphys.phantom.dataset import Dataset, SplitScheme
from eitphys.tasks import Task
from eitphys.training import Checkpoint, evaluate, train

log = logging.getLogger("eitphys")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ----------------------------------------------------------------- helpers


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    cohort = {}
    if getattr(args, "patients", None) is not None:
        cohort["n_patients"] = args.patients
    if getattr(args, "records", None) is not None:
        cohort["records_per_patient"] = args.records
    if getattr(args, "seed", None) is not None:
        cohort["seed"] = args.seed
        cfg.split = dataclasses.replace(cfg.split, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if cohort:
        cfg.cohort = dataclasses.replace(cfg.cohort, **cohort)
    if getattr(args, "split", None):
        cfg.split = dataclasses.replace(cfg.split, scheme=args.split)
    if getattr(args, "task", None):
        cfg.run = dataclasses.replace(cfg.run, tasks=[args.task])
    if getattr(args, "variant", None):
        variants = [v.value for v in Variant] if args.variant == "all" else [args.variant]
        cfg.run = dataclasses.replace(cfg.run, variants=variants)
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def prepare_out(path: Path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty directory unless forced."""
    if path.exists() and not path.is_dir():
        raise ConfigError(f"out: {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"out: {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"out: cannot create {path}: {exc.strerror}") from None
    return path


def generate_dataset(cfg: ExperimentConfig, directory: Path, force: bool) -> Dataset:
    c = cfg.cohort
    ds = phantom_ds.build_dataset(
        c.n_patients,
        c.records_per_patient,
        c.seed,
        workers=cfg.run.workers,
        **{k: v for k, v in dataclasses.asdict(c).items() if k not in ("n_patients", "records_per_patient", "seed")},
    )
    try:
        phantom_ds.write_dataset(ds, directory, force=force, split_seed=cfg.split.seed)
    except OSError as exc:
        raise ConfigError(f"out: cannot write dataset to {directory}: {exc.strerror}") from None
    return ds


def align_dataset(ds: Dataset) -> Dataset:
    aligned = [sigproc.align_records(r) for r in ds.records]
    for r in aligned:
        if r.meta.get("unalignable"):
            log.warning("record %s: %s not alignable, channels dropped", r.record_id, r.meta["unalignable"])
    return Dataset(aligned, ds.patients, ds.cohort)


def job_name(task: Task, variant: Variant) -> str:
    return task.short if task is not Task.TRANSPULMONARY_PRESSURE else f"{task.short}_{variant.value}"


def write_plots(preds, directory: Path, name: str, unit: str) -> list[str]:
    """One SVG per rating category, using the first segment that received it."""
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "eitphys"
    written = []
    for rating in sigproc.Rating:
        match = next((p for p in preds if p.rating is rating), None)
        if match is None:
            continue
        label = {"+": "plus", "o": "circle", "-": "minus"}[rating.value]
        path = directory / f"{name}_{label}.svg"
        title = f"{name} {match.segment.record_id}@{match.segment.start} rated {rating.value}"
        sigproc.plot_segment_svg(match.pred, match.target, path, title=title, unit=unit)
        written.append(path.name)
    return written


def evaluate_and_report(checkpoints: dict[str, Checkpoint], test: Dataset, out: Path, split: str,
                        plots: bool) -> list[sigproc.MetricsReport]:
    reports = []
    plot_files: dict[str, list[str]] = {}
    if plots:
        (out / "plots").mkdir(exist_ok=True)
    for name, ck in checkpoints.items():
        report, preds = evaluate(ck, test, split_name=split, return_predictions=True)
        reports.append(report)
        if plots:
            plot_files[name] = write_plots(preds, out / "plots", name, report.unit)
    sigproc.write_metrics_csv(reports, out / "metrics.csv")
    sigproc.write_summary_json(reports, out / "summary.json", {"plots": plot_files, "version": __version__})
    return reports


# ---------------------------------------------------------------- commands


def cmd_config(args) -> int:
    cfg = load_config(args) if args.config else ExperimentConfig()
    sys.stdout.write(cfg.to_toml())
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = Path(args.out or Path(cfg.out) / "data")
    prepare_out(out, args.force)
    ds = generate_dataset(cfg, out, force=True)
    print(f"wrote {len(ds)} records ({cfg.cohort.n_patients} patients x {cfg.cohort.records_per_patient}) to {out}")
    return EXIT_OK


def cmd_align(args) -> int:
    if not args.out:
        raise ConfigError("out: align needs --out for the aligned dataset")
    ds = phantom_ds.read_dataset(args.data)
    out = prepare_out(Path(args.out), args.force)
    aligned = align_dataset(ds)
    phantom_ds.write_dataset(aligned, out, force=True, split_seed=phantom_ds.read_manifest(args.data)["split_seed"])
    lags = [r.meta["estimated_lags"] for r in aligned.records]
    print(f"aligned {len(aligned)} records into {out}; flagged {sum(bool(r.meta['unalignable']) for r in aligned)}")
    log.info("estimated lags: %s", lags)
    return EXIT_OK


def _load_split(data_dir, cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = phantom_ds.read_dataset(data_dir)
    if not all(r.meta.get("aligned") for r in ds.records):
        ds = align_dataset(ds)
    return phantom_ds.split(ds, cfg.split.scheme, cfg.split.seed)


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = prepare_out(Path(cfg.out), args.force)
    train_set, _ = _load_split(args.data, cfg)
    for task, variant in cfg.run.jobs():
        name = job_name(task, variant)
        model = nets.build_model(cfg.model_config(task, variant))
        ck = train(model, train_set, cfg.train_config(task, variant), log_path=out / f"{name}_log.csv")
        ck.save(out / f"{name}.ckpt")
        print(f"{name}: {len(ck.history)} steps, final loss {ck.history[-1]['loss']:.4f} -> {out / (name + '.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = prepare_out(Path(cfg.out), args.force)
    _, test = _load_split(args.data, cfg)
    checkpoints = {Path(p).stem: Checkpoint.load(p) for p in args.checkpoint}
    reports = evaluate_and_report(checkpoints, test, out, cfg.split.scheme, plots=False)
    for r in reports:
        print(f"{r.task} {r.variant} rmse={r.rmse:.4g} dtw={r.dtw:.4g} +/o/-={r.plus}/{r.circle}/{r.minus}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args)
    out = prepare_out(Path(cfg.out), args.force)
    _, test = _load_split(args.data, cfg)
    checkpoints = {Path(p).stem: Checkpoint.load(p) for p in args.checkpoint}
    evaluate_and_report(checkpoints, test, out, cfg.split.scheme, plots=True)
    print(f"report written to {out}")
    return EXIT_OK


def run_experiment(cfg: ExperimentConfig, force: bool = False, data: str | None = None) -> list[sigproc.MetricsReport]:
    """Generate (or read), align, split, train every job, evaluate, write reports."""
    out = prepare_out(Path(cfg.out), force)
    started = time.perf_counter()
    if data:
        ds = phantom_ds.read_dataset(data)
    else:
        ds = generate_dataset(cfg, out / "data", force=True)
    aligned = align_dataset(ds)
    train_set, test_set = phantom_ds.split(aligned, cfg.split.scheme, cfg.split.seed)
    (out / "checkpoints").mkdir()
    (out / "logs").mkdir()
    checkpoints = {}
    for task, variant in cfg.run.jobs():
        name = job_name(task, variant)
        log.info("training %s on %d records", name, len(train_set))
        model = nets.build_model(cfg.model_config(task, variant))
        ck = train(model, train_set, cfg.train_config(task, variant), log_path=out / "logs" / f"{name}.csv")
        ck.save(out / "checkpoints" / f"{name}.ckpt")
        checkpoints[name] = ck
    reports = evaluate_and_report(checkpoints, test_set, out, cfg.split.scheme, cfg.run.plots)
    (out / "config.toml").write_text(cfg.to_toml())
    (out / "timing.json").write_text(json.dumps({"seconds": round(time.perf_counter() - started, 1)}) + "\n")
    return reports


def cmd_run(args) -> int:
    cfg = load_config(args)
    reports = run_experiment(cfg, force=args.force, data=args.data)
    for r in reports:
        print(f"{r.task} {r.variant} {r.split}: rmse={r.rmse:.4g} {r.unit} dtw={r.dtw:.4g} "
              f"+/o/-={r.plus}/{r.circle}/{r.minus} (n={r.n_segments})")
    print(f"metrics written to {Path(cfg.out) / 'metrics.csv'}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eitphys", description="Synthetic EIT-to-physiology experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out_help="output directory", need_data=True):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="overrides cohort, split and training seeds")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if data:
            p.add_argument("--data", required=need_data, help="dataset directory written by 'generate'")

    def selection(p):
        p.add_argument("--task", help="1-5 or volume|flow|p_aw|p_ab|p_tp")
        p.add_argument("--variant", help="for task 5: 1|2|3, a variant name, or 'all'")
        p.add_argument("--split", choices=[s.value for s in SplitScheme])

    p = sub.add_parser("config", help="print the effective configuration as TOML")
    p.add_argument("--config")
    p.add_argument("--defaults", action="store_true", help="print built-in defaults")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("generate", help="simulate a cohort and write it to disk")
    common(p, out_help="dataset directory (default: <config out>/data)")
    p.add_argument("--patients", type=int)
    p.add_argument("--records", type=int, help="records per patient")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("align", help="cross-correlation alignment of a generated dataset")
    common(p, data=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train models on the training split")
    common(p, data=True)
    selection(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in [("eval", cmd_eval, "metrics for checkpoints on the test split"),
                             ("report", cmd_report, "metrics plus SVG prediction plots")]:
        p = sub.add_parser(name, help=text)
        common(p, data=True)
        p.add_argument("--split", choices=[s.value for s in SplitScheme])
        p.add_argument("--checkpoint", nargs="+", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="generate, align, train, evaluate and report in one go")
    common(p, data=True, need_data=False)
    selection(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--records", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "config" and args.defaults:
        args.config = None
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EitPhysError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
