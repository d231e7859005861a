"""Command-line front end: dataset generation, training runs, reporting.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ConfigError,
    HycissError,
    MissingRunError,
    NonFiniteError,
    ScheduleError,
    TaxonomyError,
)
from .evaluation import write_curve_csv, write_per_class_csv, write_summary_csv
from .losses import LossWeights
from .model import BackboneConfig
from .protocol import build_schedule
from .pseudolabel import DEFAULT_THRESHOLDS, LevelThresholds
from .synthdata import (
    generate,
    load_dataset,
    preset,
    save_dataset,
    spec_from_doc,
    validate_scene,
)
from .taxonomy import load_taxonomy
from .trainer import TrainConfig, run_schedule, write_train_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

VAL_SEED_OFFSET = 1000003


@dataclass
class RunConfig:
    dataset: Path
    taxonomy: Path
    schedule: Path
    out: Path
    name: str
    train: TrainConfig
    loss: LossWeights
    curvature: float
    thresholds: LevelThresholds
    seed: int
    steps: int | None = None


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def load_run_config(path, overrides=None) -> RunConfig:
    """Parse and validate a run-config JSON document.

    Field precedence: file < HYCISS_SEED env var (seed only) < CLI flags.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    _require(isinstance(doc, dict), "config must be a JSON object")
    overrides = dict(overrides or {})

    base = path.parent
    seed = int(doc.get("seed", 0))
    if "HYCISS_SEED" in os.environ:
        try:
            seed = int(os.environ["HYCISS_SEED"])
        except ValueError as e:
            raise ConfigError(f"HYCISS_SEED is not an integer: {e}") from e
    if overrides.get("seed") is not None:
        seed = int(overrides["seed"])

    tdoc = dict(doc.get("train", {}))
    if overrides.get("epochs") is not None:
        tdoc["epochs"] = overrides["epochs"]
    if overrides.get("naive"):
        tdoc["naive"] = True
        tdoc["pl_mode"] = "none"
    if overrides.get("uniform_pl"):
        tdoc["pl_mode"] = "uniform"
    if overrides.get("no_pl"):
        tdoc["pl_mode"] = "none"
    try:
        train = TrainConfig(**tdoc)
    except TypeError as e:
        raise ConfigError(f"bad train section: {e}") from e

    ldoc = dict(doc.get("loss", {}))
    if overrides.get("no_dice"):
        ldoc["beta"] = 0.0
    try:
        loss = LossWeights(**ldoc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad loss section: {e}") from e

    curvature = float(doc.get("curvature", 3.0))
    if overrides.get("curvature") is not None:
        curvature = float(overrides["curvature"])
    _require(curvature > 0, "curvature must be positive")

    try:
        thresholds = LevelThresholds(tuple(doc.get("thresholds", DEFAULT_THRESHOLDS)))
    except ValueError as e:
        raise ConfigError(str(e)) from e

    def _path(key, default=None):
        raw = overrides.get(key) or doc.get(key, default)
        _require(raw is not None, f"config is missing {key!r}")
        p = Path(raw)
        return p if p.is_absolute() else base / p

    name = overrides.get("name") or doc.get("name") or "run"
    steps = overrides.get("steps") if overrides.get("steps") is not None else doc.get("steps")
    cfg = RunConfig(
        dataset=_path("dataset"),
        taxonomy=_path("taxonomy"),
        schedule=_path("schedule"),
        out=_path("out"),
        name=str(name),
        train=train,
        loss=loss,
        curvature=curvature,
        thresholds=thresholds,
        seed=seed,
        steps=None if steps is None else int(steps),
    )
    for key in ("dataset", "taxonomy", "schedule"):
        _require(getattr(cfg, key).exists(), f"{key} path does not exist: {getattr(cfg, key)}")
    return cfg


def run_experiment(cfg: RunConfig, progress=None):
    """Execute a full configured run; returns (model, reports, out_dir)."""
    tax = load_taxonomy(cfg.taxonomy)
    schedule = build_schedule(str(cfg.schedule), tax)
    train_samples, _ = load_dataset(cfg.dataset / "train")
    val_samples, _ = load_dataset(cfg.dataset / "val")

    out_dir = cfg.out / cfg.name
    out_dir.mkdir(parents=True, exist_ok=True)
    model, reports, log_rows = run_schedule(
        schedule, train_samples, val_samples, cfg.train, cfg.loss,
        cfg.thresholds, cfg.curvature, cfg.seed,
        backbone=BackboneConfig(), steps_limit=cfg.steps,
        out_dir=out_dir, progress=progress,
    )
    write_train_log(out_dir / "train_log.csv", log_rows)
    write_summary_csv(out_dir / "summary.csv", reports)
    write_per_class_csv(out_dir / "per_class.csv", reports)
    write_curve_csv(out_dir / "curve.csv", reports)
    resolved = {
        "name": cfg.name,
        "seed": cfg.seed,
        "curvature": cfg.curvature,
        "schedule_name": schedule.name,
        "train": cfg.train.__dict__,
        "loss": cfg.loss.__dict__,
        "thresholds": list(cfg.thresholds.s_levels),
        "steps": cfg.steps,
    }
    with open(out_dir / "config.json", "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)
    return model, reports, out_dir


# -- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.preset:
        docs = preset(args.preset)
        tax_doc, sched_doc, scene = docs["taxonomy"], docs["schedule"], docs["scene"]
    else:
        _require(args.spec is not None, "gen needs --preset or --spec")
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise ConfigError(f"spec file not found: {spec_path}")
        with open(spec_path) as f:
            doc = json.load(f)
        _require(
            all(k in doc for k in ("scene", "taxonomy", "schedule")),
            "custom spec needs scene, taxonomy and schedule sections",
        )
        tax_doc, sched_doc, scene = doc["taxonomy"], doc["schedule"], spec_from_doc(doc["scene"])

    tax = load_taxonomy(tax_doc)
    build_schedule(sched_doc, tax)  # validate early
    validate_scene(scene, tax)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "taxonomy.json", "w") as f:
        json.dump(tax_doc, f, indent=1, sort_keys=True)
    with open(out / "schedule.json", "w") as f:
        json.dump(sched_doc, f, indent=1, sort_keys=True)
    save_dataset(out / "train", generate(scene, args.n_train, args.seed), scene, args.seed)
    val_seed = args.seed + VAL_SEED_OFFSET
    save_dataset(out / "val", generate(scene, args.n_val, val_seed), scene, val_seed)
    print(f"wrote {args.n_train}+{args.n_val} samples under {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "steps": args.steps,
        "curvature": args.curvature,
        "no_dice": args.no_dice,
        "uniform_pl": args.uniform_pl,
        "no_pl": args.no_pl,
        "naive": args.naive,
        "name": args.name,
        "out": args.out,
    }
    cfg = load_run_config(args.config, overrides)

    def progress(t, rep):
        def fmt(x):
            return "-" if x is None else f"{x:.2f}"

        print(
            f"[{cfg.name}] step {t}: miou_base={fmt(rep.miou_base)} "
            f"miou_novel={fmt(rep.miou_novel)} miou_all={fmt(rep.miou_all)}"
        )

    _, reports, out_dir = run_experiment(cfg, progress=progress)
    print(f"run complete; artifacts under {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.out)
    if not root.exists():
        raise MissingRunError(f"output directory not found: {root}")
    runs = sorted(p for p in root.iterdir() if (p / "summary.csv").exists())
    if not runs:
        raise MissingRunError(f"no completed runs under {root}")
    rows = []
    for run in runs:
        with open(run / "summary.csv") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        last = lines[-1].split(",")
        sched = ""
        cfg_path = run / "config.json"
        if cfg_path.exists():
            with open(cfg_path) as f:
                sched = json.load(f).get("schedule_name", "")
        rows.append((run.name, sched, last[0], last[1], last[2], last[3]))
    header = ("run", "schedule", "steps", "miou_base", "miou_novel", "miou_all")
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(6)]

    def fmt(row):
        return "  ".join(str(v).ljust(w) for v, w in zip(row, widths))

    print(fmt(header))
    for row in rows:
        print(fmt(row))
    combined = root / "report.csv"
    with open(combined, "w") as f:
        f.write("run,schedule,steps,miou_base,miou_novel,miou_all\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyciss", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--preset", help="shipped benchmark preset name")
    g.add_argument("--spec", help="custom scene/taxonomy/schedule JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=500)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="train a configured schedule")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--steps", type=int, help="run only the first N steps")
    r.add_argument("--curvature", type=float)
    r.add_argument("--no-dice", action="store_true", help="drop the Dice term")
    r.add_argument("--uniform-pl", action="store_true",
                   help="uniform 0.5-threshold pseudo-labeling")
    r.add_argument("--no-pl", action="store_true", help="disable pseudo-labeling")
    r.add_argument("--naive", action="store_true",
                   help="plain fine-tuning baseline: flat loss, no pseudo-labels")
    r.add_argument("--name")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="tabulate completed runs")
    p.add_argument("out", help="directory holding run subdirectories")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TaxonomyError, ScheduleError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MissingRunError as e:
        print(f"missing artifacts: {e}", file=sys.stderr)
        return EXIT_MISSING
    except HycissError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
