"""Command-line entry point: ``clover {train,evaluate,sweep,synth}``.

Configs are flat ``key = value`` files; any key can be overridden by the
matching ``--flag``. Every run directory receives ``config.txt`` (fully
resolved, re-runnable), ``VERSION``, and the outputs of the command.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from . import data as data_mod
from . import synth as synth_mod
from .metrics import HEADLINE, evaluate
from .model import Architecture, CheckpointError, load_checkpoint, save_checkpoint
from .trainer import MODES, TrainerConfig, TrainingDiverged, train

log = logging.getLogger("clover")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "CLOVER_OUTPUT_ROOT"
SWEEP_GRID = (0.01, 0.1, 1.0, 5.0)

_TRAINER_KEYS = {f.name for f in fields(TrainerConfig)}
_RUN_DEFAULTS = {"dataset": None, "schema": "ml100k", "sensitive": "gender", "out": None,
                 "evaluate": True, "lambda_grid": ",".join(map(repr, SWEEP_GRID)),
                 "gamma_grid": ",".join(map(repr, SWEEP_GRID))}
_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: str):
    defaults = {**asdict(TrainerConfig()), **_RUN_DEFAULTS}
    ref = defaults.get(key)
    if isinstance(ref, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(ref, int):
        return int(value)
    if isinstance(ref, float):
        return float(value)
    return None if value in ("", "none", "None") else value


def read_config(path) -> dict:
    cfg = {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _TRAINER_KEYS and key not in _RUN_DEFAULTS:
            raise ConfigError(f"{p}:{n}: unknown key {key!r}")
        try:
            cfg[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{p}:{n}: {exc}") from None
    return cfg


def write_config(cfg: dict, path) -> None:
    lines = [f"# resolved configuration, clover {version_string()}"]
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k} = {'' if v is None else (repr(v) if isinstance(v, float) else v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).resolve().parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__} ({desc.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve(args) -> dict:
    cfg = {**asdict(TrainerConfig()), **_RUN_DEFAULTS}
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in list(_TRAINER_KEYS) + list(_RUN_DEFAULTS):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def trainer_config(cfg: dict) -> TrainerConfig:
    try:
        return TrainerConfig(**{k: cfg[k] for k in _TRAINER_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _run_dir(cfg: dict, default_name: str) -> Path:
    if cfg.get("out"):
        out = Path(cfg["out"])
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_tasks(cfg: dict):
    if not cfg.get("dataset"):
        raise ConfigError("no dataset path given (set 'dataset' or pass --dataset)")
    raw = data_mod.load_movielens(cfg["dataset"], cfg["schema"])
    return data_mod.prepare(raw, cfg["sensitive"], seed=cfg["seed"])


def _provenance(out: Path, cfg: dict) -> None:
    write_config(cfg, out / "config.txt")
    (out / "VERSION").write_text(version_string() + "\n")
    (out / "SEED").write_text(f"{cfg['seed']}\n")


def _train_one(cfg: dict, out: Path, ts=None):
    ts = ts or _load_tasks(cfg)
    tcfg = trainer_config(cfg)
    _provenance(out, cfg)
    arch = Architecture.from_space(ts.space)
    t0 = time.time()
    meta, history = train(ts.train, ts.items, arch, tcfg, ts.valid, out_dir=out)
    log.info("trained %d epochs in %.1fs", tcfg.epochs, time.time() - t0)
    report = None
    if cfg.get("evaluate", True):
        report = evaluate(meta, ts.test, tcfg, ts.items, ts.train)
        report.write(out)
    return meta, history, report


def cmd_train(args) -> int:
    cfg = resolve(args)
    tcfg = trainer_config(cfg)
    out = _run_dir(cfg, f"{tcfg.mode}-seed{tcfg.seed}")
    _, _, report = _train_one(cfg, out)
    if report is not None:
        print(report.table())
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve(args)
    tcfg = trainer_config(cfg)
    ts = _load_tasks(cfg)
    try:
        meta = load_checkpoint(args.checkpoint, expect=Architecture.from_space(ts.space))
    except (CheckpointError, KeyError, ValueError) as exc:
        print(f"error: cannot use checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    out = _run_dir(cfg, f"eval-{Path(args.checkpoint).stem}")
    _provenance(out, cfg)
    report = evaluate(meta, ts.test, tcfg, ts.items, ts.train)
    report.write(out)
    print(report.table())
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def _grid(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    vals = [float(x) for x in str(text).split(",") if x.strip()]
    if not vals:
        raise ConfigError("sweep grids must be non-empty")
    return vals


def sweep_cells(lam_grid, gamma_grid, lam0: float, gamma0: float) -> list[tuple[str, float, float]]:
    """Vary one weight at a time, holding the other at its default; the shared centre runs once."""
    cells, seen = [], set()
    for lam in lam_grid:
        cells.append(("lambda", lam, gamma0))
    for gamma in gamma_grid:
        cells.append(("gamma", lam0, gamma))
    unique = []
    for axis, lam, gamma in cells:
        if (lam, gamma) not in seen:
            seen.add((lam, gamma))
            unique.append((axis, lam, gamma))
    return unique


def _ranks_best(rows: list[dict]) -> int:
    # Lowest mean rank over the five metrics, NDCG ranked descending.
    n = len(rows)
    score = [0.0] * n
    for key in HEADLINE:
        sign = -1.0 if key == "NDCG" else 1.0
        vals = [sign * (r[key] if not math.isnan(r[key]) else math.inf) for r in rows]
        order = sorted(range(n), key=lambda i: vals[i])
        for rank, i in enumerate(order):
            score[i] += rank
    return min(range(n), key=lambda i: score[i])


def cmd_sweep(args) -> int:
    cfg = resolve(args)
    base = trainer_config(cfg)
    lam_grid, gamma_grid = _grid(cfg["lambda_grid"]), _grid(cfg["gamma_grid"])
    out = _run_dir(cfg, f"sweep-{base.mode}-seed{base.seed}")
    _provenance(out, cfg)
    ts = _load_tasks(cfg)
    results = {}
    for axis, lam, gamma in sweep_cells(lam_grid, gamma_grid, base.lam, base.gamma):
        cell = {**cfg, "lam": lam, "gamma": gamma, "out": str(out / f"lam{lam:g}_gamma{gamma:g}")}
        cell_dir = _run_dir(cell, "")
        _, _, report = _train_one({**cell, "evaluate": True}, cell_dir, ts)
        results[(lam, gamma)] = report.headline()
        log.info("cell lambda=%g gamma=%g: %s", lam, gamma, report.headline())
    summary = []
    for axis, grid, fixed in (("lambda", lam_grid, base.gamma), ("gamma", gamma_grid, base.lam)):
        rows = []
        for v in grid:
            key = (v, fixed) if axis == "lambda" else (fixed, v)
            rows.append({"axis": axis, "value": v, **results[key]})
        best = _ranks_best(rows)
        for k, r in enumerate(rows):
            r["best"] = k == best
        summary.extend(rows)
    write_sweep_summary(summary, out)
    print((out / "summary.txt").read_text())
    return EXIT_OK


def write_sweep_summary(rows: list[dict], out: Path) -> None:
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", *HEADLINE, "best"])
        w.writeheader()
        w.writerows(rows)
    lines = []
    for axis in ("lambda", "gamma"):
        lines.append(f"Effect of {axis}")
        lines.append(f"{'':>8} | " + " | ".join(f"{k:>6}" for k in HEADLINE))
        for r in rows:
            if r["axis"] == axis:
                mark = " *" if r["best"] else ""
                lines.append(f"{r['value']:>8g} | " + " | ".join(f"{r[k]:6.3f}" for k in HEADLINE) + mark)
        lines.append("")
    (out / "summary.txt").write_text("\n".join(lines))


def cmd_synth(args) -> int:
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for line in p.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                values[k] = v
    for f in fields(synth_mod.SynthConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    kw = {}
    defaults = asdict(synth_mod.SynthConfig())
    for k, v in values.items():
        if k == "out":
            continue
        if k not in defaults:
            raise ConfigError(f"unknown synth key {k!r}")
        kw[k] = type(defaults[k])(v)
    scfg = synth_mod.SynthConfig(**kw)
    try:
        raw = synth_mod.generate(scfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or values.get("out") or Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "synth")
    synth_mod.write_ml100k(raw, out)
    write_config(asdict(scfg), out / "synth.txt")
    print(f"wrote {len(raw.users)} users, {len(raw.items)} items, {len(raw.interactions)} ratings to {out}")
    return EXIT_OK


def _trainer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--schema", choices=("ml100k", "ml1m", "bookcrossing"))
    p.add_argument("--sensitive", help="user content treated as the sensitive attribute")
    p.add_argument("--out", help="run directory (default: $%s/<name>)" % OUTPUT_ROOT_ENV)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--inner-steps", dest="inner_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--readout", choices=("expected", "argmax"))
    p.add_argument("--no-eg", dest="use_eg", action="store_const", const=False)
    p.add_argument("--no-eh", dest="use_eh", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clover", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a model and evaluate it on the test split")
    _trainer_flags(p)
    p.add_argument("--no-evaluate", dest="evaluate", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _trainer_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="vary lambda and gamma one at a time")
    _trainer_flags(p)
    p.add_argument("--lambda-grid", dest="lambda_grid")
    p.add_argument("--gamma-grid", dest="gamma_grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic dataset in ML-100K layout")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--n-users", dest="n_users", type=int)
    p.add_argument("--n-items", dest="n_items", type=int)
    p.add_argument("--ratings-per-user", dest="ratings_per_user", type=int)
    p.add_argument("--bias-strength", dest="bias_strength", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, data_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except data_mod.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
