"""Command-line front end: ``rssnav gen-field | train | render``.

Settings come from, in increasing precedence: built-in defaults, a flat
``key = value`` config file (``--config``), then command-line flags.  Keys::

    plan = rooms-small              # bundled fixture name or a path
    cell_size_m = 1.0
    output_dir = out
    workers = 1
    field.mode = synthesize         # or: load
    field.path = field.txt          # for field.mode = load
    source.row = 9                  # defaults to the plan's T cell
    source.col = 17
    source.tx_power_dbm = 25
    source.frequency_hz = 2.4e9
    source.height_offset_m = 0.5
    propagation.wall_loss_db = 6
    propagation.noise_floor_dbm = -120
    train.<name> = <value>          # any TrainConfig field, e.g. train.gamma

Relative paths in a config file resolve against the file's directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import plotting
from .gridworld import FloorPlan, FloorPlanError, format_floor_plan, parse_floor_plan
from .rssfield import (
    FieldFormatError,
    PropagationParams,
    RssField,
    SourceSpec,
    count_aliased_cells,
    read_field,
    synthesize_field,
    write_field,
)
from .trainer import (
    Method,
    RunMetrics,
    TrainConfig,
    aggregate_runs,
    train_runs,
    write_metrics,
)

log = logging.getLogger("rssnav")

FIXTURES = ("corridor", "rooms-small", "scenario1-like")
PREVIEW_RAMP = " .:-=+*#%@"


class ConfigError(ValueError):
    pass


class MalformedMetrics(ValueError):
    pass


@dataclass(frozen=True)
class Synthesize:
    """Synthesized field; ``position`` None puts the source on the plan's T."""

    position: tuple[int, int] | None = None
    tx_power_dbm: float = 25.0
    frequency_hz: float = 2.4e9
    height_offset_m: float = 0.5
    params: PropagationParams = PropagationParams()


@dataclass(frozen=True)
class Load:
    path: Path


@dataclass(frozen=True)
class ExperimentConfig:
    plan_path: Path
    field: Synthesize | Load
    train: TrainConfig
    output_dir: Path
    cell_size_m: float = 1.0
    workers: int = 1

    def load_plan(self) -> FloorPlan:
        try:
            text = self.plan_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read plan {self.plan_path}: {exc.strerror}") from None
        return parse_floor_plan(text, self.cell_size_m)

    def source_for(self, plan: FloorPlan) -> SourceSpec:
        f = self.field
        try:
            return SourceSpec(f.position or plan.target, f.tx_power_dbm, f.frequency_hz, f.height_offset_m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def build_field(self, plan: FloorPlan) -> RssField:
        if isinstance(self.field, Load):
            field = read_field(self.field.path)
            if not field.matches(plan):
                raise ConfigError(f"field {self.field.path} is {field.shape}, plan is {plan.shape}")
            return field
        return synthesize_field(plan, self.source_for(plan), self.field.params)


def fixture_path(name: str) -> Path:
    stem = name[:-5] if name.endswith(".plan") else name
    if stem not in FIXTURES:
        raise ConfigError(f"unknown fixture {name!r}; bundled: {', '.join(FIXTURES)}")
    return Path(str(resources.files("rssnav") / "fixtures" / f"{stem}.plan"))


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{n}: empty key")
        values[key] = value
    return values


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(float(value)) if "e" in value.lower() else int(value)
        if kind is float:
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
            return out
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def _train_kind(name):
    default = _TRAIN_FIELDS[name].default
    if isinstance(default, bool):
        return bool
    if isinstance(default, Method) or isinstance(default, str):
        return str
    return type(default)


def build_config(values: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    base_dir = base_dir or Path.cwd()
    known_top = {"plan", "cell_size_m", "output_dir", "workers"}
    train_kwargs = {}
    source_kwargs = {}
    prop_kwargs = {}
    field_mode, field_path = "synthesize", None
    for key, value in values.items():
        if key.startswith("train."):
            name = key[len("train."):]
            if name not in _TRAIN_FIELDS:
                raise ConfigError(f"unknown key {key!r}")
            train_kwargs[name] = _coerce(key, value, _train_kind(name))
        elif key.startswith("source."):
            name = key[len("source."):]
            if name in ("row", "col"):
                source_kwargs[name] = _coerce(key, value, int)
            elif name in ("tx_power_dbm", "frequency_hz", "height_offset_m"):
                source_kwargs[name] = _coerce(key, value, float)
            else:
                raise ConfigError(f"unknown key {key!r}")
        elif key.startswith("propagation."):
            name = key[len("propagation."):]
            if name not in ("wall_loss_db", "noise_floor_dbm"):
                raise ConfigError(f"unknown key {key!r}")
            prop_kwargs[name] = _coerce(key, value, float)
        elif key == "field.mode":
            if value not in ("synthesize", "load"):
                raise ConfigError("field.mode must be 'synthesize' or 'load'")
            field_mode = value
        elif key == "field.path":
            field_path = value
        elif key not in known_top:
            raise ConfigError(f"unknown key {key!r}")

    plan_value = values.get("plan", "rooms-small")
    plan_path = Path(plan_value)
    if not plan_path.is_absolute():
        plan_path = base_dir / plan_path
    if not plan_path.exists():
        plan_path = fixture_path(plan_value)

    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    if field_mode == "load" or (field_path and "field.mode" not in values):
        if not field_path:
            raise ConfigError("field.mode = load needs field.path")
        p = Path(field_path)
        field = Load(p if p.is_absolute() else base_dir / p)
    else:
        if ("row" in source_kwargs) != ("col" in source_kwargs):
            raise ConfigError("source.row and source.col must be given together")
        position = None
        if "row" in source_kwargs:
            position = (source_kwargs.pop("row"), source_kwargs.pop("col"))
        try:
            params = PropagationParams(**prop_kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        field = Synthesize(position, params=params, **source_kwargs)

    out = Path(values.get("output_dir", "out"))
    return ExperimentConfig(
        plan_path=plan_path,
        field=field,
        train=train,
        output_dir=out if out.is_absolute() else base_dir / out,
        cell_size_m=_coerce("cell_size_m", values.get("cell_size_m", "1.0"), float),
        workers=_coerce("workers", values.get("workers", "1"), int),
    )


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    values: dict[str, str] = {}
    base_dir = Path.cwd()
    if args.config:
        values.update(read_config_file(args.config))
        base_dir = Path(args.config).resolve().parent
    flags = {
        "train.seed": args.seed,
        "train.method": args.method,
        "train.speed_cells_per_step": args.speed,
        "train.episodes": args.episodes,
        "train.runs": args.runs,
    }
    for key, value in flags.items():
        if value is not None:
            values[key] = str(value)
    if args.runs is not None and args.runs < 1:
        raise ConfigError(f"runs must be >= 1, got {args.runs}")
    cfg = build_config(values, base_dir)
    overrides = {}
    if args.plan:
        p = Path(args.plan)
        overrides["plan_path"] = p if p.exists() else fixture_path(args.plan)
    if args.field:
        overrides["field"] = Load(Path(args.field))
    if args.out:
        overrides["output_dir"] = Path(args.out)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".rssnav-write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc.strerror or exc}") from None
    return path


def field_preview(plan: FloorPlan, field: RssField) -> str:
    """One character per cell by RSS decile, ``@`` strongest; walls blank."""
    free = ~plan.blocked
    values = field.values[free]
    edges = np.quantile(values, np.linspace(0.1, 0.9, 9))
    # snap nearly equal values so symmetric cells share a character
    idx = np.searchsorted(np.round(edges, 9), np.round(field.values, 9), side="right")
    lines = []
    for r in range(plan.rows):
        lines.append("".join(PREVIEW_RAMP[idx[r, c]] if free[r, c] else " " for c in range(plan.cols)))
    return "\n".join(lines) + "\n"


def cmd_gen_field(cfg: ExperimentConfig) -> dict[str, Path]:
    if not isinstance(cfg.field, Synthesize):
        raise ConfigError("gen-field needs field.mode = synthesize")
    plan = cfg.load_plan()
    field = cfg.build_field(plan)
    out = _prepare_out(cfg.output_dir)
    paths = {"field": out / "field.txt", "preview": out / "field_preview.txt", "figure": out / "field.png"}
    write_field(field, paths["field"])
    preview = field_preview(plan, field)
    paths["preview"].write_text(preview, encoding="utf-8")
    plotting.plot_field(plan, field, paths["figure"])
    sys.stdout.write(preview)
    log.info("aliased cells (shared RSS): %d", count_aliased_cells(plan, field))
    return paths


def summarize(cfg: TrainConfig, metrics: list[RunMetrics], plan: FloorPlan) -> str:
    report = aggregate_runs(metrics)
    first = metrics[0]

    def fmt(x):
        return "n/a" if x is None else f"{x:.3f}"

    lines = [
        f"method: {cfg.method.value}",
        f"speed_cells_per_step: {cfg.speed_cells_per_step}",
        f"runs: {report.n_runs}",
        f"episodes: {cfg.episodes}",
        f"seed: {cfg.seed}",
        f"converged_runs: {report.n_runs - report.not_converged}",
        f"mean_convergence_episode: {fmt(report.mean_convergence_episode)}",
        f"std_convergence_episode: {fmt(report.std_convergence_episode)}",
        f"mean_convergence_sim_time_s: {fmt(report.mean_convergence_time_s)}",
        f"final_reached_runs: {report.final_reached}",
        f"mean_final_path_length_m: {report.mean_final_path_length_m:.3f}",
        f"run0_final_path_steps: {len(first.final_trajectory) - 1}",
        f"run0_final_path_length_m: {first.final_path_length_m:.3f}",
        f"run0_final_reached: {str(first.final_reached).lower()}",
        f"step_cap_episodes: {sum(m.step_cap_hits for m in metrics)}",
        f"states_run0: {first.n_states}",
        f"aliased_cells: {first.aliased_cells}",
    ]
    return "\n".join(lines) + "\n"


def cmd_train(cfg: ExperimentConfig) -> dict[str, Path]:
    plan = cfg.load_plan()
    field = cfg.build_field(plan)
    out = _prepare_out(cfg.output_dir)
    metrics = train_runs(plan, field, cfg.train, workers=cfg.workers)
    report = aggregate_runs(metrics)
    paths = write_metrics(out, metrics, report)
    caps = sum(m.step_cap_hits for m in metrics)
    if caps:
        log.warning("%d episode(s) stopped at the step cap of %d", caps, cfg.train.max_steps_per_episode)
    (out / "plan.plan").write_text(format_floor_plan(plan), encoding="utf-8")
    write_field(field, out / "field.txt")
    with open(out / "qtable.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("state_id,action,value\n")
        fh.write(metrics[0].table.dump())
    summary = summarize(cfg.train, metrics, plan)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    paths.update(summary=out / "summary.txt", plan=out / "plan.plan")
    return paths


def _read_csv(path: Path, header: str) -> list[list[str]]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MalformedMetrics(f"cannot read {path}: {exc.strerror}") from None
    if not lines or lines[0].strip() != header:
        raise MalformedMetrics(f"{path}: expected header {header!r}")
    return [ln.split(",") for ln in lines[1:] if ln.strip()]


def load_metrics_dir(metrics_dir) -> tuple[FloorPlan, np.ndarray, list[tuple[int, int]], np.ndarray, np.ndarray]:
    d = Path(metrics_dir)
    try:
        plan = parse_floor_plan((d / "plan.plan").read_text(encoding="utf-8"))
    except (OSError, FloorPlanError) as exc:
        raise MalformedMetrics(f"{d / 'plan.plan'}: {exc}") from None
    visits = np.zeros(plan.shape, dtype=np.int64)
    try:
        for row in _read_csv(d / "visits.csv", "row,col,count"):
            r, c, n = (int(x) for x in row)
            if n < 0:
                raise ValueError
            visits[r, c] = n
        path = []
        lines = (d / "final_path.json-lines").read_text(encoding="utf-8").splitlines()
        for ln in lines:
            if ln.strip():
                r, c = (int(x) for x in ln.split(","))
                path.append((r, c))
        steps = _read_csv(d / "steps.csv", "episode,mean_steps,std_steps")
        mean = np.array([float(s[1]) for s in steps])
        std = np.array([float(s[2]) for s in steps])
    except (ValueError, IndexError, OSError) as exc:
        raise MalformedMetrics(f"{d}: malformed metrics ({exc})") from None
    for r, c in path:
        if not plan.in_bounds((r, c)):
            raise MalformedMetrics(f"final path cell ({r},{c}) outside the plan")
    return plan, visits, path, mean, std


def visits_pgm(visits: np.ndarray, maxval: int = 255) -> str:
    """Plain PGM; grey level ``round(maxval * log1p(n) / log1p(max n))``."""
    top = int(visits.max()) if visits.size else 0
    if top > 0:
        grey = np.rint(maxval * np.log1p(visits) / np.log1p(top)).astype(int)
    else:
        grey = np.zeros(visits.shape, dtype=int)
    rows, cols = visits.shape
    lines = ["P2", f"{cols} {rows}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in grey]
    return "\n".join(lines) + "\n"


PGM_SIDECAR = """\
visits.pgm: plain (P2) graymap, one pixel per grid cell, row 0 at the top.
grey = round(255 * ln(1 + count) / ln(1 + max_count)); all-zero counts give 0.
max_count = {top}
"""


def trajectory_overlay(plan: FloorPlan, path) -> str:
    grid = [["#" if b else "." for b in row] for row in plan.blocked]
    for r, c in path:
        grid[r][c] = "*"
    grid[plan.start.row][plan.start.col] = "S"
    grid[plan.target.row][plan.target.col] = "T"
    return "\n".join("".join(row) for row in grid) + "\n"


def cmd_render(metrics_dir) -> dict[str, Path]:
    d = Path(metrics_dir)
    plan, visits, path, mean, std = load_metrics_dir(d)
    paths = {
        "pgm": d / "visits.pgm",
        "sidecar": d / "visits.pgm.txt",
        "overlay": d / "trajectory.txt",
        "heatmap": d / "visits.png",
        "curve": d / "learning_curve.png",
        "trajectory": d / "trajectory.png",
    }
    paths["pgm"].write_text(visits_pgm(visits), encoding="utf-8")
    paths["sidecar"].write_text(PGM_SIDECAR.format(top=int(visits.max())), encoding="utf-8")
    paths["overlay"].write_text(trajectory_overlay(plan, path), encoding="utf-8")
    plotting.plot_visit_heatmap(plan, visits, paths["heatmap"])
    plotting.plot_learning_curve(mean, std, paths["curve"])
    field = None
    if (d / "field.txt").exists():
        try:
            field = read_field(d / "field.txt")
        except FieldFormatError:
            field = None
    plotting.plot_trajectory(plan, path, paths["trajectory"], field=field)
    return paths


def _configure_logging():
    level = os.environ.get("RSSNAV_LOG", "info").lower()
    levels = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--plan", help="plan file or bundled fixture name")
    common.add_argument("--field", help="load this field file instead of synthesizing")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=["rss", "location", "both"])
    common.add_argument("--speed", type=int, choices=[1, 2, 4])
    common.add_argument("--episodes", type=int)
    common.add_argument("--runs", type=int)
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="rssnav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-field", parents=[common], help="synthesize an RSS field for a plan")
    sub.add_parser("train", parents=[common], help="train and write metrics")
    render = sub.add_parser("render", help="draw heat maps and paths from a metrics directory")
    render.add_argument("metrics_dir", nargs="?")
    render.add_argument("--out", dest="render_dir", help="metrics directory (alternative to positional)")
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "render":
            target = args.metrics_dir or args.render_dir
            if not target:
                parser.error("render needs a metrics directory")
            cmd_render(target)
            return 0
        if args.command == "train" and args.method == "both":
            base = resolve(argparse.Namespace(**{**vars(args), "method": None}))
            for method in ("rss", "location"):
                cfg = dataclasses.replace(
                    base,
                    train=dataclasses.replace(base.train, method=Method(method)),
                    output_dir=base.output_dir / method,
                )
                cmd_train(cfg)
            return 0
        if args.method == "both":
            args.method = None
        cfg = resolve(args)
        if args.command == "gen-field":
            cmd_gen_field(cfg)
        else:
            cmd_train(cfg)
        return 0
    except ValueError as exc:
        # config, plan, field and metrics format errors, plus invalid experiments
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
