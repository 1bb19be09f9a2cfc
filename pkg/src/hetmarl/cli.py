"""Command-line entry points: train, eval, baseline, plot, gradcheck.

Exit codes are 0 on success, 1 for usage or configuration errors and 2 for
runtime failures such as divergence or I/O errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import IO, Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .env import Skirmish
from .errors import ConfigError, DivergenceError, FormatError, HetmarlError
from .graph import random_graph
from .model import ModelConfig, load_checkpoint, network_gradient_error, save_checkpoint
from .trainer import TrainConfig, TrainMetrics, baseline, evaluate, train

log = logging.getLogger(__name__)

METRIC_FIELDS = [f.name for f in fields(TrainMetrics)]
SEED_ENV = "HETMARL_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------- configuration


def _coerce(key: str, value, kind: type, source: str):
    """Check a JSON value against the field type; ints are accepted for floats."""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(value, kind):
        return value
    raise ConfigError(f"{source}: {key!r} must be {kind.__name__}, got {value!r}")


def _parse_flag(key: str, text: str, kind: type):
    if kind is bool:
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"--{key}: expected true or false, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"--{key}: expected {kind.__name__}, got {text!r}") from None


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                 environ: dict[str, str] | None = None) -> TrainConfig:
    """Resolve a TrainConfig from a flat JSON file plus string-valued flag overrides.

    Precedence for every key is flag, then file, then default. The seed
    additionally falls back to ``HETMARL_SEED`` when neither flag nor file
    sets it.
    """
    types = TrainConfig.field_types()
    values: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for key, value in doc.items():
            if key not in types:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key], str(path))
    for key, text in (overrides or {}).items():
        if key not in types:
            raise ConfigError(f"unknown option --{key}")
        values[key] = _parse_flag(key, text, types[key])
    env = os.environ if environ is None else environ
    if "seed" not in values and env.get(SEED_ENV):
        values["seed"] = _parse_flag(SEED_ENV, env[SEED_ENV], int)
    return TrainConfig(**values)


# ---------------------------------------------------------------- metrics and plots


class MetricsWriter:
    """CSV sink that flushes after every row so interrupted runs keep their data."""

    def __init__(self, stream: IO[str]):
        self.stream = stream
        self.writer = csv.writer(stream, lineterminator="\n")
        self.writer.writerow(METRIC_FIELDS)
        stream.flush()
        self.rows = 0

    def write(self, m: TrainMetrics) -> None:
        self.writer.writerow([m.episode, m.steps_alive, repr(float(m.mean_agent_reward)),
                              repr(float(m.epsilon)), repr(float(m.mean_loss)),
                              repr(float(m.wall_seconds))])
        self.stream.flush()
        self.rows += 1


def emit_metrics(stream: Iterable[TrainMetrics], path: str | Path) -> int:
    """Write ``stream`` to a metrics CSV; returns the number of rows."""
    with open(path, "w", newline="") as fh:
        sink = MetricsWriter(fh)
        for m in stream:
            sink.write(m)
    return sink.rows


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRIC_FIELDS:
            raise FormatError(f"{path}: unexpected header {header}", 0)
        rows = [r for r in reader if r]
    cols = list(zip(*rows)) if rows else [()] * len(METRIC_FIELDS)
    return {name: np.asarray(col, dtype=np.float64) for name, col in zip(METRIC_FIELDS, cols)}


def smooth(values: Sequence[float], smoothing: float = 0.99) -> np.ndarray:
    """Exponential smoothing ``s_t = a s_{t-1} + (1 - a) x_t`` seeded with ``x_0``."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must lie in [0, 1), got {smoothing}")
    x = np.asarray(values, dtype=np.float64)
    out = np.empty_like(x)
    acc = x[0] if len(x) else 0.0
    for i, v in enumerate(x):
        acc = smoothing * acc + (1.0 - smoothing) * v
        out[i] = acc
    return out


def _polyline(xs, ys, box, limits, style: str) -> str:
    x0, y0, w, h = box
    (xmin, xmax), (ymin, ymax) = limits
    sx = w / (xmax - xmin) if xmax > xmin else 0.0
    sy = h / (ymax - ymin) if ymax > ymin else 0.0
    pts = " ".join(f"{x0 + (x - xmin) * sx:.2f},{y0 + h - (y - ymin) * sy:.2f}"
                   for x, y in zip(xs, ys))
    return f'<polyline fill="none" {style} points="{pts}"/>'


def _panel(xs, raw, smoothed, box, title: str, ylabel: str) -> list[str]:
    x0, y0, w, h = box
    lo, hi = float(min(raw.min(), smoothed.min())), float(max(raw.max(), smoothed.max()))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    limits = ((float(xs[0]), float(xs[-1])), (lo, hi))
    return [
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#999"/>',
        f'<text x="{x0 + w / 2}" y="{y0 - 8}" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{x0 - 45}" y="{y0 + h / 2}" text-anchor="middle" '
        f'transform="rotate(-90 {x0 - 45} {y0 + h / 2})">{escape(ylabel)}</text>',
        f'<text x="{x0 - 5}" y="{y0 + 4}" text-anchor="end">{hi:.3g}</text>',
        f'<text x="{x0 - 5}" y="{y0 + h}" text-anchor="end">{lo:.3g}</text>',
        f'<text x="{x0}" y="{y0 + h + 16}">{xs[0]:.0f}</text>',
        f'<text x="{x0 + w}" y="{y0 + h + 16}" text-anchor="end">{xs[-1]:.0f}</text>',
        f'<text x="{x0 + w / 2}" y="{y0 + h + 30}" text-anchor="middle">episode</text>',
        _polyline(xs, raw, box, limits, 'class="raw" stroke="#1f77b4" stroke-opacity="0.25" '
                                        'stroke-width="1"'),
        _polyline(xs, smoothed, box, limits, 'class="smoothed" stroke="#1f77b4" '
                                             'stroke-width="2.5"'),
    ]


def emit_plot(metrics_path: str | Path, out_path: str | Path, smoothing: float = 0.99) -> None:
    """Two stacked charts: steps alive (top) and mean reward per agent (bottom)."""
    cols = read_metrics(metrics_path)
    n = len(cols["episode"])
    if n < 2:
        raise ConfigError(f"{metrics_path}: need at least 2 episodes to plot, found {n}")
    xs = cols["episode"]
    width, height, left = 640, 560, 70
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">']
    panels = [("steps_alive", "Number of steps", "steps alive"),
              ("mean_agent_reward", "Average reward per agent", "reward")]
    for k, (col, title, ylabel) in enumerate(panels):
        raw = cols[col]
        parts += _panel(xs, raw, smooth(raw, smoothing), (left, 30 + k * 270, width - left - 20, 200),
                        title, ylabel)
    parts.append("</svg>")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------- runs


def write_manifest(out_dir: Path, cfg: TrainConfig) -> dict:
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    manifest = {
        "run_id": f"{stamp}-seed{cfg.seed}",
        "version": __version__,
        "config": cfg.to_dict(),
        "layout": {"metrics": "metrics.csv", "checkpoints": "checkpoints/",
                   "plots": "plots/", "eval": "eval.csv"},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                               + "\n")
    return manifest


def run_train(cfg: TrainConfig, out_dir: str | Path, plot: bool = True) -> int:
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg)

    def on_checkpoint(params, tag):
        save_checkpoint(ckpt_dir / f"{tag}.hmagq", params)

    with open(out / "metrics.csv", "w", newline="") as fh:
        sink = MetricsWriter(fh)
        try:
            result = train(cfg, on_checkpoint, sink.write)
        except DivergenceError as exc:
            log.error("training diverged: %s", exc)
            return EXIT_RUNTIME
    log.info("%d episodes, %d optimizer steps", len(result.metrics), result.optimizer_steps)
    if plot and len(result.metrics) >= 2:
        emit_plot(out / "metrics.csv", out / "plots" / "metrics.svg")
    return EXIT_OK


def _write_rows(path: Path, rows: list[TrainMetrics]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    emit_metrics(rows, path)


def _report(summary, label: str) -> None:
    print(f"{label}: episodes={len(summary.episodes)} "
          f"steps_all={summary.mean_steps_all:.3f} reward_all={summary.mean_reward_all:.4f} "
          f"steps_last10={summary.mean_steps_last10:.3f} "
          f"reward_last10={summary.mean_reward_last10:.4f}")


def run_eval(cfg: TrainConfig, checkpoint: str | Path, episodes: int,
             out_path: str | Path) -> int:
    params = load_checkpoint(checkpoint)
    summary = evaluate(params, episodes, cfg.seed, cfg.env_config())
    _write_rows(Path(out_path), summary.episodes)
    _report(summary, "eval")
    return EXIT_OK


def run_baseline(cfg: TrainConfig, episodes: int, out_path: str | Path) -> int:
    summary = baseline(episodes, cfg.seed, cfg.env_config())
    _write_rows(Path(out_path), summary.episodes)
    _report(summary, "baseline")
    return EXIT_OK


def run_gradcheck(cfg: TrainConfig, graphs: int = 20) -> int:
    env = Skirmish(cfg.env_config())
    rng = np.random.default_rng(cfg.seed)
    sample = [random_graph(env.class_table, int(rng.integers(5, 9)), rng) for _ in range(graphs)]
    model_cfg = ModelConfig(env.class_table, comms=cfg.comms, frf=cfg.frf,
                            num_bases=cfg.num_bases)
    start = time.perf_counter()
    err = network_gradient_error(sample, model_cfg, rng)
    print(f"gradcheck comms={cfg.comms} frf={cfg.frf} graphs={graphs}: "
          f"max relative error {err:.3e} ({time.perf_counter() - start:.1f}s)")
    return EXIT_OK if err < 1e-4 else EXIT_RUNTIME


# ---------------------------------------------------------------- argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    group = p.add_argument_group("config overrides (flag wins over file)")
    for name, kind in TrainConfig.field_types().items():
        group.add_argument(f"--{name}", dest=f"cfg_{name}", metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetmarl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a network and write metrics.csv")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("eval", help="greedy rollouts of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--out", default="eval.csv")

    p = sub.add_parser("baseline", help="rollouts of uniformly random agents")
    _add_config_flags(p)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--out", default="baseline.csv")

    p = sub.add_parser("plot", help="render a metrics CSV as SVG")
    p.add_argument("metrics")
    p.add_argument("--out", default="plots/metrics.svg")
    p.add_argument("--smoothing", type=float, default=0.99)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    _add_config_flags(p)
    p.add_argument("--graphs", type=int, default=20)
    return parser


def _config_from_args(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "plot":
            emit_plot(args.metrics, args.out, args.smoothing)
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.verb == "train":
            return run_train(cfg, args.out, plot=not args.no_plot)
        if args.verb == "eval":
            return run_eval(cfg, args.checkpoint, args.episodes, args.out)
        if args.verb == "baseline":
            return run_baseline(cfg, args.episodes, args.out)
        return run_gradcheck(cfg, args.graphs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HetmarlError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
