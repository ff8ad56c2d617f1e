"""Command-line entry point: ``stcgat <command> [flags]``.

Every command resolves its settings as built-in defaults < ``--config`` file
< command-line flags (``STCGAT_SEED`` fills in a seed nobody set), writes the
result to ``<out>/config.resolved`` and echoes it as ``#`` comment lines at
the top of every CSV it produces. Feeding ``config.resolved`` back through
``--config`` reproduces the run.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import NormStats, PreparedData, export_binary, ingest, prepare, split, write_edges
from .errors import ConfigError, NumericError, StcgatError
from .evaluation import evaluate, evaluate_ha, format_summary, write_report_csv
from .gradcheck import TINY, format_report, gradcheck
from .model import ABLATIONS, STCGAT, ModelConfig, _coerce, _fmt, predefined_adjacency
from .synth import SynthParams, generate
from .training import train

log = logging.getLogger("stcgat")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "STCGAT_SEED"
MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}

# flags that map onto ModelConfig fields; --epochs sets max_epochs
_MODEL_FLAGS = [
    ("window", int, "input / horizon length T"),
    ("embed_dim", int, "node embedding width d"),
    ("hidden", int, "recurrent hidden width per direction"),
    ("heads", int, "attention heads per graph layer"),
    ("head_hidden", int, "hidden width of the prediction head"),
    ("kernel", int, "TCN kernel size"),
    ("tcn_levels", int, "TCN blocks (dilations 1, 2, 4, ...)"),
    ("dropout", float, "TCN dropout rate"),
    ("leaky_slope", float, "leaky-relu negative slope"),
    ("lr", float, "Adam learning rate"),
    ("batch", int, "mini-batch size"),
    ("patience", int, "early-stopping patience in epochs"),
    ("dtype", str, "float32 (training) or float64"),
]

# run-level keys and their types, per command
_RUN_KEYS = {
    "data": str, "edges": str, "format": str, "fill": str, "out": str, "checkpoint": str,
    "input": str, "split": str, "baseline": str, "max_steps": int, "log_wall_time": bool,
    "corrupt": str, "steps": int, "rho": float, "coupling": float, "sigma": float,
    "period": int, "unit_minutes": int,
}
_COMMAND_KEYS = {
    "train": {"data", "edges", "format", "fill", "out", "max_steps", "log_wall_time"},
    "eval": {"checkpoint", "data", "format", "fill", "out", "split", "baseline"},
    "predict": {"checkpoint", "input", "format", "fill", "out"},
    "gradcheck": {"out", "corrupt"},
    "synth": {"out", "steps", "rho", "coupling", "sigma", "period", "unit_minutes"},
}
_COMMAND_KEYS["ablate"] = _COMMAND_KEYS["train"]
# model keys each command accepts from a config file or flags
_MODEL_SCOPE = {
    "train": set(MODEL_KEYS),
    "ablate": set(MODEL_KEYS),
    "eval": set(MODEL_KEYS),
    "predict": set(MODEL_KEYS),
    "gradcheck": set(MODEL_KEYS),
    "synth": {"n_nodes", "seed"},
}


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_model_flags(p: argparse.ArgumentParser, epochs: bool = True):
    for name, kind, text in _MODEL_FLAGS:
        p.add_argument(_flag(name), dest=name, type=kind, help=text)
    if epochs:
        p.add_argument("--epochs", dest="max_epochs", type=int, help="maximum training epochs")
    p.add_argument("--ablate", action="append", choices=ABLATIONS, dest="ablate",
                   help="switch on an ablation (repeatable)")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--format", choices=("binary", "csv"), help="dataset format (default: from the file magic)")
    p.add_argument("--fill", choices=("ffill",), help="forward-fill missing readings instead of rejecting them")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_file", metavar="PATH", help="key=value settings file")
    common.add_argument("--seed", type=int, help=f"RNG seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="stcgat", description="Spatio-temporal graph forecaster.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, text):
        return sub.add_parser(name, parents=[common], help=text, description=text,
                              argument_default=argparse.SUPPRESS)

    p = command("train", "train a model; writes checkpoint.stcg and epochs.csv")
    p.add_argument("--data", help="dataset file (STDS binary or CSV)")
    p.add_argument("--edges", help="edge list (needed by the no_node_embedding ablation)")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many optimiser steps")
    p.add_argument("--log-wall-time", dest="log_wall_time", action="store_true",
                   help="fill epochs.csv wall_seconds (makes the log run-dependent)")

    p = command("ablate", "train with ablations switched on (same flags as train)")
    p.add_argument("ablations", nargs="+", choices=ABLATIONS, metavar="ABLATION",
                   help=" | ".join(ABLATIONS))
    p.add_argument("--data")
    p.add_argument("--edges")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--log-wall-time", dest="log_wall_time", action="store_true")

    p = command("eval", "metrics of a checkpoint (and/or the HA baseline) on one split")
    p.add_argument("--checkpoint", help="checkpoint file; optional with --baseline ha")
    p.add_argument("--data", help="dataset file")
    _add_data_flags(p)
    p.add_argument("--split", choices=("train", "val", "test"), help="split to score (default test)")
    p.add_argument("--baseline", choices=("ha",), help="also score the history-average baseline")
    p.add_argument("--window", type=int, help="window length when no checkpoint is given")

    p = command("predict", "forecast the T steps after one input window")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--input", help="dataset file holding exactly T steps")
    _add_data_flags(p)

    p = command("gradcheck", "finite-difference check of every parameter gradient (64-bit)")
    p.add_argument("--n-nodes", dest="n_nodes", type=int, help="node count of the check config")
    _add_model_flags(p, epochs=False)
    p.add_argument("--corrupt", metavar="PARAM", help="perturb this parameter's analytic gradient (self-test)")

    p = command("synth", "generate a synthetic graph-diffusion dataset")
    p.add_argument("--nodes", dest="n_nodes", type=int, help="node count (default 10)")
    p.add_argument("--steps", type=int, help="time steps (default 2000)")
    p.add_argument("--rho", type=float, help="AR(1) self coefficient")
    p.add_argument("--coupling", type=float, help="neighbour-mean AR coefficient")
    p.add_argument("--sigma", type=float, help="innovation standard deviation")
    p.add_argument("--period", type=int, help="seasonal period in steps")
    p.add_argument("--unit-minutes", dest="unit_minutes", type=int, help="sampling interval")
    return parser


# ---------------------------------------------------------------------------
# settings resolution
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def resolve(command: str, args: argparse.Namespace, environ=os.environ) -> dict:
    """Merge defaults, ``--config`` file and flags into one typed settings dict."""
    allowed = _COMMAND_KEYS[command] | _MODEL_SCOPE[command]
    if command == "eval":
        allowed = allowed | {"window"}
    given = dict(vars(args))
    for key in ("command", "config_file", "verbose", "ablations"):
        given.pop(key, None)
    ablate = list(given.pop("ablate", []) or []) + list(getattr(args, "ablations", []) or [])

    merged: dict = {}
    if getattr(args, "config_file", None):
        for key, raw in read_config_file(args.config_file).items():
            if key == "command":
                continue
            if key not in allowed:
                raise UsageError(f"{args.config_file}: key {key!r} does not apply to {command}")
            merged[key] = raw
    merged.update(given)
    for flag in ablate:
        merged[flag] = True
    if "seed" not in merged and SEED_ENV in environ:
        merged["seed"] = environ[SEED_ENV]

    typed = {}
    for key, raw in merged.items():
        kind = MODEL_KEYS.get(key, _RUN_KEYS.get(key))
        if kind is None:
            raise UsageError(f"unknown setting {key!r}")
        typed[key] = _coerce(raw, kind, key) if raw is not None else None
    return typed


def _model_values(settings: dict) -> dict:
    return {k: v for k, v in settings.items() if k in MODEL_KEYS}


def echo_lines(command: str, settings: dict) -> list[str]:
    """The reproducibility header: command plus every resolved key except the output location."""
    return [f"command={command}"] + [f"{k}={_fmt(v)}" for k, v in sorted(settings.items())
                                     if k != "out" and v is not None]


def write_resolved(command: str, settings: dict) -> Path:
    out = Path(settings["out"])
    path = out / "config.resolved"
    body = [f"{k}={_fmt(v)}" for k, v in sorted(settings.items()) if v is not None]
    path.write_text(f"# stcgat {command}\ncommand={command}\n" + "\n".join(body) + "\n", encoding="utf-8")
    return path


def _require(settings: dict, *keys: str):
    missing = [_flag(k) for k in keys if not settings.get(k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _out_dir(settings: dict) -> Path:
    out = Path(settings["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(settings: dict, command: str = "train") -> int:
    _require(settings, "data", "out")
    raw = ingest(settings["data"], settings.get("format"), settings.get("edges"), settings.get("fill"))
    values = _model_values(settings)
    for key, actual in (("n_nodes", raw.n_nodes), ("n_features", raw.n_features)):
        if key in values and values[key] != actual:
            raise UsageError(f"{key}={values[key]} but the dataset has {actual}")
        values[key] = actual
    values.setdefault("seed", 0)
    config = ModelConfig.from_mapping(values)
    adjacency = None
    if config.no_node_embedding:
        if raw.edges is None:
            raise UsageError("no_node_embedding needs --edges")
        adjacency = predefined_adjacency(raw.edges, raw.n_nodes)
    data = prepare(raw, config.window)
    model = STCGAT(config, adjacency=adjacency)

    # the resolved config carries every model field so a rerun needs nothing else
    settings = {**settings, **config.to_dict()}
    out = _out_dir(settings)
    write_resolved(command, settings)
    header = echo_lines(command, settings)
    wall = bool(settings.get("log_wall_time"))
    rows = []

    def on_epoch(e):
        rows.append([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.wall_seconds) if wall else ""])
        log.info("epoch %d train %.6f val %.6f", e.epoch, e.train_loss, e.val_loss)

    try:
        result = train(model, data, max_steps=settings.get("max_steps"), on_epoch=on_epoch)
    finally:
        _write_csv(out / "epochs.csv", header, ["epoch", "train_loss", "val_loss", "wall_seconds"], rows)
    save_checkpoint(out / "checkpoint.stcg", model, data.stats)
    print(f"trained {len(result.history)} epoch(s), {result.steps} step(s); "
          f"best val L1 {result.best_val:.6f} at epoch {result.best_epoch}; wrote {out}")
    return EXIT_OK


def cmd_ablate(settings: dict) -> int:
    return cmd_train(settings, command="ablate")


def _checkpoint_model(settings: dict):
    values = _model_values(settings)
    model, stats = load_checkpoint(settings["checkpoint"])
    if values:
        expected = model.config.replace(**values)
        if expected.digest() != model.config.digest():
            load_checkpoint(settings["checkpoint"], expected)  # raises naming the differing keys
    return model, stats


def cmd_eval(settings: dict) -> int:
    _require(settings, "data", "out")
    baseline = settings.get("baseline")
    if not settings.get("checkpoint") and baseline is None:
        raise UsageError("eval needs --checkpoint, --baseline ha, or both")
    split_name = settings.setdefault("split", "test")
    raw = ingest(settings["data"], settings.get("format"), None, settings.get("fill"))
    model = None
    if settings.get("checkpoint"):
        model, stats = _checkpoint_model(settings)
        settings = {**settings, **model.config.to_dict()}
        data = prepare(raw, model.config.window, stats)
    else:
        window = settings.setdefault("window", 12)
        # HA works on raw readings, so no scaling is needed (or possible for a constant series)
        f = raw.n_features
        data = PreparedData(raw, raw.readings.astype(np.float64), NormStats(np.zeros(f), np.ones(f)),
                            split(raw.total_steps, window), window)

    out = _out_dir(settings)
    write_resolved("eval", settings)
    header = echo_lines("eval", settings)
    summaries = []
    if model is not None:
        report = evaluate(model, data, split_name)
        write_report_csv(report, out / "metrics.csv", header)
        summaries.append(format_summary(report, raw.unit_minutes, f"STCGAT ({split_name})"))
    if baseline == "ha":
        report = evaluate_ha(data, split_name)
        write_report_csv(report, out / "metrics_ha.csv", header)
        summaries.append(format_summary(report, raw.unit_minutes, f"HA ({split_name})"))
    text = "\n".join(summaries)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(settings: dict) -> int:
    _require(settings, "checkpoint", "input", "out")
    model, stats = _checkpoint_model(settings)
    cfg = model.config
    raw = ingest(settings["input"], settings.get("format"), None, settings.get("fill"))
    if raw.total_steps != cfg.window:
        raise UsageError(f"input window has {raw.total_steps} steps; the model needs exactly {cfg.window}")
    if (raw.n_nodes, raw.n_features) != (cfg.n_nodes, cfg.n_features):
        raise UsageError(f"input has {raw.n_nodes} nodes x {raw.n_features} features; "
                         f"the model expects {cfg.n_nodes} x {cfg.n_features}")
    settings = {**settings, **cfg.to_dict()}
    pred = stats.invert(model.predict(stats.apply(raw.readings)[None]))[0]  # [N, T, F]
    out = _out_dir(settings)
    write_resolved("predict", settings)
    rows = ([i, h + 1, f, repr(float(pred[i, h, f]))]
            for i in range(cfg.n_nodes) for h in range(cfg.window) for f in range(cfg.n_features))
    _write_csv(out / "forecast.csv", echo_lines("predict", settings), ["node", "horizon", "feature", "value"], rows)
    print(f"wrote {cfg.n_nodes * cfg.window * cfg.n_features} forecast rows to {out / 'forecast.csv'}")
    return EXIT_OK


def cmd_gradcheck(settings: dict) -> int:
    _require(settings, "out")
    values = dict(TINY, dtype="float64", seed=0)
    values.update(_model_values(settings))
    config = ModelConfig.from_mapping(values)
    report = gradcheck(config, seed=config.seed, corrupt=settings.get("corrupt"))
    settings = {**settings, **config.to_dict()}
    out = _out_dir(settings)
    write_resolved("gradcheck", settings)
    rows = [[c.name, c.size, repr(c.max_rel_error), repr(c.max_abs_error), "ok" if c.passed else "FAIL"]
            for c in report.checks]
    _write_csv(out / "gradcheck.csv", echo_lines("gradcheck", settings),
               ["parameter", "size", "max_rel_error", "max_abs_error", "status"], rows)
    sys.stdout.write(format_report(report))
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_synth(settings: dict) -> int:
    _require(settings, "out")
    settings.setdefault("seed", 0)
    keys = {"n_nodes", "seed", "steps", "rho", "coupling", "sigma", "period", "unit_minutes"}
    result = generate(SynthParams(**{k: v for k, v in settings.items() if k in keys}))
    p = result.params
    settings.update(n_nodes=p.n_nodes, steps=p.steps, rho=p.rho, coupling=p.coupling, sigma=p.sigma,
                    period=p.period, unit_minutes=p.unit_minutes)
    out = _out_dir(settings)
    write_resolved("synth", settings)
    export_binary(result.dataset, out / "synth.stds")
    # the generative equations travel as the edge list's comment header
    write_edges(result.dataset.edges, out / "edges.csv", header=result.describe())
    print(f"wrote {p.n_nodes} nodes x {p.steps} steps to {out / 'synth.stds'} "
          f"and {len(result.dataset.edges)} edges to {out / 'edges.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve(args.command, args)
        return COMMANDS[args.command](settings)
    except NumericError as exc:
        print(f"stcgat {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StcgatError, OSError) as exc:
        print(f"stcgat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
