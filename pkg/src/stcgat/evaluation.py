"""Forecast metrics, the history-average baseline and metric reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import PreparedData, windows
from .errors import ConfigError, ContractError, UndefinedMetricError

MAPE_THRESHOLD = 1e-4
SUMMARY_HORIZONS = (3, 6, 9, 12)


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ContractError("metric of an empty array")
    return y_true, y_pred


def mae(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.mean(np.abs(y_true - y_pred)))


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def mape_masked(y_true, y_pred, threshold: float = MAPE_THRESHOLD) -> tuple[float, int]:
    """MAPE in percent over elements with ``|y_true| > threshold``, plus the masked count."""
    y_true, y_pred = _pair(y_true, y_pred)
    keep = np.abs(y_true) > threshold
    masked = int(y_true.size - keep.sum())
    if not keep.any():
        raise UndefinedMetricError(f"MAPE undefined: all {y_true.size} targets have |y| <= {threshold}")
    ratio = np.abs((y_true[keep] - y_pred[keep]) / y_true[keep])
    return float(100.0 * ratio.mean()), masked


def mape(y_true, y_pred, threshold: float = MAPE_THRESHOLD) -> float:
    return mape_masked(y_true, y_pred, threshold)[0]


def ha_baseline(inputs: np.ndarray) -> np.ndarray:
    """Forecast every horizon step as the per-node, per-feature mean of the input window."""
    inputs = np.asarray(inputs)
    return np.broadcast_to(inputs.mean(axis=-2, keepdims=True), inputs.shape).copy()


@dataclass
class MetricRow:
    horizon: str
    mae: float
    rmse: float
    mape: float
    count: int
    masked: int


@dataclass
class MetricReport:
    horizons: list[MetricRow]
    aggregate: MetricRow
    starts: np.ndarray

    def mae_by_horizon(self) -> np.ndarray:
        return np.array([r.mae for r in self.horizons])


def _row(label: str, y_true: np.ndarray, y_pred: np.ndarray, threshold: float) -> MetricRow:
    try:
        mp, masked = mape_masked(y_true, y_pred, threshold)
    except UndefinedMetricError:
        mp, masked = float("nan"), int(y_true.size)
    return MetricRow(label, mae(y_true, y_pred), rmse(y_true, y_pred), mp, int(y_true.size), masked)


def metric_report(y_true: np.ndarray, y_pred: np.ndarray, starts=None,
                  threshold: float = MAPE_THRESHOLD) -> MetricReport:
    """Per-horizon and pooled metrics for ``[S, N, T, F]`` arrays in raw units."""
    y_true, y_pred = _pair(y_true, y_pred)
    rows = [_row(str(h + 1), y_true[:, :, h, :], y_pred[:, :, h, :], threshold)
            for h in range(y_true.shape[2])]
    agg = _row("all", y_true, y_pred, threshold)
    return MetricReport(rows, agg, np.asarray(starts if starts is not None else []))


Forecaster = Callable[[np.ndarray], np.ndarray]


def collect(data: PreparedData, split: str, forecaster: Forecaster, normalized: bool,
            batch: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run ``forecaster`` over ``split`` windows in order.

    With ``normalized`` the forecaster sees z-scored inputs and its output
    is mapped back to raw units; otherwise it works on raw readings.
    Targets always come from the raw readings.
    """
    raw = data.raw.readings.astype(np.float64)
    source = data.normalized if normalized else raw
    preds, trues, starts = [], [], []
    for wb in windows(source, data.splits[split], data.window, batch, targets_from=raw):
        out = np.asarray(forecaster(wb.inputs), dtype=np.float64)
        preds.append(data.stats.invert(out) if normalized else out)
        trues.append(wb.targets)
        starts.append(wb.starts)
    return np.concatenate(trues), np.concatenate(preds), np.concatenate(starts)


def evaluate(model, data: PreparedData, split: str = "test",
             threshold: float = MAPE_THRESHOLD) -> MetricReport:
    """Metrics of ``model`` on ``split`` in denormalised units."""
    cfg = model.config
    if cfg.n_nodes != data.raw.n_nodes or cfg.n_features != data.raw.n_features:
        raise ConfigError(
            f"model expects {cfg.n_nodes} nodes x {cfg.n_features} features, "
            f"dataset has {data.raw.n_nodes} x {data.raw.n_features}"
        )
    if cfg.window != data.window:
        raise ConfigError(f"model window {cfg.window} != data window {data.window}")
    y_true, y_pred, starts = collect(data, split, model.predict, normalized=True, batch=cfg.batch)
    return metric_report(y_true, y_pred, starts, threshold)


def evaluate_ha(data: PreparedData, split: str = "test", threshold: float = MAPE_THRESHOLD) -> MetricReport:
    y_true, y_pred, starts = collect(data, split, ha_baseline, normalized=False)
    return metric_report(y_true, y_pred, starts, threshold)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_report_csv(report: MetricReport, path, header: Sequence[str] = ()) -> None:
    """``horizon,mae,rmse,mape,count,masked``; comment lines first, aggregate row last."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["horizon", "mae", "rmse", "mape", "count", "masked"])
        for r in report.horizons + [report.aggregate]:
            writer.writerow([r.horizon, repr(r.mae), repr(r.rmse), repr(r.mape), r.count, r.masked])


def format_summary(report: MetricReport, unit_minutes: int = 5, title: str = "") -> str:
    shown = [r for r in report.horizons if int(r.horizon) in SUMMARY_HORIZONS]
    lines = [title] if title else []
    lines.append(f"{'horizon':>8} {'minutes':>8} {'MAE':>10} {'RMSE':>10} {'MAPE%':>9}")
    for r in shown:
        lines.append(f"{r.horizon:>8} {int(r.horizon) * unit_minutes:>8} {r.mae:>10.4f} {r.rmse:>10.4f} {r.mape:>9.3f}")
    a = report.aggregate
    lines.append(f"{'all':>8} {'':>8} {a.mae:>10.4f} {a.rmse:>10.4f} {a.mape:>9.3f}")
    lines.append(f"windows={len(report.starts)} elements={a.count} mape_masked={a.masked}")
    return "\n".join(lines) + "\n"
