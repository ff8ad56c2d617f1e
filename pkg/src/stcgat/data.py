"""Dataset files, chronological splits, z-scoring and sliding windows.

Two on-disk encodings carry the same ``[N, steps, F]`` float32 payload:

* binary ``STDS``: magic, u16 version, u32 N, u32 steps, u32 F, u32
  unit_minutes, then little-endian float32 values, node-major, then time,
  then feature;
* CSV: a ``N,total_steps,F,unit_minutes`` header, then one line per time
  step holding ``N*F`` values (node-major).

Edge lists are separate text files of ``i,j`` lines (undirected).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, IngestError

MAGIC = b"STDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


@dataclass
class RawDataset:
    readings: np.ndarray  # float32 [N, steps, F]
    unit_minutes: int = 5
    edges: list[tuple[int, int]] | None = None

    @property
    def n_nodes(self) -> int:
        return self.readings.shape[0]

    @property
    def total_steps(self) -> int:
        return self.readings.shape[1]

    @property
    def n_features(self) -> int:
        return self.readings.shape[2]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # float64 [F]
    std: np.ndarray  # float64 [F]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class SplitRanges:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __getitem__(self, name: str) -> tuple[int, int]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # [B, N, T, F]
    targets: np.ndarray  # [B, N, T, F]
    starts: np.ndarray  # [B]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def ingest(path, fmt: str | None = None, edges_path=None, fill: str | None = None) -> RawDataset:
    """Read a binary or CSV dataset (format inferred from the suffix/magic if not given).

    ``fill="ffill"`` forward-fills missing values; by default they are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: no such file")
    if fmt is None:
        with open(path, "rb") as fh:
            head = fh.read(4)
        fmt = "binary" if head == MAGIC else "csv"
    if fmt == "binary":
        readings, unit = _read_binary(path)
    elif fmt == "csv":
        readings, unit = _read_csv(path)
    else:
        raise IngestError(f"unknown dataset format {fmt!r}")
    readings = _handle_missing(readings, fill, path)
    edges = read_edges(edges_path, readings.shape[0]) if edges_path is not None else None
    return RawDataset(readings, unit, edges)


def _read_binary(path: Path) -> tuple[np.ndarray, int]:
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise IngestError(f"{path}: {len(blob)} bytes, header needs {_HEADER.size} (byte offset {len(blob)})")
    magic, version, n, steps, f, unit = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise IngestError(f"{path}: unsupported version {version} at byte offset 4")
    if min(n, steps, f) < 1:
        raise IngestError(f"{path}: header declares empty shape ({n}, {steps}, {f}) at byte offset 6")
    expected = n * steps * f * 4
    payload = len(blob) - _HEADER.size
    if payload < expected:
        raise IngestError(
            f"{path}: payload truncated at byte offset {len(blob)}; header needs {expected} payload bytes, found {payload}"
        )
    if payload > expected:
        raise IngestError(f"{path}: {payload - expected} trailing bytes after byte offset {_HEADER.size + expected}")
    values = np.frombuffer(blob, dtype="<f4", count=n * steps * f, offset=_HEADER.size)
    return values.astype(np.float32).reshape(n, steps, f), unit


def _read_csv(path: Path) -> tuple[np.ndarray, int]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise IngestError(f"{path}: empty file (line 1)")
    try:
        n, steps, f, unit = (int(tok) for tok in lines[0].split(","))
    except ValueError:
        raise IngestError(f"{path}: line 1: header must be 'N,total_steps,F,unit_minutes', got {lines[0]!r}") from None
    if min(n, steps, f) < 1:
        raise IngestError(f"{path}: line 1: header declares empty shape ({n}, {steps}, {f})")
    body = [ln for ln in lines[1:]]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != steps:
        raise IngestError(f"{path}: line {len(body) + 2}: header declares {steps} time steps, found {len(body)}")
    out = np.empty((steps, n * f), dtype=np.float32)
    for t, line in enumerate(body):
        toks = line.split(",")
        if len(toks) != n * f:
            raise IngestError(f"{path}: line {t + 2}: expected {n * f} values, found {len(toks)}")
        try:
            out[t] = [float(tok) if tok.strip() else np.nan for tok in toks]
        except ValueError as exc:
            raise IngestError(f"{path}: line {t + 2}: {exc}") from None
    return np.ascontiguousarray(out.reshape(steps, n, f).transpose(1, 0, 2)), unit


def _handle_missing(readings: np.ndarray, fill: str | None, path: Path) -> np.ndarray:
    bad = ~np.isfinite(readings)
    if not bad.any():
        return readings
    node, step, feat = (int(i) for i in np.argwhere(bad)[0])
    where = f"node {node}, step {step}, feature {feat} (csv line {step + 2})"
    if fill is None:
        raise IngestError(f"{path}: missing value at {where}; pass fill='ffill' to impute")
    if fill != "ffill":
        raise ConfigError(f"unknown fill mode {fill!r}")
    out = readings.copy()
    for t in range(out.shape[1]):
        holes = ~np.isfinite(out[:, t, :])
        if holes.any():
            if t == 0:
                raise IngestError(f"{path}: cannot forward-fill a missing value at step 0 ({where})")
            out[:, t, :][holes] = out[:, t - 1, :][holes]
    return out


def read_edges(path, n_nodes: int) -> list[tuple[int, int]]:
    """Undirected edge list; duplicates (in either orientation) collapse."""
    seen: set[tuple[int, int]] = set()
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                i, j = (int(tok) for tok in line.split(","))
            except ValueError:
                raise IngestError(f"{path}: line {lineno}: expected 'i,j', got {line!r}") from None
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise IngestError(f"{path}: line {lineno}: edge ({i}, {j}) out of range for {n_nodes} nodes")
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                edges.append(key)
    return edges


def write_edges(edges, path, header: str = "") -> None:
    """``i,j`` lines; ``header`` lines are written first, each prefixed with ``#``."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header.splitlines():
            fh.write(line if line.startswith("#") else f"# {line}")
            fh.write("\n")
        fh.writelines(f"{i},{j}\n" for i, j in edges)


def export_binary(dataset: RawDataset, path) -> None:
    n, steps, f = dataset.readings.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, steps, f, dataset.unit_minutes))
        fh.write(np.ascontiguousarray(dataset.readings, dtype="<f4").tobytes())


def export_csv(dataset: RawDataset, path) -> None:
    n, steps, f = dataset.readings.shape
    rows = dataset.readings.astype(np.float32).transpose(1, 0, 2).reshape(steps, n * f)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n},{steps},{f},{dataset.unit_minutes}\n")
        for row in rows:
            fh.write(",".join(format(float(v), ".9g") for v in row) + "\n")


# ---------------------------------------------------------------------------
# splitting, scaling, windowing
# ---------------------------------------------------------------------------

def split(total_steps: int, window: int = 12) -> SplitRanges:
    """60/20/20 chronological split; the floor-division remainder goes to test."""
    if total_steps < 5 * 2 * window:
        raise ConfigError(f"{total_steps} steps is too short; need at least {10 * window} for window {window}")
    n_train = total_steps * 6 // 10
    n_val = total_steps * 2 // 10
    return SplitRanges((0, n_train), (n_train, n_train + n_val), (n_train + n_val, total_steps))


def normalize(readings: np.ndarray, train_range: tuple[int, int]) -> tuple[np.ndarray, NormStats]:
    """Z-score every split with per-feature statistics of the training slice."""
    lo, hi = train_range
    train = np.asarray(readings[:, lo:hi, :], dtype=np.float64)
    mean = train.mean(axis=(0, 1))
    std = train.std(axis=(0, 1))
    if np.any(std <= 0):
        bad = [int(i) for i in np.flatnonzero(std <= 0)]
        raise ConfigError(f"feature(s) {bad} are constant over the training slice")
    stats = NormStats(mean, std)
    return stats.apply(readings), stats


def window_starts(split_range: tuple[int, int], window: int) -> np.ndarray:
    lo, hi = split_range
    if hi - lo < 2 * window:
        raise ConfigError(f"split [{lo}, {hi}) shorter than 2*T = {2 * window}")
    return np.arange(lo, hi - 2 * window + 1)


def windows(readings: np.ndarray, split_range: tuple[int, int], window: int, batch: int,
            seed: int | None = None, shuffle: bool = False,
            targets_from: np.ndarray | None = None) -> Iterator[WindowBatch]:
    """Yield batches of ``(readings[:, s:s+T], readings[:, s+T:s+2T])`` pairs.

    Starts stay inside ``split_range``; the last partial batch is kept.
    ``targets_from`` lets targets be sliced from another array of the same
    shape (e.g. raw readings while inputs are normalised).
    """
    starts = window_starts(split_range, window)
    if shuffle:
        starts = np.random.default_rng(seed).permutation(starts)
    src_t = readings if targets_from is None else targets_from
    offsets = np.arange(window)
    for i in range(0, len(starts), batch):
        chunk = starts[i:i + batch]
        idx_in = chunk[:, None] + offsets
        inputs = np.moveaxis(readings[:, idx_in, :], 0, 1)
        targets = np.moveaxis(src_t[:, idx_in + window, :], 0, 1)
        yield WindowBatch(inputs, targets, chunk)


@dataclass
class PreparedData:
    raw: RawDataset
    normalized: np.ndarray  # float64 [N, steps, F]
    stats: NormStats
    splits: SplitRanges
    window: int


def prepare(raw: RawDataset, window: int = 12, stats: NormStats | None = None) -> PreparedData:
    """Split and normalise; pass ``stats`` to reuse a checkpoint's statistics."""
    splits = split(raw.total_steps, window)
    if stats is None:
        normalized, stats = normalize(raw.readings, splits.train)
    else:
        normalized = stats.apply(raw.readings)
    return PreparedData(raw, normalized, stats, splits, window)
