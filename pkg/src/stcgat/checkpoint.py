"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"STCG"  u16 version
    u32 len  config text (canonical key-sorted key=value lines, UTF-8)
    32 B     sha256 of the config text
    u32 F    F x f64 mean, F x f64 std
    u32 R    R records: u16 name_len, name, u8 ndim, ndim x u32, float32 values
    u32      crc32 of every preceding byte

Non-learnable tensors (the predefined adjacency of the no-embedding
ablation) are stored as records whose name starts with ``const.``.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import NormStats
from .errors import CheckpointError, ConfigError
from .model import STCGAT, ModelConfig

MAGIC = b"STCG"
VERSION = 1
_ADJ = "const.adjacency"


def save_checkpoint(path, model: STCGAT, stats: NormStats) -> None:
    text = model.config.canonical().encode("utf-8")
    out = bytearray()
    out += MAGIC + struct.pack("<H", VERSION)
    out += struct.pack("<I", len(text)) + text
    out += hashlib.sha256(text).digest()
    mean = np.asarray(stats.mean, dtype="<f8").ravel()
    std = np.asarray(stats.std, dtype="<f8").ravel()
    out += struct.pack("<I", mean.size) + mean.tobytes() + std.tobytes()
    records = [(p.name, p.data) for p in model.params]
    if model.adjacency is not None:
        records.append((_ADJ, model.adjacency))
    out += struct.pack("<I", len(records))
    for name, arr in records:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated while reading {what} at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[STCGAT, NormStats]:
    """Rebuild the model and normalisation statistics stored at ``path``.

    ``expected`` (if given) must hash identically to the stored config.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read: {exc}") from None
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupt)")
    (n_text,) = r.unpack("<I", "config length")
    text = r.take(n_text, "config")
    digest = r.take(32, "config hash")
    if hashlib.sha256(text).digest() != digest:
        raise CheckpointError(f"{path}: config hash mismatch")
    try:
        config = ModelConfig.parse(text.decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: unreadable config: {exc}") from None
    if expected is not None and expected.digest() != config.digest():
        ours, theirs = expected.to_dict(), config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        raise CheckpointError(f"{path}: config mismatch on {', '.join(diff)}")
    (n_feat,) = r.unpack("<I", "feature count")
    mean = np.frombuffer(r.take(8 * n_feat, "mean"), dtype="<f8").astype(np.float64)
    std = np.frombuffer(r.take(8 * n_feat, "std"), dtype="<f8").astype(np.float64)
    (n_rec,) = r.unpack("<I", "record count")
    state, adjacency = {}, None
    for _ in range(n_rec):
        (n_name,) = r.unpack("<H", "name length")
        name = r.take(n_name, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(4 * count, f"{name} values"), dtype="<f4").reshape(shape)
        if name == _ADJ:
            adjacency = values.astype(np.float64)
        else:
            state[name] = values
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} unexpected trailing bytes")
    try:
        model = STCGAT(config, adjacency=adjacency)
        model.params.load_state(state)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, NormStats(mean, std)
