"""Binary checkpoint format.

Layout::

    b"HORN"                      magic
    u8                           format version
    u32 little-endian            header length in bytes
    header                       UTF-8 JSON
    raw arrays                   little-endian IEEE-754, in manifest order

The header holds the model config, training settings, optimiser state, RNG
state, corpus hash, vocabulary and two manifests (``matrices`` for the
parameters, ``opt_buffers`` for the momentum buffers). Each manifest entry
records name, shape, dtype, offset (relative to the end of the header) and
byte count.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from hornn.model import HornnConfig, Parameters, param_shapes
from hornn.numerics import Rng
from hornn.training import Checkpoint, OptState, TrainSettings

MAGIC = b"HORN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found}, this build reads version {expected}")
        self.found = found
        self.expected = expected


class CheckpointShapeError(CheckpointError):
    pass


def _manifest(named, offset: int) -> tuple[list[dict], list[bytes], int]:
    entries, blobs = [], []
    for name, arr in named:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` atomically (temp file then rename)."""
    matrices, blobs, end = _manifest(ckpt.params.named(), 0)
    buffers, buffer_blobs, _ = _manifest(ckpt.opt.buffers.named(), end)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "settings": ckpt.settings.to_dict(),
        "opt": ckpt.opt.header(),
        "rng": ckpt.rng_state,
        "corpus_hash": ckpt.corpus_hash,
        "vocab": ckpt.vocab,
        "matrices": matrices,
        "opt_buffers": buffers,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs + buffer_blobs:
            fh.write(blob)
    os.replace(tmp, path)


def _read_prefix(fh, path) -> tuple[dict, int]:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: truncated before header")
    magic, version, length = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)
    raw = fh.read(length)
    if len(raw) < length:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, _PREFIX.size + length


def read_header(path) -> dict:
    """Parse and validate the header without reading any array data."""
    path = Path(path)
    with open(path, "rb") as fh:
        header, data_start = _read_prefix(fh, path)
    entries = header.get("matrices", []) + header.get("opt_buffers", [])
    expected = data_start + sum(e["nbytes"] for e in entries)
    size = path.stat().st_size
    if size != expected:
        raise CorruptCheckpointError(f"{path}: file is {size} bytes, manifest requires {expected}")
    return header


def _arrays(fh, data_start: int, entries: list[dict], path) -> dict[str, np.ndarray]:
    out = {}
    for e in entries:
        fh.seek(data_start + e["offset"])
        blob = fh.read(e["nbytes"])
        if len(blob) != e["nbytes"]:
            raise CorruptCheckpointError(f"{path}: truncated array {e['name']}")
        dtype = np.dtype(e["dtype"])
        arr = np.frombuffer(blob, dtype=dtype).reshape(e["shape"])
        out[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    header = read_header(path)
    try:
        cfg = HornnConfig.from_dict(header["config"])
        settings = TrainSettings.from_dict(header["settings"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid config in header ({exc})") from None

    shapes = param_shapes(cfg)
    for key in ("matrices", "opt_buffers"):
        found = {e["name"]: tuple(e["shape"]) for e in header[key]}
        if found != shapes:
            raise CheckpointShapeError(
                f"{path}: {key} {found} do not match the embedded config {shapes}"
            )
        bad = [e["name"] for e in header[key] if np.dtype(e["dtype"]) != cfg.dtype]
        if bad:
            raise CheckpointShapeError(f"{path}: arrays {bad} are not {cfg.dtype}")

    with open(path, "rb") as fh:
        _, data_start = _read_prefix(fh, path)
        named = _arrays(fh, data_start, header["matrices"], path)
        buffers = _arrays(fh, data_start, header["opt_buffers"], path)

    gated = cfg.pooling == "gated"
    o = header["opt"]
    opt = OptState(
        lr=o["lr"],
        buffers=Parameters.from_named(buffers, cfg.order, gated),
        momentum=o["momentum"],
        weight_decay=o["weight_decay"],
        column_norm_cap=o["column_norm_cap"],
        epoch=o["epoch"],
        best_valid_nll=math.inf if o["best_valid_nll"] is None else o["best_valid_nll"],
        halvings=list(o.get("halvings", [])),
    )
    return Checkpoint(
        config=cfg,
        params=Parameters.from_named(named, cfg.order, gated),
        opt=opt,
        settings=settings,
        rng_state=Rng.from_state(header["rng"]).state(),
        corpus_hash=header.get("corpus_hash", ""),
        vocab=header.get("vocab"),
    )
