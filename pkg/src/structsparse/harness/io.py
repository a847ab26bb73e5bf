"""Checkpoint files and result emitters (CSV, JSON, long-format layer FLOPs).

Checkpoint layout, all integers little-endian::

    b"SPKT"  u16 version
    u32 config length, config JSON (utf-8)
    u32 parameter count, then per parameter:
        u16 name length, name, u8 dtype tag, u8 ndim, u32 * ndim shape, raw data
    u32 mask count, then per prunable parameter with a mask:
        u16 name length, name, u64 bit count, packed bits (little bit order)
    32-byte sha256 of everything above
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from ..exceptions import CorruptionError, FormatError
from ..models import Model, ModelConfig, build_model
from ..pruning import PruneMask
from .training import ResultRow

MAGIC = b"SPKT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {v: k for k, v in _DTYPES.items()}


def _pack_name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def checkpoint_bytes(model: Model, mask: Optional[PruneMask] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    config = json.dumps(model.config.to_dict() if model.config else {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        data = p.value.data
        dt = data.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"cannot serialize dtype {data.dtype} of {p.name}")
        _pack_name(buf, p.name)
        buf.write(struct.pack("<BB", _TAGS[dt], data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype=dt).tobytes())
    masks = {}
    for p in model.prunable_parameters():
        m = mask.masks.get(p.name) if mask is not None else None
        m = m if m is not None else p.mask
        if m is not None:
            masks[p.name] = np.asarray(m) != 0
    buf.write(struct.pack("<I", len(masks)))
    for name, m in masks.items():
        _pack_name(buf, name)
        buf.write(struct.pack("<Q", m.size))
        buf.write(np.packbits(m.ravel(), bitorder="little").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def checkpoint_save(model: Model, mask: Optional[PruneMask], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, mask))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at byte offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def checkpoint_load(path, model: Optional[Model] = None) -> Tuple[Model, Optional[PruneMask]]:
    """Read a checkpoint, rebuilding the model from its stored config unless one is given."""
    raw = Path(path).read_bytes()
    if len(raw) < 6 + 32 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(6)
    (clen,) = r.unpack("<I")
    config = json.loads(r.take(clen).decode())
    if model is None:
        if not config:
            raise FormatError(f"{path}: no model config stored; pass a model")
        model = build_model(ModelConfig(**config))
    params = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[tag]
        data = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        if name not in params:
            raise FormatError(f"{path}: parameter {name!r} not in model")
        if params[name].shape != tuple(shape):
            raise FormatError(f"{path}: {name} has shape {tuple(shape)}, model expects {params[name].shape}")
        params[name].value.data = data.astype(dt.newbyteorder("="))
    (mcount,) = r.unpack("<I")
    masks = {}
    for _ in range(mcount):
        name = r.name()
        (bits,) = r.unpack("<Q")
        packed = np.frombuffer(r.take((bits + 7) // 8), dtype=np.uint8)
        m = np.unpackbits(packed, count=bits, bitorder="little").astype(bool)
        if name not in params:
            raise FormatError(f"{path}: mask for unknown parameter {name!r}")
        masks[name] = m.reshape(params[name].shape)
        params[name].set_mask(masks[name])
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} trailing bytes")
    return model, (PruneMask(masks) if masks else None)


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["digest", "dataset", "architecture", "head", "body", "method", "k", "s", "seed",
               "accuracy", "collapsed", "flops_sparsity", "inference_seconds", "train_seconds",
               "layer_flops"]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def row_to_csv_record(row: ResultRow) -> List[str]:
    d = row.to_dict()
    d["layer_flops"] = ";".join(_fmt(float(v)) for v in row.layer_flops)
    return [_fmt(d[c]) for c in CSV_COLUMNS]


def emit_csv(rows: Iterable[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row_to_csv_record(row))


def read_csv(path) -> List[dict]:
    """Parse a results CSV back into typed dicts."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append({
                **rec,
                "k": float(rec["k"]), "s": float(rec["s"]), "seed": int(rec["seed"]),
                "accuracy": float(rec["accuracy"]), "collapsed": rec["collapsed"] == "true",
                "flops_sparsity": float(rec["flops_sparsity"]),
                "inference_seconds": float(rec["inference_seconds"]),
                "train_seconds": float(rec["train_seconds"]),
                "layer_flops": [float(v) for v in rec["layer_flops"].split(";") if v],
            })
    return out


def emit_json(rows: Iterable[ResultRow], path) -> None:
    with open(path, "w") as fh:
        json.dump([row.to_dict() for row in rows], fh, indent=2)


def read_json(path) -> List[dict]:
    with open(path) as fh:
        return json.load(fh)


def emit_layer_flops(rows: Iterable[ResultRow], path) -> None:
    """Long format: one line per (config, layer) for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["digest", "method", "k", "head", "body", "layer_index", "layer_name", "flops_sparsity"])
        for row in rows:
            for i, (name, value) in enumerate(zip(row.layer_names, row.layer_flops)):
                writer.writerow([row.digest, row.method, _fmt(float(row.k)), row.head, row.body, i, name,
                                 _fmt(float(value))])
