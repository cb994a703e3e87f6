"""Versioned, byte-deterministic on-disk formats.

Array containers are a fixed magic + JSON header (sorted keys) + raw
little-endian array bytes, so identical inputs always produce identical
files. Writes go through a temp file and an atomic rename.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .masking import BinaryChannelMask
from .model import ModelConfig, ToyTransformer
from .autodiff import Tensor

MAGIC = b"PKVF"
VERSION = 1

ALPHA_KIND = "alpha"
BETA_KIND = "beta"
CHECKPOINT_KIND = "checkpoint"


class StorageError(ValueError):
    """Corrupt, truncated, or incompatible file."""


def _atomic_write(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_container(path, kind, meta, arrays):
    """Write named float64/uint8 arrays plus JSON metadata."""
    specs = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in (np.dtype(np.float64), np.dtype(np.uint8), np.dtype(np.int64)):
            arr = arr.astype(np.float64)
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        specs.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "kind": kind, "meta": meta, "arrays": specs},
                        sort_keys=True, separators=(",", ":")).encode()
    _atomic_write(path, MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs))


def load_container(path, expect_kind=None):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise StorageError(f"{path}: bad magic at offset 0")
    if len(raw) < 8:
        raise StorageError(f"{path}: truncated header at offset {len(raw)}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise StorageError(f"{path}: truncated header at offset {len(raw)}")
    try:
        header = json.loads(raw[8:8 + hlen])
    except json.JSONDecodeError as e:
        raise StorageError(f"{path}: corrupt header: {e}") from None
    if header.get("version") != VERSION:
        raise StorageError(f"{path}: unsupported version {header.get('version')}")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise StorageError(f"{path}: expected kind {expect_kind!r}, found {header.get('kind')!r}")
    base = 8 + hlen
    arrays = {}
    for spec in header["arrays"]:
        start = base + spec["offset"]
        end = start + spec["nbytes"]
        if end > len(raw):
            raise StorageError(f"{path}: truncated array {spec['name']!r} at offset {start}")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(spec["dtype"]).newbyteorder("<"))
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(spec["dtype"])
    return header["meta"], arrays


def _dims_meta(config):
    return {"n_layers": config.n_layers, "n_kv_heads": config.n_kv_heads,
            "head_dim": config.head_dim}


def check_dims(meta, config):
    expect = _dims_meta(config)
    got = {k: meta.get(k) for k in expect}
    if got != expect:
        raise StorageError(f"dims {got} do not match model {expect}")


def save_alpha(path, alpha, config, extra=None):
    meta = _dims_meta(config)
    meta.update(extra or {})
    save_container(path, ALPHA_KIND, meta, {"alpha": np.asarray(alpha, dtype=np.float64)})


def load_alpha(path, config=None):
    meta, arrays = load_container(path, ALPHA_KIND)
    if config is not None:
        check_dims(meta, config)
    return arrays["alpha"], meta


def save_beta(path, beta, config):
    meta = _dims_meta(config)
    meta.update({"r": beta.r, "keep_ratio": beta.keep_ratio})
    save_container(path, BETA_KIND, meta, {"bits": beta.bits.astype(np.uint8)})


def load_beta(path, config=None):
    meta, arrays = load_container(path, BETA_KIND)
    if config is not None:
        check_dims(meta, config)
    # BinaryChannelMask validates the per-head alignment invariant
    return BinaryChannelMask(bits=arrays["bits"], r=int(meta["r"]),
                             keep_ratio=float(meta["keep_ratio"])), meta


def save_checkpoint(path, model):
    c = model.config
    meta = {"config": {"n_layers": c.n_layers, "n_q_heads": c.n_q_heads,
                       "n_kv_heads": c.n_kv_heads, "head_dim": c.head_dim,
                       "d_model": c.d_model, "d_ff": c.d_ff, "vocab_size": c.vocab_size,
                       "rope_base": c.rope_base, "max_pos": c.max_pos}}
    save_container(path, CHECKPOINT_KIND, meta,
                   {k: v.data for k, v in model.params.items()})


def load_checkpoint(path):
    meta, arrays = load_container(path, CHECKPOINT_KIND)
    cfg = dict(meta["config"])
    cfg.pop("d_model", None)  # derived
    config = ModelConfig(**cfg)
    params = {k: Tensor(v) for k, v in arrays.items()}
    return ToyTransformer(config, params)


def save_json(path, obj):
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2).encode() + b"\n")


def load_json(path):
    with open(path) as f:
        return json.load(f)


def save_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
