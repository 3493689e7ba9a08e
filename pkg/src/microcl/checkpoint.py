"""Binary checkpoint format.

Layout::

    b"MCLCK001"                       8-byte magic
    uint32 LE                         format version
    uint64 LE                         header length in bytes
    header                            canonical JSON (sorted keys, UTF-8)
    tensor payload                    little-endian arrays, header order

The header lists every tensor's name, dtype and shape, plus the layer
specs, optimizer hyperparameters, queue cursor, RNG state, loss log and
config hash.  Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import autodiff as ad

MAGIC = b"MCLCK001"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    extractor: List[ad.LayerSpec]
    head: List[ad.LayerSpec]
    params: ad.ParamSet
    ema: ad.ParamSet = field(default_factory=dict)
    velocity: ad.ParamSet = field(default_factory=dict)
    lr: float = 0.0
    momentum: float = 0.0
    queue: Optional[np.ndarray] = None  # raw ring-buffer storage
    queue_cursor: int = 0
    queue_fill: int = 0
    rng_state: Optional[dict] = None
    iteration: int = 0
    loss_log: List[list] = field(default_factory=list)
    config_hash: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)


def _tensors(ck: Checkpoint):
    for group, d in (("params", ck.params), ("ema", ck.ema), ("velocity", ck.velocity)):
        for k in sorted(d):
            yield f"{group}/{k}", d[k]
    if ck.queue is not None:
        yield "queue/storage", ck.queue


def to_bytes(ck: Checkpoint) -> bytes:
    entries, blobs = [], []
    for name, arr in _tensors(ck):
        arr = np.asarray(arr, order="C")  # ascontiguousarray would turn 0-d into 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    header = {
        "version": VERSION,
        "net": {"extractor": [l.to_dict() for l in ck.extractor], "head": [l.to_dict() for l in ck.head]},
        "tensors": entries,
        "optimizer": {"lr": ck.lr, "momentum": ck.momentum},
        "queue": {"cursor": ck.queue_cursor, "fill": ck.queue_fill},
        "rng": ck.rng_state,
        "iteration": ck.iteration,
        "loss_log": [list(row) for row in ck.loss_log],
        "config_hash": ck.config_hash,
        "extra": ck.extra,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    pos = 20 + hlen
    groups: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "ema": {}, "velocity": {}, "queue": {}}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError("truncated tensor payload")
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(e["shape"])), offset=pos).reshape(tuple(e["shape"]))
        group, name = e["name"].split("/", 1)
        groups[group][name] = arr.astype(dt.newbyteorder("="))
        pos += n
    if pos != len(raw):
        raise CheckpointError("trailing bytes after tensor payload")
    net = header["net"]
    return Checkpoint(
        extractor=[ad.LayerSpec(**d) for d in net["extractor"]],
        head=[ad.LayerSpec(**d) for d in net["head"]],
        params=groups["params"],
        ema=groups["ema"],
        velocity=groups["velocity"],
        lr=header["optimizer"]["lr"],
        momentum=header["optimizer"]["momentum"],
        queue=groups["queue"].get("storage"),
        queue_cursor=header["queue"]["cursor"],
        queue_fill=header["queue"]["fill"],
        rng_state=header["rng"],
        iteration=header["iteration"],
        loss_log=header["loss_log"],
        config_hash=header["config_hash"],
        extra=header["extra"],
    )


def save(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
