"""Self-describing checkpoint container.

Layout: the magic line ``CSMOE-CKPT\\n``, an 8-byte little-endian header
length, a UTF-8 JSON header, then every array as contiguous little-endian
float64. The header lists each array's name, shape and byte offset, the
AdamW step counters, the global step and free-form metadata. Output bytes
depend only on the inputs, so identical runs give identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamWState, ParamState

MAGIC = b"CSMOE-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_state: AdamWState | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def _entries(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield "param", name, ckpt.params[name]
    if ckpt.opt_state is not None:
        for name in sorted(ckpt.opt_state.slots):
            s = ckpt.opt_state.slots[name]
            yield "adam_m", name, s.m
            yield "adam_v", name, s.v


def dumps(ckpt: Checkpoint) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for kind, name, arr in _entries(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"kind": kind, "name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(ckpt.step),
        "meta": ckpt.meta,
        "adam_t": (
            {n: s.t for n, s in sorted(ckpt.opt_state.slots.items())} if ckpt.opt_state is not None else None
        ),
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def loads(buf: bytes) -> Checkpoint:
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a csmoe checkpoint (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    params: dict[str, np.ndarray] = {}
    moments: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(shape)
        if entry["kind"] == "param":
            params[entry["name"]] = arr
        else:
            moments.setdefault(entry["name"], {})[entry["kind"]] = arr
    opt_state = None
    if header.get("adam_t") is not None:
        opt_state = AdamWState()
        for name, t in header["adam_t"].items():
            mv = moments[name]
            opt_state.slots[name] = ParamState(mv["adam_m"], mv["adam_v"], int(t))
    return Checkpoint(params=params, opt_state=opt_state, step=header["step"], meta=header["meta"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
