"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MPR1" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header holds the model config, the vocabulary and a tensor manifest
``name -> {shape, dtype: "f32", offset, frozen}``; offsets index into the
payload, which is the concatenation of every tensor as float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mpath.autograd import Tensor
from mpath.model import ModelConfig, ModelState
from mpath.tokenizer import Vocab

MAGIC = b"MPR1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def dumps(state: ModelState, meta: dict | None = None) -> bytes:
    manifest = {}
    chunks = []
    offset = 0
    for name, t in state.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest[name] = {"shape": list(t.shape), "dtype": "f32", "offset": offset, "frozen": not t.requires_grad}
        chunks.append(buf)
        offset += len(buf)
    header = {
        "config": state.config.to_dict(),
        "vocab": {"tokens": state.vocab.tokens, "min_count": state.vocab.min_count},
        "tensors": manifest,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(state: ModelState, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(state, meta))


def loads(blob: bytes, source: str = "<bytes>") -> tuple[ModelState, dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    payload = memoryview(blob)[start + hlen :]

    spans = []
    expected = 0
    for name, entry in header["tensors"].items():
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{source}: tensor {name} has unsupported dtype {entry.get('dtype')!r}")
        nbytes = 4 * int(np.prod(entry["shape"], dtype=np.int64))
        spans.append((entry["offset"], entry["offset"] + nbytes, name))
        expected += nbytes
    if expected != len(payload):
        raise CheckpointError(
            f"{source}: payload is {len(payload)} bytes but the manifest describes {expected} (truncated?)"
        )
    spans.sort()
    prev_end = 0
    for lo, hi, name in spans:
        if lo < prev_end or hi > len(payload):
            raise CheckpointError(f"{source}: tensor {name} overlaps another or runs past the payload")
        prev_end = hi

    params = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"]).astype(np.float32)
        params[name] = Tensor(arr.reshape(shape), requires_grad=not entry["frozen"], name=name)
    vocab = Vocab(header["vocab"]["tokens"], header["vocab"].get("min_count", 1))
    state = ModelState(ModelConfig.from_dict(header["config"]), vocab, params)
    return state, header.get("meta", {})


def load_checkpoint(path: str | Path, with_meta: bool = False):
    path = Path(path)
    state, meta = loads(path.read_bytes(), str(path))
    return (state, meta) if with_meta else state
