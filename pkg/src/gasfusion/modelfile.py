"""Model file: magic, version, JSON header, then raw little-endian float64 tensors.

Layout::

    b"GASFUSN\\x00"  u32 version  u32 header_len  header(JSON, UTF-8)  tensor data

The header carries the kind, spec, meta, the Adam step count and, for each
tensor, its section (``params``, ``adam.m``, ``adam.v``), name and shape.
Tensor data follows in header order. Python's float repr keeps JSON
numbers exact, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import ModelBundle, spec_from_dict, spec_to_dict
from .optim import AdamState

MAGIC = b"GASFUSN\x00"
VERSION = 1
_LE_F8 = np.dtype("<f8")


def _entries(bundle: ModelBundle):
    sections = [("params", bundle.params)]
    if bundle.adam is not None:
        sections += [("adam.m", bundle.adam.m), ("adam.v", bundle.adam.v)]
    for section, tensors in sections:
        for name in sorted(tensors):
            yield section, name, np.asarray(tensors[name], dtype=np.float64)


def dumps(bundle: ModelBundle) -> bytes:
    entries = list(_entries(bundle))
    header = {
        "kind": bundle.kind,
        "spec": spec_to_dict(bundle.spec),
        "meta": bundle.meta,
        "adam_t": None if bundle.adam is None else int(bundle.adam.t),
        "tensors": [{"section": s, "name": n, "shape": list(a.shape)} for s, n, a in entries],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    parts += [a.astype(_LE_F8, copy=False).tobytes(order="C") for _, _, a in entries]
    return b"".join(parts)


def loads(blob: bytes, source: str | None = None) -> ModelBundle:
    def fail(msg):
        raise FormatError(msg, path=source)

    if blob[: len(MAGIC)] != MAGIC:
        fail("not a model file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        fail("truncated header")
    version, head_len = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        fail(f"unsupported model file version {version}")
    if len(blob) < pos + head_len:
        fail("truncated header")
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
        kind = header["kind"]
        spec = spec_from_dict(kind, header["spec"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        fail(f"bad header: {e}")
    pos += head_len
    sections = {"params": {}, "adam.m": {}, "adam.v": {}}
    for t in tensors:
        shape = tuple(int(d) for d in t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if len(blob) < pos + nbytes:
            fail(f"truncated tensor data at {t['section']}:{t['name']}")
        if t["section"] not in sections:
            fail(f"unknown section {t['section']!r}")
        arr = np.frombuffer(blob, dtype=_LE_F8, count=nbytes // 8, offset=pos).reshape(shape)
        sections[t["section"]][t["name"]] = arr.astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        fail(f"{len(blob) - pos} trailing bytes after tensor data")
    adam = None
    if header.get("adam_t") is not None:
        adam = AdamState(sections["adam.m"], sections["adam.v"], int(header["adam_t"]))
    return ModelBundle(kind, spec, sections["params"], adam, header.get("meta") or {})


def save_bundle(bundle: ModelBundle, path) -> None:
    Path(path).write_bytes(dumps(bundle))


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read model file: {e.strerror}", path=str(path)) from None
    return loads(blob, source=str(path))
