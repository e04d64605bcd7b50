"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DORLCKPT"          8-byte magic
    u16                  format version
    u32                  manifest length in bytes
    manifest             UTF-8 JSON: {"meta": {...}, "tensors": [entry, ...]}
    payload              raw little-endian tensor bytes

Each manifest entry records ``name``, ``dtype`` (numpy little-endian string
such as ``"<f4"``), ``shape``, ``offset`` (into the payload), ``nbytes`` and
``frozen``.
"""
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .autograd import Tensor
from .params import ParamStore

MAGIC = b"DORLCKPT"
VERSION = 1


def write_container(path, arrays, frozen=None, meta=None):
    frozen = frozen or {}
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "frozen": bool(frozen.get(name, False)),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    return path


def read_container(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<HI", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 6
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: corrupt manifest ({exc})") from None
    payload = start + mlen
    arrays, frozen = {}, {}
    for e in manifest["tensors"]:
        lo = payload + e["offset"]
        buf = data[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise DataError(f"{path}: truncated payload for '{e['name']}'")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        frozen[e["name"]] = e["frozen"]
    return arrays, frozen, manifest.get("meta", {})


def save_params(path, params, meta=None):
    arrays = {n: t.data for n, t in params.items()}
    frozen = {n: params.is_frozen(n) for n in params}
    return write_container(path, arrays, frozen, meta)


def load_params(path):
    arrays, frozen, meta = read_container(path)
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, Tensor(arr), frozen=frozen[name])
    return store, meta
