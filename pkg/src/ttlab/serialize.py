"""Checkpoint persistence.

Wire format for one tensor: a header of (dtype tag u8, rank u8, dims u32
little-endian per axis) followed by the flat row-major payload, little-endian.
A checkpoint file is ``TTLB`` magic + u32 manifest length + JSON manifest +
concatenated tensor payloads; the manifest carries arbitrary metadata (model
config, predictor config, ...) and a name -> payload-offset index.
"""

import json
import struct

import numpy as np

MAGIC = b"TTLB"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(arr):
    """Serialize one array: header (dtype tag, rank, dims) + LE payload."""
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_FOR_KIND:
        raise ValueError(f"unsupported dtype {arr.dtype} for serialization")
    tag = _TAG_FOR_KIND[arr.dtype]
    head = struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr).astype(_DTYPE_TAGS[tag], copy=False).tobytes()
    return head + payload


def tensor_from_bytes(buf, offset=0):
    """Inverse of tensor_to_bytes; returns (array, offset past the payload)."""
    tag, rank = struct.unpack_from("<BB", buf, offset)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    offset += 2
    dims = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    offset += count * dtype.itemsize
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True), offset


def save_checkpoint(path, meta, tensors):
    """Write a manifest + concatenated tensor payloads to ``path``.

    ``tensors`` maps name -> ndarray; order in the file follows sorted names
    so identical contents always produce identical bytes.
    """
    blobs = []
    index = []
    offset = 0
    for name in sorted(tensors):
        blob = tensor_to_bytes(tensors[name])
        index.append({"name": name, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "tensors": index},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (meta, dict name -> ndarray)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    base = 8 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        arr, _ = tensor_from_bytes(raw, base + entry["offset"])
        tensors[entry["name"]] = arr
    return manifest["meta"], tensors
