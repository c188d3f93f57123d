"""On-disk formats: feature matrices, model checkpoints, JSONL manifests.

Feature container ("CDAF"): magic bytes, u32 rows, u32 cols, then row-major
float32 values, all little-endian.

Checkpoint container ("CDCK"): magic bytes, u32 header length, UTF-8 JSON
header {"config": ..., "tensors": [{"name", "shape", "dtype", "offset"}]},
then the concatenated little-endian tensor payloads. Byte output is a pure
function of its contents, so checkpoints can be content-hashed.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"CDAF"
CHECKPOINT_MAGIC = b"CDCK"


class ContainerError(ValueError):
    pass


def write_features(path, matrix):
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ContainerError(f"feature matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", m.shape[0], m.shape[1]))
        f.write(m.tobytes())


def read_features(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
    if data.size != rows * cols:
        raise ContainerError(f"{path}: truncated payload")
    return data.reshape(rows, cols).astype(np.float32)


def write_checkpoint(path, config, tensors):
    """tensors: ordered mapping name -> numpy array."""
    index = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        a = a.astype(dt, copy=False)
        raw = a.tobytes()
        index.append(
            {"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": config, "tensors": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def read_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    tensors = {}
    entries = header["tensors"]
    for i, entry in enumerate(entries):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        start = entry["offset"]
        end = entries[i + 1]["offset"] if i + 1 < len(entries) else len(payload)
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return header["config"], tensors


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_sha256(obj):
    """Content hash of any JSON-serializable configuration object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def ensure_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
