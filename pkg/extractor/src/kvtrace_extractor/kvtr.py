"""Standalone KVTR version-1 writer.

Implements the byte layout from the engine's docs/kvtr_format.md:
29-byte header, per-layer planes (keys+values per kv head, then queries
per query head, row-major float32 little-endian), and a u64
length-prefixed JSON footer. Kept free of any engine import so the
trace file is the only contract between the two packages.
"""

import json
import struct

import numpy as np

MAGIC = b"KVTR"
VERSION = 1
DTYPE_F32 = 1
HEADER_STRUCT = struct.Struct("<4sIIIIIIB")


def write_kvtr(path, keys, values, queries, meta) -> None:
    """Write one trace.

    keys, values: float arrays (layers, kv_heads, T, d); queries:
    (layers, q_heads, T, d). meta must contain at least "source".
    """
    keys = np.asarray(keys)
    values = np.asarray(values)
    queries = np.asarray(queries)
    layers, kv_heads, seq_len, head_dim = keys.shape
    q_heads = queries.shape[1]
    if values.shape != keys.shape:
        raise ValueError("values shape must match keys")
    if queries.shape != (layers, q_heads, seq_len, head_dim):
        raise ValueError("queries shape inconsistent with keys")
    if q_heads % kv_heads != 0:
        raise ValueError("q_heads must be a multiple of kv_heads")
    if "source" not in meta:
        raise ValueError("meta must carry a source field")

    header = HEADER_STRUCT.pack(
        MAGIC, VERSION, layers, q_heads, kv_heads, head_dim, seq_len, DTYPE_F32
    )
    footer = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for layer in range(layers):
            for head in range(kv_heads):
                fh.write(np.ascontiguousarray(keys[layer, head], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(values[layer, head], dtype="<f4").tobytes())
            for head in range(q_heads):
                fh.write(np.ascontiguousarray(queries[layer, head], dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(footer)))
        fh.write(footer)
