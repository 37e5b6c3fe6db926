"""Writing and reading KVTR trace files.

Generates a small synthetic trace, round-trips it through the binary
format, and walks the byte layout (docs/kvtr_format.md is the
authoritative description).
"""

import struct
import tempfile
from pathlib import Path

import numpy as np

from kvevict import SynthSpec, read_trace, synth_trace, write_trace

trace = synth_trace(
    SynthSpec(length=6, head_dim=4, layers=1, kv_heads=2, q_heads=4, n_outliers=1, seed=1)
)
path = Path(tempfile.mkdtemp()) / "demo.kvtr"
write_trace(trace, path)
raw = path.read_bytes()

magic, version, layers, q_heads, kv_heads, head_dim, seq_len, dtype = struct.unpack(
    "<4sIIIIIIB", raw[:29]
)
print(f"{path.name}: {len(raw)} bytes")
print(f"header: magic={magic} version={version} layers={layers} "
      f"q_heads={q_heads} kv_heads={kv_heads} d={head_dim} T={seq_len} dtype={dtype}")

plane = seq_len * head_dim * 4
payload = layers * (2 * kv_heads + q_heads) * plane
(footer_len,) = struct.unpack("<Q", raw[29 + payload : 29 + payload + 8])
print(f"payload: {payload} bytes ({2 * kv_heads + q_heads} planes of {plane} bytes per layer)")
print(f"footer:  {raw[29 + payload + 8:].decode()}")

back = read_trace(path)
exact = np.array_equal(back.keys, trace.keys.astype("<f4").astype(np.float64))
print(f"\nround trip f32-exact: {exact}")
print(f"in memory widened to: {back.keys.dtype}")
