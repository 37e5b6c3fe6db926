"""Trace file format and CSV report schemas.

A token trace carries per-(layer, head) streams of key/query/value
vectors. On disk the KVTR format stores them as float32 little-endian
with a fixed header and a JSON metadata footer; in memory everything is
widened to float64. The byte layout is documented in docs/kvtr_format.md
(the copy in this repo is normative).
"""

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimError, ParseError, SchemaError

MAGIC = b"KVTR"
VERSION = 1
DTYPE_F32 = 1

# magic + version(u32) + layers/q_heads/kv_heads/head_dim/seq_len(u32 each) + dtype(u8)
HEADER_STRUCT = struct.Struct("<4sIIIIIIB")
HEADER_SIZE = HEADER_STRUCT.size

SOURCE_SYNTHETIC = "synthetic"
SOURCE_MODEL_DUMP = "model_dump"


@dataclass
class TokenTrace:
    """Per-(layer, head) time-ordered streams of key/query/value vectors.

    keys, values: (layers, kv_heads, T, d); queries: (layers, q_heads, T, d).
    """

    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    source: str = SOURCE_SYNTHETIC
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.queries = np.asarray(self.queries, dtype=np.float64)
        if self.keys.ndim != 4 or self.values.ndim != 4 or self.queries.ndim != 4:
            raise DimError("trace arrays must be (layers, heads, T, d)")
        if self.keys.shape != self.values.shape:
            raise DimError(
                f"keys shape {self.keys.shape} != values shape {self.values.shape}"
            )
        lq, hq, tq, dq = self.queries.shape
        lk, hk, tk, dk = self.keys.shape
        if (lq, tq, dq) != (lk, tk, dk):
            raise DimError("queries disagree with keys on layers/length/dim")
        if hq % hk != 0:
            raise DimError(f"q_heads {hq} not a multiple of kv_heads {hk}")
        for name, arr in (("keys", self.keys), ("values", self.values), ("queries", self.queries)):
            if not np.all(np.isfinite(arr)):
                raise DimError(f"trace {name} contain non-finite values")

    @property
    def layers(self) -> int:
        return self.keys.shape[0]

    @property
    def kv_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def q_heads(self) -> int:
        return self.queries.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    @property
    def length(self) -> int:
        return self.keys.shape[2]

    @property
    def group_size(self) -> int:
        return self.q_heads // self.kv_heads


def write_trace(trace: TokenTrace, path) -> None:
    """Serialize a trace: header, per-layer K/V then Q payload, JSON footer."""
    header = HEADER_STRUCT.pack(
        MAGIC,
        VERSION,
        trace.layers,
        trace.q_heads,
        trace.kv_heads,
        trace.head_dim,
        trace.length,
        DTYPE_F32,
    )
    footer_obj = {"source": trace.source, **trace.meta}
    footer = json.dumps(footer_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for layer in range(trace.layers):
            for head in range(trace.kv_heads):
                fh.write(trace.keys[layer, head].astype("<f4").tobytes())
                fh.write(trace.values[layer, head].astype("<f4").tobytes())
            for head in range(trace.q_heads):
                fh.write(trace.queries[layer, head].astype("<f4").tobytes())
        fh.write(struct.pack("<Q", len(footer)))
        fh.write(footer)


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ParseError(
            f"truncated file: expected {count} bytes for {what}, got {len(data)}",
            offset=offset + len(data),
        )
    return data


def read_trace(path) -> TokenTrace:
    """Parse and validate a KVTR file, widening the payload to float64."""
    with open(path, "rb") as fh:
        raw = _read_exact(fh, HEADER_SIZE, 0, "header")
        magic, version, layers, q_heads, kv_heads, head_dim, seq_len, dtype = (
            HEADER_STRUCT.unpack(raw)
        )
        if magic != MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        if version != VERSION:
            raise ParseError(f"unsupported version {version}", offset=4)
        if dtype != DTYPE_F32:
            raise ParseError(f"unsupported dtype code {dtype}", offset=HEADER_SIZE - 1)
        for name, value in (
            ("layers", layers),
            ("q_heads", q_heads),
            ("kv_heads", kv_heads),
            ("head_dim", head_dim),
            ("seq_len", seq_len),
        ):
            if value < 1:
                raise ParseError(f"header field {name} must be >= 1, got {value}", offset=8)
        if q_heads % kv_heads != 0:
            raise ParseError(
                f"q_heads {q_heads} not a multiple of kv_heads {kv_heads}", offset=8
            )

        plane = seq_len * head_dim * 4  # bytes per (head, T, d) float32 block
        offset = HEADER_SIZE
        keys = np.empty((layers, kv_heads, seq_len, head_dim))
        values = np.empty((layers, kv_heads, seq_len, head_dim))
        queries = np.empty((layers, q_heads, seq_len, head_dim))
        for layer in range(layers):
            for head in range(kv_heads):
                for name, dest in (("keys", keys), ("values", values)):
                    data = _read_exact(fh, plane, offset, f"layer {layer} {name}")
                    dest[layer, head] = np.frombuffer(data, dtype="<f4").reshape(
                        seq_len, head_dim
                    )
                    offset += plane
            for head in range(q_heads):
                data = _read_exact(fh, plane, offset, f"layer {layer} queries")
                queries[layer, head] = np.frombuffer(data, dtype="<f4").reshape(
                    seq_len, head_dim
                )
                offset += plane

        raw_len = _read_exact(fh, 8, offset, "footer length")
        (footer_len,) = struct.unpack("<Q", raw_len)
        offset += 8
        footer = _read_exact(fh, footer_len, offset, "footer")
        offset += footer_len
        trailing = fh.read(1)
        if trailing:
            raise ParseError("trailing bytes after footer", offset=offset)

    try:
        meta = json.loads(footer.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"footer is not valid JSON: {exc}", offset=offset - footer_len)
    source = meta.pop("source", SOURCE_SYNTHETIC)
    return TokenTrace(keys=keys, values=values, queries=queries, source=source, meta=meta)


# -- CSV report schemas ------------------------------------------------------

REPORT_SCHEMAS = {
    "simulation": (
        "layer",
        "head",
        "block",
        "block_start",
        "block_len",
        "cache_before",
        "cache_after",
        "retained_time_ids",
    ),
    "correlation": ("layer", "head", "rho"),
    "bounds": ("check", "instances", "violations", "max_slack"),
    "scaling": ("policy", "n", "median_seconds"),
    "diversity": ("label", "logdet_before", "logdet_after", "mean_pairwise_cos"),
    "compare": ("policy_a", "policy_b", "overlap", "logdet_a", "logdet_b"),
}


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(str(int(v)) for v in value)
    return str(value)


def _quote(cell: str) -> str:
    if any(ch in cell for ch in ",\"\n\r"):
        return '"' + cell.replace('"', '""') + '"'
    return cell


def write_report_csv(rows, schema_id: str, path) -> None:
    """Write rows under a named schema as RFC-4180 CSV.

    Floats are rendered with 17 significant digits so a parse-back
    recovers them exactly; sequence-valued cells are ';'-joined.
    """
    if schema_id not in REPORT_SCHEMAS:
        raise SchemaError(f"unknown schema {schema_id!r}")
    header = REPORT_SCHEMAS[schema_id]
    buf = io.StringIO()
    buf.write(",".join(header) + "\r\n")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(
                f"row {i} has {len(row)} fields, schema {schema_id!r} needs {len(header)}"
            )
        buf.write(",".join(_quote(_format_cell(v)) for v in row) + "\r\n")
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(data)
