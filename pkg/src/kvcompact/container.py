"""
KVC1 binary container: the single on-disk format for caches, queries,
compacted caches, and their metadata.

Layout:
    bytes 0..3    magic b"KVC1"
    bytes 4..7    little-endian uint32 header length
    header        manifest as canonical JSON (sorted keys, no whitespace)
    padding       zeros up to the next 64-byte boundary
    data          raw tensor payloads at the offsets declared in the manifest

Offsets are absolute file offsets, 64-byte aligned and non-overlapping.
dtype f32 is little-endian IEEE-754 binary32; bf16 stores the upper 16 bits
of binary32 (round-to-nearest-even) and widens back to f32 on load.

Tensor naming convention: layer{L}.head{H}.{K|V|Q|Ck|Cv|beta|positions}.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import CompactHead, HeadCache, QuerySet, RopeParams

MAGIC = b"KVC1"
ALIGNMENT = 64
FORMAT_VERSION = 1
DTYPE_SIZES = {"f32": 4, "bf16": 2}


class ContainerError(Exception):
    """Malformed, truncated, or unreadable KVC1 data."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


# ---------------------------------------------------------------------------
# bf16 codec (upper 16 bits of binary32, round-to-nearest-even)

def encode_bf16(a: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(a, dtype="<f4").view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype("<u2")


def decode_bf16(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32)


def bf16_round(a: np.ndarray) -> np.ndarray:
    """Round an f32 array through bf16 precision (stays f32 in memory)."""
    return decode_bf16(encode_bf16(a)).reshape(np.asarray(a).shape)


# ---------------------------------------------------------------------------
# Manifest

@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    offset: int
    nbytes: int

    def to_dict(self) -> dict:
        return {"name": self.name, "dtype": self.dtype,
                "shape": list(self.shape), "offset": self.offset,
                "nbytes": self.nbytes}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorEntry":
        return cls(name=d["name"], dtype=d["dtype"],
                   shape=tuple(int(s) for s in d["shape"]),
                   offset=int(d["offset"]), nbytes=int(d["nbytes"]))


@dataclass
class Manifest:
    head_dim: int
    num_layers: int
    kv_heads_per_layer: int
    logical_length: int
    version: int = FORMAT_VERSION
    logit_scale: Optional[float] = None    # defaults to 1/sqrt(head_dim)
    rope: RopeParams = field(default_factory=RopeParams)
    chunk_spans: Optional[List[Tuple[int, int]]] = None
    query_provenance: Optional[str] = None
    tensor_index: List[TensorEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.logit_scale is None:
            self.logit_scale = 1.0 / float(np.sqrt(self.head_dim))

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "head_dim": self.head_dim,
            "num_layers": self.num_layers,
            "kv_heads_per_layer": self.kv_heads_per_layer,
            "logit_scale": self.logit_scale,
            "rope": {"kind": self.rope.kind, "base": self.rope.base,
                     "applied_to_keys": self.rope.applied_to_keys},
            "logical_length": self.logical_length,
            "tensor_index": [e.to_dict() for e in self.tensor_index],
        }
        if self.chunk_spans is not None:
            d["chunk_spans"] = [list(s) for s in self.chunk_spans]
        if self.query_provenance is not None:
            d["query_provenance"] = self.query_provenance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        rope = d.get("rope", {})
        return cls(
            head_dim=int(d["head_dim"]),
            num_layers=int(d["num_layers"]),
            kv_heads_per_layer=int(d["kv_heads_per_layer"]),
            logical_length=int(d["logical_length"]),
            version=int(d.get("version", FORMAT_VERSION)),
            logit_scale=float(d["logit_scale"]),
            rope=RopeParams(kind=rope.get("kind", "half_split"),
                            base=float(rope.get("base", 10000.0)),
                            applied_to_keys=bool(
                                rope.get("applied_to_keys", True))),
            chunk_spans=[tuple(int(x) for x in s)
                         for s in d["chunk_spans"]]
            if "chunk_spans" in d else None,
            query_provenance=d.get("query_provenance"),
            tensor_index=[TensorEntry.from_dict(e)
                          for e in d.get("tensor_index", [])],
        )


def tensor_name(layer: int, head: int, kind: str) -> str:
    return f"layer{layer}.head{head}.{kind}"


def parse_tensor_name(name: str) -> Tuple[int, int, str]:
    parts = name.split(".")
    if len(parts) != 3 or not parts[0].startswith("layer") \
            or not parts[1].startswith("head"):
        raise ContainerError(f"bad tensor name: {name!r}")
    return int(parts[0][5:]), int(parts[1][4:]), parts[2]


def validate_manifest(m: Manifest) -> List[str]:
    """Return all invariant violations; empty list means the manifest is ok."""
    violations: List[str] = []
    names = [e.name for e in m.tensor_index]
    seen = set()
    for name in names:
        if name in seen:
            violations.append(f"duplicate tensor name: {name!r}")
        seen.add(name)
    spans = []
    for e in m.tensor_index:
        if e.dtype not in DTYPE_SIZES:
            violations.append(f"{e.name}: unknown dtype {e.dtype!r}")
            continue
        expected = int(np.prod(e.shape, dtype=np.int64)) * DTYPE_SIZES[e.dtype]
        if e.nbytes != expected:
            violations.append(
                f"{e.name}: nbytes {e.nbytes} != shape product {expected}")
        if e.offset % ALIGNMENT != 0:
            violations.append(f"{e.name}: offset {e.offset} not 64-aligned")
        if e.offset < 0:
            violations.append(f"{e.name}: negative offset")
        spans.append((e.offset, e.offset + e.nbytes, e.name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            violations.append(f"overlapping tensors: {n0!r} and {n1!r}")
    if m.rope.kind == "half_split" and m.head_dim % 2 != 0:
        violations.append("half_split rope requires even head_dim")
    return violations


# ---------------------------------------------------------------------------
# Read / write

def _build_index(tensors: Dict[str, np.ndarray],
                 dtypes: Optional[Dict[str, str]]) -> List[TensorEntry]:
    entries = []
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        dt = (dtypes or {}).get(name, "f32")
        if dt not in DTYPE_SIZES:
            raise ContainerError(f"unknown dtype {dt!r} for {name!r}")
        nbytes = int(a.size) * DTYPE_SIZES[dt]
        entries.append(TensorEntry(name, dt, tuple(a.shape), 0, nbytes))
    return entries


def _assign_offsets(entries: List[TensorEntry], data_start: int) -> None:
    off = data_start
    for e in entries:
        e.offset = off
        off = _align(off + e.nbytes)


def write_container(manifest: Manifest, tensors: Dict[str, np.ndarray],
                    path, dtypes: Optional[Dict[str, str]] = None) -> None:
    """
    Write a KVC1 file. If manifest.tensor_index is empty it is populated
    from `tensors` (sorted by name, dtype f32 unless overridden in `dtypes`).
    """
    if len(set(tensors)) != len(tensors):
        raise ContainerError("duplicate tensor names")
    if not manifest.tensor_index:
        manifest.tensor_index = _build_index(tensors, dtypes)
        # Header length depends on offset digits; iterate to a fixpoint.
        data_start = 0
        while True:
            _assign_offsets(manifest.tensor_index, data_start)
            header = canonical_json(manifest.to_dict()).encode()
            new_start = _align(len(MAGIC) + 4 + len(header))
            if new_start == data_start:
                break
            data_start = new_start
    else:
        header = canonical_json(manifest.to_dict()).encode()

    problems = validate_manifest(manifest)
    if problems:
        raise ContainerError("; ".join(problems))
    index_names = {e.name for e in manifest.tensor_index}
    if index_names != set(tensors):
        raise ContainerError("manifest tensor index does not match tensors")
    for e in manifest.tensor_index:
        a = np.asarray(tensors[e.name])
        if tuple(a.shape) != e.shape:
            raise ContainerError(
                f"{e.name}: shape {a.shape} != declared {e.shape}")

    header = canonical_json(manifest.to_dict()).encode()
    data_start = _align(len(MAGIC) + 4 + len(header))
    for e in manifest.tensor_index:
        if e.offset < data_start:
            raise ContainerError(f"{e.name}: offset inside header region")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        pos = len(MAGIC) + 4 + len(header)
        for e in sorted(manifest.tensor_index, key=lambda e: e.offset):
            f.write(b"\x00" * (e.offset - pos))
            a = np.ascontiguousarray(tensors[e.name], dtype=np.float32)
            payload = (encode_bf16(a) if e.dtype == "bf16"
                       else a.astype("<f4")).tobytes()
            f.write(payload)
            pos = e.offset + e.nbytes
        if pos < data_start:  # no tensors: still pad out the header block
            f.write(b"\x00" * (data_start - pos))


def read_container(path) -> Tuple[Manifest, Dict[str, np.ndarray]]:
    """Read a KVC1 file; bf16 payloads are widened to f32."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic: {blob[:4]!r}")
    if len(blob) < 8:
        raise ContainerError("truncated header")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise ContainerError("truncated header")
    try:
        manifest = Manifest.from_dict(json.loads(blob[8:8 + hlen].decode()))
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise ContainerError(f"bad manifest: {exc}") from exc
    tensors: Dict[str, np.ndarray] = {}
    for e in manifest.tensor_index:
        if e.offset + e.nbytes > len(blob):
            raise ContainerError(f"{e.name}: offset out of bounds")
        raw = blob[e.offset:e.offset + e.nbytes]
        if e.dtype == "bf16":
            a = decode_bf16(np.frombuffer(raw, dtype="<u2"))
        else:
            a = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        tensors[e.name] = a.reshape(e.shape)
    return manifest, tensors


# ---------------------------------------------------------------------------
# High-level cache containers

HeadKey = Tuple[int, int]


def _grid_dims(keys: Sequence[HeadKey]) -> Tuple[int, int]:
    layers = 1 + max(k[0] for k in keys)
    heads = 1 + max(k[1] for k in keys)
    return layers, heads


def save_cache(path, heads: Dict[HeadKey, HeadCache],
               queries: Optional[Dict[HeadKey, QuerySet]] = None,
               logit_scale: Optional[float] = None,
               dtype: str = "f32") -> None:
    """Write original caches (K/V/positions, optional Q) as one container."""
    if not heads:
        raise ContainerError("no heads to save")
    any_head = next(iter(heads.values()))
    layers, nheads = _grid_dims(list(heads))
    tensors: Dict[str, np.ndarray] = {}
    dtypes: Dict[str, str] = {}
    for (l, h), hc in heads.items():
        tensors[tensor_name(l, h, "K")] = hc.K
        tensors[tensor_name(l, h, "V")] = hc.V
        tensors[tensor_name(l, h, "positions")] = \
            hc.positions.astype(np.float32)
        for kind in ("K", "V"):
            dtypes[tensor_name(l, h, kind)] = dtype
        if hc.beta is not None:
            tensors[tensor_name(l, h, "beta")] = hc.beta
            dtypes[tensor_name(l, h, "beta")] = dtype
    provenance = None
    if queries:
        for (l, h), qs in queries.items():
            tensors[tensor_name(l, h, "Q")] = qs.Q
            dtypes[tensor_name(l, h, "Q")] = dtype
            provenance = qs.provenance
    manifest = Manifest(
        head_dim=any_head.d, num_layers=layers, kv_heads_per_layer=nheads,
        logical_length=max(hc.logical_length for hc in heads.values()),
        logit_scale=logit_scale, rope=any_head.rope,
        query_provenance=provenance)
    write_container(manifest, tensors, path, dtypes)


def load_cache(path) -> Tuple[Manifest, Dict[HeadKey, HeadCache]]:
    manifest, tensors = read_container(path)
    heads: Dict[HeadKey, HeadCache] = {}
    grouped: Dict[HeadKey, Dict[str, np.ndarray]] = {}
    for name, a in tensors.items():
        l, h, kind = parse_tensor_name(name)
        grouped.setdefault((l, h), {})[kind] = a
    for key, parts in sorted(grouped.items()):
        if "K" not in parts:
            continue
        positions = parts.get("positions")
        heads[key] = HeadCache(
            K=parts["K"], V=parts["V"],
            logical_length=manifest.logical_length,
            positions=None if positions is None
            else positions.astype(np.int64),
            rope=manifest.rope,
            beta=parts.get("beta"))
    if not heads:
        raise ContainerError("container holds no K/V tensors")
    return manifest, heads


def load_queries(path) -> Dict[HeadKey, QuerySet]:
    manifest, tensors = read_container(path)
    provenance = manifest.query_provenance or "mixed"
    out: Dict[HeadKey, QuerySet] = {}
    for name, a in tensors.items():
        l, h, kind = parse_tensor_name(name)
        if kind == "Q":
            out[(l, h)] = QuerySet(Q=a, provenance=provenance)
    if not out:
        raise ContainerError("container holds no Q tensors")
    return out


def save_queries(path, queries: Dict[HeadKey, QuerySet], head_dim: int,
                 rope: Optional[RopeParams] = None,
                 dtype: str = "f32") -> None:
    if not queries:
        raise ContainerError("no query sets to save")
    layers, nheads = _grid_dims(list(queries))
    tensors = {tensor_name(l, h, "Q"): qs.Q
               for (l, h), qs in queries.items()}
    dtypes = {name: dtype for name in tensors}
    provenance = next(iter(queries.values())).provenance
    manifest = Manifest(head_dim=head_dim, num_layers=layers,
                        kv_heads_per_layer=nheads, logical_length=0,
                        rope=rope if rope is not None else RopeParams(),
                        query_provenance=provenance)
    write_container(manifest, tensors, path, dtypes)


def save_compact(path, heads: Dict[HeadKey, CompactHead], head_dim: int,
                 rope: Optional[RopeParams] = None, dtype: str = "f32",
                 chunk_spans: Optional[List[Tuple[int, int]]] = None) -> None:
    """Write compacted heads (Ck/beta/Cv plus retained source positions)."""
    if not heads:
        raise ContainerError("no heads to save")
    layers, nheads = _grid_dims(list(heads))
    tensors: Dict[str, np.ndarray] = {}
    dtypes: Dict[str, str] = {}
    for (l, h), ch in heads.items():
        tensors[tensor_name(l, h, "Ck")] = ch.C_k
        tensors[tensor_name(l, h, "beta")] = ch.beta
        tensors[tensor_name(l, h, "Cv")] = ch.C_v
        for kind in ("Ck", "beta", "Cv"):
            dtypes[tensor_name(l, h, kind)] = dtype
        if ch.source_indices is not None:
            tensors[tensor_name(l, h, "positions")] = \
                ch.source_indices.astype(np.float32)
    manifest = Manifest(
        head_dim=head_dim, num_layers=layers, kv_heads_per_layer=nheads,
        logical_length=max(ch.logical_length for ch in heads.values()),
        rope=rope if rope is not None else RopeParams(),
        chunk_spans=chunk_spans)
    write_container(manifest, tensors, path, dtypes)


def load_compact(path) -> Tuple[Manifest, Dict[HeadKey, CompactHead]]:
    manifest, tensors = read_container(path)
    grouped: Dict[HeadKey, Dict[str, np.ndarray]] = {}
    for name, a in tensors.items():
        l, h, kind = parse_tensor_name(name)
        grouped.setdefault((l, h), {})[kind] = a
    heads: Dict[HeadKey, CompactHead] = {}
    for key, parts in sorted(grouped.items()):
        if "Ck" not in parts:
            continue
        positions = parts.get("positions")
        heads[key] = CompactHead(
            C_k=parts["Ck"], beta=parts["beta"], C_v=parts["Cv"],
            logical_length=manifest.logical_length,
            source_indices=None if positions is None
            else positions.astype(np.int64))
    if not heads:
        raise ContainerError("container holds no Ck tensors")
    return manifest, heads
