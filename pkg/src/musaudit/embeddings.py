"""Encoder-output ingestion, aggregation and pair construction.

Binary tensors travel between stages in the MAUD format::

    magic   b"MAUD"
    version u16 (= 1)
    dtype   u8   0 = IEEE-754 binary32, 1 = u32
    ndim    u8   1..4
    dims    ndim x u32
    payload row-major, little-endian
    vocab   u32  (dtype 1 only) codebook vocabulary size V

Manifests are UTF-8 JSON arrays of record objects.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, ValidationError

MAGIC = b"MAUD"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U32 = 1
_HEADER = struct.Struct("<4sHBB")
_NP_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}

KINDS = ("layered_hidden", "codebook_codes", "global_vector")
ROLES = ("member", "nonmember", "gen_member", "gen_nonmember")
ORIGINAL_ROLES = {"member": 1, "nonmember": 0}
GENERATION_ROLES = {"gen_member": 1, "gen_nonmember": 0}
_ITEM_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


# ---------------------------------------------------------------------------
# MAUD tensor files
# ---------------------------------------------------------------------------


def encode_maud(array: np.ndarray, vocab_size: int | None = None) -> bytes:
    array = np.asarray(array)
    if not 1 <= array.ndim <= 4:
        raise DimensionError(f"MAUD supports 1..4 dims, got shape {array.shape}")
    if any(d < 1 for d in array.shape):
        raise DimensionError(f"MAUD dims must be >= 1, got shape {array.shape}")
    if vocab_size is None:
        dtype = DTYPE_F32
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    else:
        if np.any(array < 0):
            raise ValidationError("codebook codes must be non-negative")
        dtype = DTYPE_U32
        payload = np.ascontiguousarray(array, dtype="<u4").tobytes()
    parts = [_HEADER.pack(MAGIC, VERSION, dtype, array.ndim), struct.pack(f"<{array.ndim}I", *array.shape), payload]
    if dtype == DTYPE_U32:
        parts.append(struct.pack("<I", vocab_size))
    return b"".join(parts)


def decode_maud(buf: bytes, source: str = "<bytes>"):
    """Parse MAUD bytes into ``(array, vocab_size)``; vocab is None for floats."""
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: {len(buf)} bytes is shorter than the {_HEADER.size}-byte MAUD header")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported MAUD version {version}")
    if dtype not in _NP_DTYPE:
        raise FormatError(f"{source}: unknown dtype code {dtype}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"{source}: ndim {ndim} outside 1..4")
    offset = _HEADER.size
    if len(buf) < offset + 4 * ndim:
        raise CorruptionError(f"{source}: header truncated, expected {offset + 4 * ndim} bytes, got {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    if any(d == 0 for d in dims):
        raise CorruptionError(f"{source}: zero extent in dims {dims}")
    count = math.prod(dims)
    trailer = 4 if dtype == DTYPE_U32 else 0
    expected = offset + 4 * count + trailer
    if count > (1 << 40) or len(buf) != expected:
        raise CorruptionError(f"{source}: payload size mismatch, expected {expected} bytes, got {len(buf)}")
    array = np.frombuffer(buf, dtype=_NP_DTYPE[dtype], count=count, offset=offset).reshape(dims).copy()
    vocab = struct.unpack_from("<I", buf, expected - 4)[0] if dtype == DTYPE_U32 else None
    return array, vocab


def write_maud(path, array: np.ndarray, vocab_size: int | None = None) -> None:
    Path(path).write_bytes(encode_maud(array, vocab_size))


def read_maud(path):
    path = Path(path)
    return decode_maud(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Raw encoder outputs and aggregation
# ---------------------------------------------------------------------------


@dataclass
class RawEncoderOutput:
    kind: str
    payload: np.ndarray
    vocab_size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown raw output kind {self.kind!r}")
        p = self.payload
        if self.kind == "layered_hidden" and p.ndim != 3:
            raise DimensionError(f"layered_hidden needs L x T x D, got {p.shape}")
        if self.kind == "global_vector" and p.ndim != 1:
            raise DimensionError(f"global_vector needs a 1-d payload, got {p.shape}")
        if self.kind == "codebook_codes":
            if p.ndim != 2:
                raise DimensionError(f"codebook_codes needs N_q x T, got {p.shape}")
            if self.vocab_size is None or self.vocab_size < 1:
                raise ValidationError("codebook_codes needs a positive vocab_size")
            _check_codes(p, self.vocab_size)


def _check_codes(codes: np.ndarray, vocab: int) -> None:
    bad = np.argwhere(codes >= vocab)
    if len(bad):
        q, t = bad[0]
        raise ValidationError(
            f"code {int(codes[q, t])} at codebook q={q}, t={t} is >= vocab size {vocab} ({len(bad)} invalid codes)"
        )


def read_tensor_file(path) -> RawEncoderOutput:
    array, vocab = read_maud(path)
    if vocab is not None:
        if array.ndim != 2:
            raise FormatError(f"{path}: integer codes must be 2-d (N_q x T), got {array.shape}")
        return RawEncoderOutput("codebook_codes", array, vocab)
    if array.ndim == 3:
        return RawEncoderOutput("layered_hidden", array)
    if array.ndim == 1:
        return RawEncoderOutput("global_vector", array)
    raise FormatError(f"{path}: float tensor of shape {array.shape} is not a raw encoder output")


def write_tensor_file(path, raw) -> None:
    if isinstance(raw, RawEncoderOutput):
        write_maud(path, raw.payload, raw.vocab_size)
    else:
        write_maud(path, raw)


@dataclass
class AggregatedEmbedding:
    """One audio item after aggregation: a vector (dim,) or a map (L, D)."""

    values: np.ndarray
    encoder_id: str = "unknown"

    @property
    def form(self) -> str:
        return "vector" if self.values.ndim == 1 else "map"

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape)


def _finite(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(values))[0])
        raise ValidationError(f"{what}: non-finite value at index {idx}")
    return values


def aggregate_mean_over_time(raw: RawEncoderOutput, encoder_id: str = "layered") -> AggregatedEmbedding:
    """Temporal mean within each layer: (L, T, D) -> (L, D)."""
    if raw.kind != "layered_hidden":
        raise ValidationError(f"mean-over-time needs layered_hidden, got {raw.kind}")
    values = _finite(raw.payload, "layered_hidden").mean(axis=1)
    return AggregatedEmbedding(values, encoder_id)


def aggregate_codebook_histogram(raw: RawEncoderOutput, encoder_id: str = "codec") -> AggregatedEmbedding:
    """Per-codebook normalized code histogram, concatenated: (N_q, T) -> (N_q * V,)."""
    if raw.kind != "codebook_codes":
        raise ValidationError(f"codebook histogram needs codebook_codes, got {raw.kind}")
    codes = raw.payload.astype(np.int64)
    vocab = raw.vocab_size
    _check_codes(codes, vocab)
    n_q, t = codes.shape
    # offset each codebook into its own block, then one bincount
    flat = (codes + vocab * np.arange(n_q)[:, None]).ravel()
    hist = np.bincount(flat, minlength=n_q * vocab).astype(np.float64) / t
    return AggregatedEmbedding(hist, encoder_id)


def aggregate_identity(raw: RawEncoderOutput, encoder_id: str = "global") -> AggregatedEmbedding:
    if raw.kind != "global_vector":
        raise ValidationError(f"identity aggregation needs global_vector, got {raw.kind}")
    return AggregatedEmbedding(_finite(raw.payload, "global_vector").copy(), encoder_id)


AGGREGATORS = {
    "mean_over_time": ("layered_hidden", aggregate_mean_over_time),
    "codebook_histogram": ("codebook_codes", aggregate_codebook_histogram),
    "identity": ("global_vector", aggregate_identity),
}


def aggregate(raw: RawEncoderOutput, aggregation: str, encoder_id: str) -> AggregatedEmbedding:
    try:
        _, fn = AGGREGATORS[aggregation]
    except KeyError:
        raise ValidationError(f"unknown aggregation {aggregation!r}; choose from {sorted(AGGREGATORS)}") from None
    return fn(raw, encoder_id)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    item_id: str
    generator_id: str
    role: str
    pair_id: str
    source_path: str
    duration_s: float
    caption: str | None = None


def load_manifest(path) -> list:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    records = []
    for i, obj in enumerate(data):
        try:
            records.append(
                ManifestRecord(
                    item_id=str(obj["item_id"]),
                    generator_id=str(obj["generator_id"]),
                    role=str(obj["role"]),
                    pair_id=str(obj["pair_id"]),
                    source_path=str(obj["source_path"]),
                    duration_s=float(obj["duration_s"]),
                    caption=obj.get("caption"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: record {i} is malformed ({exc!r})") from None
    validate_manifest(records)
    return records


def manifest_json(records) -> str:
    return json.dumps([asdict(r) for r in records], indent=2, ensure_ascii=False) + "\n"


def save_manifest(path, records) -> None:
    Path(path).write_text(manifest_json(records), encoding="utf-8")


def validate_manifest(records) -> None:
    problems = []
    seen = set()
    by_pair: dict = {}
    for r in records:
        if not _ITEM_ID.match(r.item_id):
            problems.append(f"item_id {r.item_id!r} has characters outside [A-Za-z0-9._-]")
        if r.item_id in seen:
            problems.append(f"duplicate item_id {r.item_id!r}")
        seen.add(r.item_id)
        if r.role not in ROLES:
            problems.append(f"item {r.item_id!r}: unknown role {r.role!r}")
        by_pair.setdefault(r.pair_id, []).append(r)
    for pair_id, members in by_pair.items():
        if len(members) != 2:
            problems.append(f"pair {pair_id!r} has {len(members)} item(s), expected 2")
            continue
        originals = [m for m in members if m.role in ORIGINAL_ROLES]
        gens = [m for m in members if m.role in GENERATION_ROLES]
        if len(originals) != 1 or len(gens) != 1:
            problems.append(f"pair {pair_id!r} needs one original and one generation")
        elif ORIGINAL_ROLES[originals[0].role] != GENERATION_ROLES[gens[0].role]:
            problems.append(f"pair {pair_id!r}: roles {originals[0].role}/{gens[0].role} disagree")
        elif originals[0].generator_id != gens[0].generator_id:
            problems.append(f"pair {pair_id!r} spans generators")
    if problems:
        raise ValidationError("invalid manifest:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# Pairs
# ---------------------------------------------------------------------------


@dataclass
class PairExample:
    original: AggregatedEmbedding
    generation: AggregatedEmbedding
    label: int
    pair_id: str
    generator_id: str


def build_pairs(manifest, embeddings_by_item: dict) -> list:
    """One labeled (original, generation) pair per pair_id, manifest order."""
    validate_manifest(manifest)
    missing = [r.item_id for r in manifest if r.item_id not in embeddings_by_item]
    if missing:
        raise ValidationError(f"missing embeddings for {len(missing)} item(s): {', '.join(missing)}")
    shapes = {tuple(np.shape(_values(embeddings_by_item[r.item_id]))) for r in manifest}
    if len(shapes) > 1:
        raise ValidationError(f"mixed embedding forms in one dataset: {sorted(shapes)}")
    grouped: dict = {}
    for r in manifest:
        grouped.setdefault(r.pair_id, {})["orig" if r.role in ORIGINAL_ROLES else "gen"] = r
    pairs = []
    for pair_id, g in grouped.items():
        orig, gen = g["orig"], g["gen"]
        pairs.append(
            PairExample(
                original=_as_embedding(embeddings_by_item[orig.item_id]),
                generation=_as_embedding(embeddings_by_item[gen.item_id]),
                label=ORIGINAL_ROLES[orig.role],
                pair_id=pair_id,
                generator_id=orig.generator_id,
            )
        )
    return pairs


def _values(e):
    return e.values if isinstance(e, AggregatedEmbedding) else e


def _as_embedding(e) -> AggregatedEmbedding:
    if isinstance(e, AggregatedEmbedding):
        return e
    return AggregatedEmbedding(np.asarray(e, dtype=np.float64))


# ---------------------------------------------------------------------------
# Aggregated stores on disk
# ---------------------------------------------------------------------------

STORE_META = "store.json"
STORE_MANIFEST = "manifest.json"
STORE_EMBEDDINGS = "embeddings"


def write_store(out_dir, manifest, embeddings_by_item: dict, encoder_id: str, aggregation: str, extra=None) -> dict:
    """Write manifest + one MAUD file per item + a store.json header.

    Embeddings are stored as binary32, so values round-trip through float32.
    Returns the header dict.
    """
    out_dir = Path(out_dir)
    emb_dir = out_dir / STORE_EMBEDDINGS
    emb_dir.mkdir(parents=True, exist_ok=True)
    validate_manifest(manifest)
    digest = hashlib.sha256()
    shape = None
    manifest_text = manifest_json(manifest)
    digest.update(manifest_text.encode("utf-8"))
    for r in manifest:
        values = np.asarray(_values(embeddings_by_item[r.item_id]))
        shape = shape or values.shape
        if values.shape != shape:
            raise ValidationError(f"item {r.item_id!r} has shape {values.shape}, expected {shape}")
        blob = encode_maud(values)
        digest.update(r.item_id.encode("utf-8") + b"\0" + blob)
        (emb_dir / f"{r.item_id}.maud").write_bytes(blob)
    (out_dir / STORE_MANIFEST).write_text(manifest_text, encoding="utf-8")
    meta = {
        "encoder_id": encoder_id,
        "aggregation": aggregation,
        "form": "vector" if len(shape) == 1 else "map",
        "shape": list(shape),
        "generator_ids": sorted({r.generator_id for r in manifest}),
        "n_items": len(manifest),
        "content_hash": digest.hexdigest(),
    }
    if extra:
        meta.update(extra)
    (out_dir / STORE_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def load_store(store_dir):
    """Return ``(meta, manifest, embeddings_by_item)`` for an aggregated store."""
    store_dir = Path(store_dir)
    meta_path = store_dir / STORE_META
    if not meta_path.is_file():
        raise FileNotFoundError(f"{store_dir} is not an aggregated store (no {STORE_META})")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    manifest = load_manifest(store_dir / STORE_MANIFEST)
    embeddings = {}
    for r in manifest:
        values, vocab = read_maud(store_dir / STORE_EMBEDDINGS / f"{r.item_id}.maud")
        if vocab is not None:
            raise FormatError(f"{r.item_id}: aggregated embeddings must be float tensors")
        embeddings[r.item_id] = AggregatedEmbedding(values.astype(np.float64), meta.get("encoder_id", "unknown"))
    return meta, manifest, embeddings


def load_store_pairs(store_dir):
    meta, manifest, embeddings = load_store(store_dir)
    return meta, build_pairs(manifest, embeddings)
