"""Binary tensor container shared by base models, adapters and dataset samples.

Layout (all integers little-endian)::

    b"CLRA" | u32 version | u32 entry count
    per entry: u32 name length | UTF-8 name | u8 dtype code | u32 rank
               | rank x u64 dims | raw little-endian payload
    32-byte SHA-256 of every preceding byte

dtype codes: 1 float32, 2 float64, 3 int32, 4 uint8. Free-form metadata is
stored as a uint8 entry named ``__meta__`` holding sorted-key JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CLRA"
VERSION = 1
META_KEY = "__meta__"

_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i4"): 3, np.dtype("u1"): 4}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def _wire_dtype(dtype, name):
    for wire in _CODES:
        if dtype.kind == wire.kind and dtype.itemsize == wire.itemsize:
            return wire
    raise CheckpointError(f"unsupported dtype {dtype} for entry {name!r}")


def encode(entries: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode()
        items.append((META_KEY, np.frombuffer(blob, dtype=np.uint8)))
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        dt = _wire_dtype(arr.dtype, name)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    if len(data) < 4 + 8 + 32:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    body, digest = data[:-32], data[-32:]
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (corrupted or truncated file)")
    entries: dict[str, np.ndarray] = {}
    meta = None
    off = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", body, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise CheckpointError("truncated checkpoint payload")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
            off += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode())
            else:
                entries[name] = arr.astype(dt.newbyteorder("="), copy=True)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return entries, meta


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, entries: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a container file atomically. Returns its SHA-256 hex digest."""
    data = encode(entries, meta)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return decode(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- model-level artifacts ----------------------------------------------

ADAPTER_FORMAT_VERSION = 1


def base_entries(model) -> dict[str, np.ndarray]:
    """Parameters, running statistics and source snapshots of a model without adapters."""
    if model.adapters():
        raise CheckpointError("base checkpoints must not carry adapters; merge or drop them first")
    entries = dict(model.parameters())
    entries.update(model.buffers())
    for prefix, bn in model.bn_layers():
        snap = bn.source_snapshot
        if snap is not None:
            entries[f"{prefix}.source_mean"] = snap[0]
            entries[f"{prefix}.source_var"] = snap[1]
    return entries


def save_base(path, model, seed=None, extra: dict | None = None) -> str:
    meta = {"kind": "base", "config": asdict(model.config), "dtype": model.dtype.name, "seed": seed}
    if extra:
        meta.update(extra)
    return save_checkpoint(path, base_entries(model), meta)


def load_base(path):
    """Rebuild a model from a base checkpoint. Returns ``(model, meta, sha256)``."""
    from .unet import UNetConfig, UNetModel

    data = Path(path).read_bytes()
    entries, meta = decode(data)
    if not meta or meta.get("kind") != "base":
        raise CheckpointError(f"{path} is not a base model checkpoint")
    model = UNetModel(UNetConfig(**meta["config"]), seed=0, dtype=np.dtype(meta["dtype"]))
    model.set_parameters({k: entries[k] for k in model.parameters()})
    model.set_buffers(entries)
    for prefix, bn in model.bn_layers():
        if f"{prefix}.source_mean" in entries:
            bn._snapshot = (entries[f"{prefix}.source_mean"].copy(), entries[f"{prefix}.source_var"].copy())
    return model, meta, hashlib.sha256(data).hexdigest()


@dataclass
class AdapterCheckpoint:
    """Per-target-domain artifact: adapter factors and BN running statistics only."""

    base_checksum: str
    domain_id: str
    rank: int
    selector: list[int]
    seed: int | None
    adabn: bool
    factors: dict[str, np.ndarray]
    bn_stats: dict[str, np.ndarray]
    scale: float = 1.0
    format_version: int = ADAPTER_FORMAT_VERSION

    @classmethod
    def from_model(cls, model, base_checksum, domain_id, rank, seed, adabn, scale=1.0) -> "AdapterCheckpoint":
        factors = {}
        for prefix, ad in model.adapters():
            factors[f"{prefix}.lora_X"] = ad.X.copy()
            factors[f"{prefix}.lora_Y"] = ad.Y.copy()
        bn = {k: v.copy() for k, v in model.buffers().items()}
        return cls(base_checksum, domain_id, rank, sorted(model.injected), seed, adabn, factors, bn, scale)

    def meta(self) -> dict:
        return {
            "kind": "adapter",
            "format_version": self.format_version,
            "base_checksum": self.base_checksum,
            "domain_id": self.domain_id,
            "rank": self.rank,
            "selector": list(self.selector),
            "seed": self.seed,
            "adabn": self.adabn,
            "scale": self.scale,
        }

    def encode(self) -> bytes:
        return encode({**self.factors, **self.bn_stats}, self.meta())

    def save(self, path) -> str:
        data = self.encode()
        atomic_write_bytes(path, data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "AdapterCheckpoint":
        entries, meta = load_checkpoint(path)
        if not meta or meta.get("kind") != "adapter":
            raise CheckpointError(f"{path} is not an adapter checkpoint")
        if meta.get("format_version") != ADAPTER_FORMAT_VERSION:
            raise CheckpointError(f"unsupported adapter format version {meta.get('format_version')}")
        factors = {k: v for k, v in entries.items() if k.endswith((".lora_X", ".lora_Y"))}
        bn = {k: v for k, v in entries.items() if k not in factors}
        return cls(
            meta["base_checksum"], meta["domain_id"], meta["rank"], list(meta["selector"]), meta["seed"],
            meta["adabn"], factors, bn, meta.get("scale", 1.0), meta["format_version"],
        )

    def apply(self, model, base_checksum: str) -> None:
        """Inject and load into a freshly loaded base model whose checksum must match."""
        from .unet import inject_convlora

        if self.base_checksum != base_checksum:
            raise ChecksumError(
                f"adapter was trained against base {self.base_checksum[:12]}..., got base {base_checksum[:12]}..."
            )
        inject_convlora(model, self.selector, self.rank, seed=0, scale=self.scale)
        model.set_parameters(self.factors)
        model.set_buffers(self.bn_stats)


def load_adapted(base_path, adapter_path):
    """Base model with an adapter checkpoint applied. Returns ``(model, AdapterCheckpoint)``."""
    model, _, sha = load_base(base_path)
    ckpt = AdapterCheckpoint.load(adapter_path)
    ckpt.apply(model, sha)
    return model, ckpt
