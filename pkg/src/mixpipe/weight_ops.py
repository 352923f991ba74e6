"""Checkpoints and convex weight mixing.

File layout (all integers little-endian)::

    b"MXCK"                 magic
    u32                     format version (1)
    u64                     header length in bytes
    header                  UTF-8 text, one record per line, tab separated:
                              meta<TAB>stage_tag<TAB>...
                              meta<TAB>config_digest<TAB>...
                              meta<TAB>step<TAB>...
                              tensor<TAB>key<TAB>dtype<TAB>d0,d1,...   (keys sorted)
    u64                     payload length in bytes
    payload                 raw little-endian tensor data in header order

Keys are sorted, so saving the same checkpoint twice gives identical bytes.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import ENCODER_PREFIX

MAGIC = b"MXCK"
VERSION = 1
STAGE_TAGS = ("init", "pretrain_real", "pretrain_syn", "mixed", "finetuned")
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointMeta:
    stage_tag: str = "init"
    config_digest: str = ""
    step: int = 0

    def __post_init__(self):
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")
        if any(c in self.config_digest for c in "\t\n"):
            raise ValueError("config digest may not contain tabs or newlines")


@dataclass(eq=False)
class Checkpoint:
    entries: dict[str, np.ndarray]
    meta: CheckpointMeta = field(default_factory=CheckpointMeta)

    def __post_init__(self):
        for k, v in self.entries.items():
            if not k or any(c in k for c in "\t\n"):
                raise ValueError(f"invalid checkpoint key {k!r}")
            if np.dtype(v.dtype).newbyteorder("<") not in _DTYPE_NAMES:
                raise ValueError(f"{k}: unsupported dtype {v.dtype}")
            if not np.isfinite(v).all():
                raise ValueError(f"{k}: non-finite values")

    def keys(self) -> list[str]:
        return sorted(self.entries)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-level equality of entries and meta."""
        if self.meta != other.meta or self.keys() != other.keys():
            return False
        return all(
            self.entries[k].dtype == other.entries[k].dtype
            and self.entries[k].shape == other.entries[k].shape
            and self.entries[k].tobytes() == other.entries[k].tobytes()
            for k in self.keys()
        )

    def with_meta(self, **kw) -> "Checkpoint":
        return Checkpoint(dict(self.entries), replace(self.meta, **kw))


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.meta
    lines = [f"meta\tstage_tag\t{m.stage_tag}", f"meta\tconfig_digest\t{m.config_digest}",
             f"meta\tstep\t{m.step}"]
    payload = bytearray()
    for k in ckpt.keys():
        arr = ckpt.entries[k]
        dt = np.dtype(arr.dtype).newbyteorder("<")
        lines.append(f"tensor\t{k}\t{_DTYPE_NAMES[dt]}\t{','.join(str(d) for d in arr.shape)}")
        payload += np.ascontiguousarray(arr, dtype=dt).tobytes()
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return (MAGIC + struct.pack("<IQ", VERSION, len(header)) + header
            + struct.pack("<Q", len(payload)) + bytes(payload))


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 16:
        raise CheckpointError(f"truncated file: {len(blob)} bytes, header needs 16 (offset 0)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    hstart = 16
    if hstart + hlen + 8 > len(blob):
        raise CheckpointError(f"header of {hlen} bytes runs past end of file at offset {hstart}")
    try:
        header = blob[hstart:hstart + hlen].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"undecodable header at offset {hstart + e.start}") from None
    (plen,) = struct.unpack_from("<Q", blob, hstart + hlen)
    pstart = hstart + hlen + 8
    actual = len(blob) - pstart
    if plen != actual:
        raise CheckpointError(f"payload length mismatch at offset {pstart}: declared {plen}, found {actual}")

    meta: dict[str, str] = {}
    specs: list[tuple[str, np.dtype, tuple[int, ...]]] = []
    offset = hstart
    for line in header.splitlines():
        parts = line.split("\t")
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 4 and parts[2] in _DTYPES:
            shape = tuple(int(d) for d in parts[3].split(",")) if parts[3] else ()
            specs.append((parts[1], _DTYPES[parts[2]], shape))
        else:
            raise CheckpointError(f"malformed header record at offset {offset}: {line!r}")
        offset += len(line.encode("utf-8")) + 1

    entries: dict[str, np.ndarray] = {}
    pos = pstart
    for key, dt, shape in specs:
        if key in entries:
            raise CheckpointError(f"duplicate key {key!r} in header")
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + n > len(blob):
            raise CheckpointError(f"tensor {key!r} truncated at offset {pos}")
        entries[key] = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += n
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing payload bytes at offset {pos}")
    try:
        m = CheckpointMeta(meta.get("stage_tag", "init"), meta.get("config_digest", ""),
                           int(meta.get("step", 0)))
    except ValueError as e:
        raise CheckpointError(f"bad meta record: {e}") from None
    return Checkpoint(entries, m)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def _coefficients(beta: float) -> tuple[float, float]:
    # For beta >= 0.5, 1 - beta is exact (Sterbenz); otherwise derive beta's
    # share from the exact complement.  Either way the pair sums to one and
    # mix(a, b, beta) and mix(b, a, 1 - beta) use the very same pair.
    if beta >= 0.5:
        return beta, 1.0 - beta
    wb = 1.0 - beta
    return 1.0 - wb, wb


def mix_weights(a: Checkpoint, b: Checkpoint, beta: float,
                frozen_prefix: str = ENCODER_PREFIX) -> Checkpoint:
    """Elementwise ``beta * a + (1 - beta) * b``.

    Keys under ``frozen_prefix`` must already agree bit for bit and are
    copied unchanged.  At beta 1 (or 0) the result is a verbatim copy of
    ``a`` (or ``b``), meta included, so a saved endpoint mix is
    byte-identical to its source.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    ka, kb = set(a.entries), set(b.entries)
    if ka != kb:
        raise ValueError(f"key sets differ: {sorted(ka ^ kb)}")
    wa, wb = _coefficients(float(beta))
    out: dict[str, np.ndarray] = {}
    for k in sorted(ka):
        x, y = a.entries[k], b.entries[k]
        if x.shape != y.shape or x.dtype != y.dtype:
            raise ValueError(f"{k}: shape/dtype mismatch {x.shape}/{x.dtype} vs {y.shape}/{y.dtype}")
        if k.startswith(frozen_prefix):
            if x.tobytes() != y.tobytes():
                raise ValueError(f"{k}: frozen weights differ between checkpoints")
            out[k] = x.copy()
        elif beta == 1.0:
            out[k] = x.copy()
        elif beta == 0.0:
            out[k] = y.copy()
        else:
            mixed = (wa * x + wb * y).astype(x.dtype, copy=False)
            out[k] = np.where(x == y, x, mixed)
    if beta == 1.0:
        return Checkpoint(out, a.meta)
    if beta == 0.0:
        return Checkpoint(out, b.meta)
    digest = a.meta.config_digest if a.meta.config_digest == b.meta.config_digest else ""
    return Checkpoint(out, CheckpointMeta("mixed", digest, max(a.meta.step, b.meta.step)))
