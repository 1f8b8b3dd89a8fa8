"""Content addressing.

Every cacheable node (step, dataset, model, trainer, workflow) is identified
by the SHA-256 of a canonical byte serialization of its descriptor:

    {"args": ..., "inputs": [fp, ...], "kind": ..., "name": "", "version": n}

Canonical bytes are JSON with map keys sorted by UTF-8 bytes, no whitespace,
and minimal string escaping (only ``"``, ``\\`` and control characters, with
lowercase ``\\uXXXX``), plus two extensions that keep the encoding bit-exact
across languages:

- floats are encoded as the tagged string ``"f64:<16 hex>"`` holding the
  big-endian IEEE-754 bit pattern, never as decimal text;
- embedded fingerprints are encoded as ``{"$fp": "<64 hex>"}``.

The user-visible step name never enters a fingerprint (it lives in the step
record and the provenance card), so cosmetic renames do not break cache
equality between two otherwise identical workflows.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from typing import Any, Iterable

from .errors import DepthExceeded

# Session folder layout version; also seeds workflow fingerprints.
FORMAT_VERSION = 1

MAX_DEPTH = 16

_HEX_CHARS = frozenset("0123456789abcdef")


class Fingerprint(str):
    """A 64-char lowercase hex content address."""

    __slots__ = ()

    def __new__(cls, hex_digest: str) -> "Fingerprint":
        if len(hex_digest) != 64 or not _HEX_CHARS.issuperset(hex_digest):
            raise ValueError(f"not a 64-char lowercase hex digest: {hex_digest!r}")
        return super().__new__(cls, hex_digest)

    @property
    def hex(self) -> str:
        return str(self)

    def short(self, n: int = 12) -> str:
        return self[:n]


def float_tag(x: float) -> str:
    """Tagged bit-exact form of a float, e.g. 1.0 -> "f64:3ff0000000000000"."""
    return "f64:" + struct.pack(">d", x).hex()


def _encode(value: Any, out: list[bytes], depth: int) -> None:
    if depth > MAX_DEPTH:
        raise DepthExceeded(f"canonical value nesting exceeds {MAX_DEPTH}")
    if isinstance(value, Fingerprint):
        out.append(b'{"$fp":"%s"}' % value.encode("ascii"))
    elif value is None:
        out.append(b"null")
    elif isinstance(value, bool):
        out.append(b"true" if value else b"false")
    elif isinstance(value, int):
        out.append(str(value).encode("ascii"))
    elif isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite float is not canonicalizable: {value!r}")
        out.append(b'"%s"' % float_tag(value).encode("ascii"))
    elif isinstance(value, str):
        # json.dumps escapes exactly ", \ and control chars, \uXXXX lowercase.
        out.append(json.dumps(value, ensure_ascii=False).encode("utf-8"))
    elif isinstance(value, (list, tuple)):
        out.append(b"[")
        for i, item in enumerate(value):
            if i:
                out.append(b",")
            _encode(item, out, depth + 1)
        out.append(b"]")
    elif isinstance(value, dict):
        out.append(b"{")
        for i, key in enumerate(sorted(value)):
            if not isinstance(key, str):
                raise TypeError(f"map keys must be text, got {type(key).__name__}")
            if i:
                out.append(b",")
            out.append(json.dumps(key, ensure_ascii=False).encode("utf-8"))
            out.append(b":")
            _encode(value[key], out, depth + 1)
        out.append(b"}")
    else:
        raise TypeError(f"not a canonical value: {type(value).__name__}")


def canonical_bytes(value: Any) -> bytes:
    """Deterministic byte serialization of a canonical value."""
    out: list[bytes] = []
    _encode(value, out, 1)
    return b"".join(out)


def fingerprint_bytes(data: bytes) -> Fingerprint:
    """SHA-256 of raw bytes as a Fingerprint."""
    return Fingerprint(hashlib.sha256(data).hexdigest())


def fingerprint(value: Any) -> Fingerprint:
    """SHA-256 over canonical_bytes(value), lowercase hex."""
    return fingerprint_bytes(canonical_bytes(value))


def make_node(kind: str, version: int, args: dict, inputs: Iterable[Fingerprint]) -> dict:
    """Canonical node descriptor. The name field is always empty here:
    renaming a step must not change its fingerprint."""
    return {
        "kind": kind,
        "name": "",
        "version": version,
        "args": args,
        "inputs": list(inputs),
    }


def workflow_node(terminal_fps: Iterable[Fingerprint]) -> dict:
    """Aggregate node over a session's terminal steps, sorted by hex."""
    return make_node("workflow", FORMAT_VERSION, {}, sorted(set(terminal_fps)))


def to_jsonable(value: Any) -> Any:
    """Convert a canonical value into a plain JSON-compatible structure that
    round-trips through json.dumps/loads without losing float bits or
    fingerprint tagging (same surface forms as canonical_bytes)."""
    if isinstance(value, Fingerprint):
        return {"$fp": str(value)}
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite float is not canonicalizable: {value!r}")
        return float_tag(value)
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    raise TypeError(f"not a canonical value: {type(value).__name__}")
