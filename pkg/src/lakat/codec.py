"""Canonical serialization and content identifiers.

Every protocol object has exactly one byte encoding: values are kind-tagged,
fields are written in declaration order, and absent/empty fields collapse to a
one- or two-byte marker so sparse objects stay compact.  Content ids are the
SHA-256 digest of those canonical bytes, prefixed with a one-byte algorithm
tag.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields as dc_fields

SHA256_TAG = 0x01
DIGEST_LEN = 32

# value kind tags
_K_ABSENT = 0x00
_K_UINT = 0x01
_K_BYTES = 0x02
_K_TEXT = 0x03
_K_LIST = 0x04
_K_CID = 0x05
_K_STRUCT = 0x06
_K_BOOL = 0x07


class CodecError(Exception):
    """Value cannot be canonically encoded or bytes cannot be decoded."""


class ContentId:
    """Algorithm-tagged 32-byte content hash.

    Hand-rolled (not a dataclass): content ids key nearly every map in the
    system, so equality and hashing stay on the fast path with a cached hash.
    Treat instances as immutable.
    """

    __slots__ = ("algo", "digest", "_hash")

    def __init__(self, algo: int, digest: bytes):
        if not 0 <= algo <= 0xFF:
            raise CodecError(f"algo tag out of range: {algo}")
        if len(digest) != DIGEST_LEN:
            raise CodecError(f"digest must be {DIGEST_LEN} bytes")
        self.algo = algo
        self.digest = digest
        self._hash = hash((algo, digest))

    def __eq__(self, other):
        return (
            isinstance(other, ContentId)
            and self._hash == other._hash
            and self.algo == other.algo
            and self.digest == other.digest
        )

    def __lt__(self, other):
        return (self.algo, self.digest) < (other.algo, other.digest)

    def __hash__(self):
        return self._hash

    @property
    def hex(self) -> str:
        return f"{self.algo:02x}{self.digest.hex()}"

    @classmethod
    def from_hex(cls, text: str) -> "ContentId":
        if len(text) != 2 + 2 * DIGEST_LEN:
            raise CodecError(f"content id hex must be {2 + 2 * DIGEST_LEN} chars")
        return cls(int(text[:2], 16), bytes.fromhex(text[2:]))

    def is_null(self) -> bool:
        return self == NULL_ID

    def __repr__(self):
        return f"ContentId({self.hex[:10]}..)"


NULL_ID = ContentId(0x00, b"\x00" * DIGEST_LEN)


def content_id(data: bytes) -> ContentId:
    """Content id of raw bytes: SHA-256 under the fixed algorithm tag."""
    return ContentId(SHA256_TAG, hashlib.sha256(data).digest())


@dataclass(frozen=True)
class LogicalTimestamp:
    """Simulation tick plus an optional opaque external anchor."""

    tick: int
    anchor: bytes | None = None

    def __post_init__(self):
        if self.tick < 0:
            raise CodecError("tick must be non-negative")


# struct registry: type code <-> dataclass
_STRUCT_BY_CODE: dict[int, type] = {}
_CODE_BY_CLASS: dict[type, int] = {}
_FIELDS_BY_CLASS: dict[type, tuple] = {}


def protocol_struct(code: int):
    """Class decorator registering a dataclass as an encodable struct."""

    def register(cls):
        if code in _STRUCT_BY_CODE:
            raise ValueError(f"struct code {code} already taken by {_STRUCT_BY_CODE[code]}")
        _STRUCT_BY_CODE[code] = cls
        _CODE_BY_CLASS[cls] = code
        _FIELDS_BY_CLASS[cls] = tuple(field.name for field in dc_fields(cls))
        return cls

    return register


def is_protocol_struct(value) -> bool:
    return type(value) in _CODE_BY_CLASS


protocol_struct(1)(LogicalTimestamp)


def _write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise CodecError("varint must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise CodecError("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise CodecError("varint too long")


def _encode_value(out: bytearray, value) -> None:
    if value is None:
        out.append(_K_ABSENT)
    elif isinstance(value, bool):
        out.append(_K_BOOL)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        out.append(_K_UINT)
        _write_varint(out, value)
    elif isinstance(value, bytes):
        out.append(_K_BYTES)
        _write_varint(out, len(value))
        out.extend(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(_K_TEXT)
        _write_varint(out, len(raw))
        out.extend(raw)
    elif isinstance(value, ContentId):
        out.append(_K_CID)
        out.append(value.algo)
        out.extend(value.digest)
    elif isinstance(value, (list, tuple)):
        out.append(_K_LIST)
        _write_varint(out, len(value))
        for item in value:
            _encode_value(out, item)
    elif type(value) in _CODE_BY_CLASS:
        out.append(_K_STRUCT)
        _write_varint(out, _CODE_BY_CLASS[type(value)])
        for name in _FIELDS_BY_CLASS[type(value)]:
            _encode_value(out, getattr(value, name))
    else:
        raise CodecError(f"unencodable value kind: {type(value).__name__}")


def _decode_value(data: bytes, pos: int):
    if pos >= len(data):
        raise CodecError("truncated value")
    kind = data[pos]
    pos += 1
    if kind == _K_ABSENT:
        return None, pos
    if kind == _K_BOOL:
        if pos >= len(data):
            raise CodecError("truncated bool")
        return data[pos] != 0, pos + 1
    if kind == _K_UINT:
        return _read_varint(data, pos)
    if kind in (_K_BYTES, _K_TEXT):
        length, pos = _read_varint(data, pos)
        if pos + length > len(data):
            raise CodecError("truncated bytes")
        raw = data[pos : pos + length]
        pos += length
        return (raw if kind == _K_BYTES else raw.decode("utf-8")), pos
    if kind == _K_CID:
        if pos + 1 + DIGEST_LEN > len(data):
            raise CodecError("truncated content id")
        cid = ContentId(data[pos], data[pos + 1 : pos + 1 + DIGEST_LEN])
        return cid, pos + 1 + DIGEST_LEN
    if kind == _K_LIST:
        count, pos = _read_varint(data, pos)
        items = []
        for _ in range(count):
            item, pos = _decode_value(data, pos)
            items.append(item)
        return items, pos
    if kind == _K_STRUCT:
        code, pos = _read_varint(data, pos)
        cls = _STRUCT_BY_CODE.get(code)
        if cls is None:
            raise CodecError(f"unknown struct code {code}")
        values = []
        for _ in _FIELDS_BY_CLASS[cls]:
            value, pos = _decode_value(data, pos)
            values.append(value)
        return cls(*values), pos
    raise CodecError(f"unknown value kind tag {kind:#x}")


def canonical_encode(value) -> bytes:
    """Deterministic canonical byte encoding of a protocol value."""
    out = bytearray()
    _encode_value(out, value)
    return bytes(out)


def canonical_decode(data: bytes):
    """Inverse of canonical_encode; rejects trailing garbage."""
    value, pos = _decode_value(data, 0)
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} trailing bytes after value")
    return value


def object_id(value) -> ContentId:
    """Content id of a protocol object's canonical encoding."""
    return content_id(canonical_encode(value))
