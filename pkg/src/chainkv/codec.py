"""Canonical binary encoding.

Every encoded blob starts with a format version byte, followed by one tagged
item. Integers are little-endian, variable-size parts carry u32 length
prefixes, set elements and map entries are sorted by their encoded bytes so
equal values always encode identically. Record types (dataclasses and named
tuples) are registered with a numeric id and encoded field by field in
declaration order.
"""

from __future__ import annotations

import dataclasses
import enum
import struct

from .core import ABSENT, INT64_MAX, INT64_MIN, FrozenMap

FORMAT_VERSION = 1


class CodecError(Exception):
    pass


T_NONE, T_FALSE, T_TRUE, T_INT, T_BIGINT, T_FLOAT, T_BYTES, T_STR = range(8)
T_TUPLE, T_LIST, T_FROZENSET, T_FROZENMAP, T_DICT, T_ABSENT, T_RECORD, T_ENUM = range(8, 16)

_u32 = struct.Struct("<I")
_u16 = struct.Struct("<H")
_i64 = struct.Struct("<q")
_f64 = struct.Struct("<d")

_by_id: dict[int, type] = {}
_by_type: dict[type, tuple[int, tuple[str, ...]]] = {}
_enums_by_id: dict[int, type] = {}
_enums_by_type: dict[type, int] = {}


def register(type_id: int):
    """Class decorator registering a dataclass or NamedTuple for encoding."""
    def deco(cls):
        if type_id in _by_id or type_id in _enums_by_id:
            raise ValueError(f"type id {type_id} already registered")
        if isinstance(cls, type) and issubclass(cls, enum.Enum):
            _enums_by_id[type_id] = cls
            _enums_by_type[cls] = type_id
            return cls
        if dataclasses.is_dataclass(cls):
            names = tuple(f.name for f in dataclasses.fields(cls) if f.init)
        elif hasattr(cls, "_fields"):
            names = cls._fields
        else:
            raise TypeError(f"cannot register {cls!r}")
        _by_id[type_id] = cls
        _by_type[cls] = (type_id, names)
        return cls
    return deco


def _enc(x, out: list):
    t = type(x)
    if x is None:
        out.append(b"\x00")
    elif t is bool:
        out.append(b"\x02" if x else b"\x01")
    elif t is int:
        if INT64_MIN <= x <= INT64_MAX:
            out.append(b"\x03")
            out.append(_i64.pack(x))
        else:
            raw = x.to_bytes((x.bit_length() + 8) // 8, "little", signed=True)
            out.append(b"\x04")
            out.append(_u32.pack(len(raw)))
            out.append(raw)
    elif t is float:
        out.append(b"\x05")
        out.append(_f64.pack(x))
    elif t is bytes:
        out.append(b"\x06")
        out.append(_u32.pack(len(x)))
        out.append(x)
    elif t is str:
        raw = x.encode()
        out.append(b"\x07")
        out.append(_u32.pack(len(raw)))
        out.append(raw)
    elif t is tuple:
        out.append(b"\x08")
        out.append(_u32.pack(len(x)))
        for item in x:
            _enc(item, out)
    elif t is list:
        out.append(b"\x09")
        out.append(_u32.pack(len(x)))
        for item in x:
            _enc(item, out)
    elif t is frozenset:
        parts = sorted(encode_item(item) for item in x)
        out.append(b"\x0a")
        out.append(_u32.pack(len(parts)))
        out.extend(parts)
    elif t is FrozenMap or t is dict:
        entries = sorted((encode_item(k), encode_item(v)) for k, v in x.items())
        out.append(b"\x0b" if t is FrozenMap else b"\x0c")
        out.append(_u32.pack(len(entries)))
        for k, v in entries:
            out.append(k)
            out.append(v)
    elif x is ABSENT:
        out.append(b"\x0d")
    elif t in _by_type:
        tid, names = _by_type[t]
        out.append(b"\x0e")
        out.append(_u16.pack(tid))
        for n in names:
            _enc(getattr(x, n), out)
    elif t in _enums_by_type:
        out.append(b"\x0f")
        out.append(_u16.pack(_enums_by_type[t]))
        _enc(x.value, out)
    else:
        raise CodecError(f"cannot encode {t.__name__}")


def encode_item(x) -> bytes:
    out: list = []
    _enc(x, out)
    return b"".join(out)


def encode(x) -> bytes:
    return bytes([FORMAT_VERSION]) + encode_item(x)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CodecError("truncated input")
        b = self.buf[self.pos:end]
        self.pos = end
        return b

    def u32(self):
        return _u32.unpack(self.take(4))[0]

    def item(self):
        tag = self.take(1)[0]
        if tag == T_NONE:
            return None
        if tag == T_FALSE:
            return False
        if tag == T_TRUE:
            return True
        if tag == T_INT:
            return _i64.unpack(self.take(8))[0]
        if tag == T_BIGINT:
            return int.from_bytes(self.take(self.u32()), "little", signed=True)
        if tag == T_FLOAT:
            return _f64.unpack(self.take(8))[0]
        if tag == T_BYTES:
            return self.take(self.u32())
        if tag == T_STR:
            return self.take(self.u32()).decode()
        if tag == T_TUPLE:
            return tuple(self.item() for _ in range(self.u32()))
        if tag == T_LIST:
            return [self.item() for _ in range(self.u32())]
        if tag == T_FROZENSET:
            return frozenset(self.item() for _ in range(self.u32()))
        if tag in (T_FROZENMAP, T_DICT):
            n = self.u32()
            pairs = [(self.item(), self.item()) for _ in range(n)]
            return FrozenMap(pairs) if tag == T_FROZENMAP else dict(pairs)
        if tag == T_ABSENT:
            return ABSENT
        if tag == T_RECORD:
            tid = _u16.unpack(self.take(2))[0]
            cls = _by_id.get(tid)
            if cls is None:
                raise CodecError(f"unknown record type {tid}")
            names = _by_type[cls][1]
            vals = [self.item() for _ in names]
            return cls(*vals)
        if tag == T_ENUM:
            tid = _u16.unpack(self.take(2))[0]
            cls = _enums_by_id.get(tid)
            if cls is None:
                raise CodecError(f"unknown enum type {tid}")
            return cls(self.item())
        raise CodecError(f"bad tag {tag}")


def decode(data: bytes):
    if not data:
        raise CodecError("empty input")
    if data[0] != FORMAT_VERSION:
        raise CodecError(f"unsupported format version {data[0]}")
    r = _Reader(data, 1)
    x = r.item()
    if r.pos != len(data):
        raise CodecError("trailing bytes")
    return x


def _register_core():
    from . import core
    register(1)(core.SchemaKey)
    register(2)(core.MediatorToken)
    register(3)(core.ReadRecord)
    register(4)(core.WriteRecord)
    register(5)(core.TransactionPayload)
    register(6)(core.Overwrite)
    register(7)(core.Delete)
    register(8)(core.Add)
    register(9)(core.ListAppend)
    register(10)(core.SetInsert)
    register(11)(core.SetRemove)
    register(12)(core.MapPut)
    register(13)(core.OpSequence)


_register_core()
