"""Shared domain types: keys, values, atomic operations, payloads and tokens."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1
UINT64_MAX = (1 << 64) - 1


class ChainKVError(Exception):
    pass


class EmptyTransaction(ChainKVError):
    pass


class TypeMismatch(ChainKVError):
    pass


class CounterOverflow(ChainKVError):
    """The token counter ran past 64 bits; the process must restart."""


class SchemaKey(NamedTuple):
    schema: str
    key: bytes

    @classmethod
    def make(cls, schema: str, key) -> "SchemaKey":
        if isinstance(key, str):
            key = key.encode()
        if not isinstance(schema, str) or not schema or "\x00" in schema:
            raise ValueError(f"bad schema name {schema!r}")
        if not isinstance(key, bytes) or not key:
            raise ValueError(f"bad key {key!r}")
        return cls(schema, key)

    def __str__(self):
        return f"{self.schema}/{self.key.decode(errors='backslashreplace')}"


# Python compares str by code point, which matches UTF-8 byte order, so the
# tuple order of SchemaKey is the byte-wise (schema, key) order.


class _Absent:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "ABSENT"

    def __reduce__(self):
        return (_Absent, ())

    def __deepcopy__(self, memo):
        return self

    def __copy__(self):
        return self


ABSENT = _Absent()


class FrozenMap:
    """Immutable, hashable map from bytes to Value."""

    __slots__ = ("_d", "_h")

    def __init__(self, items=()):
        d = dict(items)
        for k in d:
            if not isinstance(k, bytes):
                raise TypeError("map keys must be bytes")
        self._d = d
        self._h = None

    def __getitem__(self, k):
        return self._d[k]

    def get(self, k, default=None):
        return self._d.get(k, default)

    def __contains__(self, k):
        return k in self._d

    def __len__(self):
        return len(self._d)

    def __iter__(self):
        return iter(sorted(self._d))

    def items(self):
        return [(k, self._d[k]) for k in sorted(self._d)]

    def put(self, k, v) -> "FrozenMap":
        d = dict(self._d)
        d[k] = v
        return FrozenMap(d)

    def __eq__(self, other):
        return isinstance(other, FrozenMap) and self._d == other._d

    def __hash__(self):
        if self._h is None:
            self._h = hash(frozenset(self._d.items()))
        return self._h

    def __repr__(self):
        return "FrozenMap({%s})" % ", ".join(f"{k!r}: {v!r}" for k, v in self.items())


class Tag(enum.IntEnum):
    ABSENT = 0
    STRING = 1
    INT = 2
    FLOAT = 3
    LIST = 4
    SET = 5
    MAP = 6


def normalize_value(v):
    """Coerce a Python value into the immutable Value representation."""
    if v is ABSENT or v is None:
        return ABSENT
    if isinstance(v, bool):
        raise TypeError("booleans are not values")
    if isinstance(v, int):
        if not INT64_MIN <= v <= INT64_MAX:
            raise ValueError("integer outside signed 64-bit range")
        return v
    if isinstance(v, float):
        return v
    if isinstance(v, bytes):
        return v
    if isinstance(v, str):
        return v.encode()
    if isinstance(v, (list, tuple)):
        return tuple(normalize_value(x) for x in v)
    if isinstance(v, (set, frozenset)):
        return frozenset(normalize_value(x) for x in v)
    if isinstance(v, FrozenMap):
        return v
    if isinstance(v, dict):
        return FrozenMap((k.encode() if isinstance(k, str) else k, normalize_value(x)) for k, x in v.items())
    raise TypeError(f"unsupported value type {type(v).__name__}")


def tag_of(v) -> Tag:
    if v is ABSENT:
        return Tag.ABSENT
    t = type(v)
    if t is int:
        return Tag.INT
    if t is bytes:
        return Tag.STRING
    if t is float:
        return Tag.FLOAT
    if t is tuple:
        return Tag.LIST
    if t is frozenset:
        return Tag.SET
    if t is FrozenMap:
        return Tag.MAP
    raise TypeError(f"not a value: {v!r}")


# --- atomic operations ---------------------------------------------------

@dataclass(frozen=True)
class Overwrite:
    value: object

    def __post_init__(self):
        object.__setattr__(self, "value", normalize_value(self.value))


@dataclass(frozen=True)
class Delete:
    pass


@dataclass(frozen=True)
class Add:
    delta: int

    def __post_init__(self):
        if isinstance(self.delta, bool) or not isinstance(self.delta, int):
            raise TypeError("add delta must be an integer")
        if not INT64_MIN <= self.delta <= INT64_MAX:
            raise ValueError("delta outside signed 64-bit range")


@dataclass(frozen=True)
class ListAppend:
    value: object

    def __post_init__(self):
        object.__setattr__(self, "value", normalize_value(self.value))


@dataclass(frozen=True)
class SetInsert:
    value: object

    def __post_init__(self):
        object.__setattr__(self, "value", normalize_value(self.value))


@dataclass(frozen=True)
class SetRemove:
    value: object

    def __post_init__(self):
        object.__setattr__(self, "value", normalize_value(self.value))


@dataclass(frozen=True)
class MapPut:
    field: bytes
    value: object

    def __post_init__(self):
        f = self.field.encode() if isinstance(self.field, str) else self.field
        if not isinstance(f, bytes):
            raise TypeError("map field must be a string")
        object.__setattr__(self, "field", f)
        object.__setattr__(self, "value", normalize_value(self.value))


@dataclass(frozen=True)
class OpSequence:
    """Several ops on one key, applied left to right."""
    ops: tuple

    def __post_init__(self):
        flat = []
        for op in self.ops:
            flat.extend(op.ops if isinstance(op, OpSequence) else (op,))
        object.__setattr__(self, "ops", tuple(flat))


AtomicOp = Overwrite | Delete | Add | ListAppend | SetInsert | SetRemove | MapPut | OpSequence

# which input tags each op kind accepts (ABSENT means "use the identity")
_ACCEPTS = {
    Add: (Tag.ABSENT, Tag.INT),
    ListAppend: (Tag.ABSENT, Tag.LIST),
    SetInsert: (Tag.ABSENT, Tag.SET),
    SetRemove: (Tag.ABSENT, Tag.SET),
    MapPut: (Tag.ABSENT, Tag.MAP),
}
_RESULT = {Add: Tag.INT, ListAppend: Tag.LIST, SetInsert: Tag.SET, SetRemove: Tag.SET, MapPut: Tag.MAP}


def result_tag(tag: Tag, op) -> Tag:
    """Tag produced by applying op to a value of the given tag; TypeMismatch if not applicable."""
    t = type(op)
    if t is Overwrite:
        return tag_of(op.value)
    if t is Delete:
        return Tag.ABSENT
    if t is OpSequence:
        for sub in op.ops:
            tag = result_tag(tag, sub)
        return tag
    if tag not in _ACCEPTS[t]:
        raise TypeMismatch(f"{t.__name__} cannot apply to {tag.name}")
    return _RESULT[t]


def apply_atomic(current, op):
    """Pure application of op to current; absent is treated as the op's identity."""
    t = type(op)
    if t is Overwrite:
        return op.value
    if t is Delete:
        return ABSENT
    if t is OpSequence:
        for sub in op.ops:
            current = apply_atomic(current, sub)
        return current
    tag = tag_of(current)
    if tag not in _ACCEPTS[t]:
        raise TypeMismatch(f"{t.__name__} cannot apply to {tag.name}")
    if t is Add:
        r = (0 if current is ABSENT else current) + op.delta
        if not INT64_MIN <= r <= INT64_MAX:
            raise TypeMismatch("integer overflow")
        return r
    if t is ListAppend:
        return (() if current is ABSENT else current) + (op.value,)
    if t is SetInsert:
        return (frozenset() if current is ABSENT else current) | {op.value}
    if t is SetRemove:
        return (frozenset() if current is ABSENT else current) - {op.value}
    # MapPut
    return (FrozenMap() if current is ABSENT else current).put(op.field, op.value)


# --- transactions ----------------------------------------------------------

class ReadRecord(NamedTuple):
    key: SchemaKey
    version: int


class WriteRecord(NamedTuple):
    key: SchemaKey
    op: object


@dataclass(frozen=True)
class TransactionPayload:
    txn_id: int
    reads: tuple = ()
    writes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "reads", tuple(self.reads))
        object.__setattr__(self, "writes", tuple(self.writes))
        seen = set()
        for w in self.writes:
            if w.key in seen:
                raise ValueError(f"duplicate write to {w.key}")
            seen.add(w.key)

    @property
    def read_only(self):
        return not self.writes


def footprint(payload: TransactionPayload) -> list[SchemaKey]:
    keys = {r.key for r in payload.reads}
    keys.update(w.key for w in payload.writes)
    if not keys:
        raise EmptyTransaction(f"transaction {payload.txn_id:x} touches no keys")
    return sorted(keys)


# --- mediator tokens -----------------------------------------------------

class MediatorToken(NamedTuple):
    """Ordered by counter, then head server id, then txn id."""
    counter: int
    head: int
    txn_id: int


def compare_tokens(a: MediatorToken, b: MediatorToken) -> int:
    """-1, 0 or 1 as a is less than, equal to or greater than b."""
    return (a > b) - (a < b)


class TokenCounter:
    def __init__(self, next: int = 0):
        self.next = next

    def observe(self, token: MediatorToken | None):
        """Advance past a token seen elsewhere, so later tokens here exceed it."""
        if token is not None and token.counter >= self.next:
            self.next = token.counter + 1

    def generate(self, head: int, txn_id: int, floor: MediatorToken | None = None) -> MediatorToken:
        if floor is not None and floor.counter >= self.next:
            self.next = floor.counter + 1
        c = self.next
        if c > UINT64_MAX:
            raise CounterOverflow("token counter exhausted")
        self.next = c + 1
        return MediatorToken(c, head, txn_id)


def generate_token(counter: TokenCounter, floor: MediatorToken | None = None, head: int = 0,
                   txn_id: int = 0) -> MediatorToken:
    return counter.generate(head, txn_id, floor)
