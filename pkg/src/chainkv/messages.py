"""Protocol messages exchanged between clients, servers and the coordinator."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .codec import register
from .core import MediatorToken, SchemaKey, TransactionPayload


@register(40)
class AbortReason(enum.Enum):
    STALE_READ = "stale_read"
    CONFLICT = "conflict"
    TYPE_MISMATCH = "type_mismatch"
    RETRY_BUDGET = "retry_budget"
    LOCK_BUSY = "lock_busy"
    UNAVAILABLE = "unavailable"

    @property
    def validation_failed(self):
        return self in (AbortReason.STALE_READ, AbortReason.CONFLICT)


# --- commit chain ----------------------------------------------------------
# Every chain message carries the payload and the client endpoint so any hop
# can rebuild the chain under its own configuration.

@register(41)
@dataclass(slots=True)
class Forward:
    config_version: int
    payload: TransactionPayload
    client: str
    token: MediatorToken | None = None

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(42)
@dataclass(slots=True)
class CommitBackward:
    config_version: int
    payload: TransactionPayload
    client: str
    token: MediatorToken

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(43)
@dataclass(slots=True)
class AbortForward:
    config_version: int
    payload: TransactionPayload
    client: str
    reason: AbortReason

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(44)
@dataclass(slots=True)
class AbortBackward:
    config_version: int
    payload: TransactionPayload
    client: str
    reason: AbortReason

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(45)
@dataclass(slots=True)
class RetryBackward:
    config_version: int
    payload: TransactionPayload
    client: str
    token: MediatorToken
    floor: MediatorToken

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(46)
@dataclass(slots=True)
class ClientReply:
    txn_id: int
    committed: bool
    reason: AbortReason | None = None


CHAIN_MESSAGES = (Forward, CommitBackward, AbortForward, AbortBackward, RetryBackward)


# --- reads and status ------------------------------------------------------

@register(50)
@dataclass(slots=True)
class Read:
    req_id: int
    key: SchemaKey
    config_version: int


@register(51)
@dataclass(slots=True)
class ReadReply:
    req_id: int
    key: SchemaKey
    value: object
    version: int


@register(52)
@dataclass(slots=True)
class WrongServer:
    config_version: int
    original: object


@register(53)
@dataclass(slots=True)
class StatusQuery:
    req_id: int
    txn_id: int
    key: SchemaKey
    config_version: int


@register(54)
@dataclass(slots=True)
class StatusReply:
    req_id: int
    txn_id: int
    status: str


# --- coordinator -------------------------------------------------------------

@register(60)
@dataclass(slots=True)
class GetConfig:
    min_version: int


@register(61)
@dataclass(slots=True)
class ConfigResponse:
    config: object


@register(62)
@dataclass(slots=True)
class ReportFail:
    server_id: int


@register(63)
@dataclass(slots=True)
class JoinRequest:
    server_id: int
    address: str


@register(64)
@dataclass(slots=True)
class Subscribe:
    endpoint: str


@register(65)
@dataclass(slots=True)
class CoordinatorError:
    message: str


# --- replica recovery --------------------------------------------------------

@register(70)
@dataclass(slots=True)
class RecoverRequest:
    partition: int
    config_version: int
    requester: str


@register(71)
@dataclass(slots=True)
class RecoverReply:
    partition: int
    config_version: int
    snapshot: object


@register(72)
@dataclass(slots=True)
class RecoveryDone:
    server_id: int
    partition: int


# --- mini-transaction baseline ---------------------------------------------

@register(80)
@dataclass(slots=True)
class MtPrepare:
    config_version: int
    payload: TransactionPayload
    client: str
    partition: int

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(81)
@dataclass(slots=True)
class MtVote:
    txn_id: int
    partition: int
    ok: bool
    reason: AbortReason | None = None


@register(82)
@dataclass(slots=True)
class MtDecision:
    config_version: int
    payload: TransactionPayload
    client: str
    partition: int
    commit: bool

    @property
    def txn_id(self):
        return self.payload.txn_id


@register(83)
@dataclass(slots=True)
class MtAck:
    txn_id: int
    partition: int


# --- live-cluster counters --------------------------------------------------

@register(85)
@dataclass(slots=True)
class StatsQuery:
    txn_ids: tuple


@register(86)
@dataclass(slots=True)
class StatsReply:
    server_id: int
    hops: tuple            # (txn_id, sent protocol messages)
    retries: tuple         # (txn_id, token retries)


@register(90)
@dataclass(slots=True)
class Envelope:
    src: str
    dst: str
    seq: int
    body: object
