"""Transaction histories and the serializability oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import networkx as nx

from ..core import SchemaKey


class MalformedHistory(ValueError):
    pass


@dataclass(frozen=True)
class TxnEntry:
    txn_id: int
    reads: tuple          # ((SchemaKey, observed version), ...)
    writes: tuple         # ((SchemaKey, new version), ...)
    committed: bool
    commit_time: int = 0
    profile: str = ""


@dataclass
class History:
    entries: list = field(default_factory=list)

    def add(self, entry: TxnEntry):
        self.entries.append(entry)

    def committed(self):
        return [e for e in self.entries if e.committed]

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> str:
        rows = []
        for e in self.entries:
            rows.append({
                "txn": f"{e.txn_id:032x}",
                "reads": [[k.schema, k.key.hex(), v] for k, v in e.reads],
                "writes": [[k.schema, k.key.hex(), v] for k, v in e.writes],
                "committed": e.committed,
                "time": e.commit_time,
                "profile": e.profile,
            })
        return json.dumps({"history": rows}, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "History":
        try:
            data = json.loads(text)
            rows = data["history"]
            h = cls()
            for r in rows:
                h.add(TxnEntry(
                    int(r["txn"], 16),
                    tuple((SchemaKey(s, bytes.fromhex(k)), int(v)) for s, k, v in r["reads"]),
                    tuple((SchemaKey(s, bytes.fromhex(k)), int(v)) for s, k, v in r["writes"]),
                    bool(r["committed"]), int(r.get("time", 0)), r.get("profile", "")))
            return h
        except (KeyError, ValueError, TypeError) as e:
            raise MalformedHistory(f"cannot parse history: {e}") from e


@dataclass(frozen=True)
class Ok:
    def __bool__(self):
        return True


@dataclass(frozen=True)
class Cycle:
    txns: tuple

    def __bool__(self):
        return False


def serialization_graph(h: History) -> nx.DiGraph:
    """Direct serialization graph over committed transactions (wr, ww and rw edges)."""
    g = nx.DiGraph()
    writer: dict = {}
    versions: dict = {}
    committed = h.committed()
    for e in committed:
        g.add_node(e.txn_id)
        for k, v in e.writes:
            if (k, v) in writer:
                raise MalformedHistory(f"version {v} of {k} written by two transactions")
            writer[(k, v)] = e.txn_id
            versions.setdefault(k, []).append(v)

    def edge(a, b, kind):
        if a != b:
            if g.has_edge(a, b):
                g[a][b]["kinds"].add(kind)
            else:
                g.add_edge(a, b, kinds={kind})

    for k, vs in versions.items():
        vs.sort()
        for a, b in zip(vs, vs[1:]):
            edge(writer[(k, a)], writer[(k, b)], "ww")
    for e in committed:
        for k, v in e.reads:
            w = writer.get((k, v))
            if w is not None:
                edge(w, e.txn_id, "wr")
            nxt = writer.get((k, v + 1))
            if nxt is not None:
                edge(e.txn_id, nxt, "rw")
    return g


def check_serializable(h: History):
    """Ok when the serialization graph is acyclic, else Cycle with a witness."""
    g = serialization_graph(h)
    try:
        cyc = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        return Ok()
    return Cycle(tuple(u for u, _ in cyc))


def dangling_reads(h: History) -> list:
    """Committed reads of a version no committed transaction wrote."""
    written = {(k, v) for e in h.committed() for k, v in e.writes}
    out = []
    for e in h.committed():
        for k, v in e.reads:
            if v > 0 and (k, v) not in written:
                out.append((e.txn_id, k, v))
    return out
