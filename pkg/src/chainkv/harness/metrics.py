"""Run metrics, latency CDFs and line-delimited records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class Metrics:
    issued: int = 0
    committed: int = 0
    aborted: int = 0
    attempts: int = 0
    attempt_aborts: int = 0
    reexecutions: int = 0
    retries: int = 0
    hops: int = 0
    committed_ops: float = 0
    elapsed_us: int = 0
    latency_us: list = field(default_factory=list)
    commit_latency_us: list = field(default_factory=list)
    by_profile: dict = field(default_factory=dict)
    abort_reasons: dict = field(default_factory=dict)
    # hop counts of committed attempts that needed no token retry
    clean_hops: list = field(default_factory=list)
    _attempts: list = field(default_factory=list, repr=False)

    def observe_attempt(self, txn_id, outcome):
        self._attempts.append((txn_id, outcome.committed))
        if not outcome.committed:
            r = outcome.reason.value if outcome.reason is not None else "nested"
            self.abort_reasons[r] = self.abort_reasons.get(r, 0) + 1

    def finish(self, hops_by, retries_by):
        """Fold per-transaction hop and token-retry counters into the totals."""
        self.retries = sum(retries_by.get(t, 0) for t, _ in self._attempts)
        self.hops = sum(hops_by.get(t, 0) for t, _ in self._attempts)
        self.clean_hops = [hops_by.get(t, 0) for t, ok in self._attempts if ok and not retries_by.get(t)]

    @property
    def throughput(self):
        """Committed transactions per virtual second."""
        return self.committed / (self.elapsed_us / 1e6) if self.elapsed_us else 0.0

    @property
    def ops_throughput(self):
        return self.committed_ops / (self.elapsed_us / 1e6) if self.elapsed_us else 0.0

    @property
    def abort_rate(self):
        """Fraction of commit attempts that aborted."""
        return self.attempt_aborts / self.attempts if self.attempts else 0.0

    def mean_latency_ms(self, commit_only=False):
        xs = self.commit_latency_us if commit_only else self.latency_us
        return sum(xs) / len(xs) / 1000 if xs else 0.0

    def summary(self) -> dict:
        return {
            "issued": self.issued,
            "committed": self.committed,
            "aborted": self.aborted,
            "attempts": self.attempts,
            "attempt_aborts": self.attempt_aborts,
            "abort_rate": round(self.abort_rate, 6),
            "reexecutions": self.reexecutions,
            "retries": self.retries,
            "hops": self.hops,
            "elapsed_us": self.elapsed_us,
            "throughput_tps": round(self.throughput, 3),
            "ops_per_s": round(self.ops_throughput, 3),
            "mean_latency_ms": round(self.mean_latency_ms(), 3),
            "mean_commit_latency_ms": round(self.mean_latency_ms(True), 3),
            "by_profile": dict(sorted(self.by_profile.items())),
            "abort_reasons": dict(sorted(self.abort_reasons.items())),
        }

    def records(self):
        """One JSON line for the summary, then one per latency sample."""
        yield json.dumps({"type": "summary", **self.summary()}, sort_keys=True)
        for i, lat in enumerate(self.latency_us):
            yield json.dumps({"type": "latency", "i": i, "us": lat}, sort_keys=True)


def latency_cdf(samples_us, points=100):
    """(ms, percentile) pairs for plotting."""
    xs = sorted(samples_us)
    if not xs:
        return []
    out = []
    n = len(xs)
    for j in range(1, points + 1):
        idx = max(0, min(n - 1, -(-j * n // points) - 1))
        out.append((round(xs[idx] / 1000, 3), round(100.0 * j / points, 2)))
    return out


def summary_table(rows: dict) -> str:
    """Fixed-width table of metric summaries keyed by run label."""
    cols = ["committed", "aborted", "abort_rate", "throughput_tps", "mean_latency_ms", "hops"]
    lines = [f"{'run':<20}" + "".join(f"{c:>18}" for c in cols)]
    for label, s in rows.items():
        lines.append(f"{label:<20}" + "".join(f"{s[c]!s:>18}" for c in cols))
    return "\n".join(lines)
