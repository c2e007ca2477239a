"""Deterministic discrete-event network simulator with message accounting.

Time is integer microseconds. Events are processed in ``(time, seqno)``
order; seqno is a global counter assigned at scheduling, so runs are
reproducible from ``(seed, config, workload)`` alone. Links are FIFO per
ordered node pair.

Every delivered envelope is classed ``protocol``, ``heartbeat`` or
``client``. Only ``protocol`` deliveries count as exchanged protocol
messages.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from . import crdt

PROTOCOL = "protocol"
HEARTBEAT = "heartbeat"
CLIENT = "client"

#: Average round-trip latency between sites, in milliseconds.
THREE_SITE_RTT_MS: dict[str, dict[str, float]] = {
    "ohio": {"ohio": 0.53, "london": 85.6, "sydney": 194.0},
    "london": {"london": 0.42, "sydney": 279.0},
    "sydney": {"sydney": 0.88},
}


class ConfigError(ValueError):
    pass


class SimulationAborted(RuntimeError):
    def __init__(self, message: str, prefix: list[dict]):
        super().__init__(message)
        self.prefix = prefix


@dataclass(frozen=True)
class LatencyMatrix:
    """One-way delays in microseconds, derived from round trips by halving."""

    one_way: Mapping[tuple[str, str], int]

    @classmethod
    def from_rtt_ms(cls, rtt: Mapping[str, Mapping[str, float]]) -> "LatencyMatrix":
        out: dict[tuple[str, str], int] = {}
        for a, row in rtt.items():
            for b, ms in row.items():
                us = round(float(ms) * 1000 / 2)
                if us <= 0:
                    raise ConfigError(f"latency {a}->{b} must be positive")
                out[(a, b)] = out[(b, a)] = us
        regions = {r for pair in out for r in pair}
        for a in regions:
            for b in regions:
                if (a, b) not in out:
                    raise ConfigError(f"latency matrix misses pair {a}->{b}")
        return cls(out)

    def __call__(self, a: str, b: str) -> int:
        return self.one_way[(a, b)]

    @property
    def regions(self) -> list[str]:
        return sorted({a for a, _ in self.one_way})

    @property
    def max_one_way(self) -> int:
        return max(self.one_way.values())


def uniform_matrix(rtt_ms: float = 1.0, region: str = "local") -> LatencyMatrix:
    return LatencyMatrix.from_rtt_ms({region: {region: rtt_ms}})


@dataclass(frozen=True)
class Envelope:
    src: str
    dst: str
    payload: Any
    send_time: int
    deliver_time: int
    seqno: int
    tag: str


@dataclass(frozen=True)
class Partition:
    side: frozenset[str]
    start: int
    end: int

    def splits(self, a: str, b: str, t: int) -> bool:
        return self.start <= t < self.end and ((a in self.side) != (b in self.side))


@dataclass
class FaultPlan:
    crashes: list[tuple[str, int]] = field(default_factory=list)
    recoveries: list[tuple[str, int]] = field(default_factory=list)
    partitions: list[Partition] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FaultPlan":
        return cls(
            crashes=[(n, int(t)) for n, t in d.get("crashes", [])],
            recoveries=[(n, int(t)) for n, t in d.get("recoveries", [])],
            partitions=[
                Partition(frozenset(p["side"]), int(p["start"]), int(p["end"]))
                for p in d.get("partitions", [])
            ],
        )

    def to_dict(self) -> dict:
        return {
            "crashes": [list(c) for c in self.crashes],
            "recoveries": [list(r) for r in self.recoveries],
            "partitions": [
                {"side": sorted(p.side), "start": p.start, "end": p.end} for p in self.partitions
            ],
        }


@dataclass
class MessageStats:
    by_class: Counter = field(default_factory=Counter)
    by_kind: Counter = field(default_factory=Counter)
    dropped: int = 0

    @property
    def protocol_messages(self) -> int:
        return self.by_class[PROTOCOL]

    def to_dict(self) -> dict:
        return {
            "protocol_messages": self.protocol_messages,
            "by_class": dict(sorted(self.by_class.items())),
            "by_kind": dict(sorted(self.by_kind.items())),
            "dropped": self.dropped,
        }


def wire(x: Any) -> Any:
    """JSON-ready canonical form of a payload."""
    if isinstance(x, (crdt.GCounter, crdt.GSet, crdt.ORSet)):
        return crdt.to_json(x)
    if is_dataclass(x) and not isinstance(x, type):
        return {"kind": type(x).__name__, **{f.name: wire(getattr(x, f.name)) for f in fields(x)}}
    if isinstance(x, (list, tuple)):
        return [wire(v) for v in x]
    if isinstance(x, (set, frozenset)):
        return sorted((wire(v) for v in x), key=repr)
    if isinstance(x, dict):
        return {str(k): wire(v) for k, v in sorted(x.items(), key=lambda kv: repr(kv[0]))}
    return x


_MASK = (1 << 64) - 1


def _leaf_hash(x: Any) -> int:
    # values that compare equal (1, 1.0, True) share a dict slot in the cache,
    # so they must hash alike
    if isinstance(x, str):
        blob = ("s:" + x).encode()
    else:
        if isinstance(x, bool) or (isinstance(x, float) and x.is_integer()):
            x = int(x)
        blob = f"n:{json.dumps(x)}".encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def _mix(tag: str, parts: Iterable[int]) -> int:
    h = hashlib.blake2b(tag.encode(), digest_size=8)
    for p in parts:
        h.update(p.to_bytes(8, "big"))
    return int.from_bytes(h.digest(), "big")


class _ElementHashes(dict):
    """Element -> hash, filled on first lookup so bulk lookups stay in C."""

    def __init__(self, fn: Callable[[Any], int]):
        super().__init__()
        self.fn = fn

    def __missing__(self, key: Any) -> int:
        h = self[key] = self.fn(key)
        return h


class _Digester:
    """Structural 64-bit hash of payloads.

    Sets and dict entries combine by modular sum, so no sorting is needed.
    Results for immutable containers are cached by identity (holding a
    reference so the identity stays valid) because the same state object is
    typically sent to every peer and replicated in many log entries.
    """

    def __init__(self, capacity: int = 8192):
        self.elements = _ElementHashes(self._hash)
        self.entries = _ElementHashes(lambda kv: _mix("kv", (self(kv[0]), self(kv[1]))))
        self.objects: dict[int, tuple[Any, int]] = {}
        self.capacity = capacity

    def __call__(self, x: Any) -> int:
        if x is None or isinstance(x, (str, int, float, bool)):
            return self.elements[x]
        hit = self.objects.get(id(x))
        if hit is not None and hit[0] is x:
            return hit[1]
        h = self._hash(x)
        if isinstance(x, (tuple, frozenset)) or is_dataclass(x):
            if len(self.objects) >= self.capacity:
                self.objects.clear()
            self.objects[id(x)] = (x, h)
        return h

    def _hash(self, x: Any) -> int:
        if x is None or isinstance(x, (str, int, float, bool)):
            return _leaf_hash(x)
        if isinstance(x, (set, frozenset)):
            return _mix("set", [sum(map(self.elements.__getitem__, x)) & _MASK])
        if isinstance(x, Mapping):
            try:
                total = sum(map(self.entries.__getitem__, x.items()))
            except TypeError:  # unhashable values, e.g. lists inside a reply
                total = sum(_mix("kv", (self(k), self(v))) for k, v in x.items())
            return _mix("map", [total & _MASK])
        if isinstance(x, (list, tuple)):
            return _mix("seq", map(self, x))
        if is_dataclass(x) and not isinstance(x, type):
            return _mix(type(x).__name__, (self(getattr(x, f.name)) for f in fields(x)))
        return self(repr(x))


_digester = _Digester()


def digest(payload: Any) -> str:
    """Deterministic 16-hex-digit fingerprint of a payload."""
    return f"{_digester(payload):016x}"


class Trace:
    """In-memory list of structured records, written as JSON lines."""

    def __init__(self) -> None:
        self.records: list[dict] = []

    def add(self, rec: str, **kv: Any) -> None:
        self.records.append({"rec": rec, **kv})

    def dumps(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


class TraceParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_trace(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceParseError(i, str(e)) from None
            if not isinstance(r, dict) or "rec" not in r:
                raise TraceParseError(i, "record is not an object with a 'rec' field")
            out.append(r)
    return out


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self) -> None:
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded event loop over registered node handlers.

    A handler is any object with ``on_message(env)``; ``on_crash()`` and
    ``on_recover()`` are called if present.
    """

    def __init__(
        self,
        regions: Mapping[str, str],
        latency: LatencyMatrix,
        seed: int = 0,
        jitter: float = 0.0,
        trace: Trace | None = None,
    ):
        for node, region in regions.items():
            if (region, region) not in latency.one_way:
                raise ConfigError(f"node {node} sits in region {region!r} absent from the latency matrix")
        self.regions = dict(regions)
        self.latency = latency
        self.rng = random.Random(seed)
        self.jitter = jitter
        self.trace = trace
        self.now = 0
        self.stats = MessageStats()
        self.handlers: dict[str, Any] = {}
        self.crashed: set[str] = set()
        self.partitions: list[Partition] = []
        self._heap: list[tuple[int, int, str, Any]] = []
        self._seq = 0
        self._incarnation: Counter = Counter()
        self._link_clock: dict[tuple[str, str], int] = {}
        self._last_handled = 0

    # -- setup -------------------------------------------------------------

    def register(self, node: str, handler: Any, region: str | None = None) -> None:
        """Attach a handler; ``region`` places a node not given at construction."""
        if region is not None:
            if (region, region) not in self.latency.one_way:
                raise ConfigError(f"node {node} sits in region {region!r} absent from the latency matrix")
            self.regions[node] = region
        if node not in self.regions:
            raise ConfigError(f"unknown node {node!r}")
        self.handlers[node] = handler

    def _push(self, t: int, kind: str, data: Any) -> int:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, data))
        return self._seq

    def inject(self, plan: FaultPlan) -> None:
        for node, t in plan.crashes:
            self._check(node)
            self._push(max(t, self.now), "crash", node)
        for node, t in plan.recoveries:
            self._check(node)
            self._push(max(t, self.now), "recover", node)
        self.partitions.extend(plan.partitions)

    def _check(self, node: str) -> None:
        if node not in self.regions:
            raise ConfigError(f"unknown node {node!r}")

    # -- node services -----------------------------------------------------

    def send(self, src: str, dst: str, payload: Any, tag: str = PROTOCOL) -> Envelope | None:
        self._check(src)
        self._check(dst)
        if src in self.crashed:
            return None
        delay = self.latency(self.regions[src], self.regions[dst])
        if self.jitter:
            delay = max(1, round(delay * (1 + self.rng.uniform(-self.jitter, self.jitter))))
        t = max(self.now + delay, self._link_clock.get((src, dst), 0))
        self._link_clock[(src, dst)] = t
        self._seq += 1
        env = Envelope(src, dst, payload, self.now, t, self._seq, tag)
        if self._cut(src, dst):
            self._drop(env, "partition")
            return None
        heapq.heappush(self._heap, (t, self._seq, "deliver", env))
        return env

    def _cut(self, a: str, b: str) -> bool:
        return any(p.splits(a, b, self.now) for p in self.partitions)

    def _drop(self, env: Envelope, why: str) -> None:
        self.stats.dropped += 1
        if self.trace is not None:
            self.trace.add(
                "drop", t=self.now, seq=env.seqno, src=env.src, dst=env.dst,
                tag=env.tag, kind=type(env.payload).__name__, why=why,
            )

    def set_timer(self, node: str, delay: int, fn: Callable, *args: Any) -> Timer:
        timer = Timer()
        self._push(self.now + max(0, delay), "timer", (node, self._incarnation[node], timer, fn, args))
        return timer

    def call_at(self, t: int, fn: Callable, *args: Any) -> None:
        """Schedule a harness-level callback (not bound to any node)."""
        self._push(max(t, self.now), "call", (fn, args))

    def record(self, rec: str, **kv: Any) -> None:
        if self.trace is not None:
            self.trace.add(rec, t=self.now, **kv)

    def is_up(self, node: str) -> bool:
        return node not in self.crashed

    # -- loop ----------------------------------------------------------------

    def pending(self) -> int:
        return len(self._heap)

    def run(self, limit: int | None = None, until: Callable[[], bool] | None = None) -> MessageStats:
        while self._heap:
            if until is not None and until():
                break
            t, seq, kind, data = self._heap[0]
            if limit is not None and t > limit:
                self.now = limit
                break
            heapq.heappop(self._heap)
            if t < self._last_handled:
                raise SimulationAborted("event ordering violated", self._prefix())
            self._last_handled = t
            self.now = t
            try:
                self._dispatch(kind, data)
            except SimulationAborted:
                raise
            except Exception as e:
                raise SimulationAborted(f"handler failed at t={t} seq={seq}: {e!r}", self._prefix()) from e
        return self.stats

    def _prefix(self) -> list[dict]:
        return list(self.trace.records) if self.trace is not None else []

    def _dispatch(self, kind: str, data: Any) -> None:
        if kind == "deliver":
            env: Envelope = data
            if env.dst in self.crashed:
                self._drop(env, "crashed")
                return
            if self._cut(env.src, env.dst):
                self._drop(env, "partition")
                return
            self.stats.by_class[env.tag] += 1
            self.stats.by_kind[type(env.payload).__name__] += 1
            if self.trace is not None:
                self.trace.add(
                    "msg", t=env.deliver_time, seq=env.seqno, src=env.src, dst=env.dst,
                    tag=env.tag, kind=type(env.payload).__name__, digest=digest(env.payload),
                )
            self.handlers[env.dst].on_message(env)
        elif kind == "timer":
            node, inc, timer, fn, args = data
            if timer.cancelled or node in self.crashed or inc != self._incarnation[node]:
                return
            fn(*args)
        elif kind == "call":
            fn, args = data
            fn(*args)
        elif kind == "crash":
            if data in self.crashed:
                return
            self.crashed.add(data)
            self._incarnation[data] += 1
            self.record("crash", node=data)
            h = self.handlers.get(data)
            if h is not None and hasattr(h, "on_crash"):
                h.on_crash()
        elif kind == "recover":
            if data not in self.crashed:
                return
            self.crashed.discard(data)
            self.record("recover", node=data)
            h = self.handlers.get(data)
            if h is not None and hasattr(h, "on_recover"):
                h.on_recover()


def load_config(path: str | Path) -> dict:
    """Config file: {"regions": {node: region}, "rtt_ms": {...}, "seed", "jitter", "faults"}."""
    d = json.loads(Path(path).read_text())
    if "rtt_ms" not in d:
        raise ConfigError("config needs an 'rtt_ms' latency matrix")
    return d


def recount(records: Iterable[Mapping[str, Any]], after_mark: str | None = None) -> MessageStats:
    """Rebuild message counters from trace records."""
    stats = MessageStats()
    counting = after_mark is None
    for r in records:
        if r["rec"] == "mark" and r.get("name") == after_mark:
            counting = True
        elif counting and r["rec"] == "msg":
            stats.by_class[r["tag"]] += 1
            stats.by_kind[r["kind"]] += 1
        elif counting and r["rec"] == "drop":
            stats.dropped += 1
    return stats
