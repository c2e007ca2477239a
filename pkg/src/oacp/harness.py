"""Workload generation, experiment runs and metrics.

A run builds a cluster in the simulator, waits until the first leader has
committed its start-up entries, writes a ``workload_start`` mark, and then
drives the clients until every operation completed. Protocol messages are
counted from the mark on, so leader election is not charged to the
workload. Fault-plan times are relative to the mark.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from . import crdt
from .baselines import BaselineServer, BatchClient
from .consistency import C, T, CheckResult, History, check_oac
from .datamodel import Op, get_model
from .protocol import OacpClient, OacpServer, ProtocolConfig, Recorder
from .simnet import (
    CLIENT,
    THREE_SITE_RTT_MS,
    HEARTBEAT,
    PROTOCOL,
    FaultPlan,
    LatencyMatrix,
    MessageStats,
    Partition,
    Simulator,
    Trace,
    read_trace,
    recount,
    uniform_matrix,
)

PROTOCOLS = ("oacp", "o2acp", "baseline", "batching")
SCENARIOS = ("shopping-cart", "counter", "twitter", "bank", "custom-mix", "bidding")
ITEMS = [f"item{i}" for i in range(20)]


@dataclass(frozen=True)
class WorkloadSpec:
    scenario: str = "counter"
    ops: int = 100
    cv_ratio: float = 0.5
    clients: int = 1
    seed: int = 0
    protocol: str = "oacp"
    nodes: int = 3
    auto_melt: bool = True
    optimized_melt: bool = True
    batch_size: int = 5000
    t_names: tuple | None = None
    #: ``None`` for a uniform 1 ms round trip, ``"three-site"`` for the built-in
    #: three-site matrix, or a dict ``{"regions": {...}, "rtt_ms": {...}}``
    latency: Any = None
    client_region: str | None = None
    leader: str | None = None
    faults: FaultPlan | None = None
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {', '.join(PROTOCOLS)}")
        if not 0.0 <= self.cv_ratio <= 1.0:
            raise ValueError("cv_ratio must lie in [0, 1]")
        if self.ops < 0 or self.clients < 1 or self.nodes < 1 or self.batch_size < 1:
            raise ValueError("ops must be >= 0; clients, nodes and batch_size must be >= 1")

    def describe(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("faults", "latency")}
        d["t_names"] = list(self.t_names) if self.t_names else None
        d["latency"] = self.latency if isinstance(self.latency, str) or self.latency is None else "custom"
        d["faults"] = self.faults.to_dict() if self.faults else None
        return d


# -- workloads -----------------------------------------------------------------

_CV_MIX = {
    "counter": [("incr", 1.0)],
    "shopping-cart": [("add", 0.75), ("remove", 0.25)],
    "twitter": [("add_follower", 1.0)],
    "bank": [("deposit", 0.8), ("accrueinterest", 0.2)],
    "custom-mix": [("add", 1.0)],
    "bidding": [("bid", 1.0)],
}
_T_MIX = {
    "counter": [("reset", 0.25), ("read", 0.75)],
    "shopping-cart": [("checkout", 1.0)],
    "twitter": [("tweet", 0.8), ("read", 0.2)],
    "bank": [("withdraw", 1.0)],
    "custom-mix": [("read", 1.0)],
    "bidding": [("winnercheck", 0.5), ("melt", 0.5)],
}


def _pick(rng: random.Random, mix: list[tuple[str, float]]) -> str:
    names, weights = zip(*mix)
    return rng.choices(names, weights)[0]


def _args(rng: random.Random, scenario: str, name: str, i: int) -> tuple:
    if name in ("add", "remove") and scenario == "shopping-cart":
        return (rng.choice(ITEMS),)
    if name == "add":
        return (f"e{i}",)
    if name == "add_follower":
        return (f"user{rng.randrange(50)}",)
    if name == "tweet":
        return (f"tweet{i}",)
    if name in ("deposit", "withdraw"):
        return (rng.randint(1, 100),)
    if name == "bid":
        return (f"bidder{rng.randrange(10)}", rng.randint(1, 1000))
    return ()


def generate_workload(spec: WorkloadSpec) -> list[Op]:
    """Deterministic operation stream, assigned round-robin to clients.

    Exactly ``round(ops * cv_ratio)`` operations are CvOps, at positions
    drawn from the seeded generator.
    """
    model = get_model(spec.scenario)
    rng = random.Random(f"workload:{spec.seed}")
    n_cv = round(spec.ops * spec.cv_ratio)
    cv_slots = set(rng.sample(range(spec.ops), n_cv))
    t_mix = [(n, 1.0) for n in spec.t_names] if spec.t_names else _T_MIX[spec.scenario]
    seqs = [0] * spec.clients
    out = []
    for i in range(spec.ops):
        name = _pick(rng, _CV_MIX[spec.scenario] if i in cv_slots else t_mix)
        c = i % spec.clients
        out.append(Op(f"c{c}", seqs[c], name, _args(rng, spec.scenario, name, i), model.kind_of(name)))
        seqs[c] += 1
    return out


def bank_story() -> list[Op]:
    """Alice deposits 20, Bob accrues interest, Alice withdraws 60, Bob
    deposits 10, Alice withdraws 70."""
    steps = [("alice", "deposit", (20,)), ("bob", "accrueinterest", ()), ("alice", "withdraw", (60,)),
             ("bob", "deposit", (10,)), ("alice", "withdraw", (70,))]
    model = get_model("bank")
    return [Op(who, i, name, args, model.kind_of(name)) for i, (who, name, args) in enumerate(steps)]


# -- metrics -------------------------------------------------------------------


def percentile(samples: list[int], q: float) -> float | None:
    """Nearest-rank percentile (``q`` in [0, 100])."""
    if not samples:
        return None
    s = sorted(samples)
    k = max(1, math.ceil(q / 100 * len(s)))
    return float(s[k - 1])


@dataclass
class MetricsReport:
    protocol_messages: int
    by_class: dict[str, int]
    by_kind: dict[str, int]
    latencies: dict[str, list[int]]
    completed: int
    failed: int
    duration_us: int
    meta: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        """Completed operations per simulated second."""
        return self.completed / (self.duration_us / 1e6) if self.duration_us else 0.0

    def summary(self) -> dict:
        row = {
            "protocol_messages": self.protocol_messages,
            "heartbeat_messages": self.by_class.get(HEARTBEAT, 0),
            "client_messages": self.by_class.get(CLIENT, 0),
            "completed": self.completed,
            "failed": self.failed,
            "duration_us": self.duration_us,
            "throughput": round(self.throughput, 6),
        }
        for kind in (C, T):
            for q in (50, 90, 100):
                row[f"{kind}_p{q}_us"] = percentile(self.latencies.get(kind, []), q)
        return row

    def to_dict(self) -> dict:
        return {**asdict(self), "summary": self.summary()}


def report_from_trace(records: list[dict], meta: dict | None = None) -> MetricsReport:
    """Rebuild the metrics of one run from its trace records."""
    stats = recount(records, after_mark="workload_start")
    start = next((r["t"] for r in records if r["rec"] == "mark" and r.get("name") == "workload_start"), 0)
    invoked: dict[str, tuple[str, int]] = {}
    latencies: dict[str, list[int]] = {C: [], T: []}
    completed = failed = 0
    end = start
    for r in records:
        if r["rec"] == "invoke":
            invoked.setdefault(r["op"], (r["kind"], r["t"]))
        elif r["rec"] == "complete":
            kind, t0 = invoked[r["op"]]
            latencies[kind].append(r["t"] - t0)
            completed += 1
            failed += 0 if r["ok"] else 1
            end = max(end, r["t"])
    return MetricsReport(
        protocol_messages=stats.by_class.get(PROTOCOL, 0),
        by_class=dict(sorted(stats.by_class.items())),
        by_kind=dict(sorted(stats.by_kind.items())),
        latencies=latencies,
        completed=completed,
        failed=failed,
        duration_us=end - start,
        meta=dict(meta or {}),
    )


# -- runs ----------------------------------------------------------------------


@dataclass
class ExperimentResult:
    spec: WorkloadSpec
    report: MetricsReport
    trace: Trace
    sim: Simulator
    servers: dict
    clients: dict

    def final_values(self) -> dict[str, Any]:
        """Query value of every live server's replica after the run."""
        model = get_model(self.spec.scenario)
        return {
            name: model.read(s.state, s.ctx)
            for name, s in self.servers.items()
            if self.sim.is_up(name)
        }

    def check(self) -> CheckResult:
        return check_oac(History.from_records(self.trace.records))


def _topology(spec: WorkloadSpec) -> tuple[dict[str, str], LatencyMatrix, str]:
    servers = [f"s{i}" for i in range(spec.nodes)]
    if spec.latency is None:
        regions = {s: "local" for s in servers}
        return regions, uniform_matrix(1.0), spec.client_region or "local"
    if spec.latency == "three-site":
        sites = ["ohio", "london", "sydney"]
        regions = {s: sites[i % 3] for i, s in enumerate(servers)}
        return regions, LatencyMatrix.from_rtt_ms(THREE_SITE_RTT_MS), spec.client_region or "london"
    cfg = spec.latency
    matrix = LatencyMatrix.from_rtt_ms(cfg["rtt_ms"])
    given = cfg.get("regions", {})
    sites = matrix.regions
    regions = {s: given.get(s, sites[i % len(sites)]) for i, s in enumerate(servers)}
    return regions, matrix, spec.client_region or cfg.get("client_region", regions[servers[0]])


def _shift(plan: FaultPlan, t0: int) -> FaultPlan:
    return FaultPlan(
        crashes=[(n, t + t0) for n, t in plan.crashes],
        recoveries=[(n, t + t0) for n, t in plan.recoveries],
        partitions=[Partition(p.side, p.start + t0, p.end + t0) for p in plan.partitions],
    )


def run_experiment(spec: WorkloadSpec, trace_path: str | Path | None = None, max_time_s: float = 36_000.0) -> ExperimentResult:
    model = get_model(spec.scenario)
    ops = generate_workload(spec)
    return run_ops(spec, ops, trace_path=trace_path, max_time_s=max_time_s, model=model)


class Cluster:
    """Servers of one protocol in a fresh simulator, past leader start-up.

    After construction the trace holds the ``workload_start`` mark and
    clients can be attached with :meth:`add_client`.
    """

    def __init__(self, spec: WorkloadSpec, model=None, max_time_s: float = 36_000.0):
        self.spec = spec
        self.model = model or get_model(spec.scenario)
        regions, self.matrix, self.client_region = _topology(spec)
        self.names = list(regions)
        self.trace = Trace()
        self.sim = Simulator(regions, self.matrix, seed=spec.seed, jitter=spec.jitter, trace=self.trace)
        self.recorder = Recorder(self.sim)
        self.leader = spec.leader or self.names[0]
        if self.leader not in self.names:
            raise ValueError(f"preferred leader {self.leader!r} is not a server")
        self.horizon = int(max_time_s * 1e6)
        self.one_way = self.matrix.max_one_way
        self.client_timeout = 200 * self.one_way
        self.servers: dict[str, Any] = {}
        self.clients: dict[str, Any] = {}
        for s in self.names:
            if spec.protocol in ("oacp", "o2acp"):
                cfg = ProtocolConfig(auto_melt=spec.auto_melt, o2acp=spec.protocol == "o2acp",
                                     optimized_melt=spec.optimized_melt)
                self.servers[s] = OacpServer(self.sim, s, self.names, self.model, cfg, self.recorder, seed=spec.seed)
            else:
                self.servers[s] = BaselineServer(self.sim, s, self.names, self.model, self.recorder, seed=spec.seed)
            self.sim.register(s, self.servers[s])
        for s in self.names:
            self.servers[s].start(s == self.leader)
        self.sim.run(limit=self.horizon, until=self._settled)
        # stragglers of the start-up entries (late acks) are not workload
        self.sim.run(limit=self.sim.now + 4 * self.one_way)
        self.sim.record("mark", name="workload_start")
        self.t0 = self.sim.now
        if spec.faults is not None:
            self.sim.inject(_shift(spec.faults, self.t0))

    def _settled(self) -> bool:
        h = self.servers[self.leader]
        if h.raft.role != "leader" or h.raft.commit_index < 1:
            return False
        return not isinstance(h, OacpServer) or (h.ready and h.busy is None and not h.frozen)

    def add_client(self, name: str, ops: list[Op], targets: list[str] | None = None) -> OacpClient:
        c = OacpClient(self.sim, name, targets or self.names, ops, self.leader, self.client_timeout,
                       seed=self.spec.seed, all_to_leader=self.spec.protocol == "baseline")
        self.sim.register(name, c, self.client_region)
        self.clients[name] = c
        return c

    def add_batcher(self, ops: list[Op]) -> BatchClient:
        b = BatchClient(self.sim, self.names, ops, self.spec.batch_size, self.leader, self.client_timeout,
                        seed=self.spec.seed)
        self.sim.register(b.name, b, self.client_region)
        self.clients[b.name] = b
        return b

    def run_clients(self, start: bool = True) -> None:
        """Start every client and run until all finished, then settle."""
        if start:
            for c in sorted(self.clients):
                self.clients[c].start()
        self.sim.run(limit=self.sim.now + self.horizon,
                     until=lambda: all(c.finished for c in self.clients.values()))
        # let trailing commit notices, melts and gossip land
        self.sim.run(limit=self.sim.now + 20 * self.one_way)

    def result(self, trace_path: str | Path | None = None) -> "ExperimentResult":
        report = _live_report(self.sim, self.clients, self.t0, self.spec.describe(), self.trace)
        if trace_path is not None:
            self.trace.write(trace_path)
        return ExperimentResult(self.spec, report, self.trace, self.sim, self.servers, self.clients)


def run_ops(spec: WorkloadSpec, ops: list[Op], trace_path: str | Path | None = None,
            max_time_s: float = 36_000.0, model=None) -> ExperimentResult:
    """Run an explicit operation list under ``spec``'s cluster and protocol."""
    cluster = Cluster(spec, model, max_time_s)
    if spec.protocol == "batching":
        cluster.add_batcher(ops)
    else:
        by_client: dict[str, list[Op]] = {}
        for op in ops:
            by_client.setdefault(op.client, []).append(op)
        for c in sorted(by_client):
            cluster.add_client(c, by_client[c])
    cluster.run_clients()
    return cluster.result(trace_path)


def _live_report(sim: Simulator, clients: dict, t0: int, meta: dict, trace: Trace) -> MetricsReport:
    """Metrics as observed during the run (the trace is only used for the
    mark position of message counters)."""
    mark = next(i for i, r in enumerate(trace.records) if r["rec"] == "mark")
    before = recount(trace.records[:mark])
    by_class = {k: v - before.by_class.get(k, 0) for k, v in sim.stats.by_class.items()}
    by_kind = {k: v - before.by_kind.get(k, 0) for k, v in sim.stats.by_kind.items()}
    latencies: dict[str, list[int]] = {C: [], T: []}
    completed = failed = 0
    end = t0
    for c in clients.values():
        for kind, lat in c.samples:
            latencies[kind].append(lat)
    for r in trace.records[mark:]:
        if r["rec"] == "complete":
            completed += 1
            failed += 0 if r["ok"] else 1
            end = max(end, r["t"])
    for k in latencies:
        latencies[k].sort()
    return MetricsReport(
        protocol_messages=by_class.get(PROTOCOL, 0),
        by_class=dict(sorted((k, v) for k, v in by_class.items() if v)),
        by_kind=dict(sorted((k, v) for k, v in by_kind.items() if v)),
        latencies=latencies,
        completed=completed,
        failed=failed,
        duration_us=end - t0,
        meta=meta,
    )


# -- output --------------------------------------------------------------------


def report_row(report: MetricsReport) -> dict:
    meta = {k: v for k, v in report.meta.items() if k not in ("faults", "t_names")}
    meta["faults"] = json.dumps(report.meta.get("faults"), sort_keys=True)
    return {**meta, **report.summary()}


def write_csv(reports: list[MetricsReport], path: str | Path) -> None:
    rows = [report_row(r) for r in reports]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))


def emit_report(report: MetricsReport, path: str | Path, fmt: str = "csv") -> None:
    if fmt == "csv":
        write_csv([report], path)
    elif fmt == "json":
        write_json(report, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def check_trace(path: str | Path) -> CheckResult:
    """OAC verdict for a trace file; raises TraceParseError on bad input."""
    return check_oac(History.from_records(read_trace(path)))
