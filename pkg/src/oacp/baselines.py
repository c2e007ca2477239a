"""Comparison protocols that send every operation through the log.

``BaselineServer`` commits each operation, CvOp or TOp, as its own log
entry. ``BatchClient`` buffers operations and submits each full buffer as a
single entry; the servers are the same. Both give a total order over all
operations, which is stronger than observable atomic consistency.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any

from . import crdt
from .consistency import C, T
from .datamodel import DataModel, Op
from .protocol import CvRequest, Forward, Recorder, Reply, TRequest
from .rtob import LEADER, LogEntry, Noop, RaftNode, RaftTiming
from .simnet import CLIENT, PROTOCOL, Simulator, Timer, wire


@dataclass(frozen=True)
class BaseCommand:
    ops: tuple
    batch: str = ""


@dataclass(frozen=True)
class BatchRequest:
    batch: str
    ops: tuple


@dataclass(frozen=True)
class BatchReply:
    batch: str
    results: tuple
    leader: str | None = None


class BaselineServer:
    def __init__(self, sim: Simulator, me: str, servers: list[str], model: DataModel, recorder: Recorder, seed: int = 0):
        self.sim = sim
        self.me = me
        self.model = model
        self.recorder = recorder
        self.raft = RaftNode(sim, me, servers, RaftTiming.for_latency(sim.latency.max_one_way), self._on_commit, seed=seed)
        self.state = model.bottom()
        self.ctx = model.initial_context()
        self.results: dict[str, tuple] = {}
        self.inflight: set[str] = set()

    def start(self, preferred: bool) -> None:
        self.raft.start(1 if preferred else None)

    def on_crash(self) -> None:
        self.raft.on_crash()

    def on_recover(self) -> None:
        self.raft.on_recover()

    def on_message(self, env) -> None:
        if self.raft.handle(env):
            return
        m = env.payload
        if isinstance(m, (CvRequest, TRequest)):
            self._request(BaseCommand((m.op,)), m.op.id, m)
        elif isinstance(m, BatchRequest):
            self._request(BaseCommand(m.ops, m.batch), m.batch, m)
        elif isinstance(m, Forward):
            inner = m.op
            if isinstance(inner, BatchRequest):
                self._request(BaseCommand(inner.ops, inner.batch), inner.batch, inner)
            else:
                self._request(BaseCommand((inner,)), inner.id, TRequest(inner))
        else:
            raise TypeError(f"unexpected payload {type(m).__name__}")

    def _request(self, cmd: BaseCommand, rid: str, original: Any) -> None:
        if rid in self.results:
            self._reply(cmd, rid)
            return
        if self.raft.role != LEADER:
            if self.raft.leader_id is not None:
                inner = original if isinstance(original, BatchRequest) else original.op
                self.sim.send(self.me, self.raft.leader_id, Forward(inner), PROTOCOL)
            return
        if rid in self.inflight:
            return
        self.inflight.add(rid)
        origin = cmd.ops[0].client if cmd.ops else ""
        self.raft.submit(LogEntry(origin, 0, None, cmd, frozenset(), rid))

    def _reply(self, cmd: BaseCommand, rid: str) -> None:
        leader = self.raft.leader_id
        if cmd.batch:
            self.sim.send(self.me, BatchClient.name, BatchReply(cmd.batch, self.results[rid], leader), CLIENT)
            return
        op = cmd.ops[0]
        ok, value = self.results[rid]
        self.sim.send(self.me, op.client, Reply(op.id, ok, wire(value), leader), CLIENT)

    def _on_commit(self, index: int, entry: LogEntry) -> None:
        cmd = entry.op
        if isinstance(cmd, Noop):
            return
        rid = entry.request_id
        if rid in self.results:
            return
        values = []
        for op in cmd.ops:
            if op.kind == C:
                self.state = crdt.merge(self.state, self.model.cv_delta(op, self.state))
                value: Any = None
            else:
                self.state, value, self.ctx = self.model.apply_t(op, self.state, self.ctx)
            values.append((op.id, True, wire(value)))
            self.sim.record("apply", server=self.me, op=op.id, kind=T)
        for op in cmd.ops:
            self.recorder.commit_op(index, op.id)
        if cmd.batch:
            self.results[rid] = tuple(values)
        else:
            self.results[rid] = (True, values[0][2])
        self.inflight.discard(rid)
        if self.raft.role == LEADER:
            self._reply(cmd, rid)

    def snapshot(self) -> dict:
        return {"server": self.me, "state": crdt.to_json(self.state)}


class BatchClient:
    """Shared client-side buffer feeding the log one batch per entry.

    Operations enter the buffer without waiting for earlier replies; a batch
    is sent when the buffer holds ``capacity`` operations or the workload is
    exhausted. Node name is ``batcher``.
    """

    name = "batcher"

    def __init__(self, sim: Simulator, servers: list[str], ops: list[Op], capacity: int,
                 leader_hint: str, timeout: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("batch size must be at least 1")
        self.sim = sim
        self.servers = list(servers)
        self.ops = list(ops)
        self.capacity = capacity
        self.leader_hint = leader_hint
        self.timeout = timeout
        self.rng = random.Random(f"batcher:{seed}")
        self.outstanding: dict[str, tuple[BatchRequest, int]] = {}
        self.sent: dict[str, int] = {}
        self.samples: list[tuple[str, int]] = []
        self.done = 0
        self.me = self.name

    @property
    def finished(self) -> bool:
        return self.done == len(self.ops)

    def start(self) -> None:
        buf: list[Op] = []
        for op in self.ops:
            self.sim.record("invoke", client=op.client, op=op.id, kind=op.kind, name=op.name, args=wire(op.args))
            buf.append(op)
            if len(buf) == self.capacity:
                self._flush(buf)
                buf = []
        if buf:
            self._flush(buf)

    def _flush(self, buf: list[Op]) -> None:
        req = BatchRequest(f"b{len(self.sent)}:{buf[0].id}", tuple(buf))
        self.outstanding[req.batch] = (req, 0)
        self.sent[req.batch] = self.sim.now
        self._send(req, 0)

    def _send(self, req: BatchRequest, attempt: int) -> None:
        dst = self.leader_hint if attempt == 0 else self.rng.choice(self.servers)
        self.sim.send(self.me, dst, req, CLIENT)
        self.sim.set_timer(self.me, self.timeout, self._expired, req.batch, attempt)

    def _expired(self, batch: str, attempt: int) -> None:
        if batch in self.outstanding and self.outstanding[batch][1] == attempt:
            req = self.outstanding[batch][0]
            self.outstanding[batch] = (req, attempt + 1)
            self._send(req, attempt + 1)

    def on_message(self, env) -> None:
        m = env.payload
        if not isinstance(m, BatchReply) or m.batch not in self.outstanding:
            return
        req, _ = self.outstanding.pop(m.batch)
        if m.leader is not None:
            self.leader_hint = m.leader
        for (op_id, ok, value), op in zip(m.results, req.ops):
            self.sim.record("complete", client=op.client, op=op_id, ok=ok, value=value)
            self.samples.append((op.kind, self.sim.now - self.sent[m.batch]))
        self.done += len(req.ops)
