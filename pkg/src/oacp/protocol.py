"""OACP servers and clients.

A server holds one CvRDT replica. CvOps are merged locally, acknowledged and
gossiped as whole states. A TOp reaches the leader, which freezes the
cluster, gathers and merges every live replica's state, and commits the
merged snapshot together with the operation through the replicated log.
Every replica adopts the snapshot (after applying the TOp) when the entry
commits and then melts, replaying or discarding what it stashed while
frozen.

Bookkeeping that keeps histories checkable under faults:

* every state carries the ids of the CvOps folded into it, so a commit can
  report which operations its snapshot covers and replicas can deduplicate
  retried CvOps;
* gossip is stamped with the sender's epoch (number of committed
  synchronising entries); gossip from an older epoch is already covered by
  a snapshot and is dropped, gossip from a newer epoch waits;
* with O2ACP a clean follower holds an incoming CvOp and asks the leader
  (``Dirty``) before applying it, so the leader never skips a gather while
  some replica holds an acknowledged CvOp the last snapshot lacks.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from . import crdt
from .consistency import C, T
from .datamodel import DataModel, Op
from .rtob import LEADER, LogEntry, Noop, RaftNode, RaftTiming
from .simnet import CLIENT, PROTOCOL, Simulator, Timer, wire


@dataclass(frozen=True)
class ProtocolConfig:
    auto_melt: bool = True
    o2acp: bool = False
    optimized_melt: bool = True
    gather_timeout: int | None = None  # microseconds; default 10x max one-way
    client_timeout: int | None = None  # microseconds; default 200x max one-way


# -- messages ------------------------------------------------------------------


@dataclass(frozen=True)
class CvRequest:
    op: Op
    #: newest epoch the client has seen in a reply; a server behind it waits
    epoch: int = 0


@dataclass(frozen=True)
class TRequest:
    op: Op


@dataclass(frozen=True)
class Reply:
    op_id: str
    ok: bool
    value: Any = None
    leader: str | None = None
    epoch: int = 0


@dataclass(frozen=True)
class Forward:
    op: Op


@dataclass(frozen=True)
class StateBroadcast:
    state: Any
    ids: frozenset
    epoch: int


@dataclass(frozen=True)
class GetState:
    gather: int
    epoch: int


@dataclass(frozen=True)
class StateIs:
    gather: int
    state: Any
    ids: frozenset


@dataclass(frozen=True)
class Melt:
    epoch: int


@dataclass(frozen=True)
class MeltAck:
    epoch: int


@dataclass(frozen=True)
class Dirty:
    epoch: int


@dataclass(frozen=True)
class Go:
    epoch: int


@dataclass(frozen=True)
class TCommand:
    """Payload of a log entry.

    ``mode`` is ``top`` (gathered client TOp), ``skip`` (O2ACP, no gather),
    ``sync`` (gather issued by a new leader), or ``recovery`` (gather timed
    out; ``op`` is the TOp that failed, if any).
    """

    mode: str
    op: Op | None = None


GATHERED = ("top", "sync")


class Recorder:
    """Run-wide instrumentation: emits each commit once, in log order."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.committed = 0
        self._ops: set[str] = set()

    def commit(self, index: int, op_id: str, snapshot: frozenset, recovery: bool) -> None:
        if index > self.committed:
            self.committed = index
            self.sim.record("commit", op=op_id, index=index, snapshot=sorted(snapshot), recovery=recovery)

    def commit_op(self, index: int, op_id: str) -> None:
        """Total-order protocols: several operations may share one entry."""
        if index >= self.committed and op_id not in self._ops:
            self.committed = index
            self._ops.add(op_id)
            self.sim.record("commit", op=op_id, index=index, snapshot=[], recovery=False)


def entry_op_id(index: int, cmd: TCommand) -> str:
    if cmd.mode in ("top", "skip"):
        return cmd.op.id
    return f"{cmd.mode}@{index}"


class OacpServer:
    def __init__(
        self,
        sim: Simulator,
        me: str,
        servers: list[str],
        model: DataModel,
        config: ProtocolConfig,
        recorder: Recorder,
        seed: int = 0,
    ):
        self.sim = sim
        self.me = me
        self.peers = [s for s in servers if s != me]
        self.model = model
        self.config = config
        self.recorder = recorder
        one_way = sim.latency.max_one_way
        self.gather_timeout = config.gather_timeout or 10 * one_way
        self.raft = RaftNode(sim, me, servers, RaftTiming.for_latency(one_way), self._on_commit, self._on_role, seed)

        self.state = model.bottom()
        self.ids: frozenset = frozenset()
        self.ctx = model.initial_context()
        self.committed_state = self.state
        self.committed_ids: frozenset = frozenset()
        self.epoch = 0
        self.results: dict[str, tuple[bool, Any]] = {}
        #: highest sequence number per client seen in a committed entry
        self.floor: dict[str, int] = {}

        self.frozen = False
        self.freeze_until = 0
        self.melt_epoch = 0
        self.locked = False
        self.stash: list[tuple[str, Any, str]] = []
        self.future: list[StateBroadcast] = []
        self.behind: list[tuple[GetState, str]] = []
        self.lagging: list[tuple[CvRequest, str]] = []
        self.held: list[tuple[Op, str]] = []
        self.go_epoch = -1
        self.dirty_sent = -1

        # leader-only
        self.ready = False
        self.noop_index = 0
        self.busy: str | None = None
        self.t_queue: deque[tuple[Op, str]] = deque()
        self.pending: dict | None = None
        self.gather_id = 0
        self.cluster_dirty = True
        self.deferred_go: list[str] = []
        self.suspected: dict[str, int] = {}
        self.melt_waiting: set[str] = set()
        self._timer: Timer | None = None

    # -- plumbing ----------------------------------------------------------

    def start(self, preferred: bool) -> None:
        self.raft.start(1 if preferred else None)

    def on_crash(self) -> None:
        self.raft.on_crash()
        self._timer = None
        # buffered requests live in memory only; their clients retry
        self.stash, self.held, self.future, self.behind, self.lagging = [], [], [], [], []

    def on_recover(self) -> None:
        self.raft.on_recover()

    def _send(self, dst: str, msg: Any, tag: str = PROTOCOL) -> None:
        self.sim.send(self.me, dst, msg, tag)

    def _reply(self, client: str, op_id: str, ok: bool, value: Any = None) -> None:
        self._send(client, Reply(op_id, ok, value, self.raft.leader_id, self.epoch), CLIENT)

    def _record_apply(self, op_id: str, kind: str) -> None:
        self.sim.record("apply", server=self.me, op=op_id, kind=kind)

    @property
    def is_leader(self) -> bool:
        return self.raft.role == LEADER

    @property
    def dirty(self) -> bool:
        return self.go_epoch == self.epoch

    def on_message(self, env) -> None:
        if self.raft.handle(env):
            return
        m, src = env.payload, env.src
        if isinstance(m, CvRequest):
            if m.epoch > self.epoch and m.op.id not in self.ids:
                # the client already saw commits this server has not applied;
                # accepting now could let catching up roll the update back
                self.lagging.append((m, src))
            else:
                self._cv_request(m.op, src)
        elif isinstance(m, TRequest):
            self._t_request(m.op, src)
        elif isinstance(m, Forward):
            self._t_request(m.op, m.op.client)
        elif isinstance(m, StateBroadcast):
            self._gossip(m, src)
        elif isinstance(m, GetState):
            self._get_state(m, src)
        elif isinstance(m, StateIs):
            self._state_is(m, src)
        elif isinstance(m, Melt):
            self.melt_epoch = max(self.melt_epoch, m.epoch)
            self._send(src, MeltAck(m.epoch))
            self._maybe_melt()
        elif isinstance(m, MeltAck):
            self._melt_ack(src)
        elif isinstance(m, Dirty):
            self._dirty(src)
        elif isinstance(m, Go):
            self.go_epoch = max(self.go_epoch, m.epoch)
            self._release_held()
        else:
            raise TypeError(f"unexpected payload {type(m).__name__}")

    # -- CvOps -------------------------------------------------------------

    def _cv_request(self, op: Op, client: str) -> None:
        if op.id in self.ids or op.seq <= self.floor.get(op.client, -1):
            # past the floor, a committed entry already covers this client
            # beyond ``op``, so ``op`` is in the state or was rolled back and
            # applying it again would revive it
            self._reply(client, op.id, True)
            return
        if self.locked:
            self._reply(client, op.id, False, "locked")
            return
        if self.frozen:
            self.stash.append(("cv", op, client))
            return
        if self.config.o2acp and not self.is_leader and not self.dirty:
            self.held.append((op, client))
            self._ask_go()
            return
        self._apply_cv(op, client)

    def _apply_cv(self, op: Op, client: str) -> None:
        delta = self.model.cv_delta(op, self.state)
        self.state = crdt.merge(self.state, delta)
        self.ids = self.ids | {op.id}
        self._record_apply(op.id, C)
        if self.is_leader:
            self.cluster_dirty = True
        msg = StateBroadcast(self.state, self.ids, self.epoch)
        for p in self.peers:
            self._send(p, msg)
        self._reply(client, op.id, True)

    def _ask_go(self) -> None:
        leader = self.raft.leader_id
        if leader is None or leader == self.me or self.dirty_sent == self.epoch:
            return
        self.dirty_sent = self.epoch
        self._send(leader, Dirty(self.epoch))

    def _release_held(self) -> None:
        if not self.held or self.frozen or self.locked:
            return
        if not self.dirty and not self.is_leader:
            self._ask_go()
            return
        held, self.held = self.held, []
        for op, client in held:
            self._cv_request(op, client)

    def _gossip(self, m: StateBroadcast, src: str) -> None:
        if self.frozen or self.locked:
            self.stash.append(("gossip", m, src))
            return
        if m.epoch < self.epoch:
            return
        if m.epoch > self.epoch:
            self.future.append(m)
            return
        new = m.ids - self.ids
        if not new and crdt.compare(m.state, self.state):
            return
        self.state = crdt.merge(self.state, m.state)
        self.ids = self.ids | m.ids
        for op_id in sorted(new):
            self._record_apply(op_id, C)
        if self.is_leader and new:
            self.cluster_dirty = True

    # -- TOps at any server ------------------------------------------------

    def _t_request(self, op: Op, client: str) -> None:
        if op.id in self.results:
            ok, value = self.results[op.id]
            self._reply(client, op.id, ok, value)
            return
        if not self.is_leader:
            if self.raft.leader_id is not None:
                self._send(self.raft.leader_id, Forward(op))
            return
        if (self.pending and self.pending["op"] is not None and self.pending["op"].id == op.id) or any(
            q.id == op.id for q, _ in self.t_queue
        ):
            return
        self.t_queue.append((op, client))
        self._next()

    def _get_state(self, m: GetState, src: str) -> None:
        if m.epoch >= self.epoch:
            self.frozen = True
            self.freeze_until = max(self.freeze_until, m.epoch + 1)
        if m.epoch > self.epoch:
            # answer once the log has caught up, or a state that later commits
            # rolled back would be offered to the leader
            self.behind.append((m, src))
            return
        self._send(src, StateIs(m.gather, self.state, self.ids))

    def _answer_behind(self) -> None:
        waiting, self.behind = self.behind, []
        for m, src in waiting:
            if m.epoch > self.epoch:
                self.behind.append((m, src))
            else:
                self._send(src, StateIs(m.gather, self.state, self.ids))

    # -- leader ------------------------------------------------------------

    def _on_role(self, role: str) -> None:
        if role == LEADER:
            self.ready = False
            self.noop_index = self.raft.last_index + 1
            self.cluster_dirty = True
            self.suspected = {}
            self.busy = None
            self.pending = None
        else:
            self.ready = False
            self.busy = None
            self.pending = None
            self.t_queue.clear()
            self.melt_waiting = set()
            self.deferred_go = []
            if self._timer is not None:
                self._timer.cancel()
            self.dirty_sent = -1
            self._release_held()

    def _live_peers(self) -> list[str]:
        out = []
        for p in self.peers:
            since = self.suspected.get(p)
            if since is not None and self.raft.last_ack.get(p, -1) <= since:
                continue
            self.suspected.pop(p, None)
            out.append(p)
        return out

    def _next(self) -> None:
        if not self.is_leader or not self.ready or self.busy is not None:
            return
        while self.t_queue:
            op, client = self.t_queue.popleft()
            if op.id in self.results:
                ok, value = self.results[op.id]
                self._reply(client, op.id, ok, value)
                continue
            if self.config.o2acp and not self.cluster_dirty and not self.locked:
                self._freeze_self()
                self.pending = {"op": op, "client": client, "mode": "skip", "peers": []}
                self._submit(TCommand("skip", op), self.state, self.ids, op.id)
            else:
                self._start_gather(TCommand("top", op), client)
            return

    def _freeze_self(self) -> None:
        self.frozen = True
        self.freeze_until = max(self.freeze_until, self.epoch + 1)

    def _start_gather(self, cmd: TCommand, client: str | None) -> None:
        self._freeze_self()
        self.gather_id += 1
        peers = self._live_peers()
        self.busy = "gather"
        self.pending = {
            "op": cmd.op, "client": client, "mode": cmd.mode, "peers": peers,
            "waiting": set(peers), "state": self.state, "ids": self.ids, "cmd": cmd,
        }
        for p in peers:
            self._send(p, GetState(self.gather_id, self.epoch))
        if not peers:
            self._finish_gather()
        else:
            self._arm(self._gather_expired, self.gather_id)

    def _arm(self, fn, *args) -> None:
        if self._timer is not None:
            self._timer.cancel()
        self._timer = self.sim.set_timer(self.me, self.gather_timeout, fn, *args)

    def _state_is(self, m: StateIs, src: str) -> None:
        g = self.pending
        if self.busy != "gather" or m.gather != self.gather_id or src not in g["waiting"]:
            return
        g["waiting"].discard(src)
        g["state"] = crdt.merge(g["state"], m.state)
        g["ids"] = g["ids"] | m.ids
        if not g["waiting"]:
            self._finish_gather()

    def _finish_gather(self) -> None:
        g = self.pending
        if self._timer is not None:
            self._timer.cancel()
        rid = g["op"].id if g["op"] is not None else f"sync:{self.me}:{self.gather_id}"
        self._submit(g["cmd"], g["state"], g["ids"], rid)

    def _submit(self, cmd: TCommand, state, ids, rid: str) -> None:
        self.busy = "submitted"
        self.pending["rid"] = rid
        origin = self.pending["client"] or ""
        if self.raft.submit(LogEntry(origin, 0, state, cmd, ids, rid)) is None:
            self._on_role(self.raft.role)

    def _gather_expired(self, gid: int) -> None:
        if self.busy != "gather" or gid != self.gather_id:
            return
        g = self.pending
        for p in g["waiting"]:
            self.suspected[p] = self.sim.now
        self.sim.record("gather_timeout", server=self.me, missing=sorted(g["waiting"]))
        cmd = TCommand("recovery", g["op"])
        rid = f"recovery:{self.me}:{self.gather_id}"
        self._submit(cmd, self.committed_state, self.committed_ids, rid)

    def _melt_ack(self, src: str) -> None:
        if self.busy != "melt-wait":
            return
        self.melt_waiting.discard(src)
        if not self.melt_waiting:
            self._idle()

    def _melt_wait_expired(self) -> None:
        if self.busy == "melt-wait":
            for p in self.melt_waiting:
                self.suspected[p] = self.sim.now
            self._idle()

    def _idle(self) -> None:
        self.busy = None
        self.pending = None
        if self._timer is not None:
            self._timer.cancel()
        self._next()

    def _dirty(self, src: str) -> None:
        if not self.is_leader:
            return
        if self.pending is not None and self.pending["mode"] == "skip":
            self.deferred_go.append(src)
            return
        self.cluster_dirty = True
        self._send(src, Go(self.epoch))

    # -- commit ------------------------------------------------------------

    def _on_commit(self, index: int, entry: LogEntry) -> None:
        cmd = entry.op
        if isinstance(cmd, Noop):
            if self.is_leader and index == self.noop_index:
                self.ready = True
                self._start_gather(TCommand("sync"), None)
            return
        self.epoch += 1
        mine = self.busy == "submitted" and entry.request_id == self.pending.get("rid")
        duplicate = cmd.mode in ("top", "skip") and cmd.op.id in self.results
        if not duplicate:
            self._adopt(index, entry, cmd)
        if self.config.auto_melt is False and cmd.mode == "top" and not duplicate:
            self.locked = cmd.op.name != "melt"
        if self.is_leader and mine:
            self._leader_committed(cmd)
        self._answer_behind()
        lagging, self.lagging = self.lagging, []
        for req, client in lagging:
            if req.epoch > self.epoch:
                self.lagging.append((req, client))
            else:
                self._cv_request(req.op, client)
        self._maybe_melt()
        self._drain_future()
        self._release_held()

    def _adopt(self, index: int, entry: LogEntry, cmd: TCommand) -> None:
        snap_ids = entry.ids
        op_id = entry_op_id(index, cmd)
        for lost in sorted(self.ids - snap_ids):
            self.sim.record("abort", server=self.me, op=lost, by=op_id)
        for learned in sorted(snap_ids - self.ids):
            self._record_apply(learned, C)
        for x in (snap_ids - self.committed_ids) | ({cmd.op.id} if cmd.op is not None else set()):
            client, _, seq = x.rpartition(":")
            if client and seq.isdigit() and int(seq) > self.floor.get(client, -1):
                self.floor[client] = int(seq)
        state = entry.c_state
        if cmd.mode in ("top", "skip"):
            state, value, self.ctx = self.model.apply_t(cmd.op, state, self.ctx)
            self.results[cmd.op.id] = (True, value)
        elif cmd.mode == "recovery" and cmd.op is not None:
            self.results.setdefault(cmd.op.id, (False, "recovery"))
        self.state, self.ids = state, snap_ids
        self.committed_state, self.committed_ids = state, snap_ids
        self._record_apply(op_id, T)
        self.recorder.commit(index, op_id, snap_ids, cmd.mode == "recovery")

    def _leader_committed(self, cmd: TCommand) -> None:
        p = self.pending
        if p["client"] is not None and p["op"] is not None:
            ok, value = self.results.get(p["op"].id, (False, "recovery"))
            if cmd.mode == "recovery":
                ok, value = False, "recovery"
            self._reply(p["client"], p["op"].id, ok, wire(value))
        self.cluster_dirty = False
        for src in self.deferred_go:
            self.cluster_dirty = True
            self._send(src, Go(self.epoch))
        self.deferred_go = []
        # the leader itself always melts on its own commit
        self.melt_epoch = max(self.melt_epoch, self.epoch)
        peers = p.get("peers", [])
        if not self.config.optimized_melt and cmd.mode != "skip" and peers:
            self.busy = "melt-wait"
            self.melt_waiting = set(peers)
            for q in peers:
                self._send(q, Melt(self.epoch))
            self._arm(self._melt_wait_expired)
        else:
            self.busy = None
            self.pending = None

    def _maybe_melt(self) -> None:
        if not self.frozen or self.epoch < self.freeze_until:
            return
        if not self.config.optimized_melt and self.melt_epoch < self.freeze_until:
            return
        self.frozen = False
        stash, self.stash = self.stash, []
        for kind, item, src in stash:
            if kind == "cv":
                if self.locked:
                    self._reply(src, item.id, False, "discarded")
                else:
                    self._cv_request(item, src)
            else:
                self._gossip(item, src)
        self._drain_future()
        self._release_held()
        if self.busy is None:
            self._next()

    def _drain_future(self) -> None:
        if not self.future or self.frozen:
            return
        future, self.future = self.future, []
        for m in future:
            self._gossip(m, "")

    # -- inspection --------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "server": self.me,
            "frozen": self.frozen,
            "locked": self.locked,
            "epoch": self.epoch,
            "state": crdt.to_json(self.state),
            "ids": sorted(self.ids),
        }


class OacpClient:
    """Issues its operations one at a time, waiting for each reply.

    CvOps go to a uniformly random server, TOps to the last known leader
    (``all_to_leader`` sends everything to the leader, for the baseline).
    A request that times out is resent (to another random server), which is
    safe because servers deduplicate by operation id.
    """

    def __init__(
        self,
        sim: Simulator,
        me: str,
        servers: list[str],
        ops: list[Op],
        leader_hint: str,
        timeout: int,
        seed: int = 0,
        all_to_leader: bool = False,
    ):
        self.sim = sim
        self.me = me
        self.all_to_leader = all_to_leader
        self.servers = list(servers)
        self.queue = deque(ops)
        self.leader_hint = leader_hint
        self.timeout = timeout
        self.rng = random.Random(f"client:{seed}:{me}")
        self.current: Op | None = None
        self.attempt = 0
        self.done: list[tuple[Op, bool, Any]] = []
        self.samples: list[tuple[str, int]] = []
        self._invoked_at = 0
        self._timer: Timer | None = None
        self.epoch = 0

    @property
    def finished(self) -> bool:
        return self.current is None and not self.queue

    def start(self) -> None:
        self._issue()

    def _issue(self) -> None:
        if self.current is not None or not self.queue:
            return
        op = self.queue.popleft()
        self.current = op
        self.attempt = 0
        self._invoked_at = self.sim.now
        self.sim.record("invoke", client=self.me, op=op.id, kind=op.kind, name=op.name, args=wire(op.args))
        self._send_current()

    def _send_current(self) -> None:
        op = self.current
        if op.kind == C and not self.all_to_leader:
            dst = self.rng.choice(self.servers)
            msg: Any = CvRequest(op, self.epoch)
        else:
            dst = self.leader_hint if self.attempt == 0 else self.rng.choice(self.servers)
            msg = TRequest(op) if op.kind == T else CvRequest(op, self.epoch)
        self.sim.send(self.me, dst, msg, CLIENT)
        self._timer = self.sim.set_timer(self.me, self.timeout, self._expired, op.id, self.attempt)

    def _expired(self, op_id: str, attempt: int) -> None:
        if self.current is None or self.current.id != op_id or attempt != self.attempt:
            return
        self.attempt += 1
        self._send_current()

    def on_message(self, env) -> None:
        m = env.payload
        if not isinstance(m, Reply) or self.current is None or m.op_id != self.current.id:
            return
        if m.leader is not None:
            self.leader_hint = m.leader
        self.epoch = max(self.epoch, m.epoch)
        if self._timer is not None:
            self._timer.cancel()
        op, self.current = self.current, None
        self.done.append((op, m.ok, m.value))
        self.samples.append((op.kind, self.sim.now - self._invoked_at))
        self.sim.record("complete", client=self.me, op=op.id, ok=m.ok, value=wire(m.value))
        self._issue()
