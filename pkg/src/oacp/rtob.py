"""Reliable total order broadcast on a Raft-style replicated log.

``RaftNode`` is embedded in a host node and driven by the simulator: the
host forwards Raft payloads to :meth:`RaftNode.handle` and receives
``on_commit(index, entry)`` once per committed entry, in log order, on every
node. Appends carrying no entries (and their acks) are tagged heartbeat.
Snapshotting, membership change and disk persistence are omitted; a
crashed node keeps its log, term and vote (crash-stop with durable state).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .simnet import HEARTBEAT, PROTOCOL, Simulator, Timer

FOLLOWER = "follower"
CANDIDATE = "candidate"
LEADER = "leader"


@dataclass(frozen=True)
class Noop:
    """Entry appended by a new leader so earlier-term entries can commit."""


@dataclass(frozen=True)
class LogEntry:
    origin: str
    next_log_index: int
    c_state: Any
    op: Any
    ids: frozenset = frozenset()
    request_id: str = ""


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader: str
    prev_index: int
    prev_term: int
    entries: tuple = ()
    commit: int = 0


@dataclass(frozen=True)
class AppendAck:
    term: int
    follower: str
    success: bool
    match_index: int


@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate: str
    last_index: int
    last_term: int


@dataclass(frozen=True)
class VoteReply:
    term: int
    voter: str
    granted: bool


RAFT_MESSAGES = (AppendEntries, AppendAck, RequestVote, VoteReply)


@dataclass(frozen=True)
class RaftTiming:
    election_min: int
    election_max: int
    heartbeat: int

    @classmethod
    def for_latency(cls, max_one_way: int) -> "RaftTiming":
        return cls(10 * max_one_way, 20 * max_one_way, 3 * max_one_way)


class RaftNode:
    def __init__(
        self,
        sim: Simulator,
        me: str,
        peers: list[str],
        timing: RaftTiming,
        on_commit: Callable[[int, LogEntry], None],
        on_role_change: Callable[[str], None] | None = None,
        seed: int = 0,
    ):
        self.sim = sim
        self.me = me
        self.peers = [p for p in peers if p != me]
        self.timing = timing
        self.on_commit = on_commit
        self.on_role_change = on_role_change or (lambda role: None)
        self.rng = random.Random(f"{seed}:{me}")
        self.role = FOLLOWER
        self.term = 0
        self.voted_for: str | None = None
        self.log: list[tuple[int, LogEntry]] = []
        self.commit_index = 0
        self.last_applied = 0
        self.leader_id: str | None = None
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.last_ack: dict[str, int] = {}
        self.votes: set[str] = set()
        self._election: Timer | None = None
        self._heartbeat: Timer | None = None
        self.leaders_seen: dict[int, str] = {}

    # -- helpers -----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.peers) + 1

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    @property
    def last_index(self) -> int:
        return len(self.log)

    def term_at(self, index: int) -> int:
        return self.log[index - 1][0] if index > 0 else 0

    def entry(self, index: int) -> LogEntry:
        return self.log[index - 1][1]

    def committed_entries(self) -> list[LogEntry]:
        return [e for _, e in self.log[: self.commit_index]]

    @property
    def is_leader(self) -> bool:
        return self.role == LEADER

    def _send(self, dst: str, msg: Any, heartbeat: bool = False) -> None:
        self.sim.send(self.me, dst, msg, HEARTBEAT if heartbeat else PROTOCOL)

    # -- timers ------------------------------------------------------------

    def start(self, first_timeout: int | None = None) -> None:
        self._arm_election(first_timeout)

    def _arm_election(self, timeout: int | None = None) -> None:
        if self._election is not None:
            self._election.cancel()
        if timeout is None:
            timeout = self.rng.randint(self.timing.election_min, self.timing.election_max)
        self._election = self.sim.set_timer(self.me, timeout, self._election_timeout)

    def _election_timeout(self) -> None:
        if self.role == LEADER:
            return
        self.term += 1
        self.role = CANDIDATE
        self.voted_for = self.me
        self.votes = {self.me}
        self.leader_id = None
        self._arm_election()
        if len(self.votes) >= self.majority:
            self._become_leader()
            return
        for p in self.peers:
            self._send(p, RequestVote(self.term, self.me, self.last_index, self.term_at(self.last_index)))

    def _heartbeat_tick(self) -> None:
        if self.role != LEADER:
            return
        for p in self.peers:
            self._replicate(p)
        self._heartbeat = self.sim.set_timer(self.me, self.timing.heartbeat, self._heartbeat_tick)

    def on_crash(self) -> None:
        self._election = self._heartbeat = None

    def on_recover(self) -> None:
        was_leader = self.role == LEADER
        self.role = FOLLOWER
        self.leader_id = None
        self._arm_election()
        if was_leader:
            self.on_role_change(FOLLOWER)

    # -- roles -------------------------------------------------------------

    def _become_leader(self) -> None:
        self.role = LEADER
        self.leader_id = self.me
        assert self.leaders_seen.setdefault(self.term, self.me) == self.me
        for p in self.peers:
            self.next_index[p] = self.last_index + 1
            self.match_index[p] = 0
            self.last_ack[p] = self.sim.now
        if self._election is not None:
            self._election.cancel()
        self.on_role_change(LEADER)
        self.submit(LogEntry("", 0, None, Noop()))
        self._heartbeat = self.sim.set_timer(self.me, self.timing.heartbeat, self._heartbeat_tick)

    def _step_down(self, term: int) -> None:
        was_leader = self.role == LEADER
        if term > self.term:
            self.term = term
            self.voted_for = None
        self.role = FOLLOWER
        if self._heartbeat is not None:
            self._heartbeat.cancel()
        if was_leader:
            self.leader_id = None
            self._arm_election()
            self.on_role_change(FOLLOWER)

    # -- client side ---------------------------------------------------------

    def submit(self, entry: LogEntry) -> int | None:
        """Append on the leader and replicate; returns the log index."""
        if self.role != LEADER:
            return None
        index = self.last_index + 1
        self.log.append((self.term, replace(entry, next_log_index=index)))
        for p in self.peers:
            if self.next_index[p] == index:
                self._replicate(p)
        self._advance_commit()
        return index

    def _replicate(self, peer: str) -> None:
        nxt = self.next_index[peer]
        entries = tuple(self.log[nxt - 1 :])
        prev = nxt - 1
        msg = AppendEntries(self.term, self.me, prev, self.term_at(prev), entries, self.commit_index)
        self.next_index[peer] = self.last_index + 1
        self._send(peer, msg, heartbeat=not entries)

    def _advance_commit(self) -> None:
        old = self.commit_index
        for idx in range(self.last_index, self.commit_index, -1):
            if self.term_at(idx) != self.term:
                break
            acks = 1 + sum(1 for p in self.peers if self.match_index.get(p, 0) >= idx)
            if acks >= self.majority:
                self.commit_index = idx
                break
        if self.commit_index > old:
            # tell in-sync followers right away instead of waiting a heartbeat
            for p in self.peers:
                if self.next_index[p] > self.last_index:
                    prev = self.next_index[p] - 1
                    self._send(
                        p,
                        AppendEntries(self.term, self.me, prev, self.term_at(prev), (), self.commit_index),
                        heartbeat=True,
                    )
            self._apply()

    def _apply(self) -> None:
        while self.last_applied < self.commit_index:
            self.last_applied += 1
            self.on_commit(self.last_applied, self.entry(self.last_applied))

    # -- message handling ----------------------------------------------------

    def handle(self, env) -> bool:
        msg = env.payload
        if isinstance(msg, AppendEntries):
            self._on_append(msg)
        elif isinstance(msg, AppendAck):
            self._on_ack(msg)
        elif isinstance(msg, RequestVote):
            self._on_vote_request(msg)
        elif isinstance(msg, VoteReply):
            self._on_vote_reply(msg)
        else:
            return False
        return True

    def _on_append(self, m: AppendEntries) -> None:
        hb = not m.entries
        if m.term < self.term:
            self._send(m.leader, AppendAck(self.term, self.me, False, 0), heartbeat=hb)
            return
        if m.term > self.term or self.role != FOLLOWER:
            self._step_down(m.term)
        new_leader = self.leader_id != m.leader
        self.leader_id = m.leader
        self._arm_election()
        if new_leader:
            self.on_role_change(FOLLOWER)
        if m.prev_index > self.last_index or self.term_at(m.prev_index) != m.prev_term:
            hint = min(self.last_index, m.prev_index - 1)
            self._send(m.leader, AppendAck(self.term, self.me, False, hint), heartbeat=hb)
            return
        idx = m.prev_index
        for term, e in m.entries:
            idx += 1
            if idx <= self.last_index:
                if self.term_at(idx) == term:
                    continue
                assert idx > self.commit_index, "committed entry overwritten"
                del self.log[idx - 1 :]
            self.log.append((term, e))
        match = m.prev_index + len(m.entries)
        if m.commit > self.commit_index:
            self.commit_index = min(m.commit, match)
            self._apply()
        self._send(m.leader, AppendAck(self.term, self.me, True, match), heartbeat=hb)

    def _on_ack(self, m: AppendAck) -> None:
        if m.term > self.term:
            self._step_down(m.term)
            return
        if self.role != LEADER or m.term != self.term:
            return
        self.last_ack[m.follower] = self.sim.now
        if m.success:
            if m.match_index > self.match_index[m.follower]:
                self.match_index[m.follower] = m.match_index
            self.next_index[m.follower] = max(self.next_index[m.follower], self.match_index[m.follower] + 1)
            self._advance_commit()
        else:
            self.next_index[m.follower] = max(1, min(m.match_index + 1, self.last_index + 1))
            self._replicate(m.follower)

    def _on_vote_request(self, m: RequestVote) -> None:
        if m.term > self.term:
            self._step_down(m.term)
        up_to_date = (m.last_term, m.last_index) >= (self.term_at(self.last_index), self.last_index)
        granted = (
            m.term == self.term
            and self.voted_for in (None, m.candidate)
            and up_to_date
        )
        if granted:
            self.voted_for = m.candidate
            self._arm_election()
        self._send(m.candidate, VoteReply(self.term, self.me, granted))

    def _on_vote_reply(self, m: VoteReply) -> None:
        if m.term > self.term:
            self._step_down(m.term)
            return
        if self.role != CANDIDATE or m.term != self.term or not m.granted:
            return
        self.votes.add(m.voter)
        if len(self.votes) >= self.majority:
            self._become_leader()

    def alive_peers(self, window: int) -> list[str]:
        """Peers that acknowledged something within ``window`` microseconds."""
        now = self.sim.now
        return [p for p in self.peers if now - self.last_ack.get(p, -(10**18)) <= window]
