"""Executable consistency model: CvT orders, Cv-sets, LAC and OAC checking.

A CvT order is a partial order over convergent (``C``) and totally ordered
(``T``) operations in which the T operations form a chain and every C
operation is comparable with every T operation. A Cv-set is a maximal
group of mutually incomparable C operations; in practice the C operations
between two consecutive T operations. Cv-set maximality is inferred from
the second membership rule (every C operation outside the set is comparable
with some member); it is not stated on its own.

Histories recorded by the simulator are checked by building the CvT order
they induce (each committed T operation carries the ids of the C operations
folded into its snapshot) and verifying that every server applied a prefix
of a linear extension of it and that client program order is respected
between C and T operations.
"""

from __future__ import annotations

import itertools
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

from . import crdt

C = "C"
T = "T"

#: hard limit for exhaustive linear-extension enumeration
ENUMERATION_LIMIT = 10


class EnumerationRefused(ValueError):
    """Raised instead of silently truncating an enumeration."""


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class OpId:
    id: str
    kind: str
    payload: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in (C, T):
            raise ValueError(f"operation kind must be 'C' or 'T', got {self.kind!r}")


@dataclass(frozen=True)
class Violation:
    rule: str
    witness: tuple
    detail: str = ""

    def to_dict(self) -> dict:
        return {"rule": self.rule, "witness": list(self.witness), "detail": self.detail}

    def __str__(self) -> str:
        w = ", ".join(map(str, self.witness))
        return f"[{self.rule}] ({w}) {self.detail}".rstrip()


@dataclass
class CheckResult:
    ok: bool
    violations: list[Violation] = field(default_factory=list)
    witness: Any = None
    exhaustive: bool = True

    def __bool__(self) -> bool:
        return self.ok

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.to_dict() for v in self.violations],
            "exhaustive": self.exhaustive,
        }

    def text(self) -> str:
        if self.ok:
            return "PASS"
        return "FAIL\n" + "\n".join(f"  {v}" for v in self.violations)


class CvTOrder:
    """A finite set of operations plus strict precedence edges ``u -> v``.

    Edges need not be transitively closed; ``precedes`` uses reachability.
    """

    def __init__(self, ops: Iterable[OpId], edges: Iterable[tuple[str, str]] = ()):
        self.ops: dict[str, OpId] = {}
        for op in ops:
            if op.id in self.ops:
                raise ValueError(f"duplicate operation id {op.id!r}")
            self.ops[op.id] = op
        self.edges = frozenset(edges)
        self.preds: dict[str, set[str]] = {k: set() for k in self.ops}
        self.succs: dict[str, set[str]] = {k: set() for k in self.ops}
        for u, v in self.edges:
            if u not in self.ops or v not in self.ops:
                raise ValueError(f"edge ({u}, {v}) references an unknown operation")
            self.preds[v].add(u)
            self.succs[u].add(v)
        self._reach: dict[str, frozenset[str]] | None = None

    def __len__(self) -> int:
        return len(self.ops)

    def kind(self, op: str) -> str:
        return self.ops[op].kind

    def ids(self, kind: str | None = None) -> list[str]:
        return [k for k, o in self.ops.items() if kind is None or o.kind == kind]

    def _descendants(self) -> dict[str, frozenset[str]]:
        if self._reach is None:
            reach: dict[str, frozenset[str]] = {}
            for start in self.ops:
                seen: set[str] = set()
                stack = list(self.succs[start])
                while stack:
                    x = stack.pop()
                    if x not in seen:
                        seen.add(x)
                        stack.extend(self.succs[x])
                reach[start] = frozenset(seen)
            self._reach = reach
        return self._reach

    def precedes(self, u: str, v: str) -> bool:
        return v in self._descendants()[u]

    def comparable(self, u: str, v: str) -> bool:
        return self.precedes(u, v) or self.precedes(v, u)


def validate_cvt_order(o: CvTOrder) -> CheckResult:
    """Check strict-partial-order, T-totality and C/T comparability."""
    for u in o.ops:
        if o.precedes(u, u):
            return CheckResult(False, [Violation("partial-order", (u, u), "cycle through operation")])
    ts = sorted(o.ids(T))
    for u, v in itertools.combinations(ts, 2):
        if not o.comparable(u, v):
            return CheckResult(
                False, [Violation("t-total", (u, v), "distinct T operations are unordered")]
            )
    for p in sorted(o.ids(C)):
        for u in ts:
            if not o.comparable(p, u):
                return CheckResult(
                    False,
                    [Violation("c-t-comparable", (p, u), "C operation unordered with a T operation")],
                )
    return CheckResult(True)


def t_chain(o: CvTOrder) -> list[str]:
    ts = o.ids(T)
    return sorted(ts, key=lambda u: sum(o.precedes(v, u) for v in ts))


def derive_cv_sets(o: CvTOrder) -> list[frozenset[str]]:
    """Partition the C operations of a valid order into ordered Cv-sets."""
    chain = t_chain(o)
    groups: dict[int, list[str]] = defaultdict(list)
    for p in o.ids(C):
        groups[sum(o.precedes(u, p) for u in chain)].append(p)
    cs = o.ids(C)
    out: list[frozenset[str]] = []
    for k in sorted(groups):
        members = groups[k]
        # layers by longest chain of C predecessors inside the group
        depth: dict[str, int] = {}
        for p in sorted(members, key=lambda x: sum(o.precedes(y, x) for y in members)):
            depth[p] = 1 + max((depth[q] for q in members if q in depth and o.precedes(q, p)), default=-1)
        layers: dict[int, set[str]] = defaultdict(set)
        for p, d in depth.items():
            layers[d].add(p)
        for d in sorted(layers):
            layer = layers[d]
            for p in cs:
                if p not in layer and not any(o.comparable(p, q) for q in layer):
                    raise StructuralError(
                        f"C operations {sorted(layer)} admit no legal Cv-set: {p} is unordered with all of them"
                    )
            out.append(frozenset(layer))
    return out


def is_legal_serialization(o: CvTOrder, seq: Sequence[str]) -> bool:
    """True iff ``seq`` is a linear extension of ``o``."""
    if len(seq) != len(o) or set(seq) != set(o.ops):
        raise ValueError("sequence is not a permutation of the order's operations")
    pos = {x: i for i, x in enumerate(seq)}
    return all(pos[u] < pos[v] for u, v in o.edges)


def enumerate_linear_extensions(
    o: CvTOrder, cap: int | None = None, limit: int = ENUMERATION_LIMIT
) -> list[tuple[str, ...]]:
    if len(o) > limit:
        raise EnumerationRefused(
            f"{len(o)} operations exceed the exhaustive limit of {limit}; use sample_linear_extensions"
        )
    indeg = {k: len(v) for k, v in o.preds.items()}
    out: list[tuple[str, ...]] = []
    prefix: list[str] = []

    def rec() -> None:
        if len(prefix) == len(o):
            out.append(tuple(prefix))
            if cap is not None and len(out) > cap:
                raise EnumerationRefused(f"more than {cap} linear extensions")
            return
        for x in sorted(k for k, d in indeg.items() if d == 0):
            indeg[x] = -1
            for y in o.succs[x]:
                indeg[y] -= 1
            prefix.append(x)
            rec()
            prefix.pop()
            for y in o.succs[x]:
                indeg[y] += 1
            indeg[x] = 0

    rec()
    return out


def sample_linear_extensions(
    o: CvTOrder, n: int = 10_000, seed: int = 0
) -> Iterator[tuple[str, ...]]:
    """Random topological sorts; non-exhaustive, for orders past the limit."""
    rng = random.Random(seed)
    for _ in range(n):
        indeg = {k: len(v) for k, v in o.preds.items()}
        ready = sorted(k for k, d in indeg.items() if d == 0)
        seq = []
        while ready:
            x = ready.pop(rng.randrange(len(ready)))
            seq.append(x)
            for y in sorted(o.succs[x]):
                indeg[y] -= 1
                if indeg[y] == 0:
                    ready.append(y)
        yield tuple(seq)


def replay(o: CvTOrder, seq: Sequence[str], initial: Any) -> Any:
    s = initial
    for x in seq:
        s = o.ops[x].payload(s)
    return s


def _canonical(s: Any) -> Any:
    try:
        return repr(crdt.to_json(s))
    except TypeError:
        return repr(s)


def check_state_convergence(
    o: CvTOrder, initial: Any, *, sample: int | None = None, seed: int = 0
) -> CheckResult:
    """Replay every linear extension from ``initial`` and compare final states.

    With ``sample`` set, orders over the enumeration limit are checked on that
    many random extensions and the result is marked non-exhaustive.
    """
    if len(o) > ENUMERATION_LIMIT and sample is not None:
        exts: Iterable[tuple[str, ...]] = sample_linear_extensions(o, sample, seed)
        exhaustive = False
    else:
        exts = enumerate_linear_extensions(o)
        exhaustive = True
    first: tuple[tuple[str, ...], Any] | None = None
    for seq in exts:
        final = _canonical(replay(o, seq, initial))
        if first is None:
            first = (seq, final)
        elif final != first[1]:
            return CheckResult(
                False,
                [Violation("state-convergence", (first[0], seq), "extensions reach different states")],
                witness=(first[0], seq),
                exhaustive=exhaustive,
            )
    return CheckResult(True, exhaustive=exhaustive)


# -- histories ---------------------------------------------------------------


@dataclass(frozen=True)
class Commit:
    op: str
    snapshot: frozenset[str] = frozenset()
    recovery: bool = False


@dataclass
class History:
    """Recorded run: client program orders, server apply events, commits.

    ``servers`` maps a server to a list of ``("apply", op)``,
    ``("abort", op)`` and ``("rollback", op)`` events. An abort retracts
    that server's earlier apply of ``op``; a rollback leaves the apply in
    place and only records that a later commit overwrote it.
    """

    clients: dict[str, list[str]] = field(default_factory=dict)
    servers: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    commits: list[Commit] = field(default_factory=list)
    kinds: dict[str, str] = field(default_factory=dict)
    #: C operation -> the T operation whose commit rolled it back first
    rolled_back_by: dict[str, str] = field(default_factory=dict)
    #: servers crashed at the end of the recording
    down: set[str] = field(default_factory=set)

    def effective_applies(self, server: str) -> list[str]:
        seq: list[str | None] = []
        for ev, op in self.servers.get(server, []):
            if ev == "apply":
                seq.append(op)
            elif ev == "abort":
                for i in range(len(seq) - 1, -1, -1):
                    if seq[i] == op:
                        seq[i] = None
                        break
        return [x for x in seq if x is not None]

    def _settle_lost(self) -> None:
        # a C operation held only by servers that crashed for good, and in no
        # snapshot, was lost the way a rollback loses it: the next commit on
        # that server's log overwrote it
        in_snapshot = set().union(*(c.snapshot for c in self.commits)) if self.commits else set()
        holders: dict[str, list[tuple[str, int]]] = {}
        for server, events in self.servers.items():
            t_seen = 0
            for ev, op in events:
                if ev != "apply":
                    continue
                if self.kinds.get(op, C) == T:
                    t_seen += 1
                else:
                    holders.setdefault(op, []).append((server, t_seen))
        for op, where in holders.items():
            if op in in_snapshot or op in self.rolled_back_by:
                continue
            if not all(server in self.down for server, _ in where):
                continue
            k = min(t for _, t in where)
            if k < len(self.commits):
                self.rolled_back_by[op] = self.commits[k].op
                for server, _ in where:
                    self.servers[server].append(("rollback", op))

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> "History":
        h = cls()
        rollbacks: list[tuple[str, int, str, str]] = []
        for r in records:
            rec = r.get("rec")
            if rec == "invoke":
                h.clients.setdefault(r["client"], []).append(r["op"])
                h.kinds[r["op"]] = r["kind"]
            elif rec == "apply":
                h.servers.setdefault(r["server"], []).append(("apply", r["op"]))
                h.kinds.setdefault(r["op"], r["kind"])
            elif rec == "abort":
                # an abort naming the commit that caused it is a rollback: the
                # apply happened and a T operation later overwrote its effect
                if r.get("by") is not None:
                    events = h.servers.setdefault(r["server"], [])
                    rollbacks.append((r["server"], len(events), r["op"], r["by"]))
                    events.append(("rollback", r["op"]))
                else:
                    h.servers.setdefault(r["server"], []).append(("abort", r["op"]))
            elif rec == "crash":
                h.down.add(r["node"])
            elif rec == "recover":
                h.down.discard(r["node"])
            elif rec == "commit":
                h.commits.append(
                    Commit(r["op"], frozenset(r.get("snapshot", ())), bool(r.get("recovery")))
                )
                h.kinds[r["op"]] = T
        h._settle_rollbacks(rollbacks)
        return h

    def _settle_rollbacks(self, rollbacks: list[tuple[str, int, str, str]]) -> None:
        """Resolve ``(server, event index, op, by)`` rollback events.

        A rollback is only local if the same server applies the operation
        again later, or a commit after ``by`` has it in its snapshot; such an
        event retracts the earlier apply like a plain abort. The remaining
        events say which commit finally overwrote the operation; events
        naming an earlier commit than that are retractions as well.
        """
        position = {c.op: i for i, c in reversed(list(enumerate(self.commits)))}
        last_in: dict[str, int] = {}
        for i, c in enumerate(self.commits):
            for p in c.snapshot:
                last_in[p] = i
        last_apply: dict[tuple[str, str], int] = {}
        for server, events in self.servers.items():
            for i, (ev, op) in enumerate(events):
                if ev == "apply":
                    last_apply[(server, op)] = i
        final: dict[str, int] = {}
        kept = []
        for server, idx, op, by in rollbacks:
            at = position.get(by, len(self.commits))
            if last_apply.get((server, op), -1) > idx or last_in.get(op, -1) > at:
                self.servers[server][idx] = ("abort", op)
                continue
            kept.append((server, idx, op, at))
            if at >= final.get(op, -1):
                final[op] = at
                self.rolled_back_by[op] = by
        # an earlier overwrite erased a copy nobody observed; the operation
        # reached other servers again and is placed by the later one
        for server, idx, op, at in kept:
            if at < final[op]:
                self.servers[server][idx] = ("abort", op)
        self._settle_lost()


def induced_order(h: History) -> tuple[CvTOrder, dict[str, int]]:
    """CvT order induced by a history, plus a rank per operation.

    T operations are ordered by commit position. A C operation joins the
    Cv-set closed by the first commit whose snapshot contains it; C
    operations in no snapshot form the trailing open Cv-set, except that an
    operation rolled back by a commit belongs to the Cv-set that commit
    closes (its effect was overwritten, as a reset would). Ranks: the
    Cv-set before commit ``k`` has rank ``2k``, commit ``k`` itself ``2k+1``.
    """
    rank: dict[str, int] = {}
    for i, c in enumerate(h.commits):
        rank.setdefault(c.op, 2 * i + 1)
    first_in: dict[str, int] = {}
    for i, c in enumerate(h.commits):
        for p in c.snapshot:
            first_in.setdefault(p, i)
    position = {c.op: i for i, c in reversed(list(enumerate(h.commits)))}
    for p, by in h.rolled_back_by.items():
        if by in position:
            first_in[p] = min(first_in.get(p, position[by]), position[by])
    applied: set[str] = set()
    for s in h.servers:
        applied.update(h.effective_applies(s))
    c_ops = {p for p in applied | set(first_in) if h.kinds.get(p, C) == C and p not in rank}
    k_end = len(h.commits)
    for p in c_ops:
        rank[p] = 2 * first_in.get(p, k_end)
    ts = [c.op for c in h.commits]
    edges = list(zip(ts, ts[1:]))
    for p in c_ops:
        k = rank[p] // 2
        if k > 0:
            edges.append((ts[k - 1], p))
        if k < k_end:
            edges.append((p, ts[k]))
    ops = [OpId(x, T) for x in dict.fromkeys(ts)] + [OpId(p, C) for p in sorted(c_ops)]
    return CvTOrder(ops, edges), rank


def check_lac(h: History, o: CvTOrder) -> CheckResult:
    """Every server applied a prefix-closed linear extension of ``o``.

    A C operation that a commit rolled back may be missing on a server: the
    rollback overwrote its effect, so skipping it reaches the same state.
    """
    violations: list[Violation] = []
    absorbed = set(h.rolled_back_by)
    for server in sorted(h.servers):
        done: set[str] = set()
        for op in h.effective_applies(server):
            if op not in o.ops:
                violations.append(Violation("lac", (server, op), "applied an operation outside the order"))
                break
            if op in done:
                violations.append(Violation("lac", (server, op), "applied twice"))
                break
            missing = sorted(o.preds[op] - done - absorbed)
            if missing:
                violations.append(
                    Violation("lac", (missing[0], op), f"{server} applied {op} before its predecessor {missing[0]}")
                )
                break
            done.add(op)
    return CheckResult(not violations, violations)


def check_oac(h: History) -> CheckResult:
    """LAC on the induced order plus the two program-order rules."""
    o, rank = induced_order(h)
    violations = list(check_lac(h, o).violations)
    seen: set[str] = set()
    for i, c in enumerate(h.commits):
        for p in sorted(seen - c.snapshot):
            violations.append(
                Violation("snapshot", (p, c.op), f"{c.op} observes a state missing earlier {p}")
            )
        seen |= c.snapshot
    for client in sorted(h.clients):
        max_c: tuple[int, str] | None = None
        max_t: tuple[int, str] | None = None
        for op in h.clients[client]:
            if op not in rank:
                continue
            r = rank[op]
            if o.kind(op) == T:
                if max_c is not None and max_c[0] > r:
                    violations.append(
                        Violation("c-then-t", (max_c[1], op), f"{client}: C op precedes T op in program order but not in the CvT order")
                    )
                if max_t is None or r > max_t[0]:
                    max_t = (r, op)
            else:
                if max_t is not None and max_t[0] > r:
                    violations.append(
                        Violation("t-then-c", (max_t[1], op), f"{client}: T op precedes C op in program order but not in the CvT order")
                    )
                if max_c is None or r > max_c[0]:
                    max_c = (r, op)
    return CheckResult(not violations, violations)
