"""State-based CRDTs (join-semilattices) used by the protocol layer.

Three kinds are supported: ``GCounter``, ``GSet`` and ``ORSet``. States are
immutable values; every update returns a new state. ``merge`` is the join,
``compare`` is the lattice order.

Example::

    a = gcounter_incr(GCounter(), 0)
    b = gcounter_incr(GCounter(), 1)
    assert value(merge(a, b)) == 2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, Union

ReplicaId = int
Tag = tuple[int, int]


def _sort_key(v: Any) -> tuple[str, str]:
    return (type(v).__name__, repr(v))


@dataclass(frozen=True)
class GCounter:
    """Grow-only counter; one non-negative count per replica.

    Zero entries are dropped on construction so that an absent key and an
    explicit zero compare structurally equal.
    """

    counts: Mapping[ReplicaId, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative count {n} for replica {k}")
        object.__setattr__(
            self, "counts", {k: n for k, n in sorted(self.counts.items()) if n}
        )


@dataclass(frozen=True)
class GSet:
    elements: frozenset = frozenset()


@dataclass(frozen=True)
class ORSet:
    """Observed-remove set with add-wins semantics.

    ``live`` holds ``(value, tag)`` pairs, ``tombstones`` holds removed tags.
    A value is present iff it has a live tag that is not tombstoned.
    """

    live: frozenset = frozenset()
    tombstones: frozenset = frozenset()


CvState = Union[GCounter, GSet, ORSet]

KINDS: dict[str, type] = {"gcounter": GCounter, "gset": GSet, "orset": ORSet}


def _check_same(a: CvState, b: CvState) -> None:
    if type(a) is not type(b):
        raise TypeError(
            f"cannot combine {type(a).__name__} with {type(b).__name__}"
        )


def bottom(kind: str) -> CvState:
    try:
        return KINDS[kind]()
    except KeyError:
        raise ValueError(f"unknown CvState kind {kind!r}") from None


def kind_of(s: CvState) -> str:
    for name, cls in KINDS.items():
        if type(s) is cls:
            return name
    raise TypeError(f"not a CvState: {s!r}")


def merge(a: CvState, b: CvState) -> CvState:
    """Least upper bound of two states of the same kind."""
    _check_same(a, b)
    if isinstance(a, GCounter):
        keys = a.counts.keys() | b.counts.keys()
        return GCounter(
            {k: max(a.counts.get(k, 0), b.counts.get(k, 0)) for k in keys}
        )
    if isinstance(a, GSet):
        return GSet(a.elements | b.elements)
    return ORSet(a.live | b.live, a.tombstones | b.tombstones)


def compare(a: CvState, b: CvState) -> bool:
    """True iff ``a <= b`` in the lattice order."""
    _check_same(a, b)
    if isinstance(a, GCounter):
        return all(n <= b.counts.get(k, 0) for k, n in a.counts.items())
    if isinstance(a, GSet):
        return a.elements <= b.elements
    return a.live <= b.live and a.tombstones <= b.tombstones


def gcounter_incr(s: GCounter, me: ReplicaId, by: int = 1) -> GCounter:
    if by < 1:
        raise ValueError(f"increment must be positive, got {by}")
    counts = dict(s.counts)
    counts[me] = counts.get(me, 0) + by
    return GCounter(counts)


def gset_add(s: GSet, v: Hashable) -> GSet:
    return GSet(s.elements | {v})


def _next_tag(s: ORSet, me: ReplicaId) -> Tag:
    used = [t[1] for _, t in s.live if t[0] == me]
    used += [t[1] for t in s.tombstones if t[0] == me]
    return (me, max(used, default=0) + 1)


def orset_add(s: ORSet, v: Hashable, me: ReplicaId) -> ORSet:
    return ORSet(s.live | {(v, _next_tag(s, me))}, s.tombstones)


def orset_observed_tags(s: ORSet, v: Hashable) -> frozenset:
    return frozenset(t for x, t in s.live if x == v and t not in s.tombstones)


def orset_remove(s: ORSet, v: Hashable, me: ReplicaId | None = None) -> ORSet:
    # only tags observed locally are removed; concurrent adds survive
    tags = orset_observed_tags(s, v)
    if not tags:
        return s
    return ORSet(s.live, s.tombstones | tags)


def orset_remove_tags(s: ORSet, tags: frozenset) -> ORSet:
    return ORSet(s.live, s.tombstones | frozenset(tags))


def value(s: CvState) -> Any:
    """Query projection: a number for counters, a frozenset for sets."""
    if isinstance(s, GCounter):
        return sum(s.counts.values())
    if isinstance(s, GSet):
        return frozenset(s.elements)
    if isinstance(s, ORSet):
        return frozenset(x for x, t in s.live if t not in s.tombstones)
    raise TypeError(f"not a CvState: {s!r}")


def to_json(s: CvState) -> dict:
    """Canonical JSON-ready encoding (sorted keys and elements)."""
    if isinstance(s, GCounter):
        return {"kind": "gcounter", "counts": [[k, n] for k, n in s.counts.items()]}
    if isinstance(s, GSet):
        return {"kind": "gset", "elements": sorted(s.elements, key=_sort_key)}
    if isinstance(s, ORSet):
        live = sorted(s.live, key=lambda p: (_sort_key(p[0]), p[1]))
        return {
            "kind": "orset",
            "live": [[x, list(t)] for x, t in live],
            "tombstones": [list(t) for t in sorted(s.tombstones)],
        }
    raise TypeError(f"not a CvState: {s!r}")


def _thaw(x: Any) -> Any:
    # JSON turns tuples into lists; elements must stay hashable
    return tuple(_thaw(v) for v in x) if isinstance(x, list) else x


def from_json(d: Mapping[str, Any]) -> CvState:
    kind = d.get("kind")
    if kind == "gcounter":
        return GCounter({k: int(n) for k, n in d["counts"]})
    if kind == "gset":
        return GSet(frozenset(_thaw(x) for x in d["elements"]))
    if kind == "orset":
        return ORSet(
            frozenset((_thaw(x), (t[0], t[1])) for x, t in d["live"]),
            frozenset((t[0], t[1]) for t in d["tombstones"]),
        )
    raise ValueError(f"unknown CvState kind {kind!r}")
