"""Replicated objects offered to clients.

Each model pairs a CvRDT with the operations clients may invoke. CvOps turn
into a delta state that servers merge, so a retried CvOp merges to the same
result. TOps are evaluated at commit time against the entry's snapshot and a
small log-derived context (the tweet timeline for Twitter), which is how a
read's value depends only on the committed log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from . import crdt
from .consistency import C, T


@dataclass(frozen=True)
class Op:
    """One client invocation; ``(client, seq)`` is unique across a run."""

    client: str
    seq: int
    name: str
    args: tuple = ()
    kind: str = C

    @property
    def id(self) -> str:
        return f"{self.client}:{self.seq}"

    @property
    def tag(self) -> tuple[str, int]:
        return (self.client, self.seq)


class UnknownOperation(ValueError):
    pass


class DataModel:
    name = "abstract"
    crdt_kind = "gset"
    cv_ops: frozenset = frozenset()
    t_ops: frozenset = frozenset()

    def kind_of(self, name: str) -> str:
        if name in self.cv_ops:
            return C
        if name in self.t_ops:
            return T
        raise UnknownOperation(f"{self.name} has no operation {name!r}")

    def bottom(self) -> crdt.CvState:
        return crdt.bottom(self.crdt_kind)

    def initial_context(self) -> Any:
        return ()

    def cv_delta(self, op: Op, state: crdt.CvState) -> crdt.CvState:
        raise NotImplementedError

    def apply_t(self, op: Op, state: crdt.CvState, ctx: Any) -> tuple[crdt.CvState, Any, Any]:
        """Return ``(new_state, value, new_context)``."""
        raise NotImplementedError

    def read(self, state: crdt.CvState, ctx: Any) -> Any:
        return crdt.value(state)


class Counter(DataModel):
    """Resettable grow-only counter: incr is a CvOp, reset and read are TOps."""

    name = "counter"
    crdt_kind = "gcounter"
    cv_ops = frozenset({"incr"})
    t_ops = frozenset({"reset", "read"})

    def cv_delta(self, op, state):
        by = op.args[0] if op.args else 1
        return crdt.GCounter({op.id: by})

    def apply_t(self, op, state, ctx):
        if op.name == "reset":
            return crdt.GCounter(), 0, ctx
        return state, crdt.value(state), ctx


class ShoppingCart(DataModel):
    """Observed-remove set of items; checkout empties the cart it observed."""

    name = "shopping-cart"
    crdt_kind = "orset"
    cv_ops = frozenset({"add", "remove"})
    t_ops = frozenset({"checkout", "read"})

    def cv_delta(self, op, state):
        item = op.args[0]
        if op.name == "add":
            return crdt.ORSet(frozenset({(item, op.tag)}))
        return crdt.ORSet(frozenset(), crdt.orset_observed_tags(state, item))

    def apply_t(self, op, state, ctx):
        items = crdt.value(state)
        if op.name == "checkout":
            tags = frozenset(tag for _, tag in state.live)
            return crdt.orset_remove_tags(state, tags), sorted(items, key=repr), ctx
        return state, sorted(items, key=repr), ctx

    def read(self, state, ctx):
        return sorted(crdt.value(state), key=repr)


class Twitter(DataModel):
    """Follower set as an OR-set; the timeline is the tweets in log order."""

    name = "twitter"
    crdt_kind = "orset"
    cv_ops = frozenset({"add_follower"})
    t_ops = frozenset({"tweet", "read"})

    def cv_delta(self, op, state):
        return crdt.ORSet(frozenset({(op.args[0], op.tag)}))

    def apply_t(self, op, state, ctx):
        if op.name == "tweet":
            ctx = ctx + (op.args[0],)
            return state, len(ctx), ctx
        return state, self.read(state, ctx), ctx

    def read(self, state, ctx):
        return {"followers": sorted(crdt.value(state), key=repr), "timeline": list(ctx)}


class Bank(DataModel):
    """Account balance as a grow-only counter of credits.

    A withdrawal is a TOp, so it sees every deposit acknowledged before it
    and can refuse to overdraw. After a withdrawal the balance is rebased
    onto a single entry keyed by the withdrawing operation.
    """

    name = "bank"
    crdt_kind = "gcounter"
    cv_ops = frozenset({"deposit", "accrueinterest"})
    t_ops = frozenset({"withdraw", "read"})
    rate_percent = 5

    def cv_delta(self, op, state):
        if op.name == "deposit":
            return crdt.GCounter({op.id: op.args[0]})
        return crdt.GCounter({op.id: crdt.value(state) * self.rate_percent // 100})

    def apply_t(self, op, state, ctx):
        balance = crdt.value(state)
        if op.name == "withdraw":
            amount = op.args[0]
            if amount > balance:
                return state, {"ok": False, "balance": balance}, ctx
            return crdt.GCounter({op.id: balance - amount}), {"ok": True, "balance": balance - amount}, ctx
        return state, balance, ctx


class Bidding(DataModel):
    """Sealed bids in a grow-only set; winnercheck closes bidding.

    Meant to run with auto-melt off: after winnercheck commits, servers drop
    incoming bids until an explicit melt operation commits.
    """

    name = "bidding"
    crdt_kind = "gset"
    cv_ops = frozenset({"bid"})
    t_ops = frozenset({"winnercheck", "melt", "read"})

    def cv_delta(self, op, state):
        bidder, amount = op.args
        return crdt.GSet(frozenset({(amount, bidder)}))

    def apply_t(self, op, state, ctx):
        if op.name == "winnercheck":
            best = max(state.elements, default=None)
            return state, None if best is None else {"bidder": best[1], "amount": best[0]}, ctx
        return state, self.read(state, ctx), ctx

    def read(self, state, ctx):
        return sorted(state.elements)


class CustomMix(DataModel):
    """Grow-only set with adds as CvOps and reads as TOps."""

    name = "custom-mix"
    crdt_kind = "gset"
    cv_ops = frozenset({"add"})
    t_ops = frozenset({"read"})

    def cv_delta(self, op, state):
        return crdt.GSet(frozenset({op.args[0]}))

    def apply_t(self, op, state, ctx):
        return state, self.read(state, ctx), ctx

    def read(self, state, ctx):
        return sorted(state.elements, key=repr)


MODELS: dict[str, type[DataModel]] = {
    m.name: m for m in (Counter, ShoppingCart, Twitter, Bank, Bidding, CustomMix)
}


def get_model(name: str) -> DataModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise UnknownOperation(f"unknown scenario {name!r}; choose from {sorted(MODELS)}") from None
