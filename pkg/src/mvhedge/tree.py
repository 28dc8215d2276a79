"""Finite event-tree probability spaces.

A tree is a filtered probability space at desk scale: one node per atom of the
time-t partition, strictly positive one-step transition probabilities, and a
price vector attached to every node through :class:`AdaptedProcess`.  All
conditional expectations reduce to probability-weighted child averages, summed
in ascending child-id order so results are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "Node",
    "EventTree",
    "AdaptedProcess",
    "StoppingTime",
    "ClaimSpec",
    "ValidationReport",
    "validate_tree",
    "cond_expect",
    "check_stopping_time",
]

# Tolerance for probability bookkeeping (sums to one, layer conservation).
PROB_TOL = 1e-12


@dataclass(frozen=True)
class Node:
    """One tree node: its layer, its parent, and the transition probability
    of reaching it from the parent.  The root carries prob 1 and no parent."""

    id: object
    time: int
    parent: Optional[object] = None
    prob: float = 1.0


class EventTree:
    """Finite event tree over time layers 0..horizon.

    Construction only indexes the nodes (children lists, layers, path
    probabilities).  Structural and numerical invariants are checked by
    :func:`validate_tree`, which reports rather than raises.
    """

    def __init__(self, horizon: int, nodes: Sequence[Node]):
        self.horizon = int(horizon)
        self.nodes: Dict[object, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ValueError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n

        roots = [n.id for n in nodes if n.parent is None]
        if len(roots) != 1:
            raise ValueError(f"need exactly one root, found {len(roots)}")
        self.root = roots[0]

        self._children: Dict[object, tuple] = {nid: [] for nid in self.nodes}
        for n in nodes:
            if n.parent is not None:
                if n.parent not in self.nodes:
                    raise ValueError(f"node {n.id!r} references unknown parent {n.parent!r}")
                self._children[n.parent].append(n.id)
        for nid in self._children:
            # ascending child order fixes the summation order everywhere
            self._children[nid] = tuple(sorted(self._children[nid]))

        self.layers: List[List[object]] = [[] for _ in range(self.horizon + 1)]
        for n in nodes:
            if not 0 <= n.time <= self.horizon:
                raise ValueError(f"node {n.id!r} at layer {n.time} outside 0..{self.horizon}")
            self.layers[n.time].append(n.id)
        for layer in self.layers:
            layer.sort()

        # unconditional path probabilities, filled layer by layer
        self.path_prob: Dict[object, float] = {self.root: 1.0}
        for t in range(self.horizon):
            for nid in self.layers[t]:
                if nid not in self.path_prob:
                    continue
                for c in self._children[nid]:
                    self.path_prob[c] = self.path_prob[nid] * self.nodes[c].prob

    def children(self, nid) -> tuple:
        return self._children[nid]

    def parent(self, nid):
        return self.nodes[nid].parent

    def prob(self, nid) -> float:
        return self.nodes[nid].prob

    def is_leaf(self, nid) -> bool:
        return not self._children[nid]

    @property
    def leaves(self) -> List[object]:
        return list(self.layers[self.horizon])

    def time_of(self, nid) -> int:
        return self.nodes[nid].time

    def path_from_root(self, nid) -> List[object]:
        """Node ids from the root down to nid, inclusive."""
        path = [nid]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        path.reverse()
        return path

    def subtree(self, nid) -> List[object]:
        """All nodes at or below nid, in breadth-first id order."""
        out, frontier = [], [nid]
        while frontier:
            out.extend(frontier)
            nxt = []
            for m in frontier:
                nxt.extend(self._children[m])
            frontier = nxt
        return out

    def leaves_below(self, nid) -> List[object]:
        return [m for m in self.subtree(nid) if self.is_leaf(m)]

    def prob_given(self, leaf, ancestor) -> float:
        """P(leaf | ancestor) along the unique connecting path."""
        p = 1.0
        m = leaf
        while m != ancestor:
            p *= self.nodes[m].prob
            m = self.nodes[m].parent
            if m is None:
                raise ValueError(f"{leaf!r} is not below {ancestor!r}")
        return p


class AdaptedProcess:
    """Node-indexed values, one fixed-dimension vector per node.

    Scalars are stored as 1-vectors; arrays are frozen after construction so
    instances can be shared across threads.
    """

    def __init__(self, values: Mapping[object, object]):
        self.values: Dict[object, np.ndarray] = {}
        self.dim: Optional[int] = None
        for nid, v in values.items():
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if arr.ndim != 1:
                raise ValueError(f"value at node {nid!r} is not a vector")
            if self.dim is None:
                self.dim = arr.shape[0]
            elif arr.shape[0] != self.dim:
                raise ValueError(
                    f"dimension mismatch at node {nid!r}: {arr.shape[0]} != {self.dim}"
                )
            arr.setflags(write=False)
            self.values[nid] = arr

    def __getitem__(self, nid) -> np.ndarray:
        return self.values[nid]

    def __contains__(self, nid) -> bool:
        return nid in self.values

    def scalar(self, nid) -> float:
        v = self.values[nid]
        if v.shape[0] != 1:
            raise ValueError("scalar access on a vector-valued process")
        return float(v[0])


@dataclass(frozen=True)
class StoppingTime:
    """A stopping time as its stop set: an antichain of nodes covering every
    root-to-leaf path exactly once."""

    stop_nodes: frozenset

    @classmethod
    def at_root(cls, tree: EventTree) -> "StoppingTime":
        return cls(frozenset({tree.root}))

    @classmethod
    def at_horizon(cls, tree: EventTree) -> "StoppingTime":
        return cls(frozenset(tree.leaves))


@dataclass(frozen=True)
class ClaimSpec:
    """Terminal claim: explicit leaf payoffs, or a vanilla call/put that
    expands against the price process deterministically."""

    kind: str  # "terminal" | "call" | "put"
    values: Optional[Mapping[object, float]] = None
    asset: int = 0
    strike: float = 0.0

    @classmethod
    def terminal(cls, values: Mapping[object, float]) -> "ClaimSpec":
        return cls(kind="terminal", values=dict(values))

    @classmethod
    def call(cls, asset: int, strike: float) -> "ClaimSpec":
        return cls(kind="call", asset=asset, strike=float(strike))

    @classmethod
    def put(cls, asset: int, strike: float) -> "ClaimSpec":
        return cls(kind="put", asset=asset, strike=float(strike))

    def payoff(self, tree: EventTree, prices: AdaptedProcess) -> Dict[object, float]:
        """Explicit payoff per leaf."""
        if self.kind == "terminal":
            if self.values is None:
                raise ValueError("terminal claim without values")
            out = {}
            for leaf in tree.leaves:
                if leaf not in self.values:
                    raise ValueError(f"claim missing value at leaf {leaf!r}")
                out[leaf] = float(self.values[leaf])
            return out
        if self.kind not in ("call", "put"):
            raise ValueError(f"unknown claim kind {self.kind!r}")
        sign = 1.0 if self.kind == "call" else -1.0
        out = {}
        for leaf in tree.leaves:
            s = float(prices[leaf][self.asset])
            out[leaf] = max(sign * (s - self.strike), 0.0)
        return out


@dataclass
class ValidationReport:
    ok: bool
    problems: List[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def validate_tree(tree: EventTree) -> ValidationReport:
    """Check the structural invariants and return a report (never raises).

    Checked: single root at layer 0; children sit one layer below their
    parent; non-terminal nodes have at least one child and leaves sit at the
    horizon; transition probabilities are strictly positive and sum to one
    out of every node; path probabilities sum to one per layer.
    """
    problems: List[str] = []

    if tree.nodes[tree.root].time != 0:
        problems.append(f"root {tree.root!r} not at layer 0")

    for nid, n in tree.nodes.items():
        if n.parent is not None:
            pt = tree.nodes[n.parent].time
            if n.time != pt + 1:
                problems.append(
                    f"node {nid!r} at layer {n.time} but parent {n.parent!r} at layer {pt}"
                )
        if n.time < tree.horizon and tree.is_leaf(nid):
            problems.append(f"node {nid!r} at layer {n.time} < horizon has no children")
        if n.time == tree.horizon and not tree.is_leaf(nid):
            problems.append(f"node {nid!r} at the horizon has children")

    for nid in tree.nodes:
        kids = tree.children(nid)
        if not kids:
            continue
        for c in kids:
            if tree.prob(c) <= 0.0:
                problems.append(f"nonpositive transition probability at node {c!r}")
        total = 0.0
        for c in kids:  # ascending ids
            total += tree.prob(c)
        if abs(total - 1.0) > PROB_TOL:
            problems.append(f"probabilities sum to {total!r} out of node {nid!r}")

    for t, layer in enumerate(tree.layers):
        mass = 0.0
        for nid in layer:
            mass += tree.path_prob.get(nid, 0.0)
        if abs(mass - 1.0) > PROB_TOL:
            problems.append(f"layer {t} path probabilities sum to {mass!r}")

    return ValidationReport(ok=not problems, problems=problems)


def cond_expect(tree: EventTree, X: AdaptedProcess, node) -> np.ndarray:
    """E[X_{t+1} | node] = sum over children of p(child) * X(child).

    Children are visited in ascending id order, which makes the floating
    point result deterministic across runs.
    """
    kids = tree.children(node)
    if not kids:
        raise ValueError(f"node {node!r} has no children")
    acc = None
    for c in kids:
        if c not in X:
            raise KeyError(f"process missing value at child {c!r}")
        term = tree.prob(c) * X[c]
        acc = term if acc is None else acc + term
    return acc


def check_stopping_time(tree: EventTree, tau: StoppingTime) -> bool:
    """True iff every root-to-leaf path meets the stop set exactly once."""
    stop = tau.stop_nodes
    for leaf in tree.leaves:
        hits = sum(1 for nid in tree.path_from_root(leaf) if nid in stop)
        if hits != 1:
            return False
    return True
