"""Brute-force projection ground truth.

Everything here is deliberately slow and simple: assemble one design matrix
whose columns are the terminal payoffs of unit bump strategies (one asset,
one node-step), weight rows by conditional path probabilities, and solve the
normal equations.  The dynamic-programming engine must reproduce these
numbers; the engine is never allowed to share code with this module beyond
numpy itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .tree import AdaptedProcess, ClaimSpec, EventTree, StoppingTime

__all__ = ["ProjectionResult", "project_brute_force", "oracle_opportunity", "UNKNOWN_GUARD"]

# Refuse problems with more strategy unknowns than this; the module is a
# test oracle, not a solver.
UNKNOWN_GUARD = 20_000

# Relative eigenvalue cutoff for the rank decision, matching the engine's
# pseudoinverse convention so tie-broken solutions coincide in wealth.
RANK_CUTOFF = 1e-12


def _pinv_psd(mat: np.ndarray):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix via
    eigendecomposition.  Eigenvalues below RANK_CUTOFF * max eigenvalue
    count as zero.  Returns (pinv, rank)."""
    w, u = np.linalg.eigh(mat)
    top = float(w[-1]) if w.size else 0.0
    cut = RANK_CUTOFF * max(top, 0.0)
    keep = w > cut
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (u * inv) @ u.T, int(np.count_nonzero(keep))


@dataclass
class ProjectionResult:
    """Global least-squares hedge: one strategy vector per traded node-step,
    the minimal conditional squared error per stop node, and the residual
    payoff per leaf (wealth minus claim)."""

    strategy: Dict[object, np.ndarray]
    error_sq: Dict[object, float]
    residual: Dict[object, float]
    mean_value: Dict[object, float]  # filled when the endowment is solved for
    normal_eq_gap: float  # worst normal-equation residual, for self-checks


def _traded_nodes(tree: EventTree, top) -> List[object]:
    """Non-terminal nodes at or below `top`, breadth-first, ascending ids."""
    return [m for m in tree.subtree(top) if not tree.is_leaf(m)]


def _design(tree: EventTree, prices: AdaptedProcess, top):
    """Design matrix for trading below `top`.

    Rows: leaves below `top`.  Columns: (node m, asset i) bump strategies;
    entry is the i-th price increment over the step m -> child taken by the
    leaf's path, zero when the path avoids m.
    """
    d = prices.dim
    cols = _traded_nodes(tree, top)
    leaves = tree.leaves_below(top)
    row_of = {leaf: r for r, leaf in enumerate(leaves)}
    G = np.zeros((len(leaves), len(cols) * d))

    for j, m in enumerate(cols):
        sm = prices[m]
        for c in tree.children(m):
            dS = prices[c] - sm
            for leaf in tree.leaves_below(c):
                G[row_of[leaf], j * d : (j + 1) * d] = dS

    w = np.array([tree.prob_given(leaf, top) for leaf in leaves])
    return G, w, cols, leaves


def _solve_normal(G: np.ndarray, w: np.ndarray, y: np.ndarray):
    """Weighted least squares min ||sqrt(w)(G x - y)|| by normal equations,
    minimum-norm solution on rank-deficient problems."""
    Gw = G * w[:, None]
    A = G.T @ Gw
    b = Gw.T @ y
    pinv, _ = _pinv_psd(A)
    x = pinv @ b
    gap = float(np.max(np.abs(A @ x - b))) if b.size else 0.0
    return x, gap


def project_brute_force(
    tree: EventTree,
    prices: AdaptedProcess,
    payoff,
    v,
    tau: StoppingTime,
    solve_endowment: bool = False,
) -> ProjectionResult:
    """Least-squares hedge of `payoff` starting from wealth v at each stop
    node of `tau`, trading every node-step below the stop node.

    `v` is a scalar or a mapping stop-node -> value; it is ignored when
    `solve_endowment` is set, in which case the optimal starting wealth is
    an extra unknown (one constant column per stop node) and lands in
    `mean_value`.
    """
    d = prices.dim
    if isinstance(payoff, ClaimSpec):
        payoff = payoff.payoff(tree, prices)
    stops = sorted(tau.stop_nodes)

    n_unknowns = sum(d * len(_traded_nodes(tree, n)) for n in stops)
    if n_unknowns > UNKNOWN_GUARD:
        raise ValueError(
            f"problem has {n_unknowns} strategy unknowns, above the oracle guard {UNKNOWN_GUARD}"
        )

    strategy: Dict[object, np.ndarray] = {}
    error_sq: Dict[object, float] = {}
    residual: Dict[object, float] = {}
    mean_value: Dict[object, float] = {}
    worst_gap = 0.0

    for n in stops:
        G, w, cols, leaves = _design(tree, prices, n)
        h = np.array([payoff[leaf] for leaf in leaves])

        if solve_endowment:
            Gx = np.hstack([np.ones((len(leaves), 1)), G])
            x, gap = _solve_normal(Gx, w, h)
            v_n = float(x[0])
            theta = x[1:]
            mean_value[n] = v_n
        else:
            v_n = float(v[n]) if isinstance(v, dict) else float(v)
            x, gap = _solve_normal(G, w, h - v_n)
            theta = x

        worst_gap = max(worst_gap, gap)
        for j, m in enumerate(cols):
            strategy[m] = theta[j * d : (j + 1) * d]

        wealth = v_n + G @ theta
        res = wealth - h
        error_sq[n] = float(np.dot(w, res * res))
        for leaf, r in zip(leaves, res):
            residual[leaf] = float(r)

    return ProjectionResult(
        strategy=strategy,
        error_sq=error_sq,
        residual=residual,
        mean_value=mean_value,
        normal_eq_gap=worst_gap,
    )


def oracle_opportunity(tree: EventTree, prices: AdaptedProcess, node) -> float:
    """Minimal conditional expected squared shortfall from terminal wealth 1
    with zero endowment, trading from `node`:

        min over strategies of E[(gains - 1)^2 | node].

    This is the global-projection definition of the opportunity level; the
    engine's backward recursion must match it node by node.
    """
    ones = {leaf: 1.0 for leaf in tree.leaves_below(node)}
    # include every leaf so the payoff lookup never misses
    payoff = {leaf: ones.get(leaf, 0.0) for leaf in tree.leaves}
    res = project_brute_force(tree, prices, payoff, 0.0, StoppingTime(frozenset({node})))
    return res.error_sq[node]
