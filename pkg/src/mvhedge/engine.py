"""Backward dynamic programming for quadratic hedging on event trees.

Per node (working backward from the leaves, where the opportunity level is 1):

    gram      A = E[ L' dS dS' | node ]          (d x d, PSD)
    drift     b = E[ L' dS     | node ]
    adjustment    a = A^+ b                      (minimum-norm)
    opportunity   L = E[ L' | node ] - b.a

with L' the child opportunity level and dS the one-step price increment.
The claim recursion, from V = payoff and eps^2 = 0 at the leaves:

    mean value    V   = E[ L' (1 - a.dS) V' | node ] / L
    pure hedge    xi  = A^+ c,   c = E[ L' dS (V' - V) | node ]
    error         eps^2 = E[eps'^2 | node] + E[ L' (V' - V)^2 | node ] - c.xi

The squared error is accumulated from per-step increments (each one is the
minimum of a nonnegative quadratic) rather than by differencing objective
values, so it never suffers catastrophic cancellation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .tree import AdaptedProcess, ClaimSpec, EventTree, StoppingTime, check_stopping_time

__all__ = [
    "OpportunityLayer",
    "HedgingSolution",
    "LawOfOnePriceError",
    "NumericalError",
    "compute_opportunity",
    "compute_hedge",
    "simulate_feedback",
    "decomposition_gap",
    "verify_orthogonality",
    "verify_candidate_opportunity",
    "L_ZERO_TOL",
]

# Below this the opportunity level counts as zero: some payoff of 1 is
# replicable at zero cost and mean values are undefined by division.
L_ZERO_TOL = 1e-12

# Relative eigenvalue cutoff shared by every pseudoinverse in the engine.
RANK_CUTOFF = 1e-12

# Negative squared errors beyond this tolerance are a numerical failure,
# above it they are clamped to zero.
NEG_EPS_TOL = 1e-12


class LawOfOnePriceError(ValueError):
    """Raised when a computation needs L > 0 and the tree does not have it."""


class NumericalError(ArithmeticError):
    """Raised when floating-point output violates a structural sign constraint."""


def _pinv_psd(mat: np.ndarray):
    """Pseudoinverse of a symmetric PSD matrix via eigendecomposition;
    eigenvalues below RANK_CUTOFF * max eigenvalue are treated as zero."""
    w, u = np.linalg.eigh(mat)
    top = float(w[-1]) if w.size else 0.0
    cut = RANK_CUTOFF * max(top, 0.0)
    keep = w > cut
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (u * inv) @ u.T, int(np.count_nonzero(keep))


@dataclass
class OpportunityLayer:
    """Per-node output of the opportunity recursion."""

    opportunity: Dict[object, float]  # L, in [0, 1]
    adjustment: Dict[object, np.ndarray]  # a, non-terminal nodes only
    gram: Dict[object, np.ndarray]  # A
    drift: Dict[object, np.ndarray]  # b
    gram_rank: Dict[object, int]
    gram_pinv: Dict[object, np.ndarray]  # cached A^+, same convention as `adjustment`


@dataclass
class HedgingSolution:
    """Per-node quadratic-hedging quantities for one claim, plus (after
    simulate_feedback) the realized strategy and wealth."""

    claim: ClaimSpec
    mean_value: Dict[object, float]  # V
    pure_hedge: Dict[object, np.ndarray]  # xi, non-terminal nodes only
    error_sq: Dict[object, float]  # eps^2 >= 0
    tau: Optional[StoppingTime] = None
    strategy: Optional[Dict[object, np.ndarray]] = None  # phi per traded node
    wealth: Optional[Dict[object, float]] = None  # X on nodes at/after tau


def compute_opportunity(tree: EventTree, prices: AdaptedProcess) -> OpportunityLayer:
    """Run the backward recursion for L and a over the whole tree.

    Purely deterministic dynamic programming; degenerate gram matrices are
    handled by the minimum-norm pseudoinverse, and a zero opportunity level
    is a legal output here (the verdict is spd-lop's business).
    """
    opportunity: Dict[object, float] = {}
    adjustment: Dict[object, np.ndarray] = {}
    gram: Dict[object, np.ndarray] = {}
    drift: Dict[object, np.ndarray] = {}
    gram_rank: Dict[object, int] = {}
    gram_pinv: Dict[object, np.ndarray] = {}

    d = prices.dim
    for leaf in tree.leaves:
        opportunity[leaf] = 1.0

    for t in range(tree.horizon - 1, -1, -1):
        for nid in tree.layers[t]:
            s0 = prices[nid]
            A = np.zeros((d, d))
            b = np.zeros(d)
            mean_next = 0.0
            for c in tree.children(nid):
                w = tree.prob(c) * opportunity[c]
                dS = prices[c] - s0
                A += w * np.outer(dS, dS)
                b += w * dS
                mean_next += w
            pinv, rank = _pinv_psd(A)
            a = pinv @ b
            level = mean_next - float(b @ a)
            if level < -NEG_EPS_TOL:
                raise NumericalError(f"opportunity level {level!r} at node {nid!r}")
            level = min(max(level, 0.0), 1.0)

            opportunity[nid] = level
            adjustment[nid] = a
            gram[nid] = A
            drift[nid] = b
            gram_rank[nid] = rank
            gram_pinv[nid] = pinv

    return OpportunityLayer(opportunity, adjustment, gram, drift, gram_rank, gram_pinv)


def compute_hedge(
    tree: EventTree,
    prices: AdaptedProcess,
    opp: OpportunityLayer,
    claim: ClaimSpec,
) -> HedgingSolution:
    """Backward recursion for the mean value V, pure hedge xi, and squared
    hedging error eps^2 of a claim.

    Refuses if L = 0 anywhere: the mean value is then undefined by division,
    i.e. the law of one price fails.
    """
    bad = [nid for nid, lv in opp.opportunity.items() if lv <= L_ZERO_TOL]
    if bad:
        raise LawOfOnePriceError(f"LOP failure: V undefined (L = 0 at nodes {sorted(bad)!r})")

    payoff = claim.payoff(tree, prices)
    mean_value: Dict[object, float] = {}
    pure_hedge: Dict[object, np.ndarray] = {}
    error_sq: Dict[object, float] = {}

    d = prices.dim
    for leaf in tree.leaves:
        mean_value[leaf] = payoff[leaf]
        error_sq[leaf] = 0.0

    for t in range(tree.horizon - 1, -1, -1):
        for nid in tree.layers[t]:
            s0 = prices[nid]
            a = opp.adjustment[nid]
            level = opp.opportunity[nid]

            num = 0.0
            for c in tree.children(nid):
                dS = prices[c] - s0
                num += tree.prob(c) * opp.opportunity[c] * (1.0 - float(a @ dS)) * mean_value[c]
            v = num / level

            cvec = np.zeros(d)
            spread = 0.0
            carried = 0.0
            for c in tree.children(nid):
                dS = prices[c] - s0
                w = tree.prob(c) * opp.opportunity[c]
                dv = mean_value[c] - v
                cvec += w * dv * dS
                spread += w * dv * dv
                carried += tree.prob(c) * error_sq[c]
            xi = opp.gram_pinv[nid] @ cvec

            step = spread - float(cvec @ xi)  # min of a nonneg quadratic
            if step < -NEG_EPS_TOL:
                raise NumericalError(f"negative error increment {step!r} at node {nid!r}")
            error_sq[nid] = carried + max(step, 0.0)
            mean_value[nid] = v
            pure_hedge[nid] = xi

    return HedgingSolution(claim=claim, mean_value=mean_value, pure_hedge=pure_hedge, error_sq=error_sq)


def simulate_feedback(
    tree: EventTree,
    prices: AdaptedProcess,
    opp: OpportunityLayer,
    sol: HedgingSolution,
    v,
    tau: StoppingTime,
) -> HedgingSolution:
    """Roll the feedback strategy forward from wealth v at tau:

        phi(node) = xi(node) + a(node) (V(node) - X(node)),
        X(child)  = X(node) + phi(node) . dS.

    `v` is a scalar or a mapping stop-node -> starting wealth.  Returns a new
    solution object carrying the strategy and wealth; the input is untouched.
    """
    if not check_stopping_time(tree, tau):
        raise ValueError("stop set is not a stopping time")

    wealth: Dict[object, float] = {}
    strategy: Dict[object, np.ndarray] = {}

    for n in tau.stop_nodes:
        wealth[n] = float(v[n]) if isinstance(v, dict) else float(v)

    for t in range(tree.horizon):
        for nid in tree.layers[t]:
            if nid not in wealth:
                continue
            x = wealth[nid]
            phi = sol.pure_hedge[nid] + opp.adjustment[nid] * (sol.mean_value[nid] - x)
            strategy[nid] = phi
            s0 = prices[nid]
            for c in tree.children(nid):
                wealth[c] = x + float(phi @ (prices[c] - s0))

    return dataclasses.replace(sol, tau=tau, strategy=strategy, wealth=wealth)


def decomposition_gap(
    tree: EventTree,
    prices: AdaptedProcess,
    opp: OpportunityLayer,
    run: HedgingSolution,
) -> float:
    """Worst violation of E[(X_T - H)^2 | stop node] =
    L (v - V)^2 + eps^2 over the stop set of the realized run."""
    if run.tau is None or run.wealth is None:
        raise ValueError("needs a solution produced by simulate_feedback")
    payoff = run.claim.payoff(tree, prices)
    worst = 0.0
    for n in run.tau.stop_nodes:
        ms = 0.0
        for leaf in tree.leaves_below(n):
            r = run.wealth[leaf] - payoff[leaf]
            ms += tree.prob_given(leaf, n) * r * r
        v = run.wealth[n]
        target = opp.opportunity[n] * (v - run.mean_value[n]) ** 2 + run.error_sq[n]
        worst = max(worst, abs(ms - target))
    return worst


def verify_orthogonality(
    tree: EventTree,
    prices: AdaptedProcess,
    sol: HedgingSolution,
    tau: StoppingTime,
) -> float:
    """Max over stop nodes and one-step bump strategies of
    |E[(X_T - H)(1 + bump gains) | stop node]|.

    Requires a solution realized by simulate_feedback with v = V at tau
    (the optimal residual); the bump basis is every (node, asset) unit
    strategy below the stop node, plus the zero strategy.
    """
    if sol.wealth is None or sol.tau is None:
        raise ValueError("needs a solution produced by simulate_feedback")
    if sol.tau.stop_nodes != tau.stop_nodes:
        raise ValueError("solution was realized for a different stopping time")

    payoff = sol.claim.payoff(tree, prices)
    d = prices.dim
    worst = 0.0

    for n in tau.stop_nodes:
        leaves = tree.leaves_below(n)
        w = np.array([tree.prob_given(leaf, n) for leaf in leaves])
        res = np.array([sol.wealth[leaf] - payoff[leaf] for leaf in leaves])
        base = float(np.dot(w, res))  # the zero-bump case E[R | n]
        worst = max(worst, abs(base))

        row_of = {leaf: r for r, leaf in enumerate(leaves)}
        for m in tree.subtree(n):
            if tree.is_leaf(m):
                continue
            sm = prices[m]
            gains = np.zeros((len(leaves), d))
            for c in tree.children(m):
                dS = prices[c] - sm
                for leaf in tree.leaves_below(c):
                    gains[row_of[leaf]] = dS
            # E[R * (1 + e_i . dS at m)] = base + weighted residual-gain dot
            for i in range(d):
                val = base + float(np.dot(w * res, gains[:, i]))
                worst = max(worst, abs(val))

    return worst


def verify_candidate_opportunity(
    tree: EventTree,
    prices: AdaptedProcess,
    candidate: AdaptedProcess,
    rel_tol: float = 1e-9,
) -> Dict[str, bool]:
    """Check a candidate opportunity process: positivity, terminal value 1,
    and the self-consistency identity L = E[L'|.] - b'.A'^+ b' with moments
    built from the candidate itself.  `is_maximal` additionally compares
    against the engine's recursion (equality within rel_tol required)."""
    d = prices.dim
    is_valid = True

    for leaf in tree.leaves:
        lv = candidate.scalar(leaf)
        if not np.isclose(lv, 1.0, rtol=rel_tol, atol=rel_tol):
            is_valid = False

    for t in range(tree.horizon - 1, -1, -1):
        for nid in tree.layers[t]:
            lv = candidate.scalar(nid)
            if lv <= 0.0:
                is_valid = False
                continue
            s0 = prices[nid]
            A = np.zeros((d, d))
            b = np.zeros(d)
            mean_next = 0.0
            for c in tree.children(nid):
                w = tree.prob(c) * candidate.scalar(c)
                dS = prices[c] - s0
                A += w * np.outer(dS, dS)
                b += w * dS
                mean_next += w
            pinv, _ = _pinv_psd(A)
            recomputed = mean_next - float(b @ (pinv @ b))
            if abs(recomputed - lv) > rel_tol * max(1.0, abs(lv)):
                is_valid = False

    reference = compute_opportunity(tree, prices)
    is_maximal = True
    for nid in tree.nodes:
        ref = reference.opportunity[nid]
        if abs(candidate.scalar(nid) - ref) > rel_tol * max(1.0, abs(ref)):
            is_maximal = False

    return {"is_valid": is_valid, "is_maximal": is_valid and is_maximal}
