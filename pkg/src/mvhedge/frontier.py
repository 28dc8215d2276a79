"""Conditional mean-variance frontier and maximal Sharpe ratio.

All of it runs off the per-stop-node triple (L, V, eps^2): minimal variance
at conditional mean m is

    Var = eps^2 + L/(1-L) (m - V)^2        (0/0 = 0),

the frontier degenerates to the single point (V, eps^2) when L = 1, and a
claim trading at price pi admits the maximal squared Sharpe ratio

    rho^2 = 1/L - 1 + (pi - V)^2 / eps^2   (0/0 = 0),

attained with claim position eta = ((pi - V)/eps^2) / (1 + rho^2) next to a
feedback hedge of the payoff 1 - eta (pi - H) started from zero wealth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .engine import HedgingSolution, OpportunityLayer, simulate_feedback
from .tree import AdaptedProcess, ClaimSpec, EventTree, StoppingTime

__all__ = [
    "FrontierParams",
    "SharpeResult",
    "FrontierCollapsedError",
    "frontier_variance",
    "frontier_payoff",
    "max_sharpe",
    "sharpe_attainment",
]

# A squared hedging error at or below this counts as exact replication for
# the Sharpe hypothesis check (values are clamped nonnegative upstream).
EPS_SQ_ZERO = 1e-15

# L within this of 1 counts as the collapsed frontier.
COLLAPSE_TOL = 1e-12


class FrontierCollapsedError(ValueError):
    """Mean target off the single feasible point of a collapsed frontier."""


@dataclass(frozen=True)
class FrontierParams:
    """The (L, V, eps^2) triple at one stop node."""

    opportunity: float  # L in (0, 1]
    mean_value: float  # V
    error_sq: float  # eps^2 >= 0

    @classmethod
    def at(cls, opp: OpportunityLayer, sol: HedgingSolution, node) -> "FrontierParams":
        return cls(
            opportunity=opp.opportunity[node],
            mean_value=sol.mean_value[node],
            error_sq=sol.error_sq[node],
        )


@dataclass(frozen=True)
class SharpeResult:
    """Maximal squared Sharpe ratio and the static claim position attaining
    it; `hedge_target` materializes the payoff 1 - eta (pi - H) whose
    zero-wealth feedback hedge completes the optimal position."""

    rho_sq: float
    claim_position: float  # eta
    price: float  # pi
    claim: Optional[ClaimSpec] = None

    def hedge_target(self, tree: EventTree, prices: AdaptedProcess) -> Dict[object, float]:
        if self.claim is None:
            raise ValueError("no claim attached to this result")
        payoff = self.claim.payoff(tree, prices)
        return {leaf: 1.0 - self.claim_position * (self.price - payoff[leaf]) for leaf in payoff}


def frontier_variance(m: float, params: FrontierParams) -> float:
    """Minimal conditional variance at conditional mean m.

    Raises FrontierCollapsedError when L = 1 and m differs from V: the
    frontier is then the single point (V, eps^2) and any other mean is
    infeasible.
    """
    l, v = params.opportunity, params.mean_value
    gap = m - v
    if l >= 1.0 - COLLAPSE_TOL:
        if abs(gap) > COLLAPSE_TOL * (1.0 + abs(v)):
            raise FrontierCollapsedError(
                f"frontier collapsed: mean infeasible (requested {m!r}, only {v!r} available)"
            )
        return params.error_sq
    return params.error_sq + l / (1.0 - l) * gap * gap


def frontier_payoff(
    tree: EventTree,
    prices: AdaptedProcess,
    opp: OpportunityLayer,
    sol: HedgingSolution,
    lam,
    tau: StoppingTime,
) -> Dict[object, float]:
    """Terminal payoff of the efficient portfolio indexed by lambda:

        W = H - (hedge gains of H from v = V)
              + (lambda - V) (1 - product of (1 - a.dS) from tau to T).

    `lam` is a scalar or mapping stop-node -> value.  The conditional mean
    comes out as lambda (1-L) + V L and the variance lands exactly on the
    frontier parabola; both are asserted in tests, not here.
    """
    payoff = sol.claim.payoff(tree, prices)
    v_at = {n: sol.mean_value[n] for n in tau.stop_nodes}
    run = simulate_feedback(tree, prices, opp, sol, v_at, tau)

    out: Dict[object, float] = {}
    for n in tau.stop_nodes:
        lam_n = float(lam[n]) if isinstance(lam, dict) else float(lam)
        v_n = sol.mean_value[n]
        for leaf in tree.leaves_below(n):
            prod = 1.0
            path = tree.path_from_root(leaf)
            for m, c in zip(path, path[1:]):
                if tree.time_of(m) < tree.time_of(n):
                    continue  # strategy switches on at the stop node
                prod *= 1.0 - float(opp.adjustment[m] @ (prices[c] - prices[m]))
            gains = run.wealth[leaf] - v_n
            out[leaf] = payoff[leaf] - gains + (lam_n - v_n) * (1.0 - prod)
    return out


def max_sharpe(pi: float, claim: Optional[ClaimSpec], params: FrontierParams) -> SharpeResult:
    """Maximal squared Sharpe ratio of a zero-cost position combining
    dynamic trading with a static position in a claim priced at pi.

    Conventions follow the frontier: 0/0 = 0, so pi = V on a replicable
    claim yields rho^2 = 1/L - 1 (the bound from trading alone) and a zero
    claim position.  A replicable claim priced off V is rejected: the
    squared Sharpe ratio grows without bound and no maximum exists.
    """
    l, v, e2 = params.opportunity, params.mean_value, params.error_sq
    gap = pi - v
    replicable = e2 <= EPS_SQ_ZERO
    priced_at_v = abs(gap) <= COLLAPSE_TOL * (1.0 + abs(v))

    if replicable and not priced_at_v:
        raise ValueError(
            "zero hedging error with mispriced claim: Sharpe ratio unbounded, refusing"
        )

    extra = 0.0 if (replicable or priced_at_v) else gap * gap / e2
    rho_sq = 1.0 / l - 1.0 + extra
    if replicable or priced_at_v:
        eta = 0.0
    else:
        eta = (gap / e2) / (1.0 + rho_sq)
    return SharpeResult(rho_sq=rho_sq, claim_position=eta, price=pi, claim=claim)


def sharpe_attainment(
    tree: EventTree,
    prices: AdaptedProcess,
    opp: OpportunityLayer,
    result: SharpeResult,
    tau: StoppingTime,
) -> Dict[object, float]:
    """Terminal wealth of the optimal zero-cost position:

        eta (pi - H) + (feedback hedge of 1 - eta (pi - H) from wealth 0).

    Returns the leaf payoff; its conditional Sharpe ratio reproduces
    sqrt(rho_sq) and tests hold it to that.
    """
    from .engine import compute_hedge  # local import keeps module load light

    target = result.hedge_target(tree, prices)
    sol = compute_hedge(tree, prices, opp, ClaimSpec.terminal(target))
    run = simulate_feedback(tree, prices, opp, sol, 0.0, tau)
    base = result.claim.payoff(tree, prices)

    out: Dict[object, float] = {}
    for n in tau.stop_nodes:
        for leaf in tree.leaves_below(n):
            static = result.claim_position * (result.price - base[leaf])
            out[leaf] = static + run.wealth[leaf]
    return out
