"""Split a per-round resource budget between local training and gossip.

The closed-form rule spends as much as possible on communication and leaves
at least one training step.  Two search oracles sit beside it: a grid search
over the closed-form objective and an empirical search that simulates every
candidate split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import analysis as an
from . import topology as tp
from .engine import InfeasibleConfigError, RunConfig, budget_rounds, run_monte_carlo

__all__ = [
    "Budget",
    "AllocationResult",
    "GridCandidate",
    "GridSearchResult",
    "EmpiricalCandidate",
    "EmpiricalAllocation",
    "allocate_budget",
    "grid_search_allocate",
    "empirical_allocate",
]


@dataclass(frozen=True)
class Budget:
    """Per-update-round resource prices: one training step costs r1, one
    gossip round costs r2, and the whole round may spend at most r_c."""

    r1: float
    r2: float
    r_c: float

    def __post_init__(self) -> None:
        assert self.r1 > 0 and self.r2 > 0 and self.r_c > 0
        if self.r1 + self.r2 > self.r_c:
            raise InfeasibleConfigError(
                f"budget {self.r_c} cannot afford one training step ({self.r1}) "
                f"plus one gossip round ({self.r2})"
            )

    def cost(self, tau1: int, tau2: int) -> float:
        return tau1 * self.r1 + tau2 * self.r2

    def affordable(self, tau1: int, tau2: int) -> bool:
        return self.cost(tau1, tau2) <= self.r_c


@dataclass(frozen=True)
class AllocationResult:
    tau1: int
    tau2: int
    cost: float
    repaired: bool


def allocate_budget(budget: Budget) -> AllocationResult:
    """Closed-form split: maximize gossip rounds, then fill with training.

    The literal formula can overrun the budget when the remainder after the
    gossip spend cannot pay for the mandatory single training step; in that
    case one gossip round's worth of budget is given back and the result is
    flagged as repaired.
    """
    tau2 = int(budget.r_c // budget.r2)
    tau1 = max(1, int((budget.r_c - tau2 * budget.r2) // budget.r1))
    repaired = False
    if not budget.affordable(tau1, tau2):
        # Affordability of (1, 1) is guaranteed by the Budget validation, so
        # clamping covers the roundoff case where r_c - r1 lands one ulp
        # below a whole multiple of r2.
        tau2 = max(1, int((budget.r_c - budget.r1) // budget.r2))
        tau1 = 1
        repaired = True
    assert tau1 >= 1 and tau2 >= 1 and budget.affordable(tau1, tau2)
    return AllocationResult(tau1=tau1, tau2=tau2, cost=budget.cost(tau1, tau2), repaired=repaired)


@dataclass(frozen=True)
class GridCandidate:
    tau1: int
    tau2: int
    rounds: int
    bound_total: float


@dataclass(frozen=True)
class GridSearchResult:
    tau1: int
    tau2: int
    rounds: int
    bound_total: float
    table: tuple[GridCandidate, ...]


def grid_search_allocate(
    budget: Budget,
    template: an.BoundInputs,
    rounds_mode: str = "fixed",
    r_total: float | None = None,
    mixing: tp.MixingMatrix | np.ndarray | None = None,
) -> GridSearchResult:
    """Exhaustively minimize the digital gap bound over affordable splits.

    rounds_mode "fixed" keeps template.rounds for every candidate;
    "budget" derives the round count from a whole-run budget r_total, so
    cheaper splits buy more rounds.  When a mixing matrix is supplied the
    mixing-product norm is recomputed per candidate instead of reusing the
    template's value.  Ties prefer more gossip rounds, then fewer training
    steps.
    """
    if rounds_mode not in ("fixed", "budget"):
        raise ValueError("rounds_mode must be 'fixed' or 'budget'")
    if rounds_mode == "budget" and (r_total is None or r_total <= 0):
        raise ValueError("budget mode needs a positive whole-run r_total")

    table = []
    for tau1 in range(1, int(budget.r_c // budget.r1) + 1):
        for tau2 in range(1, int(budget.r_c // budget.r2) + 1):
            if not budget.affordable(tau1, tau2):
                continue
            if rounds_mode == "fixed":
                rounds = template.rounds
            else:
                rounds = int(r_total // budget.cost(tau1, tau2))
                if rounds < 2:
                    continue
            q2 = template.mixing_frob2
            if mixing is not None:
                q2 = an.mixing_frob2_from(mixing, tau2, rounds)
            b = replace(template, tau1=tau1, tau2=tau2, rounds=rounds, mixing_frob2=q2)
            table.append(
                GridCandidate(
                    tau1=tau1, tau2=tau2, rounds=rounds, bound_total=an.digital_gap_bound(b).total
                )
            )
    if not table:
        raise InfeasibleConfigError("no affordable split admits at least two rounds")
    best = min(table, key=lambda c: (c.bound_total, -c.tau2, c.tau1))
    return GridSearchResult(
        tau1=best.tau1,
        tau2=best.tau2,
        rounds=best.rounds,
        bound_total=best.bound_total,
        table=tuple(table),
    )


@dataclass(frozen=True)
class EmpiricalCandidate:
    tau1: int
    tau2: int
    rounds: int
    final_loss_mean: float
    final_loss_std: float
    failed: int


@dataclass(frozen=True)
class EmpiricalAllocation:
    tau1: int
    tau2: int
    final_loss_mean: float
    table: tuple[EmpiricalCandidate, ...]


def empirical_allocate(
    cfg: RunConfig,
    tau1_values: Sequence[int],
    tau2_values: Sequence[int],
    budget: Budget | None = None,
) -> EmpiricalAllocation:
    """Simulate every candidate split and return the argmin of mean final loss.

    Candidates that cannot afford a single update round under the stopping
    rule are recorded with a NaN loss and skipped by the argmin; if nothing
    is feasible the whole search raises.
    """
    assert len(tau1_values) >= 1 and len(tau2_values) >= 1
    table = []
    for tau1 in sorted(set(int(v) for v in tau1_values)):
        for tau2 in sorted(set(int(v) for v in tau2_values)):
            if budget is not None and not budget.affordable(tau1, tau2):
                continue
            sub = replace(cfg, tau1=tau1, tau2=tau2)
            try:
                rounds = sub.stopping.resolve(tau1, tau2)
                result = run_monte_carlo(sub)
            except InfeasibleConfigError:
                table.append(
                    EmpiricalCandidate(
                        tau1=tau1, tau2=tau2, rounds=0,
                        final_loss_mean=math.nan, final_loss_std=math.nan, failed=0,
                    )
                )
                continue
            table.append(
                EmpiricalCandidate(
                    tau1=tau1,
                    tau2=tau2,
                    rounds=rounds,
                    final_loss_mean=result.final_loss_mean,
                    final_loss_std=result.final_loss_std,
                    failed=len(result.failures),
                )
            )
    finite = [c for c in table if math.isfinite(c.final_loss_mean)]
    if not finite:
        raise InfeasibleConfigError("every candidate split was infeasible")
    best = min(finite, key=lambda c: (c.final_loss_mean, -c.tau2, c.tau1))
    return EmpiricalAllocation(
        tau1=best.tau1,
        tau2=best.tau2,
        final_loss_mean=best.final_loss_mean,
        table=tuple(table),
    )
