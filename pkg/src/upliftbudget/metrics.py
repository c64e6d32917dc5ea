"""Ranking and policy-value metrics for randomized-trial uplift models.

Curve metrics (uplift, qini, cost curves) sort users by a model score,
accumulate group-separated prefix estimates and integrate.  Curve areas
are min-max normalized so that a random scorer lands at 0.5 and every
area lies in [0, 1]; rank metrics are invariant under strictly
increasing score transforms.  Score ties are broken by stable input
order, which matters because the uplift curve is tie-sensitive.

Policy value (the expected-outcome estimate) matches each user's
assigned treatment against the observed one and reweights by empirical
assignment frequencies within the policy cells, which is the
self-normalized inverse-propensity form; with every user matched it
reduces to the plain sample mean.

All functions are pure over immutable inputs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import stats

from .knapsack import AllocationProblem, solve_mckp

__all__ = [
    "MetricError",
    "ScoredSample",
    "CurvePoints",
    "auuc",
    "qini",
    "kendall_bins",
    "aucc",
    "mt_aucc",
    "eom",
    "score_cost_curve",
    "budget_sweep_curve",
    "write_curve_csv",
]

DEGENERATE_TOL = 1e-12


class MetricError(ValueError):
    """Raised when a metric's preconditions are not met by the data."""


@dataclass(frozen=True)
class ScoredSample:
    """One scored record: rank key plus observed trial outcome."""

    score: float
    treatment: int
    cost_response: float
    revenue_response: float


@dataclass(frozen=True)
class CurvePoints:
    """Ordered curve with strictly increasing x, starting at the origin."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        if self.xs.shape != self.ys.shape or self.xs.ndim != 1:
            raise MetricError(f"curve arrays must be equal-length vectors, got {self.xs.shape} and {self.ys.shape}")
        if self.xs.size:
            if self.xs[0] != 0.0 or self.ys[0] != 0.0:
                raise MetricError("curve must start at the origin")
            if np.any(np.diff(self.xs) <= 0):
                raise MetricError("curve x coordinates must be strictly increasing")

    def __len__(self) -> int:
        return self.xs.size


def write_curve_csv(curve: CurvePoints, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in zip(curve.xs, curve.ys):
            writer.writerow([repr(float(x)), repr(float(y))])


def _check_binary_groups(treatments: np.ndarray) -> None:
    levels = np.unique(treatments)
    if not np.all(np.isin(levels, (0, 1))):
        raise MetricError(f"binary metric got treatment levels {levels.tolist()}")
    if levels.size < 2:
        raise MetricError("need both treated and control samples")


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable on ties so equal scores keep input order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _prefix_lift(
    order: np.ndarray, treated: np.ndarray, outcomes: np.ndarray
) -> np.ndarray:
    """Group-separated lift estimate per prefix: (mean_t - mean_c) * size.

    Prefixes missing either group contribute 0.  Index 0 is the empty
    prefix.
    """
    t = treated[order].astype(np.float64)
    y = outcomes[order]
    nt = np.concatenate([[0.0], np.cumsum(t)])
    nc = np.concatenate([[0.0], np.cumsum(1.0 - t)])
    yt = np.concatenate([[0.0], np.cumsum(y * t)])
    yc = np.concatenate([[0.0], np.cumsum(y * (1.0 - t))])
    m = np.arange(order.size + 1, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        lift = (yt / nt - yc / nc) * m
    lift[(nt == 0) | (nc == 0)] = 0.0
    return lift


def _minmax_area(xs: np.ndarray, ys: np.ndarray) -> float:
    """Trapezoid area of the min-max normalized curve; flat curves give 0.5."""
    lo, hi = ys.min(), ys.max()
    if hi - lo < DEGENERATE_TOL:
        return 0.5
    return float(np.trapezoid((ys - lo) / (hi - lo), xs))


def auuc(scores, treatments, outcomes) -> float:
    """Normalized area under the uplift curve; random ordering sits at 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    _check_binary_groups(treatments)
    order = _descending_order(scores)
    lift = _prefix_lift(order, treatments == 1, outcomes)
    xs = np.arange(lift.size, dtype=np.float64) / (lift.size - 1)
    return _minmax_area(xs, lift)


def qini(scores, treatments, outcomes) -> float:
    """Qini coefficient: area between the control-scaled incremental-gain
    curve and the random diagonal, per capita."""
    scores = np.asarray(scores, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    _check_binary_groups(treatments)
    order = _descending_order(scores)
    t = (treatments[order] == 1).astype(np.float64)
    y = outcomes[order]
    nt = np.concatenate([[0.0], np.cumsum(t)])
    nc = np.concatenate([[0.0], np.cumsum(1.0 - t)])
    yt = np.concatenate([[0.0], np.cumsum(y * t)])
    yc = np.concatenate([[0.0], np.cumsum(y * (1.0 - t))])
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = yt - yc * (nt / nc)
    gain[nc == 0] = yt[nc == 0]
    n = order.size
    gain = gain / n
    xs = np.arange(n + 1, dtype=np.float64) / n
    return float(np.trapezoid(gain, xs) - gain[-1] / 2.0)


def kendall_bins(scores, treatments, outcomes, bins: int = 10) -> float:
    """Kendall rank correlation between per-bin mean predicted and observed
    uplift over score-sorted bins; bins missing a group are dropped with a
    warning."""
    scores = np.asarray(scores, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    _check_binary_groups(treatments)
    if scores.size < bins:
        raise MetricError(f"need at least {bins} samples for {bins} bins, got {scores.size}")
    order = _descending_order(scores)
    predicted: List[float] = []
    observed: List[float] = []
    for chunk in np.array_split(order, bins):
        t = treatments[chunk]
        y = outcomes[chunk]
        if not (t == 1).any() or not (t == 0).any():
            warnings.warn("dropping a score bin lacking treated or control samples")
            continue
        predicted.append(float(scores[chunk].mean()))
        observed.append(float(y[t == 1].mean() - y[t == 0].mean()))
    if len(predicted) < 2:
        raise MetricError("fewer than two usable bins for the rank correlation")
    return float(stats.kendalltau(predicted, observed).statistic)


def _strictly_increasing(xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Keep the origin plus points advancing the x coordinate."""
    keep = [0]
    last = xs[0]
    for j in range(1, xs.size):
        if xs[j] > last:
            keep.append(j)
            last = xs[j]
    idx = np.asarray(keep)
    return xs[idx], ys[idx]


def _cost_response_prefix_curve(
    scores: np.ndarray, treatments: np.ndarray, cost_responses: np.ndarray, revenue_responses: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    order = _descending_order(scores)
    treated = treatments == 1
    xs = _prefix_lift(order, treated, cost_responses)
    ys = _prefix_lift(order, treated, revenue_responses)
    return _strictly_increasing(xs, ys)


def aucc(scores, treatments, cost_responses, revenue_responses) -> float:
    """Normalized area under the incremental cost vs incremental response
    curve induced by the score ordering; random ordering sits at 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    cost_responses = np.asarray(cost_responses, dtype=np.float64)
    revenue_responses = np.asarray(revenue_responses, dtype=np.float64)
    _check_binary_groups(treatments)
    xs, ys = _cost_response_prefix_curve(scores, treatments, cost_responses, revenue_responses)
    if xs[-1] <= DEGENERATE_TOL:
        raise MetricError("degenerate cost curve: total incremental cost is not positive")
    return _minmax_area(xs / xs[-1], ys)


def score_cost_curve(scores, treatments, cost_responses, revenue_responses) -> CurvePoints:
    """Raw (unnormalized) cost-curve points backing ``aucc``."""
    scores = np.asarray(scores, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    _check_binary_groups(treatments)
    xs, ys = _cost_response_prefix_curve(
        scores,
        treatments,
        np.asarray(cost_responses, dtype=np.float64),
        np.asarray(revenue_responses, dtype=np.float64),
    )
    return CurvePoints(xs=xs, ys=ys)


def eom(policy, treatments, outcomes) -> float:
    """Expected outcome of a policy from randomized-trial data.

    Users whose observed treatment matches the assignment are matched;
    each policy cell is estimated by the mean outcome of its matched
    users, cells are combined by assignment mass, and cells without any
    matched user drop out of the normalization.  Equivalent to
    self-normalized inverse-propensity weighting with within-cell
    empirical propensities.
    """
    policy = np.asarray(policy, dtype=np.int64)
    treatments = np.asarray(treatments, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if policy.shape != treatments.shape:
        raise MetricError(f"policy shape {policy.shape} vs treatments {treatments.shape}")
    matched = policy == treatments
    if not matched.any():
        raise MetricError("policy unsupported by data: no assignment matches an observation")
    numerator = 0.0
    mass = 0.0
    for level in np.unique(policy):
        cell = policy == level
        hit = cell & matched
        hits = int(hit.sum())
        if hits == 0:
            continue
        cell_size = int(cell.sum())
        numerator += outcomes[hit].sum() * (cell_size / hits)
        mass += cell_size
    return float(numerator / mass)


def _policy_from_included(included_flat: np.ndarray, n: int, k: int) -> np.ndarray:
    mask = included_flat.reshape(n, k)
    levels = np.arange(1, k + 1)
    return (mask * levels[None, :]).max(axis=1)


def _mt_curve_from_order(
    order: np.ndarray,
    num_users: int,
    num_treatments: int,
    treatments: np.ndarray,
    cost_responses: np.ndarray,
    revenue_responses: np.ndarray,
    grid: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Incremental cost/response estimates along a (user, level) ordering."""
    control_cost = float(cost_responses[treatments == 0].mean())
    control_revenue = float(revenue_responses[treatments == 0].mean())
    total = order.size
    counts = np.unique(np.linspace(0, total, min(grid, total) + 1).astype(np.int64))
    xs = [0.0]
    ys = [0.0]
    included = np.zeros(total, dtype=bool)
    for m in counts[1:]:
        included[:] = False
        included[order[:m]] = True
        policy = _policy_from_included(included, num_users, num_treatments)
        xs.append(eom(policy, treatments, cost_responses) - control_cost)
        ys.append(eom(policy, treatments, revenue_responses) - control_revenue)
    return _strictly_increasing(np.asarray(xs), np.asarray(ys))


def mt_aucc(
    tau_revenue,
    tau_cost,
    treatments,
    cost_responses,
    revenue_responses,
    grid: int = 100,
) -> float:
    """Multi-treatment cost-curve area over (user, level) candidates ranked
    by predicted marginal efficiency between adjacent levels.

    With a single treatment this reduces to (and exactly delegates to)
    ``aucc`` with the efficiency ratio as the score.
    """
    tau_revenue = np.asarray(tau_revenue, dtype=np.float64)
    tau_cost = np.asarray(tau_cost, dtype=np.float64)
    treatments = np.asarray(treatments, dtype=np.int64)
    cost_responses = np.asarray(cost_responses, dtype=np.float64)
    revenue_responses = np.asarray(revenue_responses, dtype=np.float64)
    n, k1 = tau_revenue.shape
    num_treatments = k1 - 1
    if (treatments == 0).sum() == 0:
        raise MetricError("need control samples")
    marginal_value = np.diff(tau_revenue, axis=1)
    marginal_cost = np.diff(tau_cost, axis=1)
    efficiency = _efficiency(marginal_value, marginal_cost)
    if num_treatments == 1:
        return aucc(efficiency[:, 0], treatments, cost_responses, revenue_responses)
    order = _descending_order(efficiency.ravel())
    xs, ys = _mt_curve_from_order(
        order, n, num_treatments, treatments, cost_responses, revenue_responses, grid
    )
    if xs[-1] <= DEGENERATE_TOL:
        raise MetricError("degenerate cost curve: total incremental cost is not positive")
    return _minmax_area(xs / xs[-1], ys)


def _efficiency(marginal_value: np.ndarray, marginal_cost: np.ndarray) -> np.ndarray:
    eff = np.full(marginal_value.shape, -np.inf)
    positive = marginal_cost > DEGENERATE_TOL
    eff[positive] = marginal_value[positive] / marginal_cost[positive]
    free = ~positive & (marginal_value > 0)
    eff[free] = np.inf
    zero = ~positive & (marginal_value <= 0)
    eff[zero] = 0.0
    return eff


def budget_sweep_curve(
    tau_revenue,
    tau_cost,
    budgets: Sequence[float],
    treatments,
    cost_responses,
    revenue_responses,
) -> CurvePoints:
    """Realized incremental cost vs estimated incremental response of the
    exact allocation at each budget in the grid; empty grid, empty curve."""
    budgets = sorted(float(b) for b in budgets)
    if not budgets:
        return CurvePoints(xs=np.zeros(0), ys=np.zeros(0))
    treatments = np.asarray(treatments, dtype=np.int64)
    cost_responses = np.asarray(cost_responses, dtype=np.float64)
    revenue_responses = np.asarray(revenue_responses, dtype=np.float64)
    control_cost = float(cost_responses[treatments == 0].mean())
    control_revenue = float(revenue_responses[treatments == 0].mean())
    xs = [0.0]
    ys = [0.0]
    for budget in budgets:
        problem = AllocationProblem(
            tau_revenue=np.asarray(tau_revenue, dtype=np.float64),
            tau_cost=np.asarray(tau_cost, dtype=np.float64),
            budget=budget,
        )
        policy = solve_mckp(problem).chosen()
        xs.append(eom(policy, treatments, cost_responses) - control_cost)
        ys.append(eom(policy, treatments, revenue_responses) - control_revenue)
    fx, fy = _strictly_increasing(np.asarray(xs), np.asarray(ys))
    return CurvePoints(xs=fx, ys=fy)
