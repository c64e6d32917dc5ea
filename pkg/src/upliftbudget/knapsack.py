"""Exact and approximate solvers for budget-constrained incentive assignment.

The multi-choice problem: pick exactly one option per user (option 0 is
the zero-cost zero-value control) maximizing total revenue lift subject
to a shared budget on total cost lift.  ``solve_mckp`` is exact: a
root linear relaxation over per-user efficiency frontiers supplies a
dual ratio, a Lagrangian reduction eliminates options that provably
cannot beat the greedy incumbent, and a depth-first search over the few
surviving free users closes the gap.  ``solve_binary_knapsack`` is the
classic 0-1 depth-first branch-and-bound with a fractional bound.
``brute_force_oracle`` enumerates everything and is the test oracle.
``lagrangian_policy`` is the scalar-dual bisection used by two-stage
baselines.

All solvers are pure functions with deterministic tie-breaking (lowest
user index, then lowest option index), so repeated calls agree bit for
bit.  Costs are real-valued; feasibility uses a 1e-9 absolute guard
against accumulation noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

__all__ = [
    "AllocationProblem",
    "AllocationSolution",
    "LagrangianResult",
    "solve_binary_knapsack",
    "solve_mckp",
    "brute_force_oracle",
    "lagrangian_policy",
    "random_feasible_policy",
    "write_allocation_csv",
    "read_allocation_csv",
]

FEASIBILITY_TOL = 1e-9
ORACLE_LIMIT = 10**6


@dataclass(frozen=True)
class AllocationProblem:
    """One assignment instance: lift matrices (column 0 = control) and budget."""

    tau_revenue: np.ndarray  # n x (K+1)
    tau_cost: np.ndarray     # n x (K+1), >= 0
    budget: float

    def __post_init__(self):
        r, c = self.tau_revenue, self.tau_cost
        if r.shape != c.shape or r.ndim != 2 or r.shape[1] < 2:
            raise ValueError(f"lift matrices must share shape n x (K+1): {r.shape} vs {c.shape}")
        if np.any(c < 0):
            raise ValueError("cost lifts must be non-negative")
        if np.any(r[:, 0] != 0) or np.any(c[:, 0] != 0):
            raise ValueError("control column (index 0) must be identically zero")
        if not np.isfinite(self.budget) or self.budget < 0:
            raise ValueError(f"budget must be finite and >= 0, got {self.budget}")

    @property
    def num_users(self) -> int:
        return self.tau_revenue.shape[0]

    @property
    def num_options(self) -> int:
        return self.tau_revenue.shape[1]


@dataclass(frozen=True)
class AllocationSolution:
    """One-hot assignment with its canonical objective and spend."""

    assignment: np.ndarray  # n x (K+1), 0/1
    objective: float
    spent: float
    optimal: bool

    def chosen(self) -> np.ndarray:
        return self.assignment.argmax(axis=1)


@dataclass(frozen=True)
class LagrangianResult:
    """Scalar-dual policy: per-user argmax of revenue minus lam * cost."""

    lam: float
    assignment: np.ndarray
    objective: float
    spent: float


def _objective(problem: AllocationProblem, z: np.ndarray) -> float:
    return float(np.sum(problem.tau_revenue * z))


def _spent(problem: AllocationProblem, z: np.ndarray) -> float:
    return float(np.sum(problem.tau_cost * z))


def _one_hot(choices: np.ndarray, num_options: int) -> np.ndarray:
    z = np.zeros((choices.size, num_options))
    z[np.arange(choices.size), choices] = 1.0
    return z


def _solution(problem: AllocationProblem, choices: np.ndarray, optimal: bool) -> AllocationSolution:
    z = _one_hot(choices, problem.num_options)
    return AllocationSolution(
        assignment=z,
        objective=_objective(problem, z),
        spent=_spent(problem, z),
        optimal=optimal,
    )


# -- binary 0-1 knapsack ------------------------------------------------------------


def solve_binary_knapsack(problem: AllocationProblem) -> AllocationSolution:
    """Exact 0-1 knapsack (K = 1) by depth-first branch-and-bound.

    The upper bound at each node is the fractional relaxation of the
    remaining items in density order; the include branch is explored
    first.
    """
    if problem.num_options != 2:
        raise ValueError(f"binary solver needs exactly one treatment, got {problem.num_options - 1}")
    values = problem.tau_revenue[:, 1]
    costs = problem.tau_cost[:, 1]
    budget = problem.budget

    candidates = np.nonzero(values > 0)[0]
    if candidates.size == 0:
        return _solution(problem, np.zeros(problem.num_users, dtype=np.int64), True)
    v = values[candidates]
    c = costs[candidates]
    density = np.where(c > 0, v / np.where(c > 0, c, 1.0), np.inf)
    order = np.argsort(-density, kind="stable")
    v = v[order]
    c = c[order]
    m = v.size

    def bound(idx: int, slack: float, val: float) -> float:
        # Dantzig fractional relaxation over the density-ordered tail
        for j in range(idx, m):
            if c[j] <= slack:
                slack -= c[j]
                val += v[j]
            else:
                val += v[j] * (slack / c[j])
                break
        return val

    best_val = 0.0  # take nothing: always feasible
    best_take = np.zeros(m, dtype=bool)
    take = np.zeros(m, dtype=bool)
    # frames: (idx, phase, slack, val); phase 0 tries the include branch,
    # phase 1 resets the trail bit and tries the exclude branch
    stack: List[Tuple[int, int, float, float]] = [(0, 0, budget, 0.0)]
    while stack:
        idx, phase, slack, val = stack.pop()
        if idx == m:
            if val > best_val:
                best_val = val
                best_take = take.copy()
            continue
        if phase == 0:
            stack.append((idx, 1, slack, val))
            if c[idx] <= slack + FEASIBILITY_TOL:
                remaining = max(slack - c[idx], 0.0)
                included = val + v[idx]
                if bound(idx + 1, remaining, included) > best_val:
                    take[idx] = True
                    stack.append((idx + 1, 0, remaining, included))
        else:
            take[idx] = False
            if bound(idx + 1, slack, val) > best_val:
                stack.append((idx + 1, 0, slack, val))

    choices = np.zeros(problem.num_users, dtype=np.int64)
    choices[candidates[order[best_take]]] = 1
    return _solution(problem, choices, True)


# -- exact multi-choice solver --------------------------------------------------------


def _frontier(costs: np.ndarray, values: np.ndarray) -> List[int]:
    """Indices of the upper-left convex hull of the (cost, value) options."""
    order = sorted(range(costs.size), key=lambda k: (costs[k], -values[k], k))
    # pointwise-dominated removal: keep strictly increasing value along cost
    kept: List[int] = []
    for k in order:
        if not kept or values[k] > values[kept[-1]]:
            kept.append(k)
    # convex hull: slopes (value gain per cost) must decrease
    hull: List[int] = []
    for k in kept:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            lhs = (values[b] - values[a]) * (costs[k] - costs[b])
            rhs = (values[k] - values[b]) * (costs[b] - costs[a])
            if lhs <= rhs:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


def solve_mckp(problem: AllocationProblem) -> AllocationSolution:
    """Exact multi-choice knapsack assignment.

    Root LP over per-user frontiers gives the dual ratio and a greedy
    integral incumbent; options whose Lagrangian upper bound cannot beat
    the incumbent are eliminated, and depth-first search over the
    remaining free users certifies the optimum.
    """
    n, k1 = problem.num_users, problem.num_options
    tau_r, tau_c, budget = problem.tau_revenue, problem.tau_cost, problem.budget

    hulls = [_frontier(tau_c[i], tau_r[i]) for i in range(n)]
    start = np.array([hull[0] for hull in hulls], dtype=np.int64)

    increments: List[Tuple[float, int, int, int, float, float]] = []
    # (-ratio, user, hull position, option, dcost, dvalue)
    for i, hull in enumerate(hulls):
        for pos in range(1, len(hull)):
            a, b = hull[pos - 1], hull[pos]
            dc = float(tau_c[i, b] - tau_c[i, a])
            dv = float(tau_r[i, b] - tau_r[i, a])
            increments.append((-(dv / dc), i, pos, b, dc, dv))
    increments.sort(key=lambda item: (item[0], item[1], item[2]))

    choices = start.copy()
    spent = float(tau_c[np.arange(n), start].sum())
    ratio_star = None
    blocked = np.zeros(n, dtype=bool)
    for neg_ratio, user, pos, option, dc, dv in increments:
        # a user's hull steps arrive in order (equal ratios break by hull
        # position), so an upgrade is valid unless an earlier step failed
        if blocked[user]:
            continue
        if spent + dc <= budget + FEASIBILITY_TOL:
            choices[user] = option
            spent += dc
        else:
            if ratio_star is None:
                ratio_star = -neg_ratio  # dual ratio of the relaxation
            blocked[user] = True

    incumbent = _solution(problem, choices, True)
    if ratio_star is None:
        return incumbent  # every frontier step fit: the relaxation is integral

    scores = tau_r - ratio_star * tau_c
    row_best = scores.max(axis=1)

    # second incumbent: sequential dive picking each user's best dual score
    # among the options still affordable (control keeps it always feasible)
    dive = np.zeros(n, dtype=np.int64)
    slack = budget
    for i in range(n):
        affordable = tau_c[i] <= slack + FEASIBILITY_TOL
        masked = np.where(affordable, scores[i], -np.inf)
        dive[i] = int(np.argmax(masked))
        slack -= tau_c[i, dive[i]]
    dive_solution = _solution(problem, dive, True)
    if dive_solution.objective > incumbent.objective:
        incumbent = dive_solution

    lagrangian_value = float(row_best.sum() + ratio_star * budget)
    tol = 1e-12 * max(1.0, abs(lagrangian_value))
    upper = lagrangian_value + scores - row_best[:, None]

    # first pass caps the state width (a beam) purely to sharpen the
    # incumbent; the re-eliminated second pass is exact
    for exact in (False, True):
        surviving = upper > incumbent.objective + tol
        if not surviving.any(axis=1).all():
            return incumbent  # no option anywhere could beat the incumbent
        candidate = _solve_core(problem, hulls, surviving, incumbent.objective, tol,
                                beam=None if exact else 512)
        if candidate is not None and candidate.objective > incumbent.objective:
            incumbent = candidate
    return incumbent


def _solve_core(
    problem: AllocationProblem,
    hulls: List[List[int]],
    surviving: np.ndarray,
    incumbent_value: float,
    tol: float,
    beam: int | None,
) -> AllocationSolution | None:
    """Dynamic program over the users with several surviving options.

    States are Pareto-optimal (cost, value) pairs over prefix choices,
    pruned by feasibility and by the residual frontier relaxation against
    the incumbent.  ``beam`` caps the state width (heuristic pass); None
    runs exactly.  Returns the best completion found, or None.
    """
    n, k1 = problem.num_users, problem.num_options
    tau_r, tau_c, budget = problem.tau_revenue, problem.tau_cost, problem.budget

    counts = surviving.sum(axis=1)
    fixed_mask = counts == 1
    free_users = np.nonzero(~fixed_mask)[0]
    fixed_choice = np.where(fixed_mask, surviving.argmax(axis=1), 0)
    fixed_cost = float(tau_c[fixed_mask, fixed_choice[fixed_mask]].sum())
    fixed_value = float(tau_r[fixed_mask, fixed_choice[fixed_mask]].sum())

    if fixed_cost > budget + FEASIBILITY_TOL:
        # reduction fixed an infeasible combination; search all users instead
        free_users = np.arange(n)
        surviving = np.ones((n, k1), dtype=bool)
        fixed_choice = np.zeros(n, dtype=np.int64)
        fixed_cost = 0.0
        fixed_value = 0.0

    options = [np.nonzero(surviving[u])[0] for u in free_users]
    m = free_users.size
    min_cost = np.array([tau_c[u, opt].min() for u, opt in zip(free_users, options)])
    min_cost_suffix = np.concatenate([np.cumsum(min_cost[::-1])[::-1], [0.0]])

    # residual relaxation parts: free users' frontier steps in ratio order
    start_value = np.array([tau_r[u, hulls[u][0]] for u in free_users])
    start_suffix = np.concatenate([np.cumsum(start_value[::-1])[::-1], [0.0]])
    step_level: List[int] = []
    step_dc: List[float] = []
    step_dv: List[float] = []
    step_ratio: List[float] = []
    for level, u in enumerate(free_users):
        hull = hulls[u]
        for pos in range(1, len(hull)):
            dc = float(tau_c[u, hull[pos]] - tau_c[u, hull[pos - 1]])
            dv = float(tau_r[u, hull[pos]] - tau_r[u, hull[pos - 1]])
            step_level.append(level)
            step_dc.append(dc)
            step_dv.append(dv)
            step_ratio.append(-(dv / dc))
    ratio_order = np.lexsort((np.asarray(step_level), np.asarray(step_ratio)))
    slev = np.asarray(step_level, dtype=np.int64)[ratio_order]
    sdc = np.asarray(step_dc)[ratio_order]
    sdv = np.asarray(step_dv)[ratio_order]

    cost_state = np.array([fixed_cost])
    value_state = np.array([fixed_value])
    parents: List[np.ndarray] = []
    picks: List[np.ndarray] = []
    for level in range(m):
        u = int(free_users[level])
        opts = options[level]
        new_cost = (cost_state[:, None] + tau_c[u, opts][None, :]).ravel()
        new_value = (value_state[:, None] + tau_r[u, opts][None, :]).ravel()
        parent = np.repeat(np.arange(cost_state.size), opts.size)
        pick = np.tile(opts, cost_state.size)

        tail = slev > level
        relax_x = np.concatenate([[0.0], np.cumsum(sdc[tail])])
        relax_y = start_suffix[level + 1] + np.concatenate([[0.0], np.cumsum(sdv[tail])])
        feasible = new_cost + min_cost_suffix[level + 1] <= budget + FEASIBILITY_TOL
        bound = new_value + np.interp(budget - new_cost, relax_x, relax_y)
        keep = feasible & (bound > incumbent_value + tol)
        if not keep.any():
            return None
        new_cost, new_value, parent, pick, bound = (
            new_cost[keep], new_value[keep], parent[keep], pick[keep], bound[keep],
        )
        # Pareto filter: among states sorted by cost, keep strict value records
        order = np.lexsort((-new_value, new_cost))
        running = np.maximum.accumulate(new_value[order])
        first = np.ones(order.size, dtype=bool)
        first[1:] = new_value[order][1:] > running[:-1]
        order = order[first]
        if beam is not None and order.size > beam:
            top = np.argsort(-bound[order], kind="stable")[:beam]
            order = order[np.sort(top)]
        cost_state, value_state = new_cost[order], new_value[order]
        parents.append(parent[order])
        picks.append(pick[order])

    if value_state.size == 0 or value_state.max() <= incumbent_value:
        return None
    best_choices = fixed_choice.copy()
    state = int(np.argmax(value_state))
    for level in range(m - 1, -1, -1):
        best_choices[free_users[level]] = picks[level][state]
        state = int(parents[level][state])
    return _solution(problem, best_choices, True)


def brute_force_oracle(problem: AllocationProblem) -> AllocationSolution:
    """Exhaustive enumeration optimum; refuses instances beyond 10^6 points."""
    n, k1 = problem.num_users, problem.num_options
    total = k1**n
    if total > ORACLE_LIMIT:
        raise ValueError(f"instance too large for enumeration: {k1}^{n} > {ORACLE_LIMIT}")
    rows = np.arange(n)
    radix = k1 ** (n - 1 - rows)  # user 0 is the most significant digit
    best_value = -np.inf
    best_index = -1
    chunk = 65536
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(lo + chunk, total))
        choice = (codes[:, None] // radix[None, :]) % k1
        values = problem.tau_revenue[rows[None, :], choice].sum(axis=1)
        spends = problem.tau_cost[rows[None, :], choice].sum(axis=1)
        feasible = spends <= problem.budget + FEASIBILITY_TOL
        if not feasible.any():
            continue
        values = np.where(feasible, values, -np.inf)
        pick = int(np.argmax(values))
        if values[pick] > best_value:
            best_value = float(values[pick])
            best_index = int(codes[pick])
    choices = (best_index // radix) % k1
    return _solution(problem, choices.astype(np.int64), True)


# -- scalar-dual policy ---------------------------------------------------------------


def _dual_policy(problem: AllocationProblem, lam: float) -> np.ndarray:
    scores = problem.tau_revenue - lam * problem.tau_cost
    return scores.argmax(axis=1)


def lagrangian_policy(problem: AllocationProblem, tolerance: float) -> LagrangianResult:
    """Bisection on the scalar dual until the spend is within tolerance of
    the budget or the bracket collapses; returns the feasible endpoint."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")

    def result(lam: float) -> LagrangianResult:
        z = _one_hot(_dual_policy(problem, lam), problem.num_options)
        return LagrangianResult(
            lam=lam,
            assignment=z,
            objective=_objective(problem, z),
            spent=_spent(problem, z),
        )

    zero = result(0.0)
    if zero.spent <= problem.budget + FEASIBILITY_TOL:
        return zero

    positive = (problem.tau_cost > 0) & (problem.tau_revenue > 0)
    lam_hi = 1.0
    if positive.any():
        lam_hi = float((problem.tau_revenue[positive] / problem.tau_cost[positive]).max()) + 1.0
    lo, hi = 0.0, lam_hi
    feasible = result(hi)
    for _ in range(200):
        if hi - lo <= 1e-12 * max(1.0, lam_hi):
            break
        mid = 0.5 * (lo + hi)
        candidate = result(mid)
        if candidate.spent <= problem.budget + FEASIBILITY_TOL:
            hi = mid
            feasible = candidate
            if problem.budget - candidate.spent <= tolerance:
                break
        else:
            lo = mid
    return feasible


def random_feasible_policy(problem: AllocationProblem, seed: int) -> np.ndarray:
    """Uniform-random assignment kept feasible: users visited in random
    order draw a random treatment, falling back to control when it no
    longer fits the budget.  Baseline policy for evaluations."""
    rng = np.random.default_rng(seed)
    n, k1 = problem.num_users, problem.num_options
    choices = np.zeros(n, dtype=np.int64)
    spent = 0.0
    for user in rng.permutation(n):
        k = int(rng.integers(1, k1))
        cost = float(problem.tau_cost[user, k])
        if spent + cost <= problem.budget + FEASIBILITY_TOL:
            choices[user] = k
            spent += cost
    return _one_hot(choices, k1)


# -- CSV round trip ---------------------------------------------------------------------


def write_allocation_csv(problem: AllocationProblem, solution: AllocationSolution, path) -> None:
    """Row per user: revenue lift columns, cost lift columns, chosen option."""
    k1 = problem.num_options
    chosen = solution.chosen()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"tau_revenue_{k}" for k in range(k1)]
            + [f"tau_cost_{k}" for k in range(k1)]
            + ["chosen"]
        )
        for i in range(problem.num_users):
            writer.writerow(
                [repr(float(v)) for v in problem.tau_revenue[i]]
                + [repr(float(v)) for v in problem.tau_cost[i]]
                + [str(int(chosen[i]))]
            )


def read_allocation_csv(path, budget: float) -> Tuple[AllocationProblem, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k1 = sum(1 for name in header if name.startswith("tau_revenue_"))
        rows = list(reader)
    tau_r = np.array([[float(v) for v in row[:k1]] for row in rows])
    tau_c = np.array([[float(v) for v in row[k1 : 2 * k1]] for row in rows])
    chosen = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return AllocationProblem(tau_revenue=tau_r, tau_cost=tau_c, budget=budget), chosen
