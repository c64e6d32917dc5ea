"""Backward pass for the exact allocation layer.

The forward pass is an integer solve (see ``knapsack``), so there is no
classical Jacobian.  Instead, an incoming assignment gradient dz is
decomposed into a non-negative combination of signed integer directions
(one per dominant coordinate, cumulatively), each direction proposes a
neighbouring assignment z' = z - delta, and piecewise-affine mismatch
penalties measure how the lift matrices would have to move to make z'
win.  Summing the penalty gradients with the decomposition weights
yields d(tau_cost) and d(tau_revenue).  The budget is a modelling
constant and its gradient is fixed at zero.

Neighbours that leave the one-hot assignment space contribute nothing,
which keeps the scalar decomposition sound for the multi-choice layout.
The whole map dz -> (d tau_cost, d tau_revenue) is positively
homogeneous.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

__all__ = [
    "GradientPacket",
    "BasisDecomposition",
    "NeighborPoint",
    "build_basis",
    "hyperplane_distance",
    "neighbor_point",
    "constraint_mismatch",
    "objective_mismatch",
    "ilp_backward",
]

DEGENERATE_NORM = 1e-12
ZERO_COORD_TOL = 1e-12
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class GradientPacket:
    """Outgoing lift-matrix gradients; the budget gradient is always zero."""

    d_tau_cost: np.ndarray
    d_tau_revenue: np.ndarray
    d_budget: float = 0.0


@dataclass(frozen=True)
class BasisDecomposition:
    """Non-negative weights and signed {-1,0,1} directions reconstructing dz."""

    lambdas: np.ndarray  # (m,) all >= 0
    deltas: np.ndarray   # (m, *dz.shape) entries in {-1, 0, 1}

    def __len__(self) -> int:
        return self.lambdas.size

    def reconstruct(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(self.deltas.shape[1:])
        return np.tensordot(self.lambdas, self.deltas, axes=1)


@dataclass(frozen=True)
class NeighborPoint:
    """Candidate assignment z' = z - delta with computed membership flags."""

    point: np.ndarray
    in_choice_set: bool  # every row one-hot with 0/1 entries
    feasible: bool       # cost(point) <= budget + guard


def build_basis(dz: np.ndarray) -> BasisDecomposition:
    """Decompose dz over cumulative signed indicators of its dominant coords.

    Coordinates are ranked by |dz| descending (stable, ties by flattened
    index); direction i flips the first i ranked coordinates toward
    -sign(dz); weight i is the |dz| gap to the next ranked coordinate.
    Coordinates with |dz| below 1e-12 are dropped.  The weighted sum of
    directions reproduces dz exactly (up to float addition error).
    """
    dz = np.asarray(dz, dtype=np.float64)
    if not np.all(np.isfinite(dz)):
        raise ValueError("dz contains non-finite entries")
    flat = dz.ravel()
    mags = np.abs(flat)
    ranked = np.argsort(-mags, kind="stable")
    keep = mags[ranked] > ZERO_COORD_TOL
    ranked = ranked[keep]
    m = ranked.size
    if m == 0:
        return BasisDecomposition(
            lambdas=np.zeros(0), deltas=np.zeros((0, *dz.shape), dtype=np.int8)
        )
    sorted_mags = mags[ranked]
    lambdas = np.empty(m)
    lambdas[:-1] = sorted_mags[:-1] - sorted_mags[1:]
    lambdas[-1] = sorted_mags[-1]

    signs = np.sign(flat[ranked]).astype(np.int8)
    deltas = np.zeros((m, flat.size), dtype=np.int8)
    for i in range(m):
        deltas[i:, ranked[i]] = signs[i]  # direction j flips ranked coords 0..j
    return BasisDecomposition(lambdas=lambdas, deltas=deltas.reshape(m, *dz.shape))


def hyperplane_distance(tau_cost: np.ndarray, budget: float, z_point: np.ndarray) -> float:
    """Euclidean distance |tau_cost . z - budget| / ||tau_cost||, flattened.

    A vanishing cost vector is degenerate and yields 0.
    """
    tc = np.asarray(tau_cost, dtype=np.float64).ravel()
    zp = np.asarray(z_point, dtype=np.float64).ravel()
    norm = np.linalg.norm(tc)
    if norm <= DEGENERATE_NORM:
        return 0.0
    return float(abs(tc @ zp - budget) / norm)


def neighbor_point(
    z: np.ndarray, delta: np.ndarray, tau_cost: np.ndarray, budget: float
) -> NeighborPoint:
    """Form z' = z - delta and compute (never assume) its flags."""
    point = np.asarray(z, dtype=np.float64) - np.asarray(delta, dtype=np.float64)
    entries_binary = bool(np.all((point == 0.0) | (point == 1.0)))
    rows_one_hot = bool(np.all(point.sum(axis=1) == 1.0)) if point.ndim == 2 else False
    in_set = entries_binary and rows_one_hot
    spent = float(np.sum(np.asarray(tau_cost, dtype=np.float64) * point))
    return NeighborPoint(
        point=point,
        in_choice_set=in_set,
        feasible=spent <= budget + FEASIBILITY_TOL,
    )


def _distance_gradient(tau_cost: np.ndarray, budget: float, point: np.ndarray) -> np.ndarray:
    """Closed-form d dist / d tau_cost at the given point.

    With u = tau_cost . p - B: sign(u) * p / ||tau|| - |u| * tau / ||tau||^3,
    using the symmetric subgradient sign(0) = 0 at the kink.
    """
    tc = tau_cost.ravel()
    p = point.ravel()
    norm = np.linalg.norm(tc)
    if norm <= DEGENERATE_NORM:
        return np.zeros_like(tau_cost)
    u = float(tc @ p - budget)
    grad = np.sign(u) * p / norm - abs(u) * tc / norm**3
    return grad.reshape(tau_cost.shape)


def constraint_mismatch(
    z_prime: NeighborPoint, z: np.ndarray, tau_cost: np.ndarray, budget: float
) -> Tuple[float, np.ndarray]:
    """Cost-side mismatch penalty and its gradient with respect to tau_cost.

    A feasible distinct in-set neighbour is penalized by the distance of
    the current solution to the budget hyperplane; an infeasible in-set
    neighbour by its own distance; anything else contributes zero.
    """
    tau_cost = np.asarray(tau_cost, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not z_prime.in_choice_set or np.array_equal(z_prime.point, z):
        return 0.0, np.zeros_like(tau_cost)
    if z_prime.feasible:
        ref = z
    else:
        ref = z_prime.point
    value = hyperplane_distance(tau_cost, budget, ref)
    return value, _distance_gradient(tau_cost, budget, ref)


def objective_mismatch(
    z_prime: NeighborPoint, z: np.ndarray, tau_revenue: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Revenue-side mismatch: prefer the neighbour when it is attainable.

    Value tau_revenue . (z' - z) with gradient (z' - z) for feasible
    in-set neighbours, zero otherwise.
    """
    tau_revenue = np.asarray(tau_revenue, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not z_prime.in_choice_set or not z_prime.feasible:
        return 0.0, np.zeros_like(tau_revenue)
    direction = z_prime.point - z
    return float(np.sum(tau_revenue * direction)), direction


def ilp_backward(
    dz: np.ndarray,
    z: np.ndarray,
    tau_cost: np.ndarray,
    tau_revenue: np.ndarray,
    budget: float,
) -> GradientPacket:
    """Assemble lift-matrix gradients from an incoming assignment gradient.

    ``z`` must be the forward solver's assignment for (tau_cost,
    tau_revenue, budget).
    """
    dz = np.asarray(dz, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    tau_cost = np.asarray(tau_cost, dtype=np.float64)
    tau_revenue = np.asarray(tau_revenue, dtype=np.float64)
    if not (dz.shape == z.shape == tau_cost.shape == tau_revenue.shape):
        raise ValueError(
            f"shape mismatch: dz {dz.shape}, z {z.shape}, "
            f"tau_cost {tau_cost.shape}, tau_revenue {tau_revenue.shape}"
        )
    basis = build_basis(dz)
    d_cost = np.zeros_like(tau_cost)
    d_revenue = np.zeros_like(tau_revenue)
    for lam, delta in zip(basis.lambdas, basis.deltas):
        if lam == 0.0:
            continue
        neighbor = neighbor_point(z, delta, tau_cost, budget)
        _, grad_cost = constraint_mismatch(neighbor, z, tau_cost, budget)
        _, grad_revenue = objective_mismatch(neighbor, z, tau_revenue)
        d_cost += lam * grad_cost
        d_revenue += lam * grad_revenue
    return GradientPacket(d_tau_cost=d_cost, d_tau_revenue=d_revenue, d_budget=0.0)
