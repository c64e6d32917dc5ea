"""Joint training of the uplift network through the exact allocation layer.

Two modes share one loop.  The two-stage mode fits the prediction loss
plus the smoothness penalty and leaves allocation to evaluation time.
The end-to-end mode additionally solves the batch-level assignment
problem each step, scores it against the observed treatments with a
clamped cross-entropy, and back-propagates the assignment gradient
through the allocation layer's basis-decomposition backward pass into
the lift heads.  With a zero allocation weight the end-to-end mode
reproduces the two-stage parameter trajectory exactly.

Model selection: after every epoch the (pooled treated vs control) qini
of the predicted top-level revenue lift on the validation split is
recorded; training stops once it has not improved for ``patience``
epochs and the best epoch's parameters are restored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Dataset, minibatches
from .ilp_layer import ilp_backward
from .knapsack import AllocationProblem, AllocationSolution, solve_mckp
from .metrics import CurvePoints, aucc, auuc, budget_sweep_curve, eom, kendall_bins, mt_aucc, qini
from .model import UpliftNetwork

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "Adam",
    "allocation_loss",
    "batch_budget",
    "validation_qini",
    "train_e3ir",
    "train_two_stage",
    "evaluate",
    "BudgetMetrics",
    "EvaluationReport",
    "write_report_csv",
]

ASSIGNMENT_CLAMP = 1e-6


class TrainingDiverged(RuntimeError):
    """Raised when a loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training run."""

    mode: str = "e3ir"  # "e3ir" (joint) or "two_stage"
    alpha: float = 1.0  # smoothness penalty weight
    beta: float = 1.0   # allocation loss weight
    budget: float = 100.0
    learning_rate: float = 0.01
    batch_size: int = 256
    max_iterations: int = 30
    patience: int = 5
    seed: int = 0
    hidden_dims: Tuple[int, ...] = (64, 32)
    head_hidden: Tuple[int, ...] = (32,)
    embed_dim: int = 8
    weight_by_response: bool = False

    def __post_init__(self):
        if self.mode not in ("e3ir", "two_stage"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate and batch size must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_iterations < 1 or self.patience < 0:
            raise ValueError("iteration budget must be positive")


@dataclass
class TrainReport:
    """Per-epoch loss traces and the model-selection outcome."""

    prediction_losses: List[float] = field(default_factory=list)
    lipschitz_losses: List[float] = field(default_factory=list)
    allocation_losses: List[float] = field(default_factory=list)
    total_losses: List[float] = field(default_factory=list)
    validation_qini: List[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.total_losses)


class Adam:
    """Adaptive-moment first-order update with bias correction."""

    def __init__(self, params: Sequence[ad.Node], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Dict[ad.Node, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for j, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            self._m[j] = self.beta1 * self._m[j] + (1.0 - self.beta1) * g
            self._v[j] = self.beta2 * self._v[j] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[j] / correction1
            v_hat = self._v[j] / correction2
            p.value = p.value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def allocation_loss(
    solution: AllocationSolution, batch: Dataset, weight_by_response: bool = False
) -> Tuple[float, np.ndarray]:
    """Clamped cross-entropy between the hard assignment and the observed
    treatments, plus its gradient with respect to the assignment matrix.

    Row i contributes -log(clamp(z[i, t_i], 1e-6, 1)) / N and the gradient
    puts -1 / (N * max(z[i, t_i], 1e-6)) at the observed column.
    """
    z = solution.assignment
    if not np.array_equal(z.sum(axis=1), np.ones(z.shape[0])) or not np.all((z == 0) | (z == 1)):
        raise ValueError("assignment rows must be one-hot")
    t = np.asarray(batch.treatments, dtype=np.int64)
    if t.size != z.shape[0]:
        raise ValueError(f"assignment has {z.shape[0]} rows for {t.size} samples")
    n = t.size
    weights = np.ones(n)
    if weight_by_response:
        weights = np.asarray(batch.revenue_responses, dtype=np.float64)
    rows = np.arange(n)
    hit = np.clip(z[rows, t], ASSIGNMENT_CLAMP, 1.0)
    value = float(np.mean(weights * -np.log(hit)))
    dz = np.zeros_like(z)
    dz[rows, t] = weights * (-1.0 / (n * np.maximum(z[rows, t], ASSIGNMENT_CLAMP)))
    return value, dz


def batch_budget(total_budget: float, batch_len: int, n_train: int) -> float:
    """Global budget scaled by the batch fraction; epoch batches sum to it."""
    return total_budget * (batch_len / n_train)


def validation_qini(model: UpliftNetwork, valid: Dataset) -> float:
    """Qini of the top-level revenue lift, pooling all treated levels."""
    lifts = model.uplift(valid.features)
    score = lifts.tau_revenue[:, model.num_treatments]
    pooled = (valid.treatments >= 1).astype(np.int64)
    return qini(score, pooled, valid.revenue_responses)


def train_e3ir(train: Dataset, valid: Dataset, config: TrainConfig) -> Tuple[UpliftNetwork, TrainReport]:
    """Joint training: prediction + smoothness + allocation gradients."""
    if config.mode != "e3ir":
        raise ValueError(f"config mode is {config.mode!r}, expected 'e3ir'")
    return _fit(train, valid, config, with_allocation=True)


def train_two_stage(train: Dataset, valid: Dataset, config: TrainConfig) -> Tuple[UpliftNetwork, TrainReport]:
    """Prediction-only training; allocation happens post hoc at evaluation."""
    if config.mode != "two_stage":
        raise ValueError(f"config mode is {config.mode!r}, expected 'two_stage'")
    return _fit(train, valid, config, with_allocation=False)


def _fit(
    train: Dataset, valid: Dataset, config: TrainConfig, with_allocation: bool
) -> Tuple[UpliftNetwork, TrainReport]:
    model = UpliftNetwork(
        feature_dim=train.feature_dim,
        num_treatments=train.num_treatments,
        hidden_dims=config.hidden_dims,
        embed_dim=config.embed_dim,
        head_hidden=config.head_hidden,
        seed=config.seed,
    )
    optimizer = Adam(model.parameters(), config.learning_rate)
    n_train = len(train)
    report = TrainReport()
    best_metric = -np.inf
    best_state: Dict[str, np.ndarray] | None = None

    for epoch in range(config.max_iterations):
        batches = minibatches(train, config.batch_size, seed=config.seed * 100003 + epoch)
        pred_sum = lip_sum = alloc_sum = 0.0
        for batch in batches:
            weight = len(batch) / n_train
            if config.alpha > 0:
                model.refresh_power_iterates()
            graph = model.build_graph(batch.features)
            pred_node = graph.prediction_loss_node(batch)
            loss_node = pred_node
            lip_value = 0.0
            if config.alpha > 0:
                lip_node = model.lipschitz_node()
                lip_value = float(lip_node.value[0, 0])
                loss_node = ad.add(pred_node, ad.scale(lip_node, config.alpha))
            seeds: Dict[ad.Node, np.ndarray] = {loss_node: np.ones((1, 1))}

            alloc_value = 0.0
            if with_allocation:
                problem = AllocationProblem(
                    tau_revenue=graph.tau_revenue.value,
                    tau_cost=graph.tau_cost.value,
                    budget=batch_budget(config.budget, len(batch), n_train),
                )
                solution = solve_mckp(problem)
                alloc_value, dz = allocation_loss(solution, batch, config.weight_by_response)
                if config.beta > 0:
                    packet = ilp_backward(
                        dz, solution.assignment, problem.tau_cost, problem.tau_revenue, problem.budget
                    )
                    seeds[graph.tau_cost] = config.beta * packet.d_tau_cost
                    seeds[graph.tau_revenue] = config.beta * packet.d_tau_revenue

            pred_value = float(pred_node.value[0, 0])
            batch_total = pred_value + config.alpha * lip_value + config.beta * alloc_value
            if not np.isfinite(batch_total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: prediction={pred_value}, "
                    f"smoothness={lip_value}, allocation={alloc_value}"
                )
            grads = ad.backward(seeds)
            optimizer.step(grads)
            pred_sum += weight * pred_value
            lip_sum += weight * lip_value
            alloc_sum += weight * alloc_value

        report.prediction_losses.append(pred_sum)
        report.lipschitz_losses.append(lip_sum)
        report.allocation_losses.append(alloc_sum)
        report.total_losses.append(pred_sum + config.alpha * lip_sum + config.beta * alloc_sum)

        metric = validation_qini(model, valid)
        report.validation_qini.append(metric)
        if metric > best_metric:
            best_metric = metric
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            report.best_epoch = epoch
        elif epoch - report.best_epoch >= config.patience:
            report.stopped_early = True
            break

    if best_state is not None:
        model.load_state(best_state)
    return model, report


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetMetrics:
    """Allocation quality of the exact assignment at one budget."""

    budget: float
    eom_revenue: float
    eom_cost: float
    predicted_objective: float
    predicted_spent: float


@dataclass(frozen=True)
class EvaluationReport:
    per_budget: Tuple[BudgetMetrics, ...]
    uplift_metrics: Dict[str, float]
    sweep_curve: CurvePoints


def evaluate(model: UpliftNetwork, test: Dataset, budgets: Sequence[float]) -> EvaluationReport:
    """Score-ranking metrics plus per-budget exact-allocation outcomes.

    Binary datasets report auuc/qini/kendall (lift score) and aucc
    (efficiency score); multi-treatment datasets report the
    multi-treatment cost-curve area.  Every budget gets the
    expected-outcome estimates of the assignment chosen by the exact
    solver on the predicted lifts.
    """
    lifts = model.uplift(test.features)
    k = model.num_treatments
    metrics: Dict[str, float] = {}
    if k == 1:
        score = lifts.tau_revenue[:, 1]
        metrics["auuc"] = auuc(score, test.treatments, test.revenue_responses)
        metrics["qini"] = qini(score, test.treatments, test.revenue_responses)
        metrics["kendall"] = kendall_bins(score, test.treatments, test.revenue_responses)
        with np.errstate(divide="ignore", invalid="ignore"):
            efficiency = np.where(
                lifts.tau_cost[:, 1] > 1e-12,
                lifts.tau_revenue[:, 1] / np.maximum(lifts.tau_cost[:, 1], 1e-12),
                np.inf,
            )
        metrics["aucc"] = aucc(efficiency, test.treatments, test.cost_responses, test.revenue_responses)
    else:
        metrics["mt_aucc"] = mt_aucc(
            lifts.tau_revenue,
            lifts.tau_cost,
            test.treatments,
            test.cost_responses,
            test.revenue_responses,
        )

    per_budget: List[BudgetMetrics] = []
    for budget in budgets:
        problem = AllocationProblem(
            tau_revenue=lifts.tau_revenue, tau_cost=lifts.tau_cost, budget=float(budget)
        )
        solution = solve_mckp(problem)
        policy = solution.chosen()
        per_budget.append(
            BudgetMetrics(
                budget=float(budget),
                eom_revenue=eom(policy, test.treatments, test.revenue_responses),
                eom_cost=eom(policy, test.treatments, test.cost_responses),
                predicted_objective=solution.objective,
                predicted_spent=solution.spent,
            )
        )

    sweep = budget_sweep_curve(
        lifts.tau_revenue,
        lifts.tau_cost,
        [float(b) for b in budgets],
        test.treatments,
        test.cost_responses,
        test.revenue_responses,
    )
    return EvaluationReport(
        per_budget=tuple(per_budget), uplift_metrics=metrics, sweep_curve=sweep
    )


def write_report_csv(report: TrainReport, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "prediction_loss", "lipschitz_loss", "allocation_loss", "total_loss", "validation_qini"]
        )
        for epoch in range(report.epochs):
            writer.writerow(
                [
                    str(epoch),
                    repr(report.prediction_losses[epoch]),
                    repr(report.lipschitz_losses[epoch]),
                    repr(report.allocation_losses[epoch]),
                    repr(report.total_losses[epoch]),
                    repr(report.validation_qini[epoch]),
                ]
            )
