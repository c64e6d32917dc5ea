"""Randomized-trial datasets: CSV ingestion, synthetic generation, splits.

A dataset stores one record per user from a randomized trial: a feature
vector, the assigned treatment level (0 = control), the observed cost
response and the observed revenue response.  Storage is columnar numpy
for the arithmetic-heavy consumers; ``Sample`` gives a per-row view.
Datasets are immutable after construction and safe for concurrent reads.

CSV wire format (canonical): UTF-8, comma separated, header row,
'.' decimal separator, columns ``f0..f{d-1},treatment,cost,response``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

__all__ = [
    "DataError",
    "Sample",
    "TrueCurves",
    "Dataset",
    "SplitSpec",
    "DataSchema",
    "synthetic_schema",
    "hillstrom_schema",
    "load_csv",
    "write_csv",
    "write_truth_csv",
    "load_truth_csv",
    "generate_synthetic",
    "true_revenue_curves",
    "true_cost_curves",
    "split",
    "minibatches",
    "standardize",
    "restrict_treatments",
]

COST_CURVE_EXPONENT = 1.2


class DataError(ValueError):
    """Structured ingestion/validation error; parse failures carry row numbers."""


@dataclass(frozen=True)
class Sample:
    """One randomized-trial record."""

    features: np.ndarray
    treatment: int
    cost_response: float
    revenue_response: float


@dataclass(frozen=True)
class TrueCurves:
    """Per-user ground-truth response and cost curves over levels 0..K.

    Both matrices are n x (K+1) and nondecreasing along the level axis;
    column 0 holds the no-treatment baselines.
    """

    revenue: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        if self.revenue.shape != self.cost.shape:
            raise DataError(
                f"curve shapes differ: {self.revenue.shape} vs {self.cost.shape}"
            )
        if np.any(np.diff(self.revenue, axis=1) < 0) or np.any(np.diff(self.cost, axis=1) < 0):
            raise DataError("ground-truth curves must be nondecreasing in the level")


@dataclass(frozen=True)
class Dataset:
    """Immutable randomized-trial dataset with K treatment levels plus control."""

    features: np.ndarray          # n x d float64
    treatments: np.ndarray        # n int64 in 0..K
    cost_responses: np.ndarray    # n float64, >= 0
    revenue_responses: np.ndarray # n float64
    num_treatments: int           # K
    response_kind: str = "continuous"
    cost_kind: str = "continuous"
    feature_names: Tuple[str, ...] = ()
    numeric_feature_mask: np.ndarray | None = None
    ground_truth: TrueCurves | None = None

    def __post_init__(self):
        n, d = self.features.shape
        if not (self.treatments.shape == self.cost_responses.shape == self.revenue_responses.shape == (n,)):
            raise DataError("column arrays must share the row count of features")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain non-finite values")
        if not np.all(np.isfinite(self.cost_responses)) or not np.all(np.isfinite(self.revenue_responses)):
            raise DataError("responses contain non-finite values")
        if np.any(self.cost_responses < 0):
            raise DataError("cost responses must be non-negative")
        if self.treatments.size and (self.treatments.min() < 0 or self.treatments.max() > self.num_treatments):
            raise DataError(
                f"treatment levels must lie in 0..{self.num_treatments}"
            )
        for kind in (self.response_kind, self.cost_kind):
            if kind not in ("continuous", "binary"):
                raise DataError(f"unknown loss kind {kind!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(
            features=self.features[i],
            treatment=int(self.treatments[i]),
            cost_response=float(self.cost_responses[i]),
            revenue_response=float(self.revenue_responses[i]),
        )

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Row-subset view sharing metadata; level coverage is not re-checked."""
        truth = self.ground_truth
        if truth is not None:
            truth = TrueCurves(revenue=truth.revenue[indices], cost=truth.cost[indices])
        return replace(
            self,
            features=self.features[indices],
            treatments=self.treatments[indices],
            cost_responses=self.cost_responses[indices],
            revenue_responses=self.revenue_responses[indices],
            ground_truth=truth,
        )


def _check_level_coverage(treatments: np.ndarray, num_treatments: int) -> None:
    present = set(np.unique(treatments).tolist())
    missing = [k for k in range(num_treatments + 1) if k not in present]
    if missing:
        raise DataError(f"treatment levels {missing} never appear in the data")


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic train/validation/test partition fractions."""

    train_fraction: float = 0.7
    validation_fraction: float = 0.2
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f <= 0 for f in fracs):
            raise DataError("split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions sum to {sum(fracs)}, expected 1")


@dataclass(frozen=True)
class DataSchema:
    """Column layout of a raw trial CSV.

    ``treatment_labels`` orders the accepted labels, position = level,
    position 0 = control; empty means integer-coded levels that are
    re-indexed to 0..K by sorted value.  Categorical features are one-hot
    encoded (categories sorted for determinism), numeric ones parsed as-is.
    """

    numeric_features: Tuple[str, ...]
    categorical_features: Tuple[str, ...] = ()
    treatment_column: str = "treatment"
    treatment_labels: Tuple[str, ...] = ()
    cost_column: str = "cost"
    response_column: str = "response"
    response_kind: str = "continuous"
    cost_kind: str = "continuous"


def synthetic_schema(feature_dim: int) -> DataSchema:
    """Canonical schema ``f0..f{d-1},treatment,cost,response``."""
    return DataSchema(numeric_features=tuple(f"f{i}" for i in range(feature_dim)))


def hillstrom_schema(variant: str = "all") -> DataSchema:
    """Schema for the e-mail merchandising trial export.

    ``variant`` selects the treatment arms present in the file: "all"
    (control + both e-mail campaigns), "men" or "women" (control + one
    campaign).  Spend is the revenue response, site visit the binary
    cost response.
    """
    labels = {
        "all": ("No E-Mail", "Mens E-Mail", "Womens E-Mail"),
        "men": ("No E-Mail", "Mens E-Mail"),
        "women": ("No E-Mail", "Womens E-Mail"),
    }
    if variant not in labels:
        raise DataError(f"unknown variant {variant!r}")
    return DataSchema(
        numeric_features=("recency", "history", "mens", "womens", "newbie"),
        categorical_features=("history_segment", "zip_code", "channel"),
        treatment_column="segment",
        treatment_labels=labels[variant],
        cost_column="visit",
        response_column="spend",
        response_kind="continuous",
        cost_kind="binary",
    )


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {text!r} in column {column!r}") from None


def load_csv(path, schema: DataSchema) -> Dataset:
    """Read a trial CSV under ``schema``; treatments re-indexed to 0..K."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = (
            list(schema.numeric_features)
            + list(schema.categorical_features)
            + [schema.treatment_column, schema.cost_column, schema.response_column]
        )
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"missing columns {missing} in {path.name}")
        rows = list(reader)
    if not rows:
        raise DataError(f"no samples in {path.name}")

    label_to_level: dict = {}
    raw_treatments: List[int] = []
    if schema.treatment_labels:
        label_to_level = {lab: k for k, lab in enumerate(schema.treatment_labels)}
        for i, row in enumerate(rows, start=2):
            label = row[schema.treatment_column]
            if label not in label_to_level:
                raise DataError(f"row {i}: unknown treatment label {label!r}")
            raw_treatments.append(label_to_level[label])
        num_treatments = len(schema.treatment_labels) - 1
        treatments = np.asarray(raw_treatments, dtype=np.int64)
    else:
        levels: List[int] = []
        for i, row in enumerate(rows, start=2):
            text = row[schema.treatment_column]
            try:
                levels.append(int(text))
            except ValueError:
                raise DataError(
                    f"row {i}: unknown treatment label {text!r}"
                ) from None
        uniq = sorted(set(levels))
        remap = {lev: k for k, lev in enumerate(uniq)}
        treatments = np.asarray([remap[lev] for lev in levels], dtype=np.int64)
        num_treatments = len(uniq) - 1

    categories = {
        col: sorted({row[col] for row in rows}) for col in schema.categorical_features
    }
    names: List[str] = list(schema.numeric_features)
    for col in schema.categorical_features:
        names.extend(f"{col}={val}" for val in categories[col])
    numeric_mask = np.zeros(len(names), dtype=bool)
    numeric_mask[: len(schema.numeric_features)] = True

    n = len(rows)
    features = np.zeros((n, len(names)))
    cost = np.zeros(n)
    revenue = np.zeros(n)
    for i, row in enumerate(rows):
        rownum = i + 2
        for j, col in enumerate(schema.numeric_features):
            features[i, j] = _parse_float(row[col], rownum, col)
        offset = len(schema.numeric_features)
        for col in schema.categorical_features:
            features[i, offset + categories[col].index(row[col])] = 1.0
            offset += len(categories[col])
        cost[i] = _parse_float(row[schema.cost_column], rownum, schema.cost_column)
        revenue[i] = _parse_float(row[schema.response_column], rownum, schema.response_column)

    _check_level_coverage(treatments, num_treatments)
    return Dataset(
        features=features,
        treatments=treatments,
        cost_responses=cost,
        revenue_responses=revenue,
        num_treatments=num_treatments,
        response_kind=schema.response_kind,
        cost_kind=schema.cost_kind,
        feature_names=tuple(names),
        numeric_feature_mask=numeric_mask,
    )


def write_csv(dataset: Dataset, path) -> None:
    """Emit the canonical schema; floats use shortest round-trip repr."""
    path = Path(path)
    d = dataset.feature_dim
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)] + ["treatment", "cost", "response"])
        for i in range(len(dataset)):
            writer.writerow(
                [repr(float(v)) for v in dataset.features[i]]
                + [
                    str(int(dataset.treatments[i])),
                    repr(float(dataset.cost_responses[i])),
                    repr(float(dataset.revenue_responses[i])),
                ]
            )


def write_truth_csv(curves: TrueCurves, path) -> None:
    path = Path(path)
    k1 = curves.revenue.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"revenue_{k}" for k in range(k1)] + [f"cost_{k}" for k in range(k1)])
        for i in range(curves.revenue.shape[0]):
            writer.writerow(
                [repr(float(v)) for v in curves.revenue[i]]
                + [repr(float(v)) for v in curves.cost[i]]
            )


def load_truth_csv(path) -> TrueCurves:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"no samples in {path.name}")
        k1 = sum(1 for name in header if name.startswith("revenue_"))
        rows = [[float(v) for v in row] for row in reader]
    if not rows:
        raise DataError(f"no samples in {path.name}")
    arr = np.asarray(rows)
    return TrueCurves(revenue=arr[:, :k1], cost=arr[:, k1:])


def true_revenue_curves(baseline, sensitivity, saturation, num_treatments: int) -> np.ndarray:
    """Saturating-exponential revenue curves f(k) = f0 + a (1 - exp(-b k))."""
    k = np.arange(num_treatments + 1)
    baseline = np.asarray(baseline, dtype=np.float64)[:, None]
    sensitivity = np.asarray(sensitivity, dtype=np.float64)[:, None]
    saturation = np.asarray(saturation, dtype=np.float64)[:, None]
    return baseline + sensitivity * (1.0 - np.exp(-saturation * k[None, :]))


def true_cost_curves(slope, num_treatments: int, exponent: float = COST_CURVE_EXPONENT) -> np.ndarray:
    """Power-law cost curves g(k) = c * k**exponent (g(0) = 0)."""
    k = np.arange(num_treatments + 1, dtype=np.float64)
    slope = np.asarray(slope, dtype=np.float64)[:, None]
    return slope * np.power(k[None, :], exponent)


def generate_synthetic(
    n: int, d: int, num_treatments: int, noise_scale: float, seed: int
) -> Dataset:
    """Randomized trial with known monotone ground-truth curves.

    Features are standard normal; per-user sensitivity, saturation rate,
    cost slope and revenue baseline come from fixed seeded projections of
    the features, mapped positive.  Treatments are uniform.  Observed
    responses are the true curves at the assigned level plus Gaussian
    noise (costs clipped at 0 to stay valid).
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if num_treatments < 1:
        raise DataError("number of treatments must be >= 1")
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, d))
    proj = rng.standard_normal((d, 4)) / np.sqrt(d)
    latent = features @ proj
    sensitivity = 2.0 * _softplus_np(latent[:, 0])
    saturation = 0.3 + 1.5 * _sigmoid_np(latent[:, 1])
    slope = 0.05 + 0.5 * _softplus_np(latent[:, 2])
    baseline = _softplus_np(latent[:, 3])

    revenue_curves = true_revenue_curves(baseline, sensitivity, saturation, num_treatments)
    cost_curves = true_cost_curves(slope, num_treatments)
    truth = TrueCurves(revenue=revenue_curves, cost=cost_curves)

    treatments = rng.integers(0, num_treatments + 1, size=n)
    rows = np.arange(n)
    revenue = revenue_curves[rows, treatments] + noise_scale * rng.standard_normal(n)
    cost = cost_curves[rows, treatments] + noise_scale * rng.standard_normal(n)
    cost = np.maximum(cost, 0.0)

    _check_level_coverage(treatments, num_treatments)
    return Dataset(
        features=features,
        treatments=treatments.astype(np.int64),
        cost_responses=cost,
        revenue_responses=revenue,
        num_treatments=num_treatments,
        feature_names=tuple(f"f{i}" for i in range(d)),
        numeric_feature_mask=np.ones(d, dtype=bool),
        ground_truth=truth,
    )


def _softplus_np(v: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint seeded train/validation/test partition covering all rows."""
    n = len(dataset)
    n_train = int(spec.train_fraction * n)
    n_valid = int(spec.validation_fraction * n)
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise DataError(
            f"split of {n} rows into {spec.train_fraction}/{spec.validation_fraction}/{spec.test_fraction} leaves an empty part"
        )
    perm = np.random.default_rng(spec.seed).permutation(n)
    return (
        dataset.subset(perm[:n_train]),
        dataset.subset(perm[n_train : n_train + n_valid]),
        dataset.subset(perm[n_train + n_valid :]),
    )


def minibatches(dataset: Dataset, batch_size: int, seed: int) -> List[Dataset]:
    """One epoch of batches under a seeded permutation; short tail kept."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    return [dataset.subset(perm[i : i + batch_size]) for i in range(0, n, batch_size)]


def standardize(train: Dataset, *others: Dataset) -> tuple:
    """Z-score numeric feature columns using train statistics only.

    Columns flagged by ``numeric_feature_mask`` are transformed (all
    columns when no mask is present); one-hot indicator columns pass
    through untouched.  Returns (scaled train, *scaled others, scaler)
    where the scaler is the (mask, mean, std) triple for reuse at
    inference time.
    """
    mask = train.numeric_feature_mask
    if mask is None:
        mask = np.ones(train.feature_dim, dtype=bool)
    mean = train.features[:, mask].mean(axis=0)
    std = train.features[:, mask].std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    scaler = (mask, mean, std)
    return tuple(apply_scaler(ds, scaler) for ds in (train, *others)) + (scaler,)


def apply_scaler(dataset: Dataset, scaler) -> Dataset:
    mask, mean, std = scaler
    feats = dataset.features.copy()
    feats[:, mask] = (feats[:, mask] - mean) / std
    return replace(dataset, features=feats)


def restrict_treatments(dataset: Dataset, levels: Sequence[int]) -> Dataset:
    """Keep rows whose treatment is in ``levels``; re-index levels ascending.

    ``levels`` must include 0 (the control) and the result re-labels the
    kept levels to 0..K' preserving order.
    """
    levels = sorted(set(int(v) for v in levels))
    if levels[0] != 0:
        raise DataError("restriction must keep the control level 0")
    keep = np.isin(dataset.treatments, levels)
    remap = {lev: k for k, lev in enumerate(levels)}
    sub = dataset.subset(np.nonzero(keep)[0])
    treatments = np.asarray([remap[int(t)] for t in sub.treatments], dtype=np.int64)
    truth = sub.ground_truth
    if truth is not None:
        truth = TrueCurves(revenue=truth.revenue[:, levels], cost=truth.cost[:, levels])
    return replace(sub, treatments=treatments, num_treatments=len(levels) - 1, ground_truth=truth)
