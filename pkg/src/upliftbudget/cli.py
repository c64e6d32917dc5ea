"""Command-line pipeline: data generation, training, evaluation, allocation.

Every command writes a plain-text manifest into the output directory
before any other artifact, records every referenced path and flag, and
funnels all randomness through the single seed it names, so reruns of a
manifest reproduce outputs byte for byte.  Exit codes: 0 success, 2
usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import __version__
from .data import (
    DataSchema,
    Dataset,
    SplitSpec,
    apply_scaler,
    generate_synthetic,
    hillstrom_schema,
    load_csv,
    split,
    standardize,
    synthetic_schema,
    write_csv,
    write_truth_csv,
)
from .knapsack import AllocationProblem, solve_mckp, write_allocation_csv
from .metrics import write_curve_csv, budget_sweep_curve, score_cost_curve
from .model import UpliftNetwork, load_model, save_model
from .training import (
    TrainConfig,
    evaluate,
    train_e3ir,
    train_two_stage,
    write_report_csv,
)

__all__ = ["main"]


class UsageError(ValueError):
    """Bad flags or malformed configuration; maps to exit code 2."""


# -- config and manifest ------------------------------------------------------------

_CONFIG_TYPES = {
    "mode": str,
    "schema": str,
    "alpha": float,
    "beta": float,
    "budget": float,
    "learning_rate": float,
    "batch_size": int,
    "max_iterations": int,
    "patience": int,
    "seed": int,
    "embed_dim": int,
    "weight_by_response": bool,
    "train_fraction": float,
    "validation_fraction": float,
    "test_fraction": float,
    "hidden_dims": tuple,
    "head_hidden": tuple,
}


def parse_config_text(text: str) -> Dict[str, object]:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            if kind is bool:
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1")
            elif kind is tuple:
                values[key] = tuple(int(v) for v in val.split(",") if v.strip())
            else:
                values[key] = kind(val)
        except ValueError:
            raise UsageError(f"config line {lineno}: bad value for key {key!r}: {val!r}") from None
    return values


def write_manifest(out_dir: Path, command: str, entries: Dict[str, object]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.txt"
    lines = [f"command = {command}", f"artifact_version = {__version__}"]
    lines += [f"{key} = {entries[key]}" for key in sorted(entries)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _schema_by_name(name: str, feature_dim: int | None = None) -> DataSchema:
    if name == "synthetic":
        if feature_dim is None:
            raise UsageError("synthetic schema needs the feature count from the file header")
        return synthetic_schema(feature_dim)
    if name == "hillstrom":
        return hillstrom_schema("all")
    if name == "hillstrom_men":
        return hillstrom_schema("men")
    if name == "hillstrom_women":
        return hillstrom_schema("women")
    raise UsageError(f"unknown schema {name!r}")


def _load_dataset(path: Path, schema_name: str) -> Dataset:
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    if schema_name == "synthetic":
        with path.open(newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        feature_dim = sum(1 for c in header if c.startswith("f"))
        return load_csv(path, _schema_by_name("synthetic", feature_dim))
    return load_csv(path, _schema_by_name(schema_name))


def _parse_budgets(text: str) -> List[float]:
    try:
        budgets = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"bad budget list {text!r}") from None
    if not budgets or any(b < 0 for b in budgets):
        raise UsageError(f"budgets must be non-negative, got {text!r}")
    return budgets


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.d < 1 or args.k < 1:
        raise UsageError("--d and --k must be at least 1")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    out = Path(args.out)
    write_manifest(
        out,
        "gen-data",
        {"n": args.n, "d": args.d, "k": args.k, "noise": args.noise, "seed": args.seed, "out": out},
    )
    dataset = generate_synthetic(args.n, args.d, args.k, args.noise, args.seed)
    write_csv(dataset, out / "dataset.csv")
    write_truth_csv(dataset.ground_truth, out / "truth.csv")
    print(f"wrote {len(dataset)} rows to {out / 'dataset.csv'}")
    return 0


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise UsageError(f"config not found: {config_path}")
    values = parse_config_text(config_path.read_text(encoding="utf-8"))

    schema_name = str(values.pop("schema", "synthetic"))
    fractions = {
        "train_fraction": values.pop("train_fraction", 0.7),
        "validation_fraction": values.pop("validation_fraction", 0.2),
        "test_fraction": values.pop("test_fraction", 0.1),
    }
    for flag in ("mode", "seed", "alpha", "beta", "budget"):
        override = getattr(args, flag)
        if override is not None:
            values[flag] = override
    if args.schema is not None:
        schema_name = args.schema
    try:
        config = TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from None

    data_path = Path(args.data)
    out = Path(args.out)
    write_manifest(
        out,
        "train",
        {
            "config": config_path,
            "data": data_path,
            "out": out,
            "schema": schema_name,
            "mode": config.mode,
            "seed": config.seed,
            "alpha": config.alpha,
            "beta": config.beta,
            "budget": config.budget,
        },
    )

    full = _load_dataset(data_path, schema_name)
    spec = SplitSpec(seed=config.seed, **fractions)
    train_raw, valid_raw, test_raw = split(full, spec)
    train_set, valid_set, scaler = standardize(train_raw, valid_raw)

    trainer = train_e3ir if config.mode == "e3ir" else train_two_stage
    model, report = trainer(train_set, valid_set, config)

    mask, mean, std = scaler
    extra = {
        "scaler_mask": mask.astype(int).tolist(),
        "scaler_mean": mean.tolist(),
        "scaler_std": std.tolist(),
        "response_kind": full.response_kind,
        "cost_kind": full.cost_kind,
        "schema": schema_name,
        "mode": config.mode,
    }
    save_model(model, out / "checkpoint.ckpt", extra_meta=extra)
    write_report_csv(report, out / "report.csv")
    write_csv(test_raw, out / "test_split.csv")
    print(
        f"trained {config.mode} for {report.epochs} epochs "
        f"(best validation qini {max(report.validation_qini):.6f} at epoch {report.best_epoch})"
    )
    return 0


def _restore(checkpoint: Path, data: Path):
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    model, extra = load_model(checkpoint)
    raw = _load_dataset(data, "synthetic")
    raw = Dataset(
        features=raw.features,
        treatments=raw.treatments,
        cost_responses=raw.cost_responses,
        revenue_responses=raw.revenue_responses,
        num_treatments=raw.num_treatments,
        response_kind=extra.get("response_kind", "continuous"),
        cost_kind=extra.get("cost_kind", "continuous"),
        feature_names=raw.feature_names,
        numeric_feature_mask=raw.numeric_feature_mask,
    )
    scaler = (
        np.asarray(extra["scaler_mask"], dtype=bool),
        np.asarray(extra["scaler_mean"]),
        np.asarray(extra["scaler_std"]),
    )
    return model, apply_scaler(raw, scaler), raw


def cmd_evaluate(args) -> int:
    budgets = _parse_budgets(args.budgets)
    checkpoint = Path(args.checkpoint)
    data_path = Path(args.data)
    out = Path(args.out)
    write_manifest(
        out,
        "evaluate",
        {"checkpoint": checkpoint, "data": data_path, "budgets": args.budgets, "out": out},
    )
    model, dataset, _ = _restore(checkpoint, data_path)
    report = evaluate(model, dataset, budgets)

    lines = [f"{name} = {value!r}" for name, value in sorted(report.uplift_metrics.items())]
    for point in report.per_budget:
        tag = _budget_tag(point.budget)
        lines.append(f"eom_revenue_b{tag} = {point.eom_revenue!r}")
        lines.append(f"eom_cost_b{tag} = {point.eom_cost!r}")
        lines.append(f"predicted_objective_b{tag} = {point.predicted_objective!r}")
        lines.append(f"predicted_spent_b{tag} = {point.predicted_spent!r}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    with (out / "eom_vs_budget.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "eom_revenue", "eom_cost"])
        for point in report.per_budget:
            writer.writerow([repr(point.budget), repr(point.eom_revenue), repr(point.eom_cost)])

    lifts = model.uplift(dataset.features)
    for point in report.per_budget:
        grid = [v for v in np.linspace(0.0, point.budget, 9)[1:] if v > 0]
        curve = budget_sweep_curve(
            lifts.tau_revenue,
            lifts.tau_cost,
            grid,
            dataset.treatments,
            dataset.cost_responses,
            dataset.revenue_responses,
        )
        write_curve_csv(curve, out / f"cost_curve_b{_budget_tag(point.budget)}.csv")
    if model.num_treatments == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            efficiency = np.where(
                lifts.tau_cost[:, 1] > 1e-12,
                lifts.tau_revenue[:, 1] / np.maximum(lifts.tau_cost[:, 1], 1e-12),
                np.inf,
            )
        write_curve_csv(
            score_cost_curve(
                efficiency, dataset.treatments, dataset.cost_responses, dataset.revenue_responses
            ),
            out / "score_cost_curve.csv",
        )
    print(f"wrote metrics for {len(budgets)} budgets to {out / 'metrics.txt'}")
    return 0


def _budget_tag(budget: float) -> str:
    text = f"{budget:g}"
    return text.replace(".", "p").replace("-", "m")


def cmd_allocate(args) -> int:
    if args.budget < 0:
        raise UsageError("--budget must be non-negative")
    checkpoint = Path(args.checkpoint)
    data_path = Path(args.data)
    out = Path(args.out)
    write_manifest(
        out,
        "allocate",
        {"checkpoint": checkpoint, "data": data_path, "budget": args.budget, "out": out},
    )
    model, dataset, _ = _restore(checkpoint, data_path)
    lifts = model.uplift(dataset.features)
    problem = AllocationProblem(
        tau_revenue=lifts.tau_revenue, tau_cost=lifts.tau_cost, budget=args.budget
    )
    solution = solve_mckp(problem)
    write_allocation_csv(problem, solution, out / "allocation.csv")
    print(
        f"assigned {int((solution.chosen() > 0).sum())} of {len(dataset)} users; "
        f"spent {solution.spent:.6f} of {args.budget:g}"
    )
    return 0


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upliftbudget",
        description="Budget-constrained incentive allocation with monotone uplift models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic randomized trial")
    gen.add_argument("--n", type=int, required=True, help="number of users")
    gen.add_argument("--d", type=int, required=True, help="feature dimension")
    gen.add_argument("--k", type=int, required=True, help="number of treatment levels")
    gen.add_argument("--noise", type=float, default=0.5, help="response noise scale")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", required=True)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--mode", choices=("e3ir", "two_stage"))
    train.add_argument("--schema", choices=("synthetic", "hillstrom", "hillstrom_men", "hillstrom_women"))
    train.add_argument("--seed", type=int)
    train.add_argument("--alpha", type=float)
    train.add_argument("--beta", type=float)
    train.add_argument("--budget", type=float)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--budgets", required=True, help="comma-separated budget grid")
    ev.add_argument("--out", required=True)
    ev.add_argument("--truth", help="optional ground-truth curve file (recorded only)")
    ev.set_defaults(func=cmd_evaluate)

    alloc = sub.add_parser("allocate", help="export the exact assignment for a budget")
    alloc.add_argument("--checkpoint", required=True)
    alloc.add_argument("--data", required=True)
    alloc.add_argument("--budget", type=float, required=True)
    alloc.add_argument("--out", required=True)
    alloc.set_defaults(func=cmd_allocate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports its own usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
