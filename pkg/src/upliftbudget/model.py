"""Monotonic, smooth multi-treatment uplift network.

Architecture: a shared bottom maps features to a representation; one
revenue head and one cost head (a single parameter set each, reused for
every treatment level) read the representation concatenated with a
per-level embedding and emit the incremental outcome lift between
adjacent levels.  Squaring the raw head output makes every increment
non-negative, so cumulative sums give outcome predictions that are
nondecreasing in the level by construction.  Two base heads predict the
no-treatment outcomes from the representation alone.

Smoothness is encouraged by a Lipschitz penalty: the product over head
layers of softplus of an estimated per-layer spectral norm.  The
estimate uses persisted power-iteration vectors that are refreshed as an
explicit separate step, so the penalty is an exactly differentiable
function of the weights between refreshes.

``predict``/``uplift`` are read-only and thread-safe; training updates
and iterate refreshes require exclusive access.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Dataset

__all__ = [
    "AffineLayer",
    "PredictionBundle",
    "UpliftMatrices",
    "UpliftNetwork",
    "prediction_loss",
    "lipschitz_loss",
    "uplift_loss",
    "save_model",
    "load_model",
]

CHECKPOINT_VERSION = 1
POWER_ITERATIONS_PER_STEP = 20


@dataclass(frozen=True)
class PredictionBundle:
    """Outcome predictions for every treatment level.

    ``y_hat_*`` are n x (K+1); column k is column 0 plus the running sum
    of the first k increments.  Increments are n x K and non-negative.
    For binary channels the columns are logits (the sigmoid lives in the
    loss).
    """

    y_hat_revenue: np.ndarray
    y_hat_cost: np.ndarray
    increments_revenue: np.ndarray
    increments_cost: np.ndarray


@dataclass(frozen=True)
class UpliftMatrices:
    """Predicted lifts over control, n x (K+1), column 0 identically zero."""

    tau_revenue: np.ndarray
    tau_cost: np.ndarray


@dataclass
class AffineLayer:
    w: ad.Node
    b: ad.Node


def _init_affine(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> AffineLayer:
    bound = 1.0 / np.sqrt(fan_in)
    w = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.w")
    b = ad.parameter(rng.uniform(-bound, bound, size=(1, fan_out)), name=f"{name}.b")
    return AffineLayer(w=w, b=b)


def _stack_dims(in_dim: int, hidden: Sequence[int], out_dim: int) -> List[Tuple[int, int]]:
    dims = [in_dim, *hidden, out_dim]
    return list(zip(dims[:-1], dims[1:]))


class UpliftNetwork:
    """Shared-bottom multi-treatment uplift model with weight-shared heads."""

    def __init__(
        self,
        feature_dim: int,
        num_treatments: int,
        hidden_dims: Sequence[int] = (64, 32),
        embed_dim: int = 8,
        head_hidden: Sequence[int] = (32,),
        seed: int = 0,
    ):
        if feature_dim < 1 or num_treatments < 1 or embed_dim < 1:
            raise ValueError("dimensions must be positive")
        if any(h < 1 for h in (*hidden_dims, *head_hidden)):
            raise ValueError("hidden sizes must be positive")
        self.feature_dim = feature_dim
        self.num_treatments = num_treatments
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.embed_dim = int(embed_dim)
        self.head_hidden = tuple(int(h) for h in head_hidden)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        self.shared_bottom = [
            _init_affine(rng, fi, fo, f"bottom{j}")
            for j, (fi, fo) in enumerate(_stack_dims(feature_dim, hidden_dims[:-1], hidden_dims[-1]))
        ] if hidden_dims else []
        rep_dim = self.hidden_dims[-1] if self.hidden_dims else feature_dim
        self.treatment_embeddings = ad.parameter(
            rng.standard_normal((num_treatments, embed_dim)), name="embeddings"
        )
        head_in = rep_dim + embed_dim
        self.revenue_head = [
            _init_affine(rng, fi, fo, f"revenue_head{j}")
            for j, (fi, fo) in enumerate(_stack_dims(head_in, head_hidden, 1))
        ]
        self.cost_head = [
            _init_affine(rng, fi, fo, f"cost_head{j}")
            for j, (fi, fo) in enumerate(_stack_dims(head_in, head_hidden, 1))
        ]
        self.base_revenue_head = [
            _init_affine(rng, fi, fo, f"base_revenue{j}")
            for j, (fi, fo) in enumerate(_stack_dims(rep_dim, head_hidden, 1))
        ]
        self.base_cost_head = [
            _init_affine(rng, fi, fo, f"base_cost{j}")
            for j, (fi, fo) in enumerate(_stack_dims(rep_dim, head_hidden, 1))
        ]
        # one persisted power-iteration vector per regularized (head) layer
        self.lipschitz_state: List[np.ndarray] = []
        for layer in self._regularized_layers():
            u = rng.standard_normal(layer.w.value.shape[1])
            self.lipschitz_state.append(u / np.linalg.norm(u))

    # -- parameter bookkeeping -------------------------------------------------

    def _regularized_layers(self) -> List[AffineLayer]:
        return [*self.revenue_head, *self.cost_head]

    def parameters(self) -> List[ad.Node]:
        params: List[ad.Node] = [self.treatment_embeddings]
        for layer in (
            *self.shared_bottom,
            *self.revenue_head,
            *self.cost_head,
            *self.base_revenue_head,
            *self.base_cost_head,
        ):
            params.extend((layer.w, layer.b))
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.parameters()}
        for j, u in enumerate(self.lipschitz_state):
            state[f"power_iterate{j}"] = u
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value = np.array(state[p.name], dtype=np.float64)
        self.lipschitz_state = [
            np.array(state[f"power_iterate{j}"], dtype=np.float64)
            for j in range(len(self.lipschitz_state))
        ]

    # -- forward graph ---------------------------------------------------------

    def _bottom(self, x: ad.Node) -> ad.Node:
        h = x
        for layer in self.shared_bottom:
            h = ad.elu(ad.affine(h, layer.w, layer.b))
        return h

    def _head(self, layers: List[AffineLayer], v: ad.Node) -> ad.Node:
        h = v
        for layer in layers[:-1]:
            h = ad.elu(ad.affine(h, layer.w, layer.b))
        last = layers[-1]
        return ad.affine(h, last.w, last.b)

    def build_graph(self, features: np.ndarray) -> "ForwardGraph":
        """Run the forward pass, returning all named nodes of the graph."""
        x_val = ad.as_matrix(features)
        if x_val.shape[1] != self.feature_dim:
            raise ad.ShapeError(
                f"feature dim {x_val.shape[1]} does not match model dim {self.feature_dim}"
            )
        n = x_val.shape[0]
        x = ad.constant(x_val, name="features")
        phi = self._bottom(x)

        inc_revenue: List[ad.Node] = []
        inc_cost: List[ad.Node] = []
        for k in range(self.num_treatments):
            delta = ad.embed_rows(self.treatment_embeddings, np.full(n, k, dtype=np.int64))
            v = ad.concat_cols(phi, delta)
            inc_revenue.append(ad.square(self._head(self.revenue_head, v)))
            inc_cost.append(ad.square(self._head(self.cost_head, v)))

        base_revenue = self._head(self.base_revenue_head, phi)
        base_cost = self._head(self.base_cost_head, phi)

        zero = ad.constant(np.zeros((n, 1)), name="zero-lift")
        tau_revenue_cols = [zero]
        tau_cost_cols = [ad.constant(np.zeros((n, 1)), name="zero-lift")]
        for k in range(self.num_treatments):
            tau_revenue_cols.append(ad.add(tau_revenue_cols[-1], inc_revenue[k]))
            tau_cost_cols.append(ad.add(tau_cost_cols[-1], inc_cost[k]))
        tau_revenue = _hstack(tau_revenue_cols)
        tau_cost = _hstack(tau_cost_cols)

        return ForwardGraph(
            model=self,
            n=n,
            phi=phi,
            inc_revenue=inc_revenue,
            inc_cost=inc_cost,
            base_revenue=base_revenue,
            base_cost=base_cost,
            tau_revenue=tau_revenue,
            tau_cost=tau_cost,
        )

    # -- public prediction API ---------------------------------------------------

    def predict(self, features: np.ndarray) -> PredictionBundle:
        g = self.build_graph(features)
        inc_r = np.concatenate([n.value for n in g.inc_revenue], axis=1) if g.inc_revenue else np.zeros((g.n, 0))
        inc_c = np.concatenate([n.value for n in g.inc_cost], axis=1)
        return PredictionBundle(
            y_hat_revenue=g.base_revenue.value + g.tau_revenue.value,
            y_hat_cost=g.base_cost.value + g.tau_cost.value,
            increments_revenue=inc_r,
            increments_cost=inc_c,
        )

    def uplift(self, features: np.ndarray) -> UpliftMatrices:
        g = self.build_graph(features)
        return UpliftMatrices(tau_revenue=g.tau_revenue.value.copy(), tau_cost=g.tau_cost.value.copy())

    # -- smoothness penalty -------------------------------------------------------

    def refresh_power_iterates(self, iterations: int = POWER_ITERATIONS_PER_STEP) -> None:
        """Advance the persisted spectral-norm iterates for the head layers."""
        for j, layer in enumerate(self._regularized_layers()):
            self.lipschitz_state[j] = ad.power_iterate(
                layer.w.value, self.lipschitz_state[j], iterations
            )

    def lipschitz_node(self) -> ad.Node:
        """Product over head layers of softplus(spectral estimate), as a graph node."""
        prod: ad.Node | None = None
        for layer, u in zip(self._regularized_layers(), self.lipschitz_state):
            term = ad.softplus(ad.spectral_estimate(layer.w, u))
            prod = term if prod is None else ad.mul(prod, term)
        assert prod is not None
        return prod

    def head_spectral_norms(self) -> np.ndarray:
        """Exact head-layer spectral norms (SVD); measurement only."""
        return np.array(
            [np.linalg.svd(layer.w.value, compute_uv=False)[0] for layer in self._regularized_layers()]
        )


@dataclass
class ForwardGraph:
    """Named nodes of one forward pass over a feature batch."""

    model: UpliftNetwork
    n: int
    phi: ad.Node
    inc_revenue: List[ad.Node]
    inc_cost: List[ad.Node]
    base_revenue: ad.Node
    base_cost: ad.Node
    tau_revenue: ad.Node
    tau_cost: ad.Node

    def observed_prediction_nodes(self, treatments: np.ndarray) -> Tuple[ad.Node, ad.Node]:
        """Predicted outcome at each sample's observed treatment, per channel.

        Built as base + sum over levels of mask(t >= k) * increment_k, which
        equals the observed column of the cumulative prediction matrix.
        """
        t = np.asarray(treatments, dtype=np.int64)
        pred_r = self.base_revenue
        pred_c = self.base_cost
        for k in range(self.model.num_treatments):
            mask = (t >= k + 1).astype(np.float64)[:, None]
            pred_r = ad.add(pred_r, ad.scale(self.inc_revenue[k], mask))
            pred_c = ad.add(pred_c, ad.scale(self.inc_cost[k], mask))
        return pred_c, pred_r

    def prediction_loss_node(self, batch: Dataset) -> ad.Node:
        pred_c, pred_r = self.observed_prediction_nodes(batch.treatments)
        loss_c = _channel_loss(pred_c, batch.cost_responses, batch.cost_kind)
        loss_r = _channel_loss(pred_r, batch.revenue_responses, batch.response_kind)
        return ad.add(loss_c, loss_r)


def _channel_loss(pred: ad.Node, target: np.ndarray, kind: str) -> ad.Node:
    target = np.asarray(target, dtype=np.float64)[:, None]
    if kind == "binary":
        return ad.bce_loss(pred, target)
    return ad.mse_loss(pred, target)


def _hstack(cols: List[ad.Node]) -> ad.Node:
    out = cols[0]
    for col in cols[1:]:
        out = ad.concat_cols(out, col)
    return out


# -- loss API over finished predictions -----------------------------------------


def prediction_loss(bundle: PredictionBundle, batch: Dataset) -> float:
    """Mean per-sample cost loss plus revenue loss at the observed treatment."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    rows = np.arange(len(batch))
    pred_c = bundle.y_hat_cost[rows, batch.treatments]
    pred_r = bundle.y_hat_revenue[rows, batch.treatments]
    return float(
        _channel_loss_value(pred_c, batch.cost_responses, batch.cost_kind)
        + _channel_loss_value(pred_r, batch.revenue_responses, batch.response_kind)
    )


def _channel_loss_value(pred: np.ndarray, target: np.ndarray, kind: str) -> float:
    if kind == "binary":
        return float(
            np.mean(np.maximum(pred, 0.0) - target * pred + np.log1p(np.exp(-np.abs(pred))))
        )
    diff = pred - target
    return float(np.mean(diff * diff))


def lipschitz_loss(model: UpliftNetwork, refresh: bool = True) -> float:
    """Product over head layers of softplus of the spectral-norm estimate.

    ``refresh`` advances the persisted power iterates first (the
    per-training-step behaviour); pass False for a pure read.
    """
    if refresh:
        model.refresh_power_iterates()
    return float(model.lipschitz_node().value[0, 0])


def uplift_loss(model: UpliftNetwork, batch: Dataset, alpha: float, refresh: bool = True) -> float:
    """Prediction loss plus ``alpha`` times the smoothness penalty."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    graph = model.build_graph(batch.features)
    value = float(graph.prediction_loss_node(batch).value[0, 0])
    if alpha > 0:
        value += alpha * lipschitz_loss(model, refresh=refresh)
    return value


# -- checkpointing ----------------------------------------------------------------


def save_model(model: UpliftNetwork, path, extra_meta: dict | None = None) -> None:
    """Versioned checkpoint: json header plus float64 tensor dump (bit-exact)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "feature_dim": model.feature_dim,
        "num_treatments": model.num_treatments,
        "hidden_dims": list(model.hidden_dims),
        "embed_dim": model.embed_dim,
        "head_hidden": list(model.head_hidden),
        "seed": model.seed,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    # fixed zip timestamps keep the file byte-identical across reruns
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name: str, payload: bytes | str) -> None:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)

        put("meta.json", json.dumps(meta, sort_keys=True))
        for name, arr in sorted(model.state_dict().items()):
            buf = io.BytesIO()
            np.save(buf, arr)
            put(f"tensors/{name}.npy", buf.getvalue())


def load_model(path) -> Tuple[UpliftNetwork, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        tensors = {}
        for entry in zf.namelist():
            if entry.startswith("tensors/") and entry.endswith(".npy"):
                tensors[entry[len("tensors/"):-len(".npy")]] = np.load(
                    io.BytesIO(zf.read(entry))
                )
    model = UpliftNetwork(
        feature_dim=meta["feature_dim"],
        num_treatments=meta["num_treatments"],
        hidden_dims=tuple(meta["hidden_dims"]),
        embed_dim=meta["embed_dim"],
        head_hidden=tuple(meta["head_hidden"]),
        seed=meta["seed"],
    )
    model.load_state(tensors)
    return model, meta.get("extra", {})
