"""
Runtime multiplexing: run the multiplexer once, pick models, run only those,
and average their class probabilities.
"""

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from errors import ConfigError, ShapeError
from model_zoo import forward
from multiplexer import OFFLOAD_THRESHOLD, mux_flops, mux_forward

logger = logging.getLogger(__name__)

# Constants
MODES = ("single", "ensemble", "binary_offload")
AVERAGING = ("uniform", "weighted")
DEFAULT_THRESHOLD = 0.288
LOCAL = "local"
CLOUD = "cloud"


@dataclass(frozen=True)
class RoutePolicy:
    """
    How inputs are routed.

    Args:
        mode: 'single' (argmax), 'ensemble' (all w > threshold) or
              'binary_offload' (two models, local vs cloud)
        threshold: ensemble threshold T in (0, 1)
        offload_threshold: w_cloud above this goes to the cloud
        average: 'uniform' mean of the selected models, or 'weighted' by w
    """
    mode: str = "single"
    threshold: float = DEFAULT_THRESHOLD
    offload_threshold: float = OFFLOAD_THRESHOLD
    average: str = "uniform"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"router mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"router threshold must lie in (0, 1), got {self.threshold}")
        if not 0 <= self.offload_threshold <= 1:
            raise ConfigError(f"offload threshold must lie in [0, 1], got {self.offload_threshold}")
        if self.average not in AVERAGING:
            raise ConfigError(f"router average must be one of {AVERAGING}, got {self.average!r}")


@dataclass
class RouteDecision:
    """Models selected for one input, the averaged prediction and its FLOPs"""
    selected: tuple
    probs: np.ndarray
    flops: int
    model_ids: tuple

    @property
    def prediction(self):
        return int(np.argmax(self.probs))


# ============================================================================
# Selection rules
# ============================================================================

def select_single(w, costs=None):
    """
    Index of the largest weight; ties go to the cheaper model, then the lower index.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ShapeError("select_single: empty weight vector")
    candidates = np.flatnonzero(w == w.max())
    if costs is None:
        return int(candidates[0])
    costs = np.asarray(costs, dtype=np.float64)
    return int(min(candidates, key=lambda i: (costs[i], i)))


def select_ensemble(w, threshold, costs=None):
    """All indices with w_i > threshold, or the argmax when none qualifies"""
    w = np.asarray(w, dtype=np.float64)
    selected = tuple(int(i) for i in np.flatnonzero(w > threshold))
    if not selected:
        return (select_single(w, costs),)
    return selected


def offload_decision(w_cloud, threshold=OFFLOAD_THRESHOLD):
    """'cloud' when w_cloud > threshold (strictly), otherwise 'local'"""
    return CLOUD if float(w_cloud) > threshold else LOCAL


def select(w, policy, costs=None):
    """Selected model indices for one weight vector under a policy"""
    if policy.mode == "single":
        return (select_single(w, costs),)
    if policy.mode == "ensemble":
        return select_ensemble(w, policy.threshold, costs)
    if len(w) != 2:
        raise ShapeError(f"binary_offload needs exactly two models, got {len(w)}")
    # model 0 is local, model 1 is the cloud model
    return (1,) if offload_decision(w[1], policy.offload_threshold) == CLOUD else (0,)


def average_selected(probs, selected, weights=None, average="uniform"):
    """
    Combine the selected models' probability vectors.

    Args:
        probs: mapping or sequence, index -> probability vector
        selected: selected indices
        weights: multiplexer weights (needed for 'weighted')
        average: 'uniform' or 'weighted'
    """
    stacked = np.stack([np.asarray(probs[i], dtype=np.float64) for i in selected])
    if average == "weighted":
        w = np.asarray([weights[i] for i in selected], dtype=np.float64)
        if w.sum() > 0:
            return (w[:, None] * stacked).sum(axis=0) / w.sum()
    return stacked.mean(axis=0)


# ============================================================================
# Router
# ============================================================================

class Router:
    """
    Routes inputs through a trained multiplexer and zoo. `executions`
    counts, per model id, how many inputs each model has processed.

    Args:
        zoo: list of CostedModel in the multiplexer's model order
        mux: trained MuxNet
        policy: RoutePolicy
    """

    def __init__(self, zoo, mux, policy):
        if len(zoo) != mux.num_models:
            raise ConfigError(f"multiplexer expects {mux.num_models} models, {len(zoo)} loaded")
        ids = [c.id for c in zoo]
        if ids != list(mux.model_ids):
            raise ConfigError(f"loaded models {ids} do not match multiplexer models {mux.model_ids}")
        if len({c.model.num_classes for c in zoo}) != 1:
            raise ConfigError("models disagree on class count")
        self.zoo = zoo
        self.mux = mux
        self.policy = policy
        self.costs = np.asarray([c.flops for c in zoo], dtype=np.float64)
        self.mux_flops = mux_flops(mux)
        self.executions = Counter()
        self.mux_runs = 0

    def _run_model(self, index, inputs):
        costed = self.zoo[index]
        logits, _ = forward(costed.model, tc.Tensor(inputs))
        self.executions[costed.id] += inputs.shape[0]
        return tc.softmax(logits).data

    def weights(self, inputs):
        """Multiplexer weights [B, N] for a batch"""
        self.mux_runs += inputs.shape[0]
        return mux_forward(self.mux, tc.Tensor(inputs)).weights

    def route_batch(self, inputs):
        """
        Route a batch. Each model runs once, on exactly the inputs that selected it.

        Returns:
            list of RouteDecision
        """
        inputs = np.asarray(inputs, dtype=np.float32)
        weights = self.weights(inputs)
        selections = [select(w, self.policy, self.costs) for w in weights]

        outputs = {}
        for index in range(len(self.zoo)):
            rows = [b for b, chosen in enumerate(selections) if index in chosen]
            if rows:
                probs = self._run_model(index, inputs[rows])
                for row, p in zip(rows, probs):
                    outputs[(row, index)] = p

        decisions = []
        ids = tuple(c.id for c in self.zoo)
        for b, chosen in enumerate(selections):
            probs = {i: outputs[(b, i)] for i in chosen}
            y_hat = average_selected(probs, chosen, weights[b], self.policy.average)
            flops = int(self.mux_flops + sum(self.costs[i] for i in chosen))
            decisions.append(RouteDecision(chosen, y_hat, flops, ids))
        logger.debug("routed %d inputs, executions %s", len(decisions), dict(self.executions))
        return decisions

    def route_and_predict(self, x):
        """Route a single input [C, H, W]"""
        x = x.data if isinstance(x, tc.Tensor) else np.asarray(x, dtype=np.float32)
        return self.route_batch(x[None])[0]


def route_and_predict(x, zoo, mux, policy):
    """One-off routing of a single input (see Router for repeated use)"""
    return Router(zoo, mux, policy).route_and_predict(x)


# ============================================================================
# Threshold search
# ============================================================================

def sweep_threshold(weights, probs, labels, costs, grid=None, average="uniform"):
    """
    Ensemble-mode accuracy and expected backbone FLOPs for each threshold.

    Args:
        weights: multiplexer weights [B, N]
        probs: every model's probabilities [B, N, C]
        labels: true classes [B]
        costs: model FLOPs [N]
        grid: thresholds to try (default 0.01 .. 0.99)
        average: 'uniform' or 'weighted'

    Returns:
        tuple: (best threshold, list of row dicts) where best maximises
        accuracy, then minimises FLOPs, then prefers the lower threshold
    """
    weights = np.asarray(weights, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    costs = np.asarray(costs, dtype=np.float64)
    if grid is None:
        grid = np.round(np.linspace(0.01, 0.99, 99), 4)

    fallback = np.zeros_like(weights, dtype=bool)
    fallback[np.arange(len(weights)), [select_single(w, costs) for w in weights]] = True

    rows = []
    for threshold in grid:
        mask = weights > threshold
        empty = ~mask.any(axis=1)
        mask[empty] = fallback[empty]
        factor = mask * (weights if average == "weighted" else 1.0)
        y_hat = (factor[:, :, None] * probs).sum(axis=1) / factor.sum(axis=1, keepdims=True)
        rows.append({
            "threshold": float(threshold),
            "accuracy": float(np.mean(np.argmax(y_hat, axis=1) == labels)),
            "expected_backbone_flops": float((mask * costs).sum(axis=1).mean()),
            "mean_selected": float(mask.sum(axis=1).mean()),
        })
    best = min(rows, key=lambda r: (-r["accuracy"], r["expected_backbone_flops"], r["threshold"]))
    return best["threshold"], rows
