"""
The neural multiplexer: a small convolutional meta-feature network m(x),
cost-discounted stacking weights w(x) = softmax((v m(x)) / c), the stacked
ensemble prediction, and its training step with embedding distillation.
"""

import logging
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from contrastive import EPSILON, embedding_present, taped_distance
from data import batch_indices
from errors import ConfigError, NumericError, ShapeError
from model_zoo import (Checkpoint, LayerStack, as_batch, assign_params, count_flops, forward, init_weights,
                       load_checkpoint, project, save_checkpoint)

logger = logging.getLogger(__name__)

# Constants
OFFLOAD_THRESHOLD = 0.5
FROZEN_CHUNK = 256


@dataclass
class MuxOutput:
    """Stacking weights w, meta-features m and the pre-softmax logits (numpy)"""
    weights: np.ndarray
    meta: np.ndarray
    logits: np.ndarray


@dataclass
class MuxStepResult:
    loss: float
    mux_loss: float
    distill_loss: float
    mean_weights: np.ndarray


class MuxNet:
    """
    Meta-feature network with stacking matrix v [N x M] and the bridge
    [M x shared_dim] used only by the distillation loss.

    Args:
        input_shape: per-sample input shape
        layers: convolutional layer descriptor list
        meta_dim: meta-feature width M
        costs: per-model FLOPs c_1..c_N (divided by their max before use)
        shared_dim: projected embedding width of the zoo
        rng: Rng for initialisation, None for all-zero weights
        model_ids: ids of the multiplexed models, in order
    """

    def __init__(self, input_shape, layers, meta_dim, costs, shared_dim, rng=None, model_ids=None):
        costs = np.asarray(costs, dtype=np.float64)
        if costs.ndim != 1 or costs.size == 0:
            raise ConfigError("multiplexer needs one cost per model")
        if np.any(costs <= 0):
            raise ConfigError(f"model costs must be positive, got {costs.tolist()}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.meta_dim = int(meta_dim)
        self.shared_dim = int(shared_dim)
        self.costs = costs
        self.model_ids = list(model_ids) if model_ids is not None else [f"model{i}" for i in range(costs.size)]
        if len(self.model_ids) != costs.size:
            raise ConfigError(f"{len(self.model_ids)} model ids for {costs.size} costs")

        self.body = LayerStack(layers, self.input_shape, rng, prefix="mux.")
        features = int(np.prod(self.body.output_shape))
        n = costs.size
        self.meta = (
            tc.Tensor(init_weights((features, self.meta_dim), features, rng), requires_grad=True, name="mux.meta.weights"),
            tc.Tensor(np.zeros(self.meta_dim), requires_grad=True, name="mux.meta.bias"),
        )
        v = np.zeros((n, self.meta_dim)) if rng is None else rng.normal((n, self.meta_dim), 1.0 / np.sqrt(self.meta_dim))
        bridge = (np.zeros((self.meta_dim, self.shared_dim)) if rng is None
                  else rng.normal((self.meta_dim, self.shared_dim), 1.0 / np.sqrt(self.meta_dim)))
        self.v = tc.Tensor(v, requires_grad=True, name="mux.v")
        self.bridge = tc.Tensor(bridge, requires_grad=True, name="mux.bridge")

    @property
    def num_models(self):
        return int(self.costs.size)

    @property
    def normalized_costs(self):
        return self.costs / self.costs.max()

    @property
    def params(self):
        return self.body.params + list(self.meta) + [self.v, self.bridge]

    @property
    def layers(self):
        return self.body.layers


def mux_flops(mux):
    """Inference FLOPs of the multiplexer (the distillation bridge is training-only)"""
    features = int(np.prod(mux.body.output_shape))
    return count_flops(mux.body) + 2 * features * mux.meta_dim + 2 * mux.num_models * mux.meta_dim


# ============================================================================
# Forward pieces
# ============================================================================

def meta_features(mux, x):
    """m(x): Tensor [B, M] for a batch, [M] for a single input"""
    batch, single = as_batch(x, mux.input_shape)
    h = mux.body.forward(batch)
    if h.ndim > 2:
        h = tc.flatten(h)
    m = tc.add(tc.matmul(h, mux.meta[0]), mux.meta[1])
    return tc.reshape(m, (mux.meta_dim,)) if single else m


def _stacking_logits(m, v, costs):
    """Taped logits l_i = (sum_j v_ij m_j) / c_i for m [B, M]"""
    costs = np.asarray(costs, dtype=np.float64)
    if np.any(costs <= 0):
        raise ConfigError(f"costs must be positive, got {costs.tolist()}")
    raw = tc.matmul(m, tc.transpose(v))
    inverse = np.broadcast_to(1.0 / costs, raw.shape)
    return tc.mul(raw, tc.constant(inverse, like=raw))


def mux_weights(m, v, costs):
    """
    Stacking weights for meta-features m ([M] or [B, M]).

    Args:
        m: meta-features (Tensor or array)
        v: stacking matrix [N x M] (Tensor or array)
        costs: c_1..c_N, all positive

    Returns:
        MuxOutput
    """
    m_t = m if isinstance(m, tc.Tensor) else tc.Tensor(m, dtype=np.float64)
    v_t = v if isinstance(v, tc.Tensor) else tc.Tensor(v, dtype=np.float64)
    single = m_t.ndim == 1
    if single:
        m_t = tc.reshape(m_t, (1, m_t.shape[0]))
    if v_t.shape[1] != m_t.shape[1] or v_t.shape[0] != len(costs):
        raise ShapeError(f"mux_weights: m {m_t.shape}, v {v_t.shape}, {len(costs)} costs")
    logits = _stacking_logits(m_t, v_t, costs)
    w = tc.softmax(logits)
    if single:
        return MuxOutput(w.data[0].copy(), m_t.data[0].copy(), logits.data[0].copy())
    return MuxOutput(w.data.copy(), m_t.data.copy(), logits.data.copy())


def mux_forward(mux, x):
    """Run the multiplexer on an input or batch (uses the normalised costs)"""
    m = meta_features(mux, x)
    return mux_weights(m, mux.v, mux.normalized_costs)


def cloud_weight(output):
    """w of the last model; in the two-model mobile/cloud setup this is w_cloud"""
    return output.weights[..., -1]


def ensemble_predict(w, model_logits):
    """
    y_ENS = sum_i w_i softmax(f_i(x)).

    Args:
        w: weights [N] or [B, N]
        model_logits: list of N logit arrays [C] or [B, C]

    Returns:
        numpy probability vector(s)
    """
    w = np.asarray(w, dtype=np.float64)
    logits = [np.asarray(l, dtype=np.float64) for l in model_logits]
    if len({l.shape for l in logits}) != 1:
        raise ShapeError(f"ensemble_predict: class counts differ {[l.shape for l in logits]}")
    if w.shape[-1] != len(logits):
        raise ShapeError(f"ensemble_predict: {w.shape[-1]} weights for {len(logits)} models")
    probs = np.stack([tc.softmax(tc.Tensor(l, dtype=np.float64)).data for l in logits], axis=-2)
    return np.einsum("...n,...nc->...c", w, probs)


# ============================================================================
# Losses
# ============================================================================

def mux_loss(y_ens, labels, eps=EPSILON):
    """
    Negative log-likelihood -log(y_ENS[y] + eps), averaged over the batch.

    Args:
        y_ens: Tensor or array of class probabilities ([C] or [B, C])
        labels: true class (scalar or [B])

    Returns:
        scalar Tensor
    """
    if not isinstance(y_ens, tc.Tensor):
        y_ens = tc.Tensor(y_ens, dtype=np.float64)
    if y_ens.ndim == 1:
        y_ens = tc.reshape(y_ens, (1, y_ens.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    picked = tc.pick(y_ens, labels)
    return tc.scale(tc.mean(tc.log(tc.add_scalar(picked, eps))), -1.0)


def distill_features(mux, m):
    """m~ = normalize(m bridge), comparable with the projected embeddings; zero rows stay zero"""
    return tc.l2_normalize(tc.matmul(m, mux.bridge), allow_zero=True)


def distill_loss(m_tilde, embeddings):
    """
    sum_i (1 - d(m~, e_i)), averaged over the batch. Samples where m~ or e_i
    is a zero row contribute nothing for that model.

    Args:
        m_tilde: unit-norm Tensor [B, S] (or [S])
        embeddings: list of unit-norm Tensors or arrays, same shape as m_tilde

    Returns:
        scalar Tensor
    """
    single = m_tilde.ndim == 1
    if single:
        m_tilde = tc.reshape(m_tilde, (1, m_tilde.shape[0]))
    total = None
    for e in embeddings:
        e_t = e if isinstance(e, tc.Tensor) else tc.constant(e, like=m_tilde)
        if single:
            e_t = tc.reshape(e_t, (1, e_t.shape[-1]))
        if e_t.shape != m_tilde.shape:
            raise ShapeError(f"distill_loss: embedding {e_t.shape} vs meta-features {m_tilde.shape}")
        keep = tc.constant(embedding_present(e_t.data) & embedding_present(m_tilde.data), like=m_tilde)
        gap = tc.tensor_sum(tc.mul(keep, tc.add_scalar(tc.scale(taped_distance(m_tilde, e_t), -1.0), 1.0)))
        total = gap if total is None else tc.add(total, gap)
    if total is None:
        return tc.constant(0.0, like=m_tilde)
    return tc.scale(total, 1.0 / m_tilde.shape[0])


# ============================================================================
# Training
# ============================================================================

def frozen_probabilities(zoo, inputs):
    """Class probabilities [B, N, C] of the frozen models, without projecting"""
    x = tc.Tensor(inputs)
    return np.stack([tc.softmax(forward(costed.model, x)[0]).data for costed in zoo], axis=1)


def frozen_outputs(zoo, inputs):
    """
    Probabilities [B, N, C] and projected embeddings (list of [B, S]) of the
    frozen models; computed outside any tape. A sample whose projection
    vanishes gets a zero embedding row.
    """
    x = tc.Tensor(inputs)
    probs, embeddings = [], []
    for costed in zoo:
        logits, g = forward(costed.model, x)
        probs.append(tc.softmax(logits).data)
        embeddings.append(project(costed.head, g, allow_zero=True).data)
    return np.stack(probs, axis=1), embeddings


def mux_train_step_on_outputs(mux, inputs, probs, embeddings, labels, alpha, lambda_distill=1.0, eps=EPSILON):
    """
    One SGD step on L = L_mux + lambda * sum_i L_distill using precomputed
    frozen-model outputs. Only the multiplexer's parameters change.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ShapeError("mux_train_step: empty batch")
    if probs.shape[1] != mux.num_models:
        raise ShapeError(f"mux_train_step: {probs.shape[1]} model outputs for {mux.num_models} costs")

    x = tc.Tensor(inputs)
    try:
        with tc.GradTape() as tape:
            m = meta_features(mux, x)
            logits = _stacking_logits(m, mux.v, mux.normalized_costs)
            w = tc.softmax(logits)
            y_ens = tc.weighted_mix(w, tc.constant(probs, like=w))
            l_mux = mux_loss(y_ens, labels, eps)
            total = l_mux
            l_distill = None
            if lambda_distill != 0:
                l_distill = distill_loss(distill_features(mux, m), embeddings)
                total = tc.add(total, tc.scale(l_distill, lambda_distill))
    except NumericError as e:
        raise NumericError(f"multiplexer training diverged: {e}")

    if not np.isfinite(total.item()):
        raise NumericError(f"multiplexer training diverged: loss {total.item()}")
    grads = tc.backward(total, tape, mux.params)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("multiplexer training diverged: non-finite gradient")
    tc.sgd_step(mux.params, grads, alpha)
    return MuxStepResult(
        loss=total.item(),
        mux_loss=l_mux.item(),
        distill_loss=l_distill.item() if l_distill is not None else 0.0,
        mean_weights=w.data.mean(axis=0),
    )


def mux_train_step(mux, zoo, batch, alpha, lambda_distill=1.0, eps=EPSILON):
    """
    Multiplexer step with the zoo frozen.

    Args:
        mux: MuxNet
        zoo: list of CostedModel, in the multiplexer's model order
        batch: tuple (inputs, labels)
        alpha: learning rate
        lambda_distill: weight of the distillation sum

    Returns:
        MuxStepResult
    """
    inputs, labels = batch
    probs, embeddings = frozen_outputs(zoo, inputs)
    return mux_train_step_on_outputs(mux, inputs, probs, embeddings, labels, alpha, lambda_distill, eps)


def train_mux(mux, zoo, train, epochs, batch_size, alpha, rng, lambda_distill=1.0, eps=EPSILON, on_epoch=None):
    """
    Multiplexer training loop. The frozen zoo is evaluated once on the
    whole training set; every epoch then reuses those outputs.

    Returns:
        list of per-epoch dicts: epoch, loss, mux_loss, distill_loss and
        mean_weight.<model id> for each model
    """
    probs, embeddings = [], [[] for _ in zoo]
    for start in range(0, len(train), FROZEN_CHUNK):
        p, e = frozen_outputs(zoo, train.inputs[start:start + FROZEN_CHUNK])
        probs.append(p)
        for i, part in enumerate(e):
            embeddings[i].append(part)
    probs = np.concatenate(probs)
    embeddings = [np.concatenate(parts) for parts in embeddings]

    rows = []
    for epoch in range(1, epochs + 1):
        seen = 0
        totals = np.zeros(3)
        weights = np.zeros(mux.num_models)
        for idx in batch_indices(len(train), batch_size, rng):
            result = mux_train_step_on_outputs(mux, train.inputs[idx], probs[idx], [e[idx] for e in embeddings],
                                               train.labels[idx], alpha, lambda_distill, eps)
            seen += len(idx)
            totals += np.asarray([result.loss, result.mux_loss, result.distill_loss]) * len(idx)
            weights += result.mean_weights * len(idx)
        row = {"epoch": epoch, "loss": totals[0] / seen, "mux_loss": totals[1] / seen,
               "distill_loss": totals[2] / seen}
        for model_id, w in zip(mux.model_ids, weights / seen):
            row[f"mean_weight.{model_id}"] = w
        logger.info("mux epoch %d/%d: loss=%.4f L_mux=%.4f L_distill=%.4f",
                    epoch, epochs, row["loss"], row["mux_loss"], row["distill_loss"])
        if on_epoch is not None:
            on_epoch(row)
        rows.append(row)
    return rows


# ============================================================================
# Checkpoints
# ============================================================================

def save_mux(path, mux, seed=0, metadata=None):
    """MUXC file whose descriptor has kind 'multiplexer' and names the v tensor"""
    descriptor = {
        "kind": "multiplexer",
        "input_shape": list(mux.input_shape),
        "layers": mux.layers,
        "meta_dim": mux.meta_dim,
        "shared_dim": mux.shared_dim,
        "costs": [float(c) for c in mux.costs],
        "model_ids": mux.model_ids,
        "param_names": [p.name for p in mux.params],
        "stacking_matrix": mux.v.name,
    }
    save_checkpoint(path, Checkpoint(descriptor, [p.data for p in mux.params], seed, metadata or {}))


def load_mux(path):
    checkpoint = load_checkpoint(path)
    desc = checkpoint.descriptor
    if desc.get("kind") != "multiplexer":
        raise ConfigError(f"{path}: not a multiplexer checkpoint (kind={desc.get('kind')!r})")
    mux = MuxNet(desc["input_shape"], desc["layers"], desc["meta_dim"], desc["costs"], desc["shared_dim"],
                 model_ids=desc["model_ids"])
    assign_params(mux.params, checkpoint.tensors, path)
    return mux
