"""
Pairwise contrastive loss over projected embeddings and the joint training
step that trains every classifier with cross-entropy plus that loss.

Sign convention: pairs where both models are right are pulled together
(-log(d + eps)), pairs where exactly one is right are pushed apart
(-log(1 - d + eps)), pairs where both are wrong contribute nothing. With
literal=True the printed form coeff * log(d + eps) is used instead.

A sample whose projection vanished (a zero row) has no direction, so every
pair involving it is left out of the loss and of the geometry summaries.
"""

import logging
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from data import batches
from errors import NumericError, ShapeError
from model_zoo import accuracy, forward, project

logger = logging.getLogger(__name__)

# Constants
EPSILON = 1e-6
UNIT_TOLERANCE = 1e-4


@dataclass
class ContrastiveBatchResult:
    """
    Outcome of one joint training step.

    Attributes:
        loss: batch-mean contrastive loss L_cnt
        model_losses: L_i = L_cnt + L_ce(model i), batch means
        distances: [B, N, N] cosine distances, diagonal 1
        accuracies: batch accuracy of each model before the update
    """
    loss: float
    model_losses: list
    distances: np.ndarray
    accuracies: list


# ============================================================================
# Distances and pair coefficients
# ============================================================================

def cosine_distance(e1, e2):
    """
    d = (1 + e1.e2) / 2 for unit vectors: 1 for the same direction, 0 for
    opposite directions. Works on single vectors or row-aligned batches.

    Raises:
        NumericError: an input is not unit-norm within 1e-4
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ShapeError(f"cosine_distance: shapes {e1.shape} and {e2.shape}")
    for name, e in (("e1", e1), ("e2", e2)):
        norms = np.linalg.norm(e, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise NumericError(f"cosine_distance: {name} is not unit-norm")
    d = (1.0 + (e1 * e2).sum(axis=-1)) / 2.0
    return np.clip(d, 0.0, 1.0)


def taped_distance(e1, e2):
    """Taped form of cosine_distance for [B, S] unit-norm tensors"""
    dots = tc.tensor_sum(tc.mul(e1, e2), axis=-1)
    return tc.scale(tc.add_scalar(dots, 1.0), 0.5)


def pair_coefficient(pred_i, pred_j, y):
    """+1 when both predictions are right, -1 when exactly one is, 0 when neither is"""
    right_i = int(pred_i) == int(y)
    right_j = int(pred_j) == int(y)
    if right_i and right_j:
        return 1
    if right_i != right_j:
        return -1
    return 0


def pair_coefficients(preds_i, preds_j, labels):
    """Vectorised pair_coefficient over a batch"""
    right_i = np.asarray(preds_i) == np.asarray(labels)
    right_j = np.asarray(preds_j) == np.asarray(labels)
    coeff = np.zeros(right_i.shape, dtype=np.int64)
    coeff[right_i & right_j] = 1
    coeff[right_i ^ right_j] = -1
    return coeff


# ============================================================================
# Loss
# ============================================================================

def contrastive_loss(embeddings, preds, labels, literal=False, eps=EPSILON):
    """
    Batch mean of the double sum over ordered model pairs (i != j).

    Args:
        embeddings: list of N Tensors [B, S] (or [S]), unit-norm or zero rows
        preds: list of N predicted-class arrays [B] (or scalars)
        labels: true classes [B] (or a scalar)
        literal: use coeff * log(d + eps) instead of the pull/push form
        eps: offset inside the logs

    Returns:
        scalar Tensor (zero when N < 2)
    """
    if any(np.any(np.isnan(e.data)) for e in embeddings):
        raise NumericError("contrastive_loss: NaN in an embedding")
    embeddings = [tc.reshape(e, (1, e.shape[0])) if e.ndim == 1 else e for e in embeddings]
    labels = np.atleast_1d(np.asarray(labels))
    preds = [np.atleast_1d(np.asarray(p)) for p in preds]
    n = len(embeddings)
    if n < 2:
        return tc.constant(0.0)
    like = embeddings[0]
    batch = like.shape[0]
    present = [embedding_present(e.data) for e in embeddings]

    total = None
    for i in range(n):
        for j in range(i + 1, n):
            coeff = pair_coefficients(preds[i], preds[j], labels) * (present[i] & present[j])
            d = taped_distance(embeddings[i], embeddings[j])
            if literal:
                term = tc.mul(tc.constant(coeff, like=like), tc.log(tc.add_scalar(d, eps)))
            else:
                pull = tc.constant(coeff == 1, like=like)
                push = tc.constant(coeff == -1, like=like)
                near = tc.log(tc.add_scalar(d, eps))
                far = tc.log(tc.add_scalar(tc.scale(d, -1.0), 1.0 + eps))
                term = tc.scale(tc.add(tc.mul(pull, near), tc.mul(push, far)), -1.0)
            # (i, j) and (j, i) contribute the same term
            pair_sum = tc.scale(tc.tensor_sum(term), 2.0)
            total = pair_sum if total is None else tc.add(total, pair_sum)
    return tc.scale(total, 1.0 / batch)


def embedding_present(embeddings):
    """Boolean mask of rows with a non-zero norm ([B] for [B, S], [N, B] for [N, B, S])"""
    return np.any(np.asarray(embeddings) != 0, axis=-1)


def distance_matrix(embeddings):
    """[B, N, N] pairwise cosine distances of unit-norm embeddings (numpy)"""
    stacked = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings], axis=1)
    if stacked.ndim == 2:
        stacked = stacked[None]
    d = (1.0 + np.einsum("bis,bjs->bij", stacked, stacked)) / 2.0
    return np.clip(d, 0.0, 1.0)


def venn_gap(distances, predictions, labels, present=None):
    """
    Mean distance over both-correct pairs minus mean distance over
    exactly-one-correct pairs (i < j), pooled over all samples.

    Args:
        distances: [B, N, N] from distance_matrix
        predictions: [N, B] predicted classes
        labels: [B]
        present: optional [N, B] mask; pairs with a missing embedding are skipped

    Returns:
        tuple: (gap, mean_pull, mean_push, pull_count, push_count); means are
        NaN and the gap is NaN when a group is empty
    """
    n = distances.shape[1]
    pull, push = [], []
    for i in range(n):
        for j in range(i + 1, n):
            coeff = pair_coefficients(predictions[i], predictions[j], labels)
            if present is not None:
                coeff = coeff * (present[i] & present[j])
            pull.append(distances[coeff == 1, i, j])
            push.append(distances[coeff == -1, i, j])
    pull = np.concatenate(pull) if pull else np.zeros(0)
    push = np.concatenate(push) if push else np.zeros(0)
    mean_pull = float(pull.mean()) if pull.size else float("nan")
    mean_push = float(push.mean()) if push.size else float("nan")
    return mean_pull - mean_push, mean_pull, mean_push, int(pull.size), int(push.size)


# ============================================================================
# Joint training
# ============================================================================

def joint_train_step(zoo, batch, alpha, literal=False, eps=EPSILON):
    """
    One SGD step of every model on L_i = L_cnt + L_ce(model i).

    The gradient of L_cnt + sum_j L_ce(j) with respect to model i's
    parameters equals the gradient of L_i, so a single backward pass over
    that total gives every model its own update. Heads only see L_cnt.

    Args:
        zoo: list of CostedModel (all with the same class count)
        batch: tuple (inputs [B, C, H, W], labels [B])
        alpha: learning rate (0 leaves parameters untouched)
        literal: printed sign convention for L_cnt
        eps: offset inside the logs

    Returns:
        ContrastiveBatchResult

    Raises:
        NumericError: a loss is non-finite; no parameter is updated
    """
    inputs, labels = batch
    if len(labels) == 0:
        raise ShapeError("joint_train_step: empty batch")
    class_counts = {c.model.num_classes for c in zoo}
    if len(class_counts) != 1:
        raise ShapeError(f"joint_train_step: models disagree on class count {sorted(class_counts)}")

    params = [p for costed in zoo for p in costed.params]
    x = tc.Tensor(inputs)
    try:
        with tc.GradTape() as tape:
            embeddings, preds, ce_losses = [], [], []
            for costed in zoo:
                logits, g = forward(costed.model, x)
                embeddings.append(project(costed.head, g, allow_zero=True))
                preds.append(np.argmax(logits.data, axis=-1))
                ce_losses.append(tc.cross_entropy(logits, labels))
            l_cnt = contrastive_loss(embeddings, preds, labels, literal=literal, eps=eps)
            total = l_cnt
            for ce in ce_losses:
                total = tc.add(total, ce)
    except NumericError as e:
        raise NumericError(f"joint training diverged: {e}")

    model_losses = [l_cnt.item() + ce.item() for ce in ce_losses]
    if not all(np.isfinite(model_losses)):
        raise NumericError(f"joint training diverged: losses {model_losses}")

    grads = tc.backward(total, tape, params)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("joint training diverged: non-finite gradient")
    tc.sgd_step(params, grads, alpha)

    distances = distance_matrix([e.data for e in embeddings])
    accuracies = [float(np.mean(p == labels)) for p in preds]
    return ContrastiveBatchResult(l_cnt.item(), model_losses, distances, accuracies)


def train_joint(zoo, train, epochs, batch_size, alpha, rng, literal=False, eps=EPSILON, val=None, on_epoch=None):
    """
    Joint training loop over `epochs` shuffled passes.

    Args:
        zoo: list of CostedModel
        train: training Dataset
        epochs: number of passes
        batch_size: samples per step
        alpha: learning rate
        rng: Rng driving the batch order
        literal: printed sign convention for L_cnt
        val: optional Dataset scored after every epoch
        on_epoch: callback receiving each epoch's rows

    Returns:
        list of dicts, one per (epoch, model): epoch, model, loss,
        contrastive_loss, train_accuracy, val_accuracy
    """
    rows = []
    for epoch in range(1, epochs + 1):
        seen = 0
        l_cnt = 0.0
        losses = np.zeros(len(zoo))
        correct = np.zeros(len(zoo))
        for inputs, labels in batches(train, batch_size, rng):
            result = joint_train_step(zoo, (inputs, labels), alpha, literal=literal, eps=eps)
            n = len(labels)
            seen += n
            l_cnt += result.loss * n
            losses += np.asarray(result.model_losses) * n
            correct += np.asarray(result.accuracies) * n

        epoch_rows = []
        for i, costed in enumerate(zoo):
            epoch_rows.append({
                "epoch": epoch,
                "model": costed.id,
                "loss": losses[i] / seen,
                "contrastive_loss": l_cnt / seen,
                "train_accuracy": correct[i] / seen,
                "val_accuracy": accuracy(costed.model, val) if val is not None else float("nan"),
            })
        logger.info("epoch %d/%d: L_cnt=%.4f %s", epoch, epochs, l_cnt / seen,
                    " ".join(f"{r['model']}={r['loss']:.4f}/{r['val_accuracy']:.3f}" for r in epoch_rows))
        if on_epoch is not None:
            on_epoch(epoch_rows)
        rows.extend(epoch_rows)
    return rows
