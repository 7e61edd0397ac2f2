"""Training objective: label-smoothed cross-entropy over the per-stage and
aggregated predictions with a rising smoothing schedule, plus a pairwise
cosine contrastive loss over the two deepest refined cls embeddings.

The smooth target is the piecewise form ``target[t] = beta`` at the true
class and ``(1 - beta)/n`` elsewhere, which deliberately does not sum to 1;
``normalized=True`` switches to the conventional
``beta * onehot + (1 - beta) * uniform`` mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class PredictionSet:
    """Ordered logits (shallow heads first, aggregated prediction last) and
    the embeddings entering the contrastive term."""
    logits: list[Tensor]
    embeddings: list[Tensor] = field(default_factory=list)


def smooth_target(true_class: int, beta: float, n: int,
                  normalized: bool = False) -> np.ndarray:
    """Soft target vector for one label."""
    if not 0 <= true_class < n:
        raise ContractError(f"smooth_target: class {true_class} not in [0, {n})")
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"smooth_target: beta {beta} not in [0, 1]")
    off = (1.0 - beta) / n
    out = np.full(n, off)
    out[true_class] = beta + off if normalized else beta
    return out


def smooth_targets(labels: np.ndarray, beta: float, n: int,
                   normalized: bool = False) -> np.ndarray:
    """Stack of soft targets, one row per label."""
    labels = np.asarray(labels, dtype=np.int64)
    return np.stack([smooth_target(int(t), beta, n, normalized) for t in labels])


def _ce_term(logits: Tensor, labels: np.ndarray, beta: float,
             normalized: bool) -> Tensor:
    """Batch-mean cross-entropy of one head against its soft targets."""
    n = logits.data.shape[-1]
    if logits.data.ndim == 1:
        targets = smooth_target(int(np.asarray(labels).reshape(())), beta, n,
                                normalized)
    else:
        targets = smooth_targets(labels, beta, n, normalized)
        if targets.shape != logits.data.shape:
            raise ContractError(
                f"smoothed_ce: {len(targets)} labels vs logits "
                f"{logits.data.shape}")
    logp = T.log(T.softmax_lastdim(logits))
    per_sample = T.scale(T.sum_lastdim(T.mul(T.constant(targets), logp)), -1.0)
    if per_sample.data.ndim == 0:
        return per_sample
    return T.mean_axis(per_sample, 0)


def smoothed_ce(predictions: PredictionSet, labels: np.ndarray,
                betas: list[float], n_classes: int,
                normalized: bool = False) -> Tensor:
    """Sum of per-head smoothed CE terms; ``betas`` pairs with ``logits``
    in order (shallowest head gets the smallest beta)."""
    if len(predictions.logits) != len(betas):
        raise ContractError(
            f"smoothed_ce: {len(predictions.logits)} heads but "
            f"{len(betas)} betas")
    total: Tensor | None = None
    for logits, beta in zip(predictions.logits, betas):
        if logits.data.shape[-1] != n_classes:
            raise ContractError(
                f"smoothed_ce: head width {logits.data.shape[-1]} != "
                f"{n_classes} classes")
        term = _ce_term(logits, labels, beta, normalized)
        total = term if total is None else T.add(total, term)
    assert total is not None
    return total


def contrastive(embeddings: Tensor, labels: np.ndarray) -> Tensor:
    """(1/B^2) * [sum over same-label ordered pairs of (1 - cos) +
    sum over different-label ordered pairs of max(cos, 0)].

    Ordered pairs include i = j (cos = 1 contributes 0 to the same-label
    term).  Norms are floored at 1e-12, so a zero row behaves as a zero
    unit vector (cos 0 against everything) instead of dividing by zero.
    """
    if embeddings.data.ndim != 2:
        raise ContractError(
            f"contrastive: expected (B, c), got {embeddings.data.shape}")
    bsz = embeddings.data.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bsz,):
        raise ContractError(
            f"contrastive: {labels.shape} labels for batch of {bsz}")
    sumsq = T.clamp_min(T.sum_lastdim(T.mul(embeddings, embeddings)), 1e-24)
    inv_norm = T.powc(sumsq, -0.5)
    unit = T.mul_colvec(embeddings, inv_norm)
    cos = T.matmul(unit, T.swap_last2(unit))
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    diff = 1.0 - same
    same_term = T.sub(T.constant(np.float64(same.sum())),
                      T.sum_all(T.mul(cos, T.constant(same))))
    diff_term = T.sum_all(T.mul(T.relu(cos), T.constant(diff)))
    return T.scale(T.add(same_term, diff_term), 1.0 / (bsz * bsz))


def contrastive_total(embedding_list: list[Tensor], labels: np.ndarray) -> Tensor:
    """Contrastive loss computed per embedding set, then summed."""
    if not embedding_list:
        return T.constant(0.0)
    total: Tensor | None = None
    for emb in embedding_list:
        term = contrastive(emb, labels)
        total = term if total is None else T.add(total, term)
    assert total is not None
    return total


def total_loss(ls: Tensor, lcon: Tensor, alpha: float) -> Tensor:
    """Combined objective ``L = L_s + alpha * L_con``."""
    if alpha < 0:
        raise ContractError(f"total_loss: alpha {alpha} < 0")
    return T.add(ls, T.scale(lcon, alpha))


def combined_loss(predictions: PredictionSet, labels: np.ndarray,
                  betas: list[float], alpha: float, n_classes: int,
                  normalized: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Assemble (total, smoothed-CE, contrastive) for any head count.

    The beta schedule pairs with the logits list from the front, except that
    the aggregated prediction (when present as the fifth entry) always takes
    the final beta.  A single-head configuration trains with the last beta
    (1.0 by default, plain CE).
    """
    k = len(predictions.logits)
    if k == len(betas):
        head_betas = list(betas)
    elif k == 1:
        head_betas = [betas[-1]]
    elif k == len(betas) - 1:
        head_betas = list(betas[:k])
    else:
        raise ContractError(
            f"combined_loss: {k} heads incompatible with {len(betas)} betas")
    ls = smoothed_ce(predictions, labels, head_betas, n_classes, normalized)
    lcon = contrastive_total(predictions.embeddings, labels)
    return total_loss(ls, lcon, alpha), ls, lcon
