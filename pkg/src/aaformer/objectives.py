"""Identity classification and triplet losses on the CLS and part-token outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ParameterStore, Tensor


def add_classifier_bank(store: ParameterStore, num_tokens: int, dim: int, num_classes: int,
                        rng: np.random.Generator, std: float = 0.001) -> None:
    """One unshared linear classifier per output token, stacked as [tokens, D, C]."""
    store.add("classifier.weight", rng.standard_normal((num_tokens, dim, num_classes)) * std)
    store.add("classifier.bias", np.zeros((num_tokens, 1, num_classes)))


@dataclass
class ClassifierBank:
    weight: Tensor  # [P+1, D, C]
    bias: Tensor  # [P+1, 1, C]

    @classmethod
    def from_store(cls, store: ParameterStore) -> "ClassifierBank":
        return cls(store["classifier.weight"], store["classifier.bias"])

    @property
    def num_tokens(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[-1]

    def logits(self, tokens: Tensor) -> Tensor:
        """tokens [B, P+1, D] -> logits [P+1, B, C]."""
        if tokens.shape[-2] != self.num_tokens:
            raise ContractError(f"{tokens.shape[-2]} tokens but {self.num_tokens} classifiers")
        return tokens.swapaxes(0, 1) @ self.weight + self.bias


def cross_entropy_smoothed(logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy, averaged over all leading axes.

    Target mass is 1 - smoothing + smoothing/C on the label and smoothing/C
    elsewhere.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    C = logits.shape[-1]
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= smoothing < 1:
        raise ContractError("smoothing must lie in [0, 1)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range for {C} classes")
    target = np.full(np.broadcast_shapes(logits.shape[:-1], labels.shape) + (C,), smoothing / C)
    np.put_along_axis(target, np.broadcast_to(labels, target.shape[:-1])[..., None],
                      1.0 - smoothing + smoothing / C, axis=-1)
    per_item = -(T.log_softmax(logits) * target).sum(axis=-1)
    return per_item.mean()


def loss_cls(cls: Tensor, parts: Tensor, labels, bank: ClassifierBank, smoothing: float = 0.1) -> Tensor:
    """Mean over the P+1 tokens (and the batch) of the smoothed cross-entropy."""
    tokens = T.concat([cls.reshape(cls.shape[0], 1, cls.shape[-1]), parts], axis=1)
    return cross_entropy_smoothed(bank.logits(tokens), labels, smoothing)


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def batch_hard_pairs(dist: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest positive and of the nearest negative.

    The anchor itself is not a positive. Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    if not pos.any(axis=1).all():
        raise ContractError("every identity in a triplet batch needs at least two images")
    if not (~same).any(axis=1).all():
        raise ContractError("triplet batch needs at least two identities")
    hardest_pos = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(~same, dist, np.inf), axis=1)
    return hardest_pos, hardest_neg


def triplet_hinge(d_pos_g, d_neg_g, d_pos_p, d_neg_p, margin: float = 0.3):
    """0.5 * ([d_pos_g - d_neg_g + margin]_+ + [d_pos_p - d_neg_p + margin]_+) on plain numbers."""
    g = np.maximum(np.asarray(d_pos_g) - d_neg_g + margin, 0.0)
    p = np.maximum(np.asarray(d_pos_p) - d_neg_p + margin, 0.0)
    return 0.5 * (g + p)


def _branch(features: Tensor, labels, margin: float) -> Tensor:
    pos, neg = batch_hard_pairs(pairwise_distances(features.data), labels)
    d_pos = T.norm(features - features[pos])
    d_neg = T.norm(features - features[neg])
    return T.relu(d_pos - d_neg + margin)


def loss_triplet(global_feats: Tensor, part_feats: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with a global (CLS) and a part branch, averaged over anchors.

    ``part_feats`` is [B, P, D] or already flattened to [B, P*D]; the part
    branch measures distances between concatenated part tokens.
    """
    if margin < 0:
        raise ContractError("margin must be non-negative")
    if part_feats.ndim == 3:
        part_feats = part_feats.reshape(part_feats.shape[0], -1)
    g = _branch(global_feats, labels, margin)
    if part_feats.shape[-1] == 0:
        return g.mean()
    p = _branch(part_feats, labels, margin)
    return ((g + p) * 0.5).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    cls: Tensor
    tri: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.cls.item(), self.tri.item()


def loss_total(cls: Tensor, parts: Tensor, labels, bank: ClassifierBank,
               margin: float = 0.3, smoothing: float = 0.1) -> LossBreakdown:
    lc = loss_cls(cls, parts, labels, bank, smoothing)
    lt = loss_triplet(cls, parts, labels, margin)
    return LossBreakdown(lc + lt, lc, lt)
