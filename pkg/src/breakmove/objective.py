"""Training objective of the head and its exact gradient.

total = weight_decay * sum ||W||^2           (weights only, biases excluded)
      + sum_i hinge(logits_i, y_i)           (multiclass / Crammer-Singer)
      + c_u * sum_pairs cosine_pair_loss     (on FM-block outputs)

All terms are summed over the batch, not averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidClass, ShapeMismatch, ZeroVector
from .head import HeadParams, classifier_forward, fm_forward


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5  # Delta
    c_u: float = 0.1
    weight_decay: float = 1e-4  # lambda

    def __post_init__(self):
        if not 0 <= self.margin < 1:
            raise InvalidArgument(f"margin must lie in [0, 1), got {self.margin}")
        if self.c_u < 0 or self.weight_decay < 0:
            raise InvalidArgument("c_u and weight_decay must be non-negative")


@dataclass(frozen=True, eq=False)
class PairBatch:
    """Index pairs into a minibatch plus the same-class indicator."""

    i: np.ndarray
    j: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        for name in ("i", "j"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "same", np.asarray(self.same, dtype=bool).reshape(-1))
        if not (self.i.shape == self.j.shape == self.same.shape):
            raise ShapeMismatch("pair arrays must have equal length")
        if np.any(self.i == self.j):
            raise InvalidArgument("a pair must join two distinct items")

    @classmethod
    def empty(cls) -> "PairBatch":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool))

    @classmethod
    def from_tuples(cls, pairs) -> "PairBatch":
        pairs = list(pairs)
        if not pairs:
            return cls.empty()
        i, j, same = zip(*pairs)
        return cls(np.array(i), np.array(j), np.array(same))

    def __len__(self) -> int:
        return int(self.i.shape[0])


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    regularizer: float
    hinge: float
    contrastive: float


def _cosine(x: np.ndarray, y: np.ndarray):
    dot = np.sum(x * y, axis=-1)
    nx2 = np.sum(x * x, axis=-1)
    ny2 = np.sum(y * y, axis=-1)
    if np.any(nx2 <= 0) or np.any(ny2 <= 0):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    # sqrt of the product keeps cos(x, x) == 1.0 exactly
    return dot / np.sqrt(nx2 * ny2), dot, nx2, ny2


def cosine_pair_loss(x_i, x_j, same_class: bool, margin: float) -> float:
    """``1 - cos`` for a same-class pair, ``max(0, cos - margin)`` otherwise."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeMismatch(f"pair vectors differ in shape: {x_i.shape} vs {x_j.shape}")
    cos = float(_cosine(x_i, x_j)[0])
    if same_class:
        return 1.0 - cos
    return max(0.0, cos - margin)


def multiclass_hinge(logits, y: int) -> float:
    """``max_k (1 - [k == y] + f_k - f_y)``; zero once the true logit leads by 1."""
    f = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(y) < f.shape[-1]:
        raise InvalidClass(f"class {y} outside 0..{f.shape[-1] - 1}")
    margins = 1.0 + f - f[y]
    margins[y] = 0.0
    return float(np.max(margins))


def _hinge_terms(F: np.ndarray, y: np.ndarray):
    n, L = F.shape
    if np.any((y < 0) | (y >= L)):
        raise InvalidClass(f"labels must lie in 0..{L - 1}")
    rows = np.arange(n)
    margins = 1.0 + F - F[rows, y][:, None]
    margins[rows, y] = 0.0
    k_star = np.argmax(margins, axis=1)  # lowest k on ties
    losses = margins[rows, k_star]
    dF = np.zeros_like(F)
    np.add.at(dF, (rows, k_star), 1.0)
    np.add.at(dF, (rows, y), -1.0)
    return losses, dF


def _pair_terms(Z: np.ndarray, pairs: PairBatch, margin: float, need_grad: bool):
    if len(pairs) == 0:
        return 0.0, (np.zeros_like(Z) if need_grad else None)
    n = Z.shape[0]
    if np.any(pairs.i < 0) or np.any(pairs.j < 0) or np.any(pairs.i >= n) or np.any(pairs.j >= n):
        raise InvalidArgument("pair index out of range")
    A, B = Z[pairs.i], Z[pairs.j]
    cos, _, na2, nb2 = _cosine(A, B)
    active = pairs.same | (cos > margin)
    loss = np.where(pairs.same, 1.0 - cos, np.maximum(cos - margin, 0.0))
    if not need_grad:
        return float(loss.sum()), None
    # dL/dcos: -1 for same-class pairs, +1 for active different-class pairs, 0 at the hinge boundary
    g = np.where(pairs.same, -1.0, 1.0) * active
    inv = 1.0 / np.sqrt(na2 * nb2)
    dA = g[:, None] * (B * inv[:, None] - cos[:, None] * A / na2[:, None])
    dB = g[:, None] * (A * inv[:, None] - cos[:, None] * B / nb2[:, None])
    dZ = np.zeros_like(Z)
    np.add.at(dZ, pairs.i, dA)
    np.add.at(dZ, pairs.j, dB)
    return float(loss.sum()), dZ


def _check_batch(params: HeadParams, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[1] != params.config.d:
        raise ShapeMismatch(f"expected a batch of {params.config.d}-vectors, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise ShapeMismatch("X and y disagree on batch size")
    return X, y


def loss_and_grad(
    params: HeadParams, X, y, pairs: PairBatch | None, cfg: LossConfig, need_grad: bool = True
) -> tuple[LossBreakdown, HeadParams | None]:
    """Evaluate the objective and, optionally, its gradient w.r.t. every tensor."""
    X, y = _check_batch(params, X, y)
    pairs = pairs if pairs is not None else PairBatch.empty()
    reg = cfg.weight_decay * sum(float(np.sum(W * W)) for W in params.weights())

    if X.shape[0] == 0:
        breakdown = LossBreakdown(reg, reg, 0.0, 0.0)
        if not need_grad:
            return breakdown, None
        grads = params.zeros_like()
        for (gW, _), (W, _) in zip(grads.fm + grads.clf, params.fm + params.clf):
            gW += 2.0 * cfg.weight_decay * W
        return breakdown, grads

    Z, cache = fm_forward(params, X)
    F, cache = classifier_forward(params, Z, cache)
    hinge, dF = _hinge_terms(F, y)
    # with c_u == 0 the term is still reported but has no gradient pathway
    contrast, dZ_pairs = _pair_terms(Z, pairs, cfg.margin, need_grad and cfg.c_u > 0)
    hinge_sum = float(hinge.sum())
    total = reg + hinge_sum + cfg.c_u * contrast
    breakdown = LossBreakdown(total, reg, hinge_sum, contrast)
    if not need_grad:
        return breakdown, None

    grads_clf = []
    delta = dF
    for k in range(len(params.clf) - 1, -1, -1):
        W, _ = params.clf[k]
        if k < len(params.clf) - 1:
            delta = delta * (cache.clf_pre[k] > 0)
        grads_clf.append((delta.T @ cache.clf_inputs[k] + 2.0 * cfg.weight_decay * W, delta.sum(axis=0)))
        delta = delta @ W
    grads_clf.reverse()

    dZ = delta
    if dZ_pairs is not None:
        dZ = dZ + cfg.c_u * dZ_pairs
    grads_fm = []
    dh = dZ
    for k in range(len(params.fm) - 1, -1, -1):
        W, _ = params.fm[k]
        dpre = dh * (cache.fm_pre[k] > 0)
        grads_fm.append((dpre.T @ cache.fm_inputs[k] + 2.0 * cfg.weight_decay * W, dpre.sum(axis=0)))
        dh = dh + dpre @ W
    grads_fm.reverse()
    return breakdown, HeadParams(params.config, grads_fm, grads_clf)


def total_loss(params: HeadParams, X, y, pairs: PairBatch | None, cfg: LossConfig) -> tuple[float, LossBreakdown]:
    breakdown, _ = loss_and_grad(params, X, y, pairs, cfg, need_grad=False)
    return breakdown.total, breakdown


def grad_total_loss(params: HeadParams, X, y, pairs: PairBatch | None, cfg: LossConfig) -> HeadParams:
    """Gradient shaped like ``params``.

    Subgradient choices at kinks: relu'(0) = 0, hinge ties take the lowest
    class index, and a different-class pair sitting exactly at the margin
    contributes zero.
    """
    return loss_and_grad(params, X, y, pairs, cfg)[1]
