"""Fisher LDA separability of an embedding space.

The separability score of a direction ``w`` is the Rayleigh quotient
``J(w) = (w' S_B w) / (w' S_W w)``. ``J1`` and ``J2`` are its values along
the two leading generalized eigenvectors of ``(S_B, S_W + ridge * I)``; the
second direction is the best one that is S_W-orthogonal to the first.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import EmptyInput, InvalidArgument, NumericalFailure, ShapeMismatch, SingleClass


@dataclass(frozen=True, eq=False)
class ScatterPair:
    between: np.ndarray  # S_B
    within: np.ndarray  # S_W
    class_counts: dict

    @property
    def dim(self) -> int:
        return int(self.within.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)


@dataclass(frozen=True, eq=False)
class SeparabilityScores:
    J1: float
    J2: float
    w1: np.ndarray
    w2: np.ndarray
    ridge: float
    j2_defined: bool
    class_counts: dict

    def to_dict(self) -> dict:
        return {
            "J1": self.J1,
            "J2": self.J2 if self.j2_defined else None,
            "J2_defined": self.j2_defined,
            "ridge": self.ridge,
            "class_counts": {str(k): int(v) for k, v in self.class_counts.items()},
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
        }


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"X {X.shape} and y {y.shape} do not line up")
    if X.shape[0] == 0:
        raise EmptyInput("no samples")
    return X, y


def scatter_matrices(X, y) -> ScatterPair:
    """Between-class ``sum_c n_c (mu_c - mu)(mu_c - mu)'`` and within-class scatter."""
    X, y = _check_xy(X, y)
    classes, counts = np.unique(y, return_counts=True)
    if classes.shape[0] < 2:
        raise SingleClass("scatter matrices need at least two classes")
    mu = X.mean(axis=0)
    d = X.shape[1]
    S_B = np.zeros((d, d))
    S_W = np.zeros((d, d))
    for c, n_c in zip(classes, counts):
        Xc = X[y == c]
        mu_c = Xc.mean(axis=0)
        diff = (mu_c - mu)[:, None]
        S_B += n_c * (diff @ diff.T)
        centred = Xc - mu_c
        S_W += centred.T @ centred
    # symmetrize away rounding asymmetry
    S_B = 0.5 * (S_B + S_B.T)
    S_W = 0.5 * (S_W + S_W.T)
    return ScatterPair(S_B, S_W, {c.item(): int(n) for c, n in zip(classes, counts)})


def default_ridge(scatter: ScatterPair) -> float:
    return 1e-6 * float(np.trace(scatter.within)) / scatter.dim


def rayleigh_quotient(w, scatter: ScatterPair, ridge: float = 0.0) -> float:
    w = np.asarray(w, dtype=np.float64)
    num = w @ scatter.between @ w
    den = w @ scatter.within @ w + ridge * (w @ w)
    return float(num / den)


def lda_directions(scatter: ScatterPair, k: int, ridge: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` solutions of ``S_B w = rho (S_W + ridge I) w``.

    Returns eigenvalues in descending order and unit-norm eigenvectors as
    columns of a ``(d, k)`` matrix.
    """
    d = scatter.dim
    if not 1 <= k <= d:
        raise InvalidArgument(f"k must lie in 1..{d}, got {k}")
    if ridge < 0:
        raise InvalidArgument("ridge must be non-negative")
    B = scatter.within + ridge * np.eye(d)
    try:
        evals, evecs = scipy.linalg.eigh(scatter.between, B, subset_by_index=[d - k, d - 1])
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalFailure(f"generalized eigen solve failed ({exc}); try a positive ridge") from None
    if not np.all(np.isfinite(evals)):
        raise NumericalFailure("generalized eigen solve produced non-finite eigenvalues")
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    evecs = evecs / np.linalg.norm(evecs, axis=0, keepdims=True)
    # deterministic sign: largest-magnitude entry positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(k)])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    # S_B is PSD; tiny negative eigenvalues are rounding
    return np.maximum(evals, 0.0), evecs


def separability_scores(X, y, ridge: float | None = None) -> SeparabilityScores:
    """J1 and J2 along the first two LDA directions.

    ``ridge=None`` uses ``1e-6 * trace(S_W) / d``. With fewer than three
    classes S_B has rank one, so J2 is reported as 0 and flagged undefined.
    """
    scatter = scatter_matrices(X, y)
    eps = default_ridge(scatter) if ridge is None else float(ridge)
    k = min(2, scatter.dim)
    _, W = lda_directions(scatter, k, eps)
    w1 = W[:, 0]
    J1 = rayleigh_quotient(w1, scatter, eps)
    j2_defined = scatter.num_classes >= 3 and k == 2
    if k == 2:
        w2 = W[:, 1]
        J2 = rayleigh_quotient(w2, scatter, eps) if j2_defined else 0.0
    else:
        w2 = np.zeros_like(w1)
        J2 = 0.0
    return SeparabilityScores(J1, J2, w1, w2, eps, j2_defined, scatter.class_counts)


def project2d(X, scores: SeparabilityScores) -> np.ndarray:
    """Coordinates ``(X w1, X w2)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != scores.w1.shape[0]:
        raise ShapeMismatch(f"X has shape {X.shape}, directions have length {scores.w1.shape[0]}")
    return np.column_stack([X @ scores.w1, X @ scores.w2])


def write_projection_csv(path, coords: np.ndarray, labels, video_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "label", "video_id"])
        for (a, b), lab, vid in zip(coords, labels, video_ids):
            writer.writerow([repr(float(a)), repr(float(b)), lab, vid])


def write_lda_report(path, scores: SeparabilityScores, extra: dict | None = None) -> None:
    payload = scores.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
