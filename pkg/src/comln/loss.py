"""Softmax cross-entropy inner loss and its structured derivatives.

The inner loss on an embedded training set {(phi_m, y_m)} is

    L(W) = -(1/M) sum_m y_m' log softmax(W phi_m) + (lam/2) ||W - W0||_F^2

with lam >= 0 an optional proximal weight tying the adapted classifier to
its initialization.  Its gradient is a sum of M rank-one matrices plus the
proximal term, so the residual vectors (p_m - y_m) carry the whole
gradient; the curvature decomposes into M small blocks

    A_m = (diag(p_m) - p_m p_m') / M

which are symmetric positive semi-definite and annihilate the all-ones
vector.  The outer (test) loss is always plain unregularized cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """Array shapes passed to an operation do not agree."""


@dataclass(frozen=True)
class EmbeddedSet:
    """Embedded examples: features (M, d) with one-hot labels (M, N)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "features", np.asarray(self.features, dtype=np.float64)
        )
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DimensionMismatchError("features and labels must be 2-d")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionMismatchError(
                f"{self.features.shape[0]} feature rows vs "
                f"{self.labels.shape[0]} label rows"
            )
        if self.features.shape[0] < 1:
            raise DimensionMismatchError("need at least one example")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        one_hot = np.all(np.isin(self.labels, (0.0, 1.0))) and np.all(
            self.labels.sum(axis=1) == 1.0
        )
        if not one_hot:
            raise ValueError("labels must be one-hot rows")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def way(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class LossConfig:
    """Inner-loss settings; lam = 0 is the plain cross-entropy flow."""

    lam: float = 0.0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("proximal weight lam must be non-negative")


@dataclass(frozen=True)
class CurvatureBlocks:
    """Per-example curvature blocks A, stacked as an (M, N, N) array."""

    A: np.ndarray


def _check_W(W: np.ndarray, data: EmbeddedSet) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape != (data.way, data.dim):
        raise DimensionMismatchError(
            f"classifier shape {W.shape} does not match data ({data.way}, {data.dim})"
        )
    return W


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    # Max-subtraction keeps exp() from overflowing on large logits.
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_probs(W: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Class probabilities softmax(W phi) for a single embedding."""
    logits = np.asarray(W, dtype=np.float64) @ np.asarray(phi, dtype=np.float64)
    return _softmax_rows(logits[None, :])[0]


def inner_loss(
    W: np.ndarray, W0: np.ndarray, data: EmbeddedSet, cfg: LossConfig
) -> float:
    """Mean cross-entropy on ``data`` plus the proximal penalty."""
    W = _check_W(W, data)
    W0 = _check_W(W0, data)
    logp = _log_softmax_rows(data.features @ W.T)
    ce = -float(np.sum(data.labels * logp)) / data.count
    if cfg.lam == 0.0:
        return ce
    diff = W - W0
    return ce + 0.5 * cfg.lam * float(np.sum(diff * diff))


def inner_grad(
    W: np.ndarray, W0: np.ndarray, data: EmbeddedSet, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the inner loss and its rank-one residual factors.

    Returns (grad, residuals) with grad of shape (N, d) equal to
    (1/M) sum_m residuals[m] phi_m' + lam (W - W0) and residuals[m] the
    unscaled vector p_m - y_m.
    """
    W = _check_W(W, data)
    W0 = _check_W(W0, data)
    probs = _softmax_rows(data.features @ W.T)
    residuals = probs - data.labels
    grad = residuals.T @ data.features / data.count
    if cfg.lam != 0.0:
        grad = grad + cfg.lam * (W - W0)
    return grad, residuals


def curvature(W: np.ndarray, data: EmbeddedSet) -> CurvatureBlocks:
    """The M per-example blocks A_m = (diag(p_m) - p_m p_m') / M."""
    W = _check_W(W, data)
    probs = _softmax_rows(data.features @ W.T)
    return CurvatureBlocks(curvature_from_probs(probs))


def curvature_from_probs(probs: np.ndarray) -> np.ndarray:
    """Curvature blocks straight from an (M, N) row-stochastic matrix."""
    m, n = probs.shape
    blocks = -probs[:, :, None] * probs[:, None, :]
    idx = np.arange(n)
    blocks[:, idx, idx] += probs
    blocks /= m
    return blocks


def outer_partials(
    W_T: np.ndarray, test: EmbeddedSet
) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the unregularized test loss at W(T).

    Returns (V, G_phi_test): V = dL_test/dW of shape (N, d), and
    G_phi_test whose row m is the direct derivative of the test loss in
    the m-th test embedding, (p_m - y_m)' W_T / M_test.
    """
    W_T = _check_W(W_T, test)
    probs = _softmax_rows(test.features @ W_T.T)
    residuals = probs - test.labels
    V = residuals.T @ test.features / test.count
    G_phi_test = residuals @ W_T / test.count
    return V, G_phi_test


def outer_loss(W_T: np.ndarray, test: EmbeddedSet) -> float:
    """Unregularized cross-entropy of W(T) on the test set."""
    W_T = _check_W(W_T, test)
    logp = _log_softmax_rows(test.features @ W_T.T)
    return -float(np.sum(test.labels * logp)) / test.count
