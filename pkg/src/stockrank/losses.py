"""Training objectives: return-weighted cross-entropy, plain CE, and MSE.

The return-weighted loss multiplies each sample's cross-entropy by the
magnitude of its capped next-day return, so names about to move hard
dominate the batch loss while flat names contribute almost nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .nn.autograd import Tensor, log_clip, mean, mul, neg, pow_const, sub, tsum

LOG_CLIP = 1e-12
LOSS_KINDS = ("return_weighted_ce", "ce", "mse")


@dataclass(frozen=True)
class LossKind:
    """A named objective plus the output arity it implies for the model."""

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")

    @property
    def output_arity(self) -> int:
        return 1 if self.kind == "mse" else 5

    @property
    def classification(self) -> bool:
        return self.kind != "mse"


def _check_one_hot(p: np.ndarray) -> None:
    p = np.asarray(p)
    if p.shape != (5,) or not np.all((p == 0) | (p == 1)) or p.sum() != 1:
        raise NumericError(f"label must be a one-hot 5-vector, got {p!r}")


def cross_entropy(p, q) -> float:
    """-sum_i p_i ln q_i for a one-hot p; q clipped below at 1e-12."""
    _check_one_hot(np.asarray(p, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    return float(-(np.asarray(p) * np.log(np.clip(q, LOG_CLIP, None))).sum())


def return_weighted_loss(y_true, y_pred, weight: float) -> float:
    """Cross-entropy scaled by the capped absolute next-day return."""
    if not 0.0 <= weight <= 0.5:
        raise NumericError(f"loss weight must lie in [0, 0.5], got {weight}")
    return cross_entropy(y_true, y_pred) * weight


def mse(y: float, y_hat: float) -> float:
    return float((y - y_hat) ** 2)


# ---------------------------------------------------------------------------
# batched autodiff versions used in training (mean reduction over the batch)
# ---------------------------------------------------------------------------


def ce_per_sample(q: Tensor, p: np.ndarray) -> Tensor:
    """(batch,) vector of cross-entropies; p is the constant one-hot matrix."""
    return neg(tsum(mul(p, log_clip(q, LOG_CLIP)), axis=1))


def batch_loss(kind: LossKind, outputs: Tensor, labels: np.ndarray,
               targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Scalar training loss for one mini-batch.

    outputs: (batch, 5) probabilities for the classification kinds, or
    (batch, 1) raw values for mse. labels: one-hot rows; targets: raw
    next-day returns; weights: capped absolute returns.
    """
    if kind.kind == "return_weighted_ce":
        return mean(mul(ce_per_sample(outputs, labels), weights))
    if kind.kind == "ce":
        return mean(ce_per_sample(outputs, labels))
    diff = sub(outputs, targets.reshape(-1, 1))
    return mean(pow_const(diff, 2.0))
