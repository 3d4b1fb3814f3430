"""Adam, plateau learning-rate halving, and early stopping."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError
from .autograd import Tensor


class AdamOptimizer:
    """Adam with bias correction; deterministic given the same gradients."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.initial_lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def reset_lr(self) -> None:
        """Back to the initial rate (used when retraining on a new period)."""
        self.lr = self.initial_lr

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "initial_lr": self.initial_lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.initial_lr = state["initial_lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        if len(state["m"]) != len(self.params):
            raise NumericError("optimizer state does not match parameter count")
        self.m = [np.asarray(a, dtype=np.float64).copy() for a in state["m"]]
        self.v = [np.asarray(a, dtype=np.float64).copy() for a in state["v"]]


class ReduceOnPlateau:
    """Halve the learning rate when the validation metric stalls.

    After ``patience`` epochs without improvement the optimizer's rate is
    halved (never below ``min_lr``) and the wait counter restarts; any
    improvement also restarts it.
    """

    def __init__(self, optimizer: AdamOptimizer, min_lr: float, patience: int = 5,
                 factor: float = 0.5):
        self.optimizer = optimizer
        self.min_lr = min_lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.wait = 0

    def step(self, val_metric: float) -> float:
        """Record one epoch's metric; returns the (possibly reduced) rate."""
        if val_metric < self.best:
            self.best = val_metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.optimizer.lr


class EarlyStopping:
    """Stop after ``patience`` epochs without improvement; keep best weights.

    The caller supplies a snapshot at every improvement; ``best_snapshot``
    holds the one to restore when training stops.
    """

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best = np.inf
        self.wait = 0
        self.best_snapshot = None

    def check(self, val_metric: float, snapshot) -> bool:
        """Returns True when training should stop."""
        if val_metric < self.best:
            self.best = val_metric
            self.wait = 0
            self.best_snapshot = snapshot
            return False
        self.wait += 1
        return self.wait >= self.patience
