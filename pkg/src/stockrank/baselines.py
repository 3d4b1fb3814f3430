"""Linear regression baselines: OLS, ridge, and cross-validated lasso.

All three regress the next-day return on standardized feature rows and
use the fitted value directly as the ranking score. The intercept is
never penalized; penalized fits center the data instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError, NumericError

#: Feature subsets used as regression presets (basic-feature names, plus
#: plain rsi from the technical registry).
FEATURE_PRESETS = {
    "mom3_volume": ("mom_3", "volume"),
    "mom3_rsi": ("mom_3", "rsi"),
    "mom3_sma50": ("mom_3", "sma_ratio_50"),
    "mom2_mom5": ("mom_2", "mom_5"),
    "basic12": "BASIC",
    "all": "ALL",
}

LASSO_MAX_SWEEPS = 10_000
LASSO_TOL = 1e-8


@dataclass(frozen=True)
class RegressionFit:
    """Fitted coefficients (one per feature) plus unpenalized intercept."""

    coefficients: np.ndarray
    intercept: float
    penalty: float  # 0 for OLS
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.feature_names and len(self.feature_names) != len(self.coefficients):
            raise DataError("feature name count does not match coefficient count")


def _design(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"design/response shapes do not match: {X.shape} vs {y.shape}")
    return X, y


def _collinear_columns(A: np.ndarray) -> list[int]:
    """Columns beyond the numerical rank, via pivoted QR."""
    _q, r, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(A.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    return sorted(int(j) for j in piv[rank:])


def ols_fit(X, y, feature_names: tuple[str, ...] = ()) -> RegressionFit:
    """Least squares via the normal equations with a Cholesky solve."""
    X, y = _design(X, y)
    n, p = X.shape
    if n <= p:
        raise DataError(f"need more samples than features: {n} samples, {p} features")
    A = np.column_stack([np.ones(n), X])
    gram = A.T @ A
    try:
        chol = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError:
        bad = [j - 1 for j in _collinear_columns(A) if j > 0]
        names = [feature_names[j] if feature_names else str(j) for j in bad]
        raise DataError(f"design matrix is rank deficient; collinear columns: {names}")
    beta = scipy.linalg.cho_solve(chol, A.T @ y)
    return RegressionFit(coefficients=beta[1:], intercept=float(beta[0]), penalty=0.0,
                         feature_names=tuple(feature_names))


def ridge_fit(X, y, lam: float, feature_names: tuple[str, ...] = ()) -> RegressionFit:
    """Minimize ||y - b0 - X b||^2 + lam * ||b||^2 (intercept unpenalized)."""
    if lam < 0:
        raise DataError(f"ridge penalty must be >= 0, got {lam}")
    X, y = _design(X, y)
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    p = X.shape[1]
    gram = Xc.T @ Xc + lam * np.eye(p)
    try:
        beta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), Xc.T @ yc)
    except scipy.linalg.LinAlgError:
        names = [feature_names[j] if feature_names else str(j) for j in _collinear_columns(Xc)]
        raise DataError(f"ridge system is singular; collinear columns: {names}")
    intercept = y_mean - float(x_mean @ beta)
    return RegressionFit(coefficients=beta, intercept=intercept, penalty=lam,
                         feature_names=tuple(feature_names))


def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_path_fit(X, y, lam: float, beta0: np.ndarray | None = None,
                   max_sweeps: int = LASSO_MAX_SWEEPS, tol: float = LASSO_TOL) -> np.ndarray:
    """Coordinate descent for 0.5 * ||yc - Xc b||^2 + lam * ||b||_1.

    X and y must already be centered. Returns the coefficient vector.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    col_sq = (X**2).sum(axis=0)
    resid = y - X @ beta
    for _sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho = X[:, j] @ resid + col_sq[j] * old
            new = _soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                resid += X[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            return beta
    raise NumericError(
        f"lasso did not converge in {max_sweeps} sweeps "
        f"(residual norm {np.linalg.norm(resid):.3e})"
    )


def _lasso_grid(Xc: np.ndarray, yc: np.ndarray, n_points: int) -> np.ndarray:
    lam_max = np.abs(Xc.T @ yc).max()
    if lam_max == 0.0:
        lam_max = 1.0
    return np.geomspace(lam_max, lam_max * 1e-4, n_points)


def lasso_fit_cv(X, y, lam_grid: np.ndarray | None = None, folds: int = 5,
                 feature_names: tuple[str, ...] = ()) -> RegressionFit:
    """Lasso with the penalty chosen by walk-forward cross-validation.

    Samples (assumed time-ordered) are cut into ``folds`` contiguous
    blocks; each fold trains on all earlier blocks and validates on the
    next, and the grid point with the lowest mean validation MSE wins.
    """
    X, y = _design(X, y)
    n = X.shape[0]
    if folds < 2 or n < 2 * folds:
        raise DataError(f"need at least 2 folds and {2 * folds} samples, got {folds}, {n}")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    grid = _lasso_grid(Xc, yc, 50) if lam_grid is None else np.asarray(lam_grid, dtype=np.float64)

    bounds = np.linspace(0, n, folds + 1).astype(int)
    scores = np.zeros(len(grid))
    for i in range(1, folds):
        tr = slice(0, bounds[i])
        va = slice(bounds[i], bounds[i + 1])
        xm, ym = X[tr].mean(axis=0), y[tr].mean()
        Xtr, ytr = X[tr] - xm, y[tr] - ym
        warm = None
        for gi, lam in enumerate(grid):
            beta = lasso_path_fit(Xtr, ytr, lam, beta0=warm)
            warm = beta
            pred = (X[va] - xm) @ beta + ym
            scores[gi] += ((y[va] - pred) ** 2).mean()
    best = int(np.argmin(scores / (folds - 1)))
    lam = float(grid[best])
    beta = lasso_path_fit(Xc, yc, lam)
    intercept = y_mean - float(x_mean @ beta)
    return RegressionFit(coefficients=beta, intercept=intercept, penalty=lam,
                         feature_names=tuple(feature_names))


def baseline_predict(fit: RegressionFit, X) -> np.ndarray:
    """Fitted values, used directly as ranking scores."""
    X = np.asarray(X, dtype=np.float64)
    return X @ fit.coefficients + fit.intercept


def lasso_kkt_violation(X, y, fit: RegressionFit) -> float:
    """Largest KKT violation at the fitted lasso solution.

    For the objective 0.5 * ||yc - Xc b||^2 + lam * ||b||_1 the stationarity
    conditions are |x_j' r| <= lam for inactive coordinates and
    x_j' r = lam * sign(b_j) for active ones (r the centered residual).
    """
    X, y = _design(X, y)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    resid = yc - Xc @ fit.coefficients
    corr = Xc.T @ resid
    lam = fit.penalty
    worst = 0.0
    for j, b in enumerate(fit.coefficients):
        if b == 0.0:
            worst = max(worst, abs(corr[j]) - lam)
        else:
            worst = max(worst, abs(corr[j] - lam * np.sign(b)))
    return worst


def export_coefficients(fit: RegressionFit, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("feature,coefficient\n")
        fh.write(f"intercept,{fit.intercept!r}\n")
        names = fit.feature_names or tuple(str(i) for i in range(len(fit.coefficients)))
        for name, coef in zip(names, fit.coefficients):
            fh.write(f"{name},{coef!r}\n")
