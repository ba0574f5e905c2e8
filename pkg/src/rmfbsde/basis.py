"""Least-squares projections onto state bases: the discrete E[. | X_t].

A RegressionBasis names a family; calling ``expand`` on a sample freezes
the data-dependent pieces (standardization for polynomials, quantile
knots for the piecewise-linear family) into a BasisExpansion that can be
re-evaluated at any other batch of states. Fits therefore travel: a
continuation function estimated on one ensemble can be evaluated on
another, which the particle-convergence comparisons rely on.

Ridge is always on, lambda = 1e-8 * trace(gram)/columns. Rank-deficient
designs (collinear coordinates, constant coordinates, duplicated hat
columns) are routine here, and a fixed small ridge keeps the fit
deterministic where a pseudo-inverse would pick an arbitrary
representative; the fitted values it returns on degenerate designs match
the unregularized projection to well below Monte Carlo noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

__all__ = [
    "RegressionBasis",
    "BasisExpansion",
    "RegressionFit",
    "DesignFactor",
    "fit_conditional_expectation",
    "estimate_conditional_expectation",
]

_FAMILIES = ("polynomial", "piecewise_linear")


@dataclass(frozen=True)
class RegressionBasis:
    """Basis family specification.

    family "polynomial": additive powers x_j^m, m = 1..degree, per state
    coordinate, plus a constant.
    family "piecewise_linear": continuous hat functions on per-coordinate
    quantile knots (bins intervals), additive across coordinates, plus a
    constant; evaluation clamps to the knot range so extrapolation beyond
    the sample is constant.
    """

    family: str = "polynomial"
    degree: int = 3
    bins: int = 20

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"family must be one of {_FAMILIES}, got {self.family!r}")
        if self.family == "polynomial" and self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if self.family == "piecewise_linear" and self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")

    def expand(self, states: np.ndarray) -> "BasisExpansion":
        """Freeze data-dependent parameters against a sample (P, n)."""
        states = _as_states(states)
        n = states.shape[1]
        if self.family == "polynomial":
            center = states.mean(axis=0)
            spread = states.std(axis=0)
            spread = np.where(spread > 1e-8 * (1.0 + np.abs(center)), spread, 1.0)
            return BasisExpansion(
                family=self.family, degree=self.degree, center=center, spread=spread, knots=None
            )
        qs = np.linspace(0.0, 1.0, self.bins + 1)
        knots = []
        for j in range(n):
            kj = np.unique(np.quantile(states[:, j], qs))
            knots.append(kj if kj.size >= 2 else None)
        return BasisExpansion(
            family=self.family, degree=self.degree, center=None, spread=None, knots=tuple(knots)
        )


@dataclass(frozen=True)
class BasisExpansion:
    """A basis frozen against one sample; evaluable anywhere."""

    family: str
    degree: int
    center: np.ndarray | None
    spread: np.ndarray | None
    knots: tuple | None

    def matrix(self, states: np.ndarray) -> np.ndarray:
        """Design matrix (Q, k); first column constant."""
        states = _as_states(states)
        Q, n = states.shape
        cols = [np.ones(Q)]
        if self.family == "polynomial":
            u = (states - self.center) / self.spread
            for j in range(n):
                p = u[:, j]
                for m in range(1, self.degree + 1):
                    cols.append(p**m)
        else:
            rows = np.arange(Q)
            for j in range(n):
                kj = self.knots[j]
                if kj is None:
                    continue  # coordinate constant in the fitting sample
                x = np.clip(states[:, j], kj[0], kj[-1])
                # hat functions on the knot vector; they sum to 1, so the
                # constant column makes one of them redundant (ridge's job)
                idx = np.clip(np.searchsorted(kj, x, side="right") - 1, 0, kj.size - 2)
                frac = (x - kj[idx]) / (kj[idx + 1] - kj[idx])
                hats = np.zeros((Q, kj.size))
                hats[rows, idx] = 1.0 - frac
                hats[rows, idx + 1] += frac
                cols.append(hats)
        out = np.column_stack(cols)
        if not np.isfinite(out).all():
            raise ValueError("basis evaluation produced non-finite values")
        return out

    @property
    def size(self) -> int:
        if self.family == "polynomial":
            n = self.center.shape[0]
            return 1 + n * self.degree
        return 1 + sum(kj.size for kj in self.knots if kj is not None)


@dataclass(frozen=True)
class RegressionFit:
    """Frozen least-squares fit: expansion, coefficients, diagnostics.

    fitted matches the targets' shape, (P,) or (P, m); it may be dropped
    via strip() when only the function (coef + expansion) is kept.
    """

    expansion: BasisExpansion
    coef: np.ndarray            # (k, m)
    fitted: np.ndarray | None
    residual_var: np.ndarray    # (m,) per-target residual variance
    _chol: tuple                # cho_factor of the ridged gram matrix

    def predict(self, states: np.ndarray) -> np.ndarray:
        out = self.expansion.matrix(states) @ self.coef
        return out[:, 0] if out.shape[1] == 1 else out

    def strip(self) -> "RegressionFit":
        """Copy without the per-particle fitted values (saves memory)."""
        return RegressionFit(self.expansion, self.coef, None, self.residual_var, self._chol)

    def pointwise_se(self, states: np.ndarray) -> np.ndarray:
        """Standard error of the fitted value at each state, (Q, m)."""
        D = self.expansion.matrix(states)
        half = solve_triangular(self._chol[0], D.T, lower=True)  # gram = L L^T
        lever = np.einsum("kq,kq->q", half, half)
        return np.sqrt(np.outer(lever, self.residual_var))


def _as_states(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.ndim != 2:
        raise ValueError(f"states must be (particles, dim), got shape {states.shape}")
    return states


class DesignFactor:
    """Design matrix and ridged Cholesky for one batch of states.

    Factor once, fit many target sets against the same states. A
    previously computed Cholesky may be passed in when the states (hence
    the gram matrix) are known to be unchanged, e.g. across Picard sweeps.
    """

    def __init__(
        self,
        states: np.ndarray,
        basis: RegressionBasis | BasisExpansion,
        chol: tuple | None = None,
    ) -> None:
        states = _as_states(states)
        self.expansion = basis.expand(states) if isinstance(basis, RegressionBasis) else basis
        self.D = self.expansion.matrix(states)
        P, k = self.D.shape
        if P < k:
            raise ValueError(f"need at least {k} particles for a {k}-column design, got {P}")
        if chol is None:
            gram = self.D.T @ self.D
            gram[np.diag_indices_from(gram)] += 1e-8 * np.trace(gram) / k
            chol = cho_factor(gram, lower=True)
        self.chol = chol

    def leverage(self) -> np.ndarray:
        """Diagonal of the smoother matrix D (gram + ridge)^{-1} D^T.

        Entry p is particle p's self-influence on its own fitted value;
        under the ridge every entry is strictly below 1. Used to form
        leave-one-out corrected fits for unbiased residual diagnostics.
        """
        half = solve_triangular(self.chol[0], self.D.T, lower=True)
        return np.einsum("kp,kp->p", half, half)

    def fit(self, targets: np.ndarray) -> RegressionFit:
        targets = np.asarray(targets, dtype=float)
        squeeze = targets.ndim == 1
        if squeeze:
            targets = targets[:, None]
        if targets.shape[0] != self.D.shape[0]:
            raise ValueError(
                f"targets ({targets.shape[0]}) and states ({self.D.shape[0]}) "
                "disagree on particle count"
            )
        if not np.isfinite(targets).all():
            raise ValueError("targets contain non-finite values")
        coef = cho_solve(self.chol, self.D.T @ targets)
        fitted = self.D @ coef
        dof = max(self.D.shape[0] - self.D.shape[1], 1)
        residual_var = ((targets - fitted) ** 2).sum(axis=0) / dof
        return RegressionFit(
            expansion=self.expansion,
            coef=coef,
            fitted=fitted[:, 0] if squeeze else fitted,
            residual_var=residual_var,
            _chol=self.chol,
        )


def fit_conditional_expectation(
    targets: np.ndarray, states: np.ndarray, basis: RegressionBasis | BasisExpansion
) -> RegressionFit:
    """Ridge-stabilized least squares of targets on basis(states).

    targets may be (P,) or (P, m); the expensive factorization is shared
    across the m columns. Passing a BasisExpansion reuses frozen knots.
    """
    return DesignFactor(states, basis).fit(targets)


def estimate_conditional_expectation(
    targets: np.ndarray, states: np.ndarray, basis: RegressionBasis
) -> np.ndarray:
    """Fitted values of the least-squares projection, shape of targets."""
    return fit_conditional_expectation(targets, states, basis).fitted
