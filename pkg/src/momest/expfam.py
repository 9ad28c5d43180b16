"""Finite-support exponential families with exact enumeration.

The model is p(y) proportional to exp(theta . phi(y)) over a finite outcome
set, represented by the d x m matrix of feature columns.  Everything here is
exact: log-partitions, moments and Fisher information are computed by direct
summation (with max-subtraction for overflow safety), and moment-matching
fits run Newton's method on the concave objective mu.theta - A(theta).

The factorized variant models a sequence conditionally, one softmax per
position, sharing a single parameter vector across positions; its
log-partition is a weighted sum of per-token log-partitions, so the same
solver covers both cases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ConvergenceError,
    NonIdentifiableError,
    NotInPolytopeError,
)

__all__ = [
    "FeatureMap",
    "Params",
    "MomentVector",
    "FactorizedModel",
    "log_partition",
    "distribution",
    "mean_stats",
    "fisher_info",
    "fit_from_moments",
    "sample",
    "factorized_fit",
    "label_distributions",
    "predict_labels",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureMap:
    """Matrix of sufficient statistics; column y holds the features of outcome y.

    ``upper_bound`` records, when set, that every entry lies in
    [0, upper_bound]; binarizing channels require this.
    """

    phi: np.ndarray
    upper_bound: float | None = None

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[0] < 1 or phi.shape[1] < 1:
            raise ValueError("phi must be a d x m matrix with d, m >= 1")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi entries must be finite")
        if self.upper_bound is not None:
            c = float(self.upper_bound)
            if c <= 0:
                raise ValueError("upper_bound must be positive")
            if phi.min() < 0.0 or phi.max() > c:
                raise ValueError("phi entries are not inside [0, upper_bound]")
        object.__setattr__(self, "phi", _freeze(phi))

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    @property
    def m(self) -> int:
        return self.phi.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.phi == 0.0) | (self.phi == 1.0)))

    def column(self, y: int) -> np.ndarray:
        return self.phi[:, y]

    @classmethod
    def binary_cube(cls, d: int) -> "FeatureMap":
        """All 2**d binary feature vectors; outcome y encodes its own bits,
        most significant bit first (y=0 is all zeros, y=2**d-1 all ones)."""
        m = 2**d
        cols = np.zeros((d, m))
        for y in range(m):
            for i in range(d):
                cols[i, y] = (y >> (d - 1 - i)) & 1
        return cls(cols, upper_bound=1.0)


@dataclass(frozen=True)
class Params:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta entries must be finite")
        object.__setattr__(self, "theta", _freeze(theta))


@dataclass(frozen=True)
class MomentVector:
    """An estimate of E[phi]; n is the sample count behind it (0 = population)."""

    mu: np.ndarray
    n: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu entries must be finite")
        object.__setattr__(self, "mu", _freeze(mu))


def as_theta(theta) -> np.ndarray:
    if isinstance(theta, Params):
        return theta.theta
    return np.asarray(theta, dtype=float).reshape(-1)


def as_mu(mu) -> np.ndarray:
    if isinstance(mu, MomentVector):
        return mu.mu
    return np.asarray(mu, dtype=float).reshape(-1)


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def log_partition(fm: FeatureMap, theta) -> float:
    """log sum_y exp(theta . phi(y))."""
    return float(logsumexp(fm.phi.T @ as_theta(theta)))


def distribution(fm: FeatureMap, theta) -> np.ndarray:
    """Probability vector over the m outcomes; positive, sums to 1."""
    return _softmax(fm.phi.T @ as_theta(theta))


def mean_stats(fm: FeatureMap, theta) -> MomentVector:
    """Population moment Phi @ p(theta), i.e. the gradient of the log-partition."""
    return MomentVector(fm.phi @ distribution(fm, theta), n=0)


def fisher_info(fm: FeatureMap, theta) -> np.ndarray:
    """Covariance of phi(y) under p(theta); symmetric PSD."""
    p = distribution(fm, theta)
    mu = fm.phi @ p
    mat = (fm.phi * p) @ fm.phi.T - np.outer(mu, mu)
    return 0.5 * (mat + mat.T)


def sample(fm: FeatureMap, theta, rng: np.random.Generator) -> int:
    """Draw one outcome index from p(theta)."""
    return int(rng.choice(fm.m, p=distribution(fm, theta)))


# ---------------------------------------------------------------------------
# Moment-matching solver
#
# Both the plain family and the factorized conditional maximize
#     g(theta) = mu . theta - sum_b w_b * A_b(theta)
# where each block b is a softmax over its own feature columns.  The solver
# is Newton with Armijo backtracking; after 3 failed line searches it falls
# back to plain gradient ascent.  Unidentifiable directions (those along
# which every centered block is zero) are removed up front, yielding the
# minimum-norm solution.
# ---------------------------------------------------------------------------


def _blocks_value(mu, blocks, theta) -> float:
    total = float(mu @ theta)
    for w, phi in blocks:
        total -= w * float(logsumexp(phi.T @ theta))
    return total


def _blocks_mean_fisher(blocks, theta):
    d = theta.shape[0]
    mean = np.zeros(d)
    fish = np.zeros((d, d))
    for w, phi in blocks:
        p = _softmax(phi.T @ theta)
        mb = phi @ p
        mean += w * mb
        fish += w * ((phi * p) @ phi.T - np.outer(mb, mb))
    return mean, 0.5 * (fish + fish.T)


def _identifiable_basis(blocks) -> np.ndarray:
    centered = np.hstack([phi - phi.mean(axis=1, keepdims=True) for _, phi in blocks])
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return u[:, :0]
    rank = int(np.sum(s > 1e-12 * s[0]))
    return u[:, :rank]


def _fit_moments_core(
    mu: np.ndarray,
    blocks: Sequence[tuple[float, np.ndarray]],
    *,
    tol: float,
    max_iter: int,
    theta_cap: float,
    theta0: np.ndarray | None,
    project_moments: bool,
) -> np.ndarray:
    d = blocks[0][1].shape[0]
    basis = _identifiable_basis(blocks)

    mean0 = np.zeros(d)
    for w, phi in blocks:
        mean0 += w * phi.mean(axis=1)
    resid = mu - mean0
    perp = resid - basis @ (basis.T @ resid)
    perp_norm = float(np.max(np.abs(perp))) if perp.size else 0.0
    rank_deficient = basis.shape[1] < d
    if not project_moments and rank_deficient and perp_norm > 0.5 * tol:
        raise NonIdentifiableError(
            "moment target constrains a direction the features cannot "
            f"express (unmatched component {perp_norm:.3e})",
            direction=perp / np.linalg.norm(perp),
        )
    if basis.shape[1] == 0:
        return np.zeros(d)

    xi = basis.T @ (np.zeros(d) if theta0 is None else np.asarray(theta0, float))
    value = _blocks_value(mu, blocks, basis @ xi)
    newton = True
    failed_searches = 0

    for _ in range(max_iter):
        theta = basis @ xi
        mean, fish = _blocks_mean_fisher(blocks, theta)
        grad_full = mu - mean
        grad = basis.T @ grad_full
        if project_moments:
            converged = np.max(np.abs(grad)) <= tol
        elif rank_deficient:
            # the perpendicular residual is fixed and already <= tol/2
            converged = np.max(np.abs(grad)) <= 0.5 * tol
        else:
            converged = np.max(np.abs(grad_full)) <= tol
        if converged:
            return theta

        direction = grad
        if newton:
            try:
                direction = np.linalg.solve(basis.T @ fish @ basis, grad)
            except np.linalg.LinAlgError:
                direction = grad
        slope = float(grad @ direction)
        if slope <= 0.0:
            direction, slope = grad, float(grad @ grad)

        step = 1.0
        accepted = False
        # allow for floating-point noise in the objective near the optimum,
        # where true per-step improvements drop below representability
        noise = 1e-13 * max(1.0, abs(value))
        while step >= 1e-12:
            xi_new = xi + step * direction
            value_new = _blocks_value(mu, blocks, basis @ xi_new)
            if value_new >= value + 1e-4 * step * slope - noise:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            failed_searches += 1
            if newton and failed_searches >= 3:
                newton = False
                continue
            if not newton:
                break
            continue

        xi, value = xi_new, value_new
        if np.linalg.norm(basis @ xi) > theta_cap:
            raise NotInPolytopeError(
                "moment-matching objective appears unbounded: parameter norm "
                f"exceeded {theta_cap:g}; the target moment lies outside the "
                "marginal polytope"
            )
    raise ConvergenceError(
        f"moment fit did not reach tolerance {tol:g} in {max_iter} iterations"
    )


def fit_from_moments(
    fm: FeatureMap,
    mu,
    *,
    tol: float = 1e-8,
    max_iter: int = 500,
    theta_cap: float = 1e3,
    theta0=None,
    project_moments: bool = False,
) -> Params:
    """Solve max_theta mu.theta - A(theta), i.e. find theta with mean_stats = mu.

    Newton with Armijo backtracking, gradient-ascent fallback after 3 failed
    line searches.  On rank-deficient (centered) feature maps the fit is
    restricted to the identifiable subspace and returns the minimum-norm
    parameter.  Raises NonIdentifiableError when mu constrains an
    inexpressible direction, NotInPolytopeError when the objective is
    unbounded (parameter norm passes ``theta_cap``).
    """
    theta = _fit_moments_core(
        as_mu(mu),
        [(1.0, fm.phi)],
        tol=tol,
        max_iter=max_iter,
        theta_cap=theta_cap,
        theta0=None if theta0 is None else as_theta(theta0),
        project_moments=project_moments,
    )
    return Params(theta)


# ---------------------------------------------------------------------------
# Factorized conditional models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactorizedModel:
    """Per-position conditional model p(b|a) ~ exp(f(a,b) . theta).

    ``features`` is d x (V*K); column a*K + b holds f(a, b).  The sequence
    model multiplies these conditionals across positions (no edge
    potentials), so its log-partition is a sum of per-token softmax
    log-partitions.
    """

    features: np.ndarray
    vocab_size: int
    n_labels: int
    theta: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[1] != self.vocab_size * self.n_labels:
            raise ValueError("features must be d x (vocab_size * n_labels)")
        if not np.all(np.isfinite(feats)):
            raise ValueError("feature entries must be finite")
        object.__setattr__(self, "features", _freeze(feats))
        if self.theta is not None:
            object.__setattr__(
                self, "theta", _freeze(np.asarray(self.theta, float).reshape(-1))
            )

    @property
    def d(self) -> int:
        return self.features.shape[0]

    def token_block(self, a: int) -> np.ndarray:
        """d x K slice of feature columns for token a."""
        k = self.n_labels
        return self.features[:, a * k : (a + 1) * k]


def factorized_fit(
    model: FactorizedModel,
    mu,
    avg_position_counts,
    *,
    tol: float = 1e-6,
    max_iter: int = 500,
    theta_cap: float = 1e3,
    theta0=None,
    project_moments: bool = False,
) -> Params:
    """Moment fit for the factorized conditional model.

    ``avg_position_counts[a]`` is the average per-example number of positions
    holding token a; ``mu`` must be on the same per-example scale (average of
    summed node features).  The objective mu.theta - sum_a n_a A_a(theta) is
    concave and solved to gradient infinity-norm <= tol.
    """
    counts = np.asarray(avg_position_counts, dtype=float).reshape(-1)
    if counts.shape[0] != model.vocab_size:
        raise ValueError("avg_position_counts must have one entry per token")
    if counts.min() < 0.0:
        raise ValueError("avg_position_counts must be nonnegative")
    blocks = [
        (float(counts[a]), model.token_block(a))
        for a in range(model.vocab_size)
        if counts[a] > 0.0
    ]
    if not blocks:
        raise ValueError("no token occurs with positive count")
    theta = _fit_moments_core(
        as_mu(mu),
        blocks,
        tol=tol,
        max_iter=max_iter,
        theta_cap=theta_cap,
        theta0=None if theta0 is None else as_theta(theta0),
        project_moments=project_moments,
    )
    return Params(theta)


def label_distributions(model: FactorizedModel, theta) -> np.ndarray:
    """V x K table of conditional label probabilities p(b|a)."""
    th = as_theta(theta)
    scores = (model.features.T @ th).reshape(model.vocab_size, model.n_labels)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def predict_labels(model: FactorizedModel, theta, tokens) -> np.ndarray:
    """Most likely label per token under the fitted conditionals."""
    table = label_distributions(model, theta)
    return np.argmax(table[np.asarray(tokens, dtype=int)], axis=1)
