"""The two estimators, end to end.

The moment pipeline averages debiased observations into a moment estimate
and solves one convex fit.  Maximum marginal likelihood runs EM with exact
E-steps over the finite outcome space.  The remaining functions expose the
geometry connecting them: least-squares recovery of the outcome
distribution through the channel's pseudoinverse, its KL-divergence
counterpart, the KL projection onto the family (which is moment matching),
and the one-EM-step equivalence that holds for deterministic channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expfam import (
    FeatureMap,
    MomentVector,
    Params,
    as_theta,
    distribution,
    fit_from_moments,
)

__all__ = [
    "ChannelMatrix",
    "EmpiricalObsDist",
    "observed_distribution",
    "moment_estimate",
    "marginal_ll",
    "em_marginal_ml",
    "pinv_recover",
    "negativity_mass",
    "kl_recover",
    "kl_project",
    "one_em_step",
    "moment_requirement_check",
    "MomentRequirement",
]


@dataclass(frozen=True)
class ChannelMatrix:
    """k x m supervision matrix; column y is the output distribution given y."""

    S: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2:
            raise ValueError("S must be a k x m matrix")
        if S.min() < 0.0:
            raise ValueError("S entries must be nonnegative")
        sums = S.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("columns of S must sum to 1")
        S = S.copy()
        S.setflags(write=False)
        object.__setattr__(self, "S", S)

    @property
    def k(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]


@dataclass(frozen=True)
class EmpiricalObsDist:
    """Empirical distribution over the k outputs, with its sample count."""

    q_hat: np.ndarray
    n: int

    def __post_init__(self):
        q = np.asarray(self.q_hat, dtype=float).reshape(-1)
        if q.min() < 0.0 or abs(q.sum() - 1.0) > 1e-9:
            raise ValueError("q_hat must be a probability vector")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "q_hat", q)


def _as_channel(S) -> np.ndarray:
    if isinstance(S, ChannelMatrix):
        return S.S
    return np.asarray(S, dtype=float)


def observed_distribution(observations, k: int) -> EmpiricalObsDist:
    """Histogram of output indices as an EmpiricalObsDist."""
    obs = np.asarray(observations, dtype=int)
    counts = np.bincount(obs, minlength=k)
    return EmpiricalObsDist(counts / counts.sum(), n=int(counts.sum()))


def _as_obs_dist(observations, k: int) -> EmpiricalObsDist:
    if isinstance(observations, EmpiricalObsDist):
        return observations
    return observed_distribution(observations, k)


# ---------------------------------------------------------------------------
# Moment pipeline
# ---------------------------------------------------------------------------


def moment_estimate(
    observations, beta, fm: FeatureMap, **fit_options
) -> tuple[MomentVector, Params]:
    """Two-step estimate: average debiased observations, then fit.

    ``beta`` maps one observation to a d-vector; pass ``beta=None`` when
    ``observations`` is already an n x d array of debiased values (the
    vectorized channels produce these directly).  A moment average that
    falls outside the marginal polytope raises NotInPolytopeError from the
    fit; at small samples with noisy debiasers that is expected and is
    reported, never masked.
    """
    if beta is None:
        values = np.asarray(observations, dtype=float)
        if values.ndim != 2:
            raise ValueError("beta=None requires an n x d array of debiased values")
    else:
        values = np.stack([np.asarray(beta(o), dtype=float) for o in observations])
    if values.shape[0] == 0:
        raise ValueError("observations must be nonempty")
    mu = MomentVector(values.mean(axis=0), n=values.shape[0])
    theta = fit_from_moments(fm, mu, **fit_options)
    return mu, theta


# ---------------------------------------------------------------------------
# Maximum marginal likelihood via EM
# ---------------------------------------------------------------------------


def marginal_ll(theta, observations, S, fm: FeatureMap) -> float:
    """Average log marginal likelihood E_hat[log sum_y S(o|y) p_theta(y)]."""
    S = _as_channel(S)
    q_hat = _as_obs_dist(observations, S.shape[0]).q_hat
    p = distribution(fm, theta)
    marg = S @ p
    mask = q_hat > 0.0
    if np.any(marg[mask] <= 0.0):
        return -np.inf
    return float(q_hat[mask] @ np.log(marg[mask]))


def _em_once(
    q_hat: np.ndarray,
    S: np.ndarray,
    fm: FeatureMap,
    theta0: np.ndarray,
    *,
    tol: float,
    max_iter: int,
    fit_tol: float,
) -> tuple[np.ndarray, float]:
    theta = theta0
    ll = marginal_ll(theta, EmpiricalObsDist(q_hat, 0), S, fm)
    for _ in range(max_iter):
        p = distribution(fm, theta)
        joint = S * p[None, :]  # k x m
        marg = joint.sum(axis=1)
        mask = (q_hat > 0.0) & (marg > 0.0)
        post = joint[mask] / marg[mask, None]
        weights = q_hat[mask] @ post  # expected outcome distribution
        mu = fm.phi @ weights
        theta = fit_from_moments(fm, mu, tol=fit_tol, theta0=theta).theta
        new_ll = marginal_ll(theta, EmpiricalObsDist(q_hat, 0), S, fm)
        if new_ll < ll - 1e-9:
            raise AssertionError(
                f"EM log-likelihood decreased: {ll:.12f} -> {new_ll:.12f}"
            )
        if new_ll - ll < tol:
            return theta, new_ll
        ll = new_ll
    return theta, ll


def em_marginal_ml(
    observations,
    S,
    fm: FeatureMap,
    theta_init=None,
    *,
    tol: float = 1e-10,
    max_iter: int = 1000,
    fit_tol: float = 1e-10,
    n_starts: int = 1,
    init_scale: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Params:
    """EM for the marginal likelihood with exact E-steps.

    The E-step forms p(y|o) proportional to p_theta(y) S(o|y) exactly; the
    M-step is a moment fit of the expected statistics.  The marginal
    log-likelihood is asserted nondecreasing.  The objective is non-convex,
    so ``n_starts > 1`` adds random restarts (requires ``rng``) and returns
    the best final likelihood, ties broken by lowest start index.
    """
    S = _as_channel(S)
    q_hat = _as_obs_dist(observations, S.shape[0]).q_hat
    theta0 = np.zeros(fm.d) if theta_init is None else as_theta(theta_init)
    starts = [theta0]
    if n_starts > 1:
        if rng is None:
            raise ValueError("n_starts > 1 requires an rng for the random restarts")
        starts += [init_scale * rng.normal(size=fm.d) for _ in range(n_starts - 1)]
    best_theta, best_ll = None, -np.inf
    for start in starts:
        theta, ll = _em_once(
            q_hat, S, fm, start, tol=tol, max_iter=max_iter, fit_tol=fit_tol
        )
        if ll > best_ll:
            best_theta, best_ll = theta, ll
    return Params(best_theta)


# ---------------------------------------------------------------------------
# Two-step geometry
# ---------------------------------------------------------------------------


def pinv_recover(q_hat, S) -> np.ndarray:
    """Minimum-norm least-squares recovery r = S^+ q_hat.

    The result need not be a probability vector; negative entries flow into
    the downstream moment Phi r (see negativity_mass for the diagnostic).
    """
    S = _as_channel(S)
    q = q_hat.q_hat if isinstance(q_hat, EmpiricalObsDist) else np.asarray(q_hat, float)
    return np.linalg.pinv(S, rcond=1e-10) @ q


def negativity_mass(r: np.ndarray) -> float:
    """Total mass of negative entries in a recovered quasi-distribution."""
    r = np.asarray(r, dtype=float)
    return float(-r[r < 0.0].sum())


def kl_recover(q_hat, S, *, tol: float = 1e-13, max_iter: int = 50000) -> np.ndarray:
    """Minimize KL(q_hat || S p) over the simplex by multiplicative updates.

    This is EM on the unconstrained outcome distribution; the objective is
    convex in p and the iteration converges to the global optimum.  Starts
    uniform, so symmetric optima are returned as the symmetric split.
    Stops when the iterate stops moving (the objective alone flattens out
    well before the parameters settle).
    """
    S = _as_channel(S)
    q = q_hat.q_hat if isinstance(q_hat, EmpiricalObsDist) else np.asarray(q_hat, float)
    m = S.shape[1]
    p = np.full(m, 1.0 / m)
    mask = q > 0.0

    def objective(pvec):
        marg = S @ pvec
        return float(q[mask] @ (np.log(q[mask]) - np.log(marg[mask])))

    obj = objective(p)
    for _ in range(max_iter):
        marg = S @ p
        ratio = np.where(mask, q / np.maximum(marg, 1e-300), 0.0)
        p_new = p * (S.T @ ratio)
        total = p_new.sum()
        if total <= 0.0:
            break
        p_new /= total
        new_obj = objective(p_new)
        if new_obj > obj + 1e-12:
            raise AssertionError("KL recovery objective increased")
        moved = float(np.max(np.abs(p_new - p)))
        p, obj = p_new, new_obj
        if moved < tol:
            break
    return p


def kl_project(r_hat, fm: FeatureMap, **fit_options) -> Params:
    """KL projection of a distribution onto the family = moment matching on Phi r."""
    r = np.asarray(r_hat, dtype=float)
    return fit_from_moments(fm, fm.phi @ r, **fit_options)


def one_em_step(theta0, q_hat, S, fm: FeatureMap, **fit_options) -> Params:
    """One exact E-step from theta0 followed by one M-step.

    For a deterministic channel and theta0 = 0 this equals the moment
    pipeline kl_project(pinv_recover(q_hat, S)): the E-step spreads each
    output's mass uniformly over its preimage, exactly as the
    pseudoinverse does.
    """
    S = _as_channel(S)
    q = q_hat.q_hat if isinstance(q_hat, EmpiricalObsDist) else np.asarray(q_hat, float)
    p = distribution(fm, theta0)
    joint = S * p[None, :]
    marg = joint.sum(axis=1)
    mask = (q > 0.0) & (marg > 0.0)
    post = joint[mask] / marg[mask, None]
    weights = q[mask] @ post
    return fit_from_moments(fm, fm.phi @ weights, **fit_options)


@dataclass(frozen=True)
class MomentRequirement:
    """Whether the channel carries enough information for the moment pipeline.

    ``classification`` is "full_rank" when S has full column rank (the whole
    outcome distribution is recoverable), "factors" when the rows of Phi lie
    in the row space of S (the moments are recoverable even though p is
    not), and "insufficient" otherwise.  ``residual`` is the least-squares
    misfit of projecting Phi onto the row space of S.
    """

    classification: str
    residual: float
    rank: int


def moment_requirement_check(
    fm: FeatureMap, S, *, tol: float = 1e-8
) -> MomentRequirement:
    S = np.asarray(_as_channel(S), dtype=float)
    rank = int(np.linalg.matrix_rank(S, tol=1e-10 * max(1.0, float(np.abs(S).max()))))
    pinv = np.linalg.pinv(S, rcond=1e-10)
    projected = fm.phi @ pinv @ S  # projection of each row onto rowspace(S)
    residual = float(np.max(np.abs(fm.phi - projected)))
    if rank == S.shape[1]:
        classification = "full_rank"
    elif residual < tol:
        classification = "factors"
    else:
        classification = "insufficient"
    return MomentRequirement(classification=classification, residual=residual, rank=rank)
