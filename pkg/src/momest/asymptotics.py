"""Closed-form asymptotic covariances for both estimators, and their
Monte Carlo validation.

Two estimators are compared throughout: maximum marginal likelihood, with
asymptotic covariance (I - E[cov[phi|o]])^{-1}, and the two-step moment
estimator, with covariance I^{-1} + I^{-1} E[cov[beta|y]] I^{-1}.  All
population quantities here are computed by exact enumeration over the
channel's output space; Monte Carlo is reserved for validating the
central-limit claims themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .channels import keep_prob
from .errors import (
    BoundViolationError,
    MomestError,
    MonteCarloTrialError,
    SingularInformationError,
    SingularMatrixError,
)
from .expfam import FeatureMap, as_theta, distribution, fisher_info

__all__ = [
    "CovarianceReport",
    "invert_spd",
    "expected_posterior_cov",
    "sigma_marg",
    "expected_beta_cond_cov",
    "sigma_mom",
    "h_rr",
    "h_coord_release",
    "h_per_value",
    "trace_approx_coord_release",
    "trace_approx_per_value",
    "efficiency",
    "classic_rr_report",
    "noisy_copy_toy",
    "mc_covariance",
]


@dataclass(frozen=True)
class CovarianceReport:
    """Fisher information, both asymptotic covariances, the channel's
    excess-variance matrix H, and the scalar efficiency d^-1 tr(Sm Sv^-1)."""

    fisher: np.ndarray
    sigma_marg: np.ndarray
    sigma_mom: np.ndarray
    h_matrix: np.ndarray
    efficiency: float


def invert_spd(
    mat: np.ndarray,
    *,
    rtol: float = 1e-10,
    scale: float | None = None,
    error: type[MomestError] = SingularInformationError,
    context: str = "matrix",
) -> np.ndarray:
    """Invert a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below rtol times the largest (or times ``scale``, when the
    caller knows the natural magnitude of the problem) are treated as exact
    zeros and reported as an error, never regularized away.
    """
    mat = 0.5 * (mat + np.asarray(mat).T)
    eigvals, eigvecs = np.linalg.eigh(mat)
    top = float(np.max(np.abs(eigvals), initial=0.0))
    floor = rtol * max(top, scale if scale is not None else 0.0)
    if top <= 0.0 or eigvals.min() <= floor:
        raise error(f"{context} is singular beyond tolerance {rtol:g}")
    return (eigvecs / eigvals) @ eigvecs.T


def expected_posterior_cov(fm: FeatureMap, theta_star, S: np.ndarray) -> np.ndarray:
    """E over outputs of cov[phi(y) | o] under the channel matrix S."""
    S = np.asarray(S, dtype=float)
    p = distribution(fm, theta_star)
    q = S @ p  # marginal over outputs
    d = fm.d
    total = np.zeros((d, d))
    for o in range(S.shape[0]):
        if q[o] <= 0.0:
            continue
        post = S[o] * p / q[o]
        mean = fm.phi @ post
        cov = (fm.phi * post) @ fm.phi.T - np.outer(mean, mean)
        total += q[o] * cov
    return 0.5 * (total + total.T)


def sigma_marg(fm: FeatureMap, theta_star, S: np.ndarray) -> np.ndarray:
    """(I - E[cov[phi|o]])^{-1}, the marginal-likelihood asymptotic covariance."""
    fisher = fisher_info(fm, theta_star)
    info = fisher - expected_posterior_cov(fm, theta_star, S)
    fisher_scale = float(np.max(np.abs(np.linalg.eigvalsh(fisher)), initial=0.0))
    return invert_spd(
        info,
        scale=fisher_scale,
        context="marginal information I - E[cov[phi|o]]",
    )


def _channel_matrices(channel, fm: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """(S, B): exact output distribution per outcome and beta value per output."""
    S = channel.end_to_end_matrix(fm)
    B = channel.debias_matrix(fm)
    return np.asarray(S, float), np.asarray(B, float)


def expected_beta_cond_cov(fm: FeatureMap, theta_star, channel) -> np.ndarray:
    """E over y of cov[beta(o) | y], by exhaustive output enumeration."""
    S, B = _channel_matrices(channel, fm)
    p = distribution(fm, theta_star)
    d = fm.d
    total = np.zeros((d, d))
    for y in range(fm.m):
        col = S[:, y]
        mean = B @ col
        cov = (B * col) @ B.T - np.outer(mean, mean)
        total += p[y] * cov
    return 0.5 * (total + total.T)


def sigma_mom(fm: FeatureMap, theta_star, channel) -> np.ndarray:
    """I^{-1} + I^{-1} E[cov[beta|y]] I^{-1}, the moment-estimator covariance."""
    info_inv = invert_spd(fisher_info(fm, theta_star), context="Fisher information")
    middle = expected_beta_cond_cov(fm, theta_star, channel)
    return info_inv + info_inv @ middle @ info_inv


# ---------------------------------------------------------------------------
# Closed-form H matrices
# ---------------------------------------------------------------------------


def h_rr(fm: FeatureMap, theta_star, epsilon: float, base_u: np.ndarray) -> np.ndarray:
    """Excess variance of the classic randomized-response debiaser:

        H = (1-eps)/eps^2 cov_u[phi] + (1-eps)/eps E_p[(phi - E_u[phi])^{x2}]
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    u = np.asarray(base_u, dtype=float).reshape(-1)
    p = distribution(fm, theta_star)
    mean_u = fm.phi @ u
    cov_u = (fm.phi * u) @ fm.phi.T - np.outer(mean_u, mean_u)
    centered = fm.phi - mean_u[:, None]
    second = (centered * p) @ centered.T
    out = (1.0 - epsilon) / epsilon**2 * cov_u + (1.0 - epsilon) / epsilon * second
    return 0.5 * (out + out.T)


def h_coord_release(fm: FeatureMap, theta_star, alpha: float) -> np.ndarray:
    """Excess variance of uniform coordinate release on binary features:

        H = d q(1-q)/(2q-1)^2 Id + E[d diag(phi)^2 - phi phi^T]
    """
    if not fm.is_binary:
        raise BoundViolationError("coordinate-release H requires binary features")
    d = fm.d
    q = keep_prob(alpha)
    p = distribution(fm, theta_star)
    flip_term = d * q * (1.0 - q) / (2.0 * q - 1.0) ** 2 * np.eye(d)
    diag_term = np.diag(fm.phi**2 @ p)
    outer_term = (fm.phi * p) @ fm.phi.T
    out = flip_term + d * diag_term - outer_term
    return 0.5 * (out + out.T)


def h_per_value(d: int, alpha: float, delta_bar: float) -> np.ndarray:
    """Excess variance of per-value flips: q(1-q)/(2q-1)^2 Id at q_{alpha/delta_bar}."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    q = keep_prob(alpha / delta_bar)
    return q * (1.0 - q) / (2.0 * q - 1.0) ** 2 * np.eye(d)


def trace_approx_coord_release(d: int, alpha: float, delta_bar: float) -> float:
    """Small-alpha approximation 4 d^2 / alpha^2 + delta_bar (d - 1)."""
    return 4.0 * d**2 / alpha**2 + delta_bar * (d - 1)


def trace_approx_per_value(d: int, alpha: float, delta_bar: float) -> float:
    """Small-alpha approximation 4 d delta_bar^2 / alpha^2."""
    return 4.0 * d * delta_bar**2 / alpha**2


def efficiency(sig_marg: np.ndarray, sig_mom: np.ndarray) -> float:
    """d^{-1} tr(Sigma_marg Sigma_mom^{-1}); 1 when the estimators tie."""
    sig_mom = np.asarray(sig_mom, dtype=float)
    inv = invert_spd(
        sig_mom, error=SingularMatrixError, context="moment covariance"
    )
    d = sig_mom.shape[0]
    return float(np.trace(np.asarray(sig_marg) @ inv)) / d


def classic_rr_report(
    fm: FeatureMap, theta_star, epsilon: float, base_u: np.ndarray | None = None
) -> CovarianceReport:
    """Full covariance comparison under classic randomized response."""
    from .channels import ClassicRR

    u = np.full(fm.m, 1.0 / fm.m) if base_u is None else np.asarray(base_u, float)
    ch = ClassicRR(epsilon, u)
    S = ch.channel_matrix()
    smarg = sigma_marg(fm, theta_star, S)
    smom = sigma_mom(fm, theta_star, ch)
    return CovarianceReport(
        fisher=fisher_info(fm, theta_star),
        sigma_marg=smarg,
        sigma_mom=smom,
        h_matrix=h_rr(fm, theta_star, epsilon, u),
        efficiency=efficiency(smarg, smom),
    )


def noisy_copy_toy(theta: float, noise_var: float = 1.0) -> CovarianceReport:
    """One-bit family phi(y) = y with observation (y, y + noise).

    The observation reveals y exactly, so the marginal estimator is fully
    efficient; the debiaser averages the two components and inherits
    conditional variance noise_var / 4 regardless.  This continuous-output
    case is handled analytically rather than by enumeration.
    """
    p = 1.0 / (1.0 + np.exp(-theta))
    info = p * (1.0 - p)
    cond = noise_var / 4.0
    smarg = np.array([[1.0 / info]])
    smom = np.array([[1.0 / info + cond / info**2]])
    return CovarianceReport(
        fisher=np.array([[info]]),
        sigma_marg=smarg,
        sigma_mom=smom,
        h_matrix=np.array([[cond]]),
        efficiency=efficiency(smarg, smom),
    )


def mc_covariance(
    estimate: Callable[[np.ndarray], np.ndarray],
    sample_obs: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    fm: FeatureMap,
    theta_star,
    n: int,
    trials: int,
    seed: int,
) -> np.ndarray:
    """Empirical covariance of sqrt(n) (theta_hat - theta_star) over trials.

    Each trial draws n outcomes from the model, pushes them through
    ``sample_obs`` and estimates parameters with ``estimate``.  Trial t uses
    the dedicated stream default_rng([seed, t]), so results are independent
    of execution order and thread count.
    """
    if n < 1 or trials < 1:
        raise ValueError("n and trials must be at least 1")
    theta_star = as_theta(theta_star)
    p = distribution(fm, theta_star)
    deviations = np.zeros((trials, fm.d))
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        ys = rng.choice(fm.m, size=n, p=p)
        obs = sample_obs(ys, rng)
        try:
            theta_hat = np.asarray(estimate(obs), dtype=float).reshape(-1)
        except MomestError as exc:
            raise MonteCarloTrialError(f"estimator failed at trial {t}: {exc}") from exc
        deviations[t] = np.sqrt(n) * (theta_hat - theta_star)
    return np.atleast_2d(np.cov(deviations, rowvar=False, ddof=1))
