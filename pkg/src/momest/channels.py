"""Supervision channels and their unbiased debiasers.

Three randomized-response mechanisms are provided: the classic mixture
(reveal the outcome with probability epsilon, else draw from a base
distribution), and two structured schemes that first binarize the bounded
sufficient statistics and then release either one noisy coordinate or all
coordinates noised independently.  Each channel pairs its sampler with the
observation function beta whose conditional expectation recovers the
statistics exactly, and each can materialize its exact end-to-end output
distribution (marginalizing the binarization randomness) for the
differential-privacy auditor and the covariance calculus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BoundViolationError,
    DegeneratePrivacyError,
    EnumerationTooLargeError,
    InfinitePrivacyError,
)
from .expfam import FeatureMap

__all__ = [
    "keep_prob",
    "FlipProb",
    "ClassicRR",
    "CoordinateRelease",
    "PerValue",
    "BinarizedStat",
    "binarize",
    "bernoulli_binarize",
    "max_log_ratio",
    "dp_audit",
]

DEFAULT_ENUMERATION_BUDGET = 10**7


def keep_prob(t: float) -> float:
    """Probability e^{t/2} / (1 + e^{t/2}) of transmitting a bit unflipped."""
    t = float(t)
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t / 2.0))
    u = math.exp(t / 2.0)
    return u / (1.0 + u)


@dataclass(frozen=True)
class FlipProb:
    """Keep-probability q at exponent t; q(0) = 1/2 and q is increasing."""

    t: float

    @property
    def q(self) -> float:
        return keep_prob(self.t)


# ---------------------------------------------------------------------------
# Binarization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinarizedStat:
    """One Bernoulli draw per coordinate with mean phi[i]/c; E[c * tilde_o] = phi."""

    c: float
    tilde_o: np.ndarray


def bernoulli_binarize(values: np.ndarray, c: float, rng: np.random.Generator) -> np.ndarray:
    """Componentwise Bernoulli(values / c) draws for values in [0, c]."""
    values = np.asarray(values, dtype=float)
    if c <= 0:
        raise BoundViolationError("bound c must be positive")
    if values.size and (values.min() < 0.0 or values.max() > c):
        raise BoundViolationError(
            f"statistic values must lie in [0, {c}]; saw range "
            f"[{values.min():g}, {values.max():g}]"
        )
    return (rng.random(values.shape) < values / c).astype(np.int8)


def binarize(fm: FeatureMap, y: int, c: float, rng: np.random.Generator) -> BinarizedStat:
    """Binarize the feature vector of outcome y under bound c."""
    return BinarizedStat(c=float(c), tilde_o=bernoulli_binarize(fm.column(y), c, rng))


def _random_flips(bits: np.ndarray, q: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(bits.shape) < q
    return np.where(keep, bits, 1 - bits).astype(np.int8)


# ---------------------------------------------------------------------------
# Classic randomized response
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassicRR:
    """Reveal the true outcome with probability epsilon, else draw from base_u."""

    epsilon: float
    base_u: np.ndarray

    def __post_init__(self):
        # epsilon = 0 is tolerated for sampling (pure noise); debiasing
        # rejects it, matching the alpha = 0 convention of the structured
        # channels
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        u = np.asarray(self.base_u, dtype=float).reshape(-1)
        if u.min() < 0.0 or abs(u.sum() - 1.0) > 1e-12:
            raise ValueError("base_u must be a probability vector")
        u = u.copy()
        u.setflags(write=False)
        object.__setattr__(self, "base_u", u)

    @classmethod
    def uniform(cls, epsilon: float, m: int) -> "ClassicRR":
        return cls(epsilon, np.full(m, 1.0 / m))

    @property
    def m(self) -> int:
        return self.base_u.shape[0]

    def sample(self, y: int, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(y)
        return int(rng.choice(self.m, p=self.base_u))

    def sample_many(self, ys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ys = np.asarray(ys, dtype=int)
        reveal = rng.random(ys.shape) < self.epsilon
        noise = rng.choice(self.m, size=ys.shape, p=self.base_u)
        return np.where(reveal, ys, noise)

    def beta(self, fm: FeatureMap, o) -> np.ndarray:
        """Debiased statistic (phi(o) - (1-eps) * E_u[phi]) / eps.

        Accepts a single index (returns a d-vector) or an index array
        (returns d x n).
        """
        if self.epsilon <= 0.0:
            raise DegeneratePrivacyError(
                "epsilon = 0 carries no signal; debiasing is impossible"
            )
        shift = (1.0 - self.epsilon) * (fm.phi @ self.base_u)
        phi_o = fm.phi[:, np.asarray(o, dtype=int)]
        if np.isscalar(o) or np.asarray(o).ndim == 0:
            return (phi_o - shift) / self.epsilon
        return (phi_o - shift[:, None]) / self.epsilon

    def channel_matrix(self) -> np.ndarray:
        """m x m matrix; column y is the output distribution given y."""
        return self.epsilon * np.eye(self.m) + (1.0 - self.epsilon) * np.outer(
            self.base_u, np.ones(self.m)
        )

    def beta_matrix(self, fm: FeatureMap) -> np.ndarray:
        """d x m matrix of beta values, one column per possible output."""
        return self.beta(fm, np.arange(self.m))

    def end_to_end_matrix(self, fm: FeatureMap) -> np.ndarray:
        if fm.m != self.m:
            raise ValueError("feature map outcome count does not match base_u")
        return self.channel_matrix()

    def debias_matrix(self, fm: FeatureMap) -> np.ndarray:
        """Alias of beta_matrix with the signature shared by all channels."""
        return self.beta_matrix(fm)

    def dp_level(self) -> float:
        """The closed-form privacy level epsilon / ((1-epsilon) * min_o u(o)).

        This upper-bounds the exact audited level log(1 + eps/((1-eps) u))
        because e^x >= 1 + x.
        """
        if self.m == 1:
            return 0.0
        if self.epsilon >= 1.0:
            raise InfinitePrivacyError(
                "epsilon = 1 reveals the outcome; no finite privacy level"
            )
        u_min = float(self.base_u.min())
        if u_min <= 0.0:
            raise InfinitePrivacyError(
                "base distribution assigns zero mass to some outcome; outputs "
                "there identify the input"
            )
        return self.epsilon / ((1.0 - self.epsilon) * u_min)


# ---------------------------------------------------------------------------
# Coordinate release
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoordinateRelease:
    """Release one binarized coordinate, flipped with keep-probability q_alpha.

    Outputs are pairs (j, bit); the sampling distribution over coordinates
    defaults to uniform.
    """

    alpha: float
    d: int
    c: float = 1.0
    p_cr: np.ndarray | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        p = self.p_cr
        if p is None:
            p = np.full(self.d, 1.0 / self.d)
        else:
            p = np.asarray(p, dtype=float).reshape(-1)
            if p.shape[0] != self.d or p.min() <= 0.0 or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("p_cr must be strictly positive and sum to 1")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "p_cr", p)

    @property
    def q(self) -> float:
        return keep_prob(self.alpha)

    def sample(self, tilde_o: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
        tilde_o = np.asarray(tilde_o)
        j = int(rng.choice(self.d, p=self.p_cr))
        bit = int(tilde_o[j]) if rng.random() < self.q else 1 - int(tilde_o[j])
        return j, bit

    def sample_many(
        self, tilde_matrix: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        tilde_matrix = np.asarray(tilde_matrix)
        n = tilde_matrix.shape[0]
        js = rng.choice(self.d, size=n, p=self.p_cr)
        chosen = tilde_matrix[np.arange(n), js]
        bits = _random_flips(chosen, self.q, rng)
        return js, bits

    def _require_signal(self) -> float:
        denom = 2.0 * self.q - 1.0
        if denom <= 0.0:
            raise DegeneratePrivacyError(
                "alpha = 0 flips bits with probability 1/2; debiasing is impossible"
            )
        return denom

    def beta(self, j: int, bit: int) -> np.ndarray:
        """Debiased vector (bit - 1 + q)/(2q - 1) * c / p_cr(j) on axis j."""
        denom = self._require_signal()
        out = np.zeros(self.d)
        out[j] = (bit - 1.0 + self.q) / denom * self.c / self.p_cr[j]
        return out

    def outputs(self) -> list[tuple[int, int]]:
        return [(j, bit) for j in range(self.d) for bit in (0, 1)]

    def beta_matrix(self) -> np.ndarray:
        """d x 2d matrix of beta values, columns ordered as outputs()."""
        denom = self._require_signal()
        cols = np.zeros((self.d, 2 * self.d))
        for idx, (j, bit) in enumerate(self.outputs()):
            cols[j, idx] = (bit - 1.0 + self.q) / denom * self.c / self.p_cr[j]
        return cols

    def end_to_end_matrix(self, fm: FeatureMap) -> np.ndarray:
        """2d x m matrix of P((j, bit) | y), binarization marginalized.

        Given y, coordinate j of the binarized vector is Bernoulli(phi_j/c),
        so P(bit=1 | j, y) = (phi_j/c)(2q-1) + 1 - q.
        """
        if fm.d != self.d:
            raise ValueError("feature dimension does not match channel")
        probs1 = fm.phi / self.c * (2.0 * self.q - 1.0) + (1.0 - self.q)  # d x m
        if fm.phi.min() < 0.0 or fm.phi.max() > self.c:
            raise BoundViolationError("features must lie in [0, c] to binarize")
        mat = np.zeros((2 * self.d, fm.m))
        for idx, (j, bit) in enumerate(self.outputs()):
            p1 = probs1[j]
            mat[idx] = self.p_cr[j] * (p1 if bit == 1 else 1.0 - p1)
        return mat

    def debias_matrix(self, fm: FeatureMap) -> np.ndarray:
        """Alias of beta_matrix with the signature shared by all channels."""
        if fm.d != self.d:
            raise ValueError("feature dimension does not match channel")
        return self.beta_matrix()


# ---------------------------------------------------------------------------
# Per-value randomized response on the binarized statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerValue:
    """Flip every binarized coordinate independently with keep-prob q_{alpha/delta_bar}."""

    alpha: float
    delta_bar: float
    c: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.delta_bar <= 0:
            raise ValueError("delta_bar must be positive")

    @classmethod
    def for_family(cls, fm: FeatureMap, alpha: float, c: float | None = None) -> "PerValue":
        """Channel with delta_bar set to the exact supremum of ||tilde_o||_1.

        The binarized vector can be 1 exactly on the coordinates where phi is
        positive, so the supremum is the largest per-outcome support size.
        """
        if c is None:
            if fm.upper_bound is None:
                raise ValueError("feature map carries no bound; pass c explicitly")
            c = fm.upper_bound
        delta = int(np.max(np.count_nonzero(fm.phi, axis=0)))
        return cls(alpha=alpha, delta_bar=float(max(delta, 1)), c=float(c))

    @property
    def q(self) -> float:
        return keep_prob(self.alpha / self.delta_bar)

    def check_delta(self, fm: FeatureMap) -> None:
        delta = int(np.max(np.count_nonzero(fm.phi, axis=0)))
        if self.delta_bar < delta:
            raise BoundViolationError(
                f"delta_bar={self.delta_bar:g} is below the actual supremum "
                f"{delta} of ||tilde_o||_1"
            )

    def sample(self, tilde_o: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return _random_flips(np.asarray(tilde_o), self.q, rng)

    def sample_many(self, tilde_matrix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return _random_flips(np.asarray(tilde_matrix), self.q, rng)

    def _require_signal(self) -> float:
        denom = 2.0 * self.q - 1.0
        if denom <= 0.0:
            raise DegeneratePrivacyError(
                "alpha = 0 flips bits with probability 1/2; debiasing is impossible"
            )
        return denom

    def beta(self, o_pv: np.ndarray) -> np.ndarray:
        """Debiased vector (o_pv - 1 + q) / (2q - 1) * c, componentwise.

        Accepts a single vector or an n x d matrix of released vectors.
        """
        denom = self._require_signal()
        o_pv = np.asarray(o_pv, dtype=float)
        return (o_pv - 1.0 + self.q) / denom * self.c

    def outputs(self, d: int) -> np.ndarray:
        """All 2**d released vectors; row index encodes bits, MSB first."""
        out = np.zeros((2**d, d), dtype=np.int8)
        for code in range(2**d):
            for i in range(d):
                out[code, i] = (code >> (d - 1 - i)) & 1
        return out

    def beta_matrix(self, d: int) -> np.ndarray:
        """d x 2**d matrix of beta values, columns ordered as outputs(d)."""
        return self.beta(self.outputs(d)).T

    def end_to_end_matrix(
        self, fm: FeatureMap, *, budget: int = DEFAULT_ENUMERATION_BUDGET
    ) -> np.ndarray:
        """2**d x m matrix of P(o_pv | y); coordinates are independent given y."""
        d, m = fm.d, fm.m
        if (2**d) * m * m > budget:
            raise EnumerationTooLargeError(
                f"2^{d} outputs x {m}^2 outcome pairs exceeds budget {budget:g}"
            )
        if fm.phi.min() < 0.0 or fm.phi.max() > self.c:
            raise BoundViolationError("features must lie in [0, c] to binarize")
        self.check_delta(fm)
        probs1 = fm.phi / self.c * (2.0 * self.q - 1.0) + (1.0 - self.q)  # d x m
        outs = self.outputs(d)  # 2^d x d
        mat = np.ones((2**d, m))
        for i in range(d):
            on = outs[:, i : i + 1].astype(float)  # 2^d x 1
            mat *= on * probs1[i][None, :] + (1.0 - on) * (1.0 - probs1[i])[None, :]
        return mat

    def debias_matrix(self, fm: FeatureMap) -> np.ndarray:
        """Alias of beta_matrix with the signature shared by all channels."""
        return self.beta_matrix(fm.d)


# ---------------------------------------------------------------------------
# Differential-privacy audit
# ---------------------------------------------------------------------------


def max_log_ratio(S: np.ndarray, *, budget: int = DEFAULT_ENUMERATION_BUDGET) -> float:
    """Exact sup over (o, y, y') of log S(o|y) - log S(o|y').

    ``S`` is a k x m matrix whose column y is the output distribution given
    input y.  Returns inf if some output has positive probability under one
    input and zero under another.
    """
    S = np.asarray(S, dtype=float)
    k, m = S.shape
    if k * m * m > budget:
        raise EnumerationTooLargeError(
            f"{k} outputs x {m}^2 input pairs exceeds budget {budget:g}"
        )
    worst = 0.0
    for row in S:
        hi = row.max()
        if hi <= 0.0:
            continue
        lo = row.min()
        if lo <= 0.0:
            return math.inf
        worst = max(worst, math.log(hi) - math.log(lo))
    return worst


def dp_audit(channel, fm: FeatureMap, *, budget: int = DEFAULT_ENUMERATION_BUDGET) -> float:
    """End-to-end privacy audit of a channel over the outcomes of ``fm``.

    For the binarizing channels the output law marginalizes the
    binarization randomness, so the returned value is the exact privacy
    level of the composed mechanism y -> tilde_o -> o.
    """
    if isinstance(channel, np.ndarray):
        return max_log_ratio(channel, budget=budget)
    if isinstance(channel, PerValue):
        return max_log_ratio(channel.end_to_end_matrix(fm, budget=budget), budget=budget)
    return max_log_ratio(channel.end_to_end_matrix(fm), budget=budget)
