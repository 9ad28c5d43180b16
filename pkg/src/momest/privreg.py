"""Locally private linear regression via privatized sufficient statistics.

Ordinary least squares needs only the second moments E[x x^T] and E[x y].
After min-max scaling every feature, response, and product statistic into
[0, 1], each record's statistics are binarized and released through one of
two mechanisms:

* ``per_value``: the full vector of d(d+1)/2 + d statistics goes through
  independent bit flips at keep-probability q_{alpha/delta_bar}, with
  delta_bar the number of statistics (every coordinate can binarize to 1).

* ``mixed_coord``: draw a feature index i uniformly; with probability 1/2
  release the single statistic x_i y through one bit flipped at
  keep-probability q_alpha, otherwise draw j != i and release the triple
  [x_i^2, x_i x_j, x_j^2] through per-value flips at level alpha with
  delta_bar = 3.  Debiasing weights each released value by the inverse of
  its selection probability: 2d for the x_i y statistics, d for the
  diagonal x_k^2 statistics, and d(d-1) for the off-diagonal pairs.

Raw values are never released; only binarized, flipped bits leave the
record, so both the inputs and the response are privatized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .channels import bernoulli_binarize, keep_prob
from .errors import MissingCoordinateError, SingularMatrixError

__all__ = [
    "ScalingRecord",
    "RegressionDataset",
    "PrivatizedStatSample",
    "PerValueBatch",
    "MixedBatch",
    "stat_vector",
    "stat_layout",
    "scale_dataset",
    "privatize_record",
    "privatize_dataset",
    "aggregate_moments",
    "solve_and_score",
    "exact_moments",
    "synthetic_regression",
    "read_regression_csv",
    "mixed_channel_matrix",
]


# ---------------------------------------------------------------------------
# Statistic layout: pair products (i <= j) first, then x_i * y terms
# ---------------------------------------------------------------------------


def stat_layout(d: int) -> tuple[list[tuple[int, int]], int]:
    """Ordered (i, j) pairs with i <= j; total statistic count is
    d(d+1)/2 + d (pair products then xy products)."""
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    return pairs, len(pairs) + d


def _pair_index(d: int) -> dict[tuple[int, int], int]:
    pairs, _ = stat_layout(d)
    return {pair: idx for idx, pair in enumerate(pairs)}


def stat_vector(x: np.ndarray, y: float) -> np.ndarray:
    """All second-moment statistics of one scaled record, in layout order."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    pairs, total = stat_layout(d)
    out = np.empty(total)
    for idx, (i, j) in enumerate(pairs):
        out[idx] = x[i] * x[j]
    out[len(pairs) :] = x * y
    return out


def _unpack(est: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    pairs, _ = stat_layout(d)
    sxx = np.zeros((d, d))
    for idx, (i, j) in enumerate(pairs):
        sxx[i, j] = est[idx]
        sxx[j, i] = est[idx]
    sxy = np.asarray(est[len(pairs) :], dtype=float).copy()
    return sxx, sxy


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRecord:
    """Per-column affine maps onto [0, 1]; constant columns are flagged and
    mapped to zero."""

    x_min: np.ndarray
    x_range: np.ndarray
    y_min: float
    y_range: float
    degenerate_columns: tuple[int, ...]

    def unscale_features(self, x_scaled: np.ndarray) -> np.ndarray:
        return np.asarray(x_scaled) * self.x_range + self.x_min

    def unscale_response(self, y_scaled: np.ndarray) -> np.ndarray:
        return np.asarray(y_scaled) * self.y_range + self.y_min

    def unscale_coefficients(self, w: np.ndarray) -> tuple[np.ndarray, float]:
        """Coefficients and intercept acting on the original columns."""
        w = np.asarray(w, dtype=float)
        safe = np.where(self.x_range > 0.0, self.x_range, 1.0)
        coef = np.where(self.x_range > 0.0, w * self.y_range / safe, 0.0)
        intercept = self.y_min - float(coef @ self.x_min)
        return coef, intercept


@dataclass(frozen=True)
class RegressionDataset:
    """Scaled design and response; every statistic product lies in [0, 1]."""

    X: np.ndarray
    Y: np.ndarray
    scaling: ScalingRecord

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def scale_dataset(raw_x: np.ndarray, raw_y: np.ndarray) -> RegressionDataset:
    """Min-max scale each column and the response onto [0, 1]."""
    raw_x = np.asarray(raw_x, dtype=float)
    raw_y = np.asarray(raw_y, dtype=float).reshape(-1)
    if raw_x.ndim != 2 or raw_x.shape[0] < 1:
        raise ValueError("design must be a nonempty n x d matrix")
    if raw_x.shape[0] != raw_y.shape[0]:
        raise ValueError("design and response lengths differ")
    x_min = raw_x.min(axis=0)
    x_range = raw_x.max(axis=0) - x_min
    degenerate = tuple(int(i) for i in np.flatnonzero(x_range == 0.0))
    safe = np.where(x_range > 0.0, x_range, 1.0)
    x_scaled = np.where(x_range > 0.0, (raw_x - x_min) / safe, 0.0)
    y_min = float(raw_y.min())
    y_range = float(raw_y.max() - y_min)
    y_scaled = (raw_y - y_min) / y_range if y_range > 0.0 else np.zeros_like(raw_y)
    return RegressionDataset(
        X=x_scaled,
        Y=y_scaled,
        scaling=ScalingRecord(
            x_min=x_min,
            x_range=x_range,
            y_min=y_min,
            y_range=y_range if y_range > 0.0 else 0.0,
            degenerate_columns=degenerate,
        ),
    )


# ---------------------------------------------------------------------------
# Privatization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrivatizedStatSample:
    """One record's released, debiased payload.

    ``scheme`` is "per_value" (payload = full debiased statistic vector) or
    "mixed_coord" (branch "xy" with one value for statistic x_i y, or branch
    "pair" with values for [x_i^2, x_i x_j, x_j^2]).
    """

    scheme: str
    d: int
    values: np.ndarray
    branch: str | None = None
    indices: tuple[int, ...] = ()


def _debias_bits(bits: np.ndarray, q: float) -> np.ndarray:
    return (np.asarray(bits, dtype=float) - 1.0 + q) / (2.0 * q - 1.0)


def privatize_record(
    x: np.ndarray,
    y: float,
    scheme: str,
    alpha: float,
    rng: np.random.Generator,
) -> PrivatizedStatSample:
    """Binarize this record's statistics and release them under ``scheme``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    stats = stat_vector(x, y)
    if scheme == "per_value":
        _, total = stat_layout(d)
        q = keep_prob(alpha / total)
        bits = bernoulli_binarize(stats, 1.0, rng)
        keep = rng.random(bits.shape) < q
        released = np.where(keep, bits, 1 - bits)
        return PrivatizedStatSample(
            scheme="per_value", d=d, values=_debias_bits(released, q)
        )
    if scheme == "mixed_coord":
        if d < 2:
            raise ValueError("the mixed scheme needs at least two features")
        pair_idx = _pair_index(d)
        n_pairs = len(pair_idx)
        i = int(rng.integers(0, d))
        if rng.random() < 0.5:
            q = keep_prob(alpha)
            bit = int(bernoulli_binarize(np.array([stats[n_pairs + i]]), 1.0, rng)[0])
            if rng.random() >= q:
                bit = 1 - bit
            return PrivatizedStatSample(
                scheme="mixed_coord",
                d=d,
                values=_debias_bits(np.array([bit]), q),
                branch="xy",
                indices=(i,),
            )
        j = int(rng.integers(0, d - 1))
        if j >= i:
            j += 1
        triple = np.array(
            [
                stats[pair_idx[(i, i)]],
                stats[pair_idx[(min(i, j), max(i, j))]],
                stats[pair_idx[(j, j)]],
            ]
        )
        q = keep_prob(alpha / 3.0)
        bits = bernoulli_binarize(triple, 1.0, rng)
        keep = rng.random(3) < q
        released = np.where(keep, bits, 1 - bits)
        return PrivatizedStatSample(
            scheme="mixed_coord",
            d=d,
            values=_debias_bits(released, q),
            branch="pair",
            indices=(i, j),
        )
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class PerValueBatch:
    d: int
    values: np.ndarray  # n x (d(d+1)/2 + d) debiased statistics


@dataclass(frozen=True)
class MixedBatch:
    d: int
    n: int
    heads_index: np.ndarray  # feature index per heads record
    heads_values: np.ndarray
    tails_i: np.ndarray
    tails_j: np.ndarray
    tails_values: np.ndarray  # n_tails x 3, debiased [x_i^2, x_i x_j, x_j^2]


def privatize_dataset(
    X: np.ndarray,
    Y: np.ndarray,
    scheme: str,
    alpha: float,
    rng: np.random.Generator,
):
    """Vectorized privatization of a whole scaled dataset."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n, d = X.shape
    pairs, total = stat_layout(d)
    stats = np.empty((n, total))
    for idx, (i, j) in enumerate(pairs):
        stats[:, idx] = X[:, i] * X[:, j]
    stats[:, len(pairs) :] = X * Y[:, None]

    if scheme == "per_value":
        q = keep_prob(alpha / total)
        bits = bernoulli_binarize(stats, 1.0, rng)
        keep = rng.random(bits.shape) < q
        released = np.where(keep, bits, 1 - bits)
        return PerValueBatch(d=d, values=_debias_bits(released, q))

    if scheme == "mixed_coord":
        if d < 2:
            raise ValueError("the mixed scheme needs at least two features")
        pair_idx = _pair_index(d)
        i_all = rng.integers(0, d, size=n)
        heads = rng.random(n) < 0.5
        j_all = rng.integers(0, d - 1, size=n)
        j_all = np.where(j_all >= i_all, j_all + 1, j_all)

        q_xy = keep_prob(alpha)
        hi = i_all[heads]
        xy_stats = stats[heads, len(pairs) + hi]
        xy_bits = bernoulli_binarize(xy_stats, 1.0, rng)
        keep = rng.random(xy_bits.shape) < q_xy
        xy_released = np.where(keep, xy_bits, 1 - xy_bits)

        q_pair = keep_prob(alpha / 3.0)
        ti, tj = i_all[~heads], j_all[~heads]
        rows = np.flatnonzero(~heads)
        triple = np.stack(
            [
                stats[rows, [pair_idx[(i, i)] for i in ti]],
                stats[rows, [pair_idx[(min(i, j), max(i, j))] for i, j in zip(ti, tj)]],
                stats[rows, [pair_idx[(j, j)] for j in tj]],
            ],
            axis=1,
        )
        bits = bernoulli_binarize(triple, 1.0, rng)
        keep = rng.random(bits.shape) < q_pair
        released = np.where(keep, bits, 1 - bits)
        return MixedBatch(
            d=d,
            n=n,
            heads_index=hi,
            heads_values=_debias_bits(xy_released, q_xy),
            tails_i=ti,
            tails_j=tj,
            tails_values=_debias_bits(released, q_pair),
        )
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _mixed_accumulate(batch: MixedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-selection-probability weighted sums and observation counts."""
    d = batch.d
    pair_idx = _pair_index(d)
    _, total = stat_layout(d)
    sums = np.zeros(total)
    seen = np.zeros(total)
    xy_offset = len(pair_idx)
    # selection probabilities: xy_i at 1/(2d); diagonal x_k^2 at 1/d;
    # off-diagonal pair {i, j} at 1/(d (d-1))
    np.add.at(sums, xy_offset + batch.heads_index, batch.heads_values * (2.0 * d))
    np.add.at(seen, xy_offset + batch.heads_index, 1.0)
    for row in range(batch.tails_i.shape[0]):
        i = int(batch.tails_i[row])
        j = int(batch.tails_j[row])
        v = batch.tails_values[row]
        sums[pair_idx[(i, i)]] += v[0] * d
        sums[pair_idx[(min(i, j), max(i, j))]] += v[1] * d * (d - 1)
        sums[pair_idx[(j, j)]] += v[2] * d
        seen[pair_idx[(i, i)]] += 1.0
        seen[pair_idx[(min(i, j), max(i, j))]] += 1.0
        seen[pair_idx[(j, j)]] += 1.0
    return sums, seen


def aggregate_moments(samples, *, require_complete: bool = True):
    """Combine privatized samples into (Sxx, Sxy) moment estimates.

    Accepts a PerValueBatch, a MixedBatch, or a list of
    PrivatizedStatSample.  Mixed-scheme payloads are weighted by inverse
    selection probabilities, making every coordinate unbiased; Sxx is
    returned symmetric.  Raises MissingCoordinateError when a statistic was
    never observed (tiny samples under the mixed scheme) unless
    ``require_complete`` is off.
    """
    if isinstance(samples, PerValueBatch):
        est = samples.values.mean(axis=0)
        return _unpack(est, samples.d)
    if isinstance(samples, MixedBatch):
        sums, seen = _mixed_accumulate(samples)
        if require_complete and np.any(seen == 0):
            missing = int(np.flatnonzero(seen == 0)[0])
            raise MissingCoordinateError(
                f"statistic coordinate {missing} was never released"
            )
        return _unpack(sums / samples.n, samples.d)

    samples = list(samples)
    if not samples:
        raise ValueError("no samples to aggregate")
    d = samples[0].d
    per_value = [s for s in samples if s.scheme == "per_value"]
    mixed = [s for s in samples if s.scheme == "mixed_coord"]
    if per_value and mixed:
        raise ValueError("cannot mix schemes in one aggregate")
    if per_value:
        return aggregate_moments(
            PerValueBatch(d=d, values=np.stack([s.values for s in per_value]))
        )
    heads = [s for s in mixed if s.branch == "xy"]
    tails = [s for s in mixed if s.branch == "pair"]
    batch = MixedBatch(
        d=d,
        n=len(mixed),
        heads_index=np.array([s.indices[0] for s in heads], dtype=int),
        heads_values=np.array([s.values[0] for s in heads]),
        tails_i=np.array([s.indices[0] for s in tails], dtype=int),
        tails_j=np.array([s.indices[1] for s in tails], dtype=int),
        tails_values=(
            np.stack([s.values for s in tails]) if tails else np.zeros((0, 3))
        ),
    )
    return aggregate_moments(batch, require_complete=require_complete)


# ---------------------------------------------------------------------------
# Solving and scoring
# ---------------------------------------------------------------------------


def solve_and_score(
    sxx: np.ndarray,
    sxy: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    *,
    ridge: float = 1e-6,
) -> tuple[np.ndarray, float, float]:
    """Solve (Sxx + ridge I) w = Sxy and score on the test split.

    Returns (w, r2_residual, r2_standard): r2_residual is the uncentered
    residual ratio ||Xw - Y||^2 / ||Y||^2 (0 is a perfect fit), and
    r2_standard is its complement 1 - r2_residual (the usual "higher is
    better" reading).  Both conventions are reported because plots of fit
    quality against the privacy level read naturally in the standard one.
    The ridge guards against noise-broken positive semidefiniteness of the
    estimated moments; the reported moments themselves are never floored.
    """
    sxx = np.asarray(sxx, dtype=float)
    d = sxx.shape[0]
    system = sxx + ridge * np.eye(d)
    if np.linalg.cond(system) > 1e12:
        raise SingularMatrixError(
            "moment system is numerically singular even with the ridge"
        )
    w = np.linalg.solve(system, np.asarray(sxy, dtype=float))
    test_x = np.asarray(test_x, dtype=float)
    test_y = np.asarray(test_y, dtype=float).reshape(-1)
    resid = test_x @ w - test_y
    denom = float(test_y @ test_y)
    if denom <= 0.0:
        raise ValueError("test response is identically zero; R^2 is undefined")
    r2_residual = float(resid @ resid) / denom
    return w, r2_residual, 1.0 - r2_residual


def exact_moments(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-private empirical second moments (the OLS baseline input)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n = X.shape[0]
    return X.T @ X / n, X.T @ Y / n


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def synthetic_regression(
    n: int, d: int, seed: int, *, noise: float = 0.05
) -> RegressionDataset:
    """Uniform features on [0, 1]^d and a positive-weight linear response,
    clipped into [0, 1]; already scaled, so the scaling maps are trivial."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    w_star = rng.uniform(0.2, 1.0, size=d)
    w_star /= w_star.sum()
    Y = np.clip(X @ w_star + noise * rng.standard_normal(n), 0.0, 1.0)
    return RegressionDataset(
        X=X,
        Y=Y,
        scaling=ScalingRecord(
            x_min=np.zeros(d),
            x_range=np.ones(d),
            y_min=0.0,
            y_range=1.0,
            degenerate_columns=(),
        ),
    )


def read_regression_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Header row, feature columns, response in the final column."""
    rows = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        next(reader)  # header
        for row in reader:
            rows.append([float(v) for v in row])
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError("need at least one feature column and a response")
    return data[:, :-1], data[:, -1]


# ---------------------------------------------------------------------------
# Privacy audit support
# ---------------------------------------------------------------------------


def mixed_channel_matrix(records, alpha: float) -> np.ndarray:
    """Exact end-to-end output distribution of the mixed scheme per record.

    Outputs enumerate (heads, i, bit) and (tails, (i, j), 3 bits), with the
    binarization randomness marginalized; columns are records.  Feed the
    result to the generic privacy auditor.
    """
    records = [
        (np.asarray(x, dtype=float), float(y)) for x, y in records
    ]
    d = records[0][0].shape[0]
    q_xy = keep_prob(alpha)
    q_pair = keep_prob(alpha / 3.0)
    pair_idx = _pair_index(d)
    n_pairs = len(pair_idx)

    def marginal_one(stat, q):
        return stat * (2.0 * q - 1.0) + (1.0 - q)

    columns = []
    for x, y in records:
        stats = stat_vector(x, y)
        probs = []
        for i in range(d):  # heads outputs
            p1 = marginal_one(stats[n_pairs + i], q_xy)
            for bit in (0, 1):
                probs.append(0.5 / d * (p1 if bit else 1.0 - p1))
        for i in range(d):  # tails outputs
            for j in range(d):
                if j == i:
                    continue
                triple = (
                    stats[pair_idx[(i, i)]],
                    stats[pair_idx[(min(i, j), max(i, j))]],
                    stats[pair_idx[(j, j)]],
                )
                p1s = [marginal_one(s, q_pair) for s in triple]
                for code in range(8):
                    prob = 0.5 / (d * (d - 1))
                    for slot in range(3):
                        bit = (code >> (2 - slot)) & 1
                        prob *= p1s[slot] if bit else 1.0 - p1s[slot]
                    probs.append(prob)
        columns.append(probs)
    return np.asarray(columns, dtype=float).T
