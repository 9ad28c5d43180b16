"""Sequence labeling from region count annotations.

An annotator looks at a window of a sequence and reports, for a few tags,
how many positions in the window carry each tag.  Because expected counts
are linear in the per-token conditionals w(a, b) = P[label = b | token = a],
a least-squares regression on the counts recovers w, the recovered w turns
into a moment estimate of the node features, and one convex fit produces
the tagger.  An exact-enumeration EM over window label configurations is
provided as the marginal-likelihood baseline (positions outside the
annotated window marginalize away because the model is fully factorized).

Synthetic corpora are generated under the two assumptions the estimator
needs: node features depend on the token only, and labels are drawn
independently per position from the token's conditional.
"""

from __future__ import annotations

import csv
import itertools
import string
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import RegionTooLargeError, SequenceTooShortError
from .expfam import (
    FactorizedModel,
    MomentVector,
    Params,
    as_theta,
    factorized_fit,
    label_distributions,
)

__all__ = [
    "SequenceExample",
    "RegionAnnotation",
    "LocalConditional",
    "TaggingTask",
    "AnnotationScheme",
    "RegionFitReport",
    "make_task",
    "build_feature_model",
    "sample_annotation",
    "sample_annotations",
    "resample_labels",
    "ls_recover_w",
    "mu_from_w",
    "avg_token_counts",
    "supervised_moments",
    "supervised_fit",
    "project_rows_to_simplex",
    "end_to_end_fit",
    "exact_marginal_em_baseline",
    "accuracy",
    "write_corpus_csv",
    "read_corpus_csv",
    "write_annotations_csv",
    "read_annotations_csv",
]


@dataclass(frozen=True)
class SequenceExample:
    tokens: tuple[int, ...]
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.labels is not None:
            labels = tuple(int(b) for b in self.labels)
            if len(labels) != len(self.tokens):
                raise ValueError("labels must align with tokens")
            object.__setattr__(self, "labels", labels)
        if len(self.tokens) < 1:
            raise ValueError("sequences must have at least one position")


@dataclass(frozen=True)
class RegionAnnotation:
    """Counts of each tag in ``tags`` inside [start, end] of one sequence."""

    seq_index: int
    start: int
    end: int
    tags: tuple[int, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.end < self.start or self.start < 0:
            raise ValueError("region must satisfy 0 <= start <= end")
        if len(self.tags) != len(self.counts) or not self.tags:
            raise ValueError("tags and counts must align and be nonempty")
        width = self.end - self.start + 1
        if any(c < 0 or c > width for c in self.counts):
            raise ValueError("counts must lie in [0, window]")

    @property
    def window(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class LocalConditional:
    """Estimated table w(a, b); the true table has probability rows, the
    least-squares estimate is unconstrained."""

    w: np.ndarray
    residual: float
    covered: np.ndarray


@dataclass(frozen=True)
class TaggingTask:
    train: tuple[SequenceExample, ...]
    test: tuple[SequenceExample, ...]
    w_star: np.ndarray
    vocab: tuple[str, ...]
    vocab_size: int
    n_labels: int


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------


def _make_vocab(vocab_size: int, rng: np.random.Generator) -> tuple[str, ...]:
    words: list[str] = []
    seen: set[str] = set()
    letters = np.array(list(string.ascii_lowercase))
    while len(words) < vocab_size:
        length = int(rng.integers(3, 9))
        word = "".join(rng.choice(letters, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return tuple(words)


def _zipf_weights(vocab_size: int) -> np.ndarray:
    ranks = np.arange(1, vocab_size + 1, dtype=float)
    weights = 1.0 / ranks
    return weights / weights.sum()


def resample_labels(
    w_star: np.ndarray, tokens, rng: np.random.Generator
) -> tuple[int, ...]:
    """Draw labels independently per position from the token conditionals."""
    cum = np.cumsum(w_star, axis=1)
    top = w_star.shape[1] - 1  # cumulative rows can round to just below 1
    u = rng.random(len(tokens))
    return tuple(
        min(int(np.searchsorted(cum[t], u[i])), top) for i, t in enumerate(tokens)
    )


def make_task(
    vocab_size: int,
    n_labels: int,
    n_train: int,
    n_test: int,
    seed: int,
    *,
    length_range: tuple[int, int] = (5, 15),
    concentration: float = 0.5,
) -> TaggingTask:
    """Corpus with Zipf(1.0) tokens and Dirichlet(concentration) conditionals.

    Labels are drawn independently per position from w_star given the token,
    so the generated data satisfies the estimator's assumptions exactly.
    """
    rng = np.random.default_rng(seed)
    vocab = _make_vocab(vocab_size, rng)
    w_star = rng.dirichlet(np.full(n_labels, concentration), size=vocab_size)
    token_probs = _zipf_weights(vocab_size)
    lo, hi = length_range

    def draw_split(count: int) -> tuple[SequenceExample, ...]:
        out = []
        for _ in range(count):
            length = int(rng.integers(lo, hi + 1))
            tokens = tuple(int(t) for t in rng.choice(vocab_size, size=length, p=token_probs))
            labels = resample_labels(w_star, tokens, rng)
            out.append(SequenceExample(tokens=tokens, labels=labels))
        return tuple(out)

    return TaggingTask(
        train=draw_split(n_train),
        test=draw_split(n_test),
        w_star=w_star,
        vocab=vocab,
        vocab_size=vocab_size,
        n_labels=n_labels,
    )


def build_feature_model(
    vocab: tuple[str, ...],
    n_labels: int,
    groups: tuple[str, ...] = ("word", "prefix", "suffix"),
) -> FactorizedModel:
    """Node features from token projections: word identity, first and last
    character; each projection value crossed with each label is one indicator."""
    projections = {
        "word": lambda w: w,
        "prefix": lambda w: w[0],
        "suffix": lambda w: w[-1],
    }
    vocab_size = len(vocab)
    row_offsets: list[tuple[int, dict[str, int]]] = []
    offset = 0
    for g in groups:
        if g not in projections:
            raise ValueError(f"unknown feature group {g!r}")
        values = sorted({projections[g](w) for w in vocab})
        row_offsets.append((offset, {v: i for i, v in enumerate(values)}))
        offset += len(values) * n_labels
    dim = offset
    feats = np.zeros((dim, vocab_size * n_labels))
    for a, word in enumerate(vocab):
        for b in range(n_labels):
            col = a * n_labels + b
            for g, (start, index) in zip(groups, row_offsets):
                v = index[projections[g](word)]
                feats[start + v * n_labels + b, col] = 1.0
    return FactorizedModel(feats, vocab_size=vocab_size, n_labels=n_labels)


# ---------------------------------------------------------------------------
# Annotation sampling
# ---------------------------------------------------------------------------


def sample_annotation(
    x: SequenceExample,
    window: int,
    tag_subset_size: int,
    n_labels: int,
    rng: np.random.Generator,
    *,
    strict_start: bool = False,
    seq_index: int = 0,
) -> RegionAnnotation:
    """Uniform region, uniform tag subset, deterministic counts.

    Start positions are uniform over all windows that fit; ``strict_start``
    drops the last admissible start so the final window is never annotated.
    """
    length = len(x.tokens)
    if length <= window:
        raise SequenceTooShortError(
            f"sequence of length {length} cannot carry a window of {window}"
        )
    if x.labels is None:
        raise ValueError("annotation sampling needs gold labels")
    n_starts = length - window if strict_start else length - window + 1
    start = int(rng.integers(0, n_starts))
    end = start + window - 1
    tags = tuple(sorted(int(b) for b in rng.choice(n_labels, size=tag_subset_size, replace=False)))
    segment = x.labels[start : end + 1]
    counts = tuple(sum(1 for b in segment if b == tag) for tag in tags)
    return RegionAnnotation(
        seq_index=seq_index, start=start, end=end, tags=tags, counts=counts
    )


def sample_annotations(
    corpus,
    n_annotations: int,
    window: int,
    tag_subset_size: int,
    n_labels: int,
    rng: np.random.Generator,
    *,
    strict_start: bool = False,
) -> list[RegionAnnotation]:
    """Draw annotations from sequences long enough to carry the window."""
    eligible = [i for i, x in enumerate(corpus) if len(x.tokens) > window]
    if not eligible:
        raise SequenceTooShortError("no sequence is longer than the window")
    out = []
    for _ in range(n_annotations):
        i = int(eligible[rng.integers(0, len(eligible))])
        out.append(
            sample_annotation(
                corpus[i],
                window,
                tag_subset_size,
                n_labels,
                rng,
                strict_start=strict_start,
                seq_index=i,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Least-squares recovery of the local conditionals
# ---------------------------------------------------------------------------


def ls_recover_w(
    annotations,
    sequences,
    vocab_size: int,
    n_labels: int,
    *,
    ridge: float = 1e-8,
) -> LocalConditional:
    """Regress observed counts on region token counts, one system per tag.

    Each annotation contributes, for each of its tags b, one equation
    sum_{j in region} w(x[j], b) = N[b].  Solved by normal equations with a
    small ridge, so unseen (token, tag) pairs take the value 0.
    """
    annotations = list(annotations)
    if not annotations:
        raise ValueError("at least one annotation is required")
    gram = np.zeros((n_labels, vocab_size, vocab_size))
    moment = np.zeros((n_labels, vocab_size))
    rows: list[tuple[int, np.ndarray, int]] = []
    for ann in annotations:
        tokens = sequences[ann.seq_index].tokens[ann.start : ann.end + 1]
        counts_vec = np.bincount(np.asarray(tokens), minlength=vocab_size).astype(float)
        for b, n_b in zip(ann.tags, ann.counts):
            gram[b] += np.outer(counts_vec, counts_vec)
            moment[b] += counts_vec * n_b
            rows.append((b, counts_vec, n_b))
    w = np.zeros((vocab_size, n_labels))
    for b in range(n_labels):
        w[:, b] = np.linalg.solve(
            gram[b] + ridge * np.eye(vocab_size), moment[b]
        )
    residual = sum((cvec @ w[:, b] - n_b) ** 2 for b, cvec, n_b in rows)
    covered = np.zeros((vocab_size, n_labels), dtype=bool)
    for b in range(n_labels):
        covered[:, b] = np.diag(gram[b]) > 0
    return LocalConditional(w=w, residual=float(residual), covered=covered)


def avg_token_counts(sequences, vocab_size: int) -> np.ndarray:
    """Average per-sequence count of each token."""
    total = np.zeros(vocab_size)
    for x in sequences:
        total += np.bincount(np.asarray(x.tokens), minlength=vocab_size)
    return total / len(sequences)


def mu_from_w(w_hat: np.ndarray, sequences, model: FactorizedModel) -> MomentVector:
    """Assemble moments: average over sequences of sum_j sum_b w(x[j], b) f(x[j], b)."""
    counts = avg_token_counts(sequences, model.vocab_size)
    table = counts[:, None] * np.asarray(w_hat, dtype=float)
    return MomentVector(model.features @ table.ravel(), n=len(sequences))


def supervised_moments(
    sequences, model: FactorizedModel, *, smoothing: float = 0.0
) -> MomentVector:
    """Fully supervised moments: average of summed gold node features.

    ``smoothing`` mixes a vanishing uniform label mass into the empirical
    (token, label) table; without it a pair that never occurs drives the
    convex fit to an unbounded optimum under saturated indicator features.
    """
    table = np.zeros((model.vocab_size, model.n_labels))
    for x in sequences:
        if x.labels is None:
            raise ValueError("supervised moments need gold labels")
        for a, b in zip(x.tokens, x.labels):
            table[a, b] += 1.0
    if smoothing > 0.0:
        totals = table.sum(axis=1, keepdims=True)
        table = (1.0 - smoothing) * table + smoothing * totals / model.n_labels
    table /= len(sequences)
    return MomentVector(model.features @ table.ravel(), n=len(sequences))


def project_rows_to_simplex(w: np.ndarray, floor: float = 1e-9) -> np.ndarray:
    """Euclidean projection of each row onto the simplex, then a small mix
    with uniform so every entry stays strictly positive."""
    w = np.asarray(w, dtype=float)
    k = w.shape[1]
    out = np.zeros_like(w)
    for i, row in enumerate(w):
        u = np.sort(row)[::-1]
        css = np.cumsum(u)
        idx = np.arange(1, k + 1)
        cond = u - (css - 1.0) / idx > 0
        rho = int(idx[cond][-1])
        tau = (css[rho - 1] - 1.0) / rho
        out[i] = np.maximum(row - tau, 0.0)
    return (1.0 - k * floor) * out + floor


@dataclass(frozen=True)
class AnnotationScheme:
    n_annotations: int
    window: int
    tag_subset_size: int = 1
    strict_start: bool = False
    project_w: bool = False


@dataclass(frozen=True)
class RegionFitReport:
    theta: np.ndarray
    train_accuracy: float
    test_accuracy: float
    w_hat: LocalConditional
    coverage_fraction: float


def accuracy(model: FactorizedModel, theta, corpus) -> float:
    """Per-position accuracy of the conditional argmax predictions."""
    table = np.argmax(label_distributions(model, as_theta(theta)), axis=1)
    hits = 0
    total = 0
    for x in corpus:
        if x.labels is None:
            raise ValueError("accuracy needs gold labels")
        toks = np.asarray(x.tokens)
        hits += int(np.sum(table[toks] == np.asarray(x.labels)))
        total += len(x.tokens)
    return hits / total


def supervised_fit(
    task: TaggingTask,
    model: FactorizedModel,
    *,
    smoothing: float = 1e-6,
    **fit_options,
) -> Params:
    mu = supervised_moments(task.train, model, smoothing=smoothing)
    counts = avg_token_counts(task.train, model.vocab_size)
    return factorized_fit(model, mu, counts, project_moments=True, **fit_options)


def end_to_end_fit(
    task: TaggingTask,
    scheme: AnnotationScheme,
    model: FactorizedModel,
    rng: np.random.Generator,
    **fit_options,
) -> RegionFitReport:
    """Annotations -> least squares -> moments -> convex fit -> accuracies.

    The least-squares table is plugged in unconstrained by default;
    ``scheme.project_w`` projects its rows onto the simplex first, which
    keeps the downstream moment target strictly feasible when counts are
    noisy.  The fit matches moments within the identifiable subspace
    (count noise makes the raw block sums inconsistent otherwise).
    """
    annotations = sample_annotations(
        task.train,
        scheme.n_annotations,
        scheme.window,
        scheme.tag_subset_size,
        task.n_labels,
        rng,
        strict_start=scheme.strict_start,
    )
    recovered = ls_recover_w(
        annotations, task.train, task.vocab_size, task.n_labels
    )
    w = recovered.w
    if scheme.project_w:
        w = project_rows_to_simplex(w)
    mu = mu_from_w(w, task.train, model)
    counts = avg_token_counts(task.train, task.vocab_size)
    theta = factorized_fit(
        model, mu, counts, project_moments=True, **fit_options
    ).theta
    return RegionFitReport(
        theta=theta,
        train_accuracy=accuracy(model, theta, task.train),
        test_accuracy=accuracy(model, theta, task.test),
        w_hat=recovered,
        coverage_fraction=float(recovered.covered.mean()),
    )


# ---------------------------------------------------------------------------
# Exact marginal-likelihood EM baseline
# ---------------------------------------------------------------------------


def _consistent_configs(window: int, tags, counts, n_labels: int) -> np.ndarray:
    configs = [
        cfg
        for cfg in itertools.product(range(n_labels), repeat=window)
        if all(cfg.count(b) == n_b for b, n_b in zip(tags, counts))
    ]
    if not configs:
        raise ValueError("annotation admits no label configuration")
    return np.array(configs, dtype=int)


def exact_marginal_em_baseline(
    annotations,
    sequences,
    model: FactorizedModel,
    *,
    theta0=None,
    tol: float = 1e-8,
    max_iter: int = 200,
    config_budget: int = 10**6,
    smoothing: float = 1e-10,
) -> Params:
    """EM on the count observations with exact region enumeration.

    The E-step enumerates every label configuration of the annotated window
    consistent with the counts; positions outside the window contribute
    nothing because the model factorizes.  The M-step is the factorized
    moment fit of the expected features.  ``smoothing`` mixes a vanishing
    uniform mass into the expected label table so boundary posteriors
    (counts that force a tag everywhere) keep the M-step target strictly
    inside the feasible region.
    """
    annotations = list(annotations)
    if not annotations:
        raise ValueError("at least one annotation is required")
    n_labels = model.n_labels
    # annotations with the same token window and count constraint contribute
    # identically, so group them and weight by multiplicity
    grouped: dict[tuple, int] = {}
    for ann in annotations:
        if n_labels**ann.window > config_budget:
            raise RegionTooLargeError(
                f"{n_labels}^{ann.window} label configurations exceed the "
                f"budget {config_budget:g}"
            )
        tokens = sequences[ann.seq_index].tokens[ann.start : ann.end + 1]
        key = (tokens, ann.tags, ann.counts)
        grouped[key] = grouped.get(key, 0) + 1
    prepared = [
        (
            np.asarray(tokens),
            _consistent_configs(len(tokens), tags, counts, n_labels),
            float(mult),
        )
        for (tokens, tags, counts), mult in grouped.items()
    ]

    n_ann = len(annotations)
    theta = np.zeros(model.d) if theta0 is None else as_theta(theta0).copy()
    prev_ll = -np.inf
    for _ in range(max_iter):
        logp = np.log(label_distributions(model, theta))
        table = np.zeros((model.vocab_size, n_labels))
        token_totals = np.zeros(model.vocab_size)
        ll = 0.0
        for tokens, configs, mult in prepared:
            scores = logp[tokens[None, :], configs].sum(axis=1)
            norm = logsumexp(scores)
            ll += mult * norm
            post = mult * np.exp(scores - norm)
            for j, a in enumerate(tokens):
                np.add.at(table[a], configs[:, j], post)
            token_totals += mult * np.bincount(tokens, minlength=model.vocab_size)
        ll /= n_ann
        if ll < prev_ll - 1e-8:
            raise AssertionError(
                f"EM log-likelihood decreased: {prev_ll:.12f} -> {ll:.12f}"
            )
        if ll - prev_ll < tol and prev_ll > -np.inf:
            break
        prev_ll = ll
        if smoothing > 0.0:
            table = (1.0 - smoothing) * table + smoothing * (
                token_totals[:, None] / n_labels
            )
        mu = model.features @ (table / n_ann).ravel()
        theta = factorized_fit(
            model,
            mu,
            token_totals / n_ann,
            theta0=theta,
            project_moments=True,
        ).theta
    return Params(theta)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def write_corpus_csv(path, corpus) -> None:
    """One row per token: seq_id, position, token, label (label blank if absent)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["seq_id", "position", "token", "label"])
        for i, x in enumerate(corpus):
            for j, t in enumerate(x.tokens):
                label = "" if x.labels is None else x.labels[j]
                writer.writerow([i, j, t, label])


def read_corpus_csv(path) -> list[SequenceExample]:
    rows: dict[int, list[tuple[int, int, int | None]]] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            label = row["label"]
            rows.setdefault(int(row["seq_id"]), []).append(
                (int(row["position"]), int(row["token"]), int(label) if label != "" else None)
            )
    corpus = []
    for seq_id in sorted(rows):
        entries = sorted(rows[seq_id])
        tokens = tuple(t for _, t, _ in entries)
        labels = tuple(lab for _, _, lab in entries)
        corpus.append(
            SequenceExample(
                tokens=tokens,
                labels=None if any(lab is None for lab in labels) else labels,
            )
        )
    return corpus


def write_annotations_csv(path, annotations) -> None:
    """One row per (annotation, tag): seq_id, start, end, tag, count."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["seq_id", "start", "end", "tag", "count"])
        for ann in annotations:
            for b, n_b in zip(ann.tags, ann.counts):
                writer.writerow([ann.seq_index, ann.start, ann.end, b, n_b])


def read_annotations_csv(path) -> list[RegionAnnotation]:
    """Rebuild annotations from rows, grouping consecutive rows that share a
    region (a repeated tag starts a new annotation).

    The row format carries no annotation id, so adjacent annotations of the
    same region with disjoint tag sets merge; the merged form contributes
    the same least-squares equations.
    """
    out: list[RegionAnnotation] = []
    key: tuple[int, int, int] | None = None
    pairs: list[tuple[int, int]] = []

    def flush():
        if key is not None and pairs:
            out.append(
                RegionAnnotation(
                    seq_index=key[0],
                    start=key[1],
                    end=key[2],
                    tags=tuple(b for b, _ in pairs),
                    counts=tuple(c for _, c in pairs),
                )
            )

    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            row_key = (int(row["seq_id"]), int(row["start"]), int(row["end"]))
            tag, count = int(row["tag"]), int(row["count"])
            if row_key != key or any(b == tag for b, _ in pairs):
                flush()
                key, pairs = row_key, []
            pairs.append((tag, count))
    flush()
    return out
