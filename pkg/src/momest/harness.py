"""Experiment runners: declarative configs in, deterministic CSVs out.

Every experiment is described by a JSON-serializable config with a
mandatory seed.  Randomness is drawn from per-(sweep-point, trial) streams
``default_rng([seed, point, trial])``, so results are independent of
execution order; the sweep grid may therefore run on any number of threads
and still produce bitwise-identical CSVs.  Each run also writes a JSON
manifest next to the CSV (config echo, package version, wall-clock time,
error summary); volatile data like timing lives only there.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .asymptotics import classic_rr_report, sigma_marg, sigma_mom
from .channels import ClassicRR, CoordinateRelease, PerValue, dp_audit
from .errors import MomestError
from .estimators import (
    EmpiricalObsDist,
    em_marginal_ml,
    kl_project,
    marginal_ll,
    moment_requirement_check,
    observed_distribution,
    one_em_step,
    pinv_recover,
)
from .expfam import FeatureMap, distribution, fit_from_moments
from .privreg import (
    aggregate_moments,
    privatize_dataset,
    solve_and_score,
    synthetic_regression,
)
from .regioncount import (
    AnnotationScheme,
    accuracy,
    build_feature_model,
    end_to_end_fit,
    exact_marginal_em_baseline,
    make_task,
    sample_annotations,
    supervised_fit,
)

__all__ = ["ExperimentConfig", "TrialResult", "run_experiment", "EXPERIMENTS"]

DEFAULT_PHI = [[0.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 1.0]]
DEFAULT_THETAS = [[0.0, 0.0], [2.0, -0.1], [5.0, -1.0]]


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment run."""

    experiment: str
    seed: int
    out: str
    threads: int = 1
    model: dict | None = None
    channel: dict | None = None
    epsilons: tuple[float, ...] = ()
    alphas: tuple[float, ...] = ()
    ns: tuple[int, ...] = ()
    trials: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.seed is None:
            raise ValueError("a seed is mandatory")
        for name, grid in (("epsilons", self.epsilons), ("alphas", self.alphas)):
            if any(v <= 0 for v in grid):
                raise ValueError(f"{name} must be positive")
        if any(n < 1 for n in self.ns):
            raise ValueError("sample sizes must be at least 1")
        if self.trials < 1 or self.threads < 1:
            raise ValueError("trials and threads must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {
            "experiment",
            "seed",
            "out",
            "threads",
            "model",
            "channel",
            "epsilons",
            "alphas",
            "ns",
            "trials",
        }
        options = dict(data.get("options", {}))
        for key, value in data.items():
            if key not in known and key != "options":
                options[key] = value
        return cls(
            experiment=data["experiment"],
            seed=int(data["seed"]),
            out=str(data.get("out", data["experiment"].replace("_", "-") + ".csv")),
            threads=int(data.get("threads", 1)),
            model=data.get("model"),
            channel=data.get("channel"),
            epsilons=tuple(float(e) for e in data.get("epsilons", ())),
            alphas=tuple(float(a) for a in data.get("alphas", ())),
            ns=tuple(int(n) for n in data.get("ns", ())),
            trials=int(data.get("trials", 1)),
            options=options,
        )


@dataclass(frozen=True)
class TrialResult:
    """One CSV row: sweep-point fields, metrics, and an error slot."""

    values: tuple
    error: str = ""


def _stream(seed: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng([seed, *indices])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def _load_model(config: ExperimentConfig) -> tuple[FeatureMap, list[np.ndarray]]:
    data = config.model or {}
    if "path" in data:
        with open(data["path"]) as handle:
            data = json.load(handle)
    phi = np.asarray(data.get("phi", DEFAULT_PHI), dtype=float)
    bound = data.get("upper_bound")
    if bound is None and phi.min() >= 0.0 and np.all((phi == 0) | (phi == 1)):
        bound = 1.0
    fm = FeatureMap(phi, upper_bound=bound)
    thetas = data.get("thetas")
    if thetas is None:
        theta = data.get("theta_star")
        thetas = [theta] if theta is not None else DEFAULT_THETAS
    return fm, [np.asarray(t, dtype=float) for t in thetas]


def _make_channel(desc: dict, fm: FeatureMap):
    kind = desc["kind"]
    if kind == "classic_rr":
        u = desc.get("base_u")
        if u is None:
            return ClassicRR.uniform(float(desc["epsilon"]), fm.m)
        return ClassicRR(float(desc["epsilon"]), np.asarray(u, dtype=float))
    if kind == "per_value":
        if "delta_bar" in desc:
            return PerValue(
                alpha=float(desc["alpha"]),
                delta_bar=float(desc["delta_bar"]),
                c=float(desc.get("c", fm.upper_bound or 1.0)),
            )
        return PerValue.for_family(fm, alpha=float(desc["alpha"]))
    if kind == "coordinate_release":
        return CoordinateRelease(
            alpha=float(desc["alpha"]),
            d=fm.d,
            c=float(desc.get("c", fm.upper_bound or 1.0)),
        )
    raise ValueError(f"unknown channel kind {kind!r}")


def _run_grid(tasks, threads: int):
    """Evaluate independent grid tasks, preserving grid order in the output."""
    if threads <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_efficiency_curve(config: ExperimentConfig):
    """Exact efficiency of the moment estimator relative to marginal
    likelihood under classic randomized response (no sampling)."""
    fm, thetas = _load_model(config)
    eps_grid = config.epsilons or (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    header = [
        "theta",
        "epsilon",
        "efficiency",
        "sigma_marg_trace",
        "sigma_mom_trace",
        "error",
    ]

    def point(theta, eps):
        def task():
            label = json.dumps(list(map(float, theta)), separators=(",", ":"))
            try:
                report = classic_rr_report(fm, theta, eps)
                return [
                    TrialResult(
                        (
                            label,
                            eps,
                            report.efficiency,
                            float(np.trace(report.sigma_marg)),
                            float(np.trace(report.sigma_mom)),
                        )
                    )
                ]
            except MomestError as exc:
                return [TrialResult((label, eps, "", "", ""), error=str(exc))]

        return task

    tasks = [point(theta, eps) for theta in thetas for eps in eps_grid]
    return header, _run_grid(tasks, config.threads)


def _moment_estimator_trial(fm, theta_star, channel, n, rng):
    p = distribution(fm, theta_star)
    ys = rng.choice(fm.m, size=n, p=p)
    if isinstance(channel, ClassicRR):
        os_ = channel.sample_many(ys, rng)
        betas = channel.beta(fm, os_).T
    elif isinstance(channel, PerValue):
        from .channels import bernoulli_binarize

        tilde = bernoulli_binarize(fm.phi[:, ys].T, channel.c, rng)
        released = channel.sample_many(tilde, rng)
        betas = channel.beta(released)
    elif isinstance(channel, CoordinateRelease):
        from .channels import bernoulli_binarize

        tilde = bernoulli_binarize(fm.phi[:, ys].T, channel.c, rng)
        js, bits = channel.sample_many(tilde, rng)
        B = channel.beta_matrix()
        betas = B[:, 2 * js + bits].T
    else:
        raise ValueError("unsupported channel for the moment estimator")
    mu = betas.mean(axis=0)
    return fit_from_moments(fm, mu).theta


def _marginal_estimator_trial(fm, theta_star, channel, n, rng):
    p = distribution(fm, theta_star)
    ys = rng.choice(fm.m, size=n, p=p)
    if isinstance(channel, ClassicRR):
        obs = observed_distribution(channel.sample_many(ys, rng), fm.m)
        S = channel.channel_matrix()
    elif isinstance(channel, PerValue):
        from .channels import bernoulli_binarize

        tilde = bernoulli_binarize(fm.phi[:, ys].T, channel.c, rng)
        released = channel.sample_many(tilde, rng)
        codes = released @ (1 << np.arange(fm.d - 1, -1, -1))
        obs = observed_distribution(codes, 2**fm.d)
        S = channel.end_to_end_matrix(fm)
    else:
        raise ValueError("unsupported channel for the marginal estimator")
    return em_marginal_ml(obs, S, fm, fit_tol=1e-9).theta


def run_mc_validate(config: ExperimentConfig):
    """Monte Carlo covariance of each estimator against its formula."""
    fm, thetas = _load_model(config)
    theta_star = np.asarray(
        config.options.get("theta_star", thetas[1] if len(thetas) > 1 else thetas[0]),
        dtype=float,
    )
    n = int(config.ns[0]) if config.ns else 100_000
    trials = config.trials if config.trials > 1 else 200
    if config.channel is not None:
        estimators = config.options.get("estimators", ["moment"])
        default_settings = [
            {"estimator": est, "channel": config.channel} for est in estimators
        ]
    else:
        default_settings = [
            {"estimator": "moment", "channel": {"kind": "classic_rr", "epsilon": 1.0}},
            {"estimator": "moment", "channel": {"kind": "classic_rr", "epsilon": 0.5}},
            {"estimator": "moment", "channel": {"kind": "per_value", "alpha": 2.0}},
            {"estimator": "marginal", "channel": {"kind": "classic_rr", "epsilon": 0.5}},
        ]
    settings = config.options.get("settings", default_settings)
    header = ["estimator", "channel", "param", "n", "trials", "rel_frobenius", "error"]

    def point(index, setting):
        def task():
            kind = setting["channel"]["kind"]
            param = setting["channel"].get("epsilon", setting["channel"].get("alpha"))
            est = setting["estimator"]
            try:
                channel = _make_channel(setting["channel"], fm)
                if est == "moment":
                    reference = sigma_mom(fm, theta_star, channel)
                    trial = _moment_estimator_trial
                elif est == "marginal":
                    reference = sigma_marg(fm, theta_star, channel.end_to_end_matrix(fm))
                    trial = _marginal_estimator_trial
                else:
                    raise ValueError(f"unknown estimator {est!r}")
                deviations = np.zeros((trials, fm.d))
                for t in range(trials):
                    rng = _stream(config.seed, index, t)
                    theta_hat = trial(fm, theta_star, channel, n, rng)
                    deviations[t] = np.sqrt(n) * (theta_hat - theta_star)
                cov = np.atleast_2d(np.cov(deviations, rowvar=False, ddof=1))
                rel = float(
                    np.linalg.norm(cov - reference) / np.linalg.norm(reference)
                )
                return [TrialResult((est, kind, param, n, trials, rel))]
            except MomestError as exc:
                return [TrialResult((est, kind, param, n, trials, ""), error=str(exc))]

        return task

    tasks = [point(i, s) for i, s in enumerate(settings)]
    return header, _run_grid(tasks, config.threads)


def run_geometry(config: ExperimentConfig):
    """Deterministic-channel equivalence, pseudoinverse identities, and the
    non-concavity probe of the marginal likelihood."""
    n_instances = int(config.options.get("instances", 20))
    header = ["check", "instance", "value", "error"]

    def random_deterministic(m, k, rng):
        assign = np.concatenate([np.arange(k), rng.integers(0, k, size=m - k)])
        rng.shuffle(assign)
        S = np.zeros((k, m))
        S[assign, np.arange(m)] = 1.0
        return S

    def instance(i):
        def task():
            rng = _stream(config.seed, 0, i)
            m = int(rng.integers(2, 9))
            k = int(rng.integers(1, m + 1))
            S = random_deterministic(m, k, rng)
            fm = FeatureMap(rng.uniform(-1, 1, size=(int(rng.integers(1, 4)), m)))
            q = rng.dirichlet(np.ones(k))
            try:
                via_em = one_em_step(np.zeros(fm.d), q, S, fm, tol=1e-10)
                via_mom = kl_project(pinv_recover(q, S), fm, tol=1e-10)
                dist = float(np.max(np.abs(via_em.theta - via_mom.theta)))
                pinv_closed = S.T @ np.diag(1.0 / (S @ np.ones(m)))
                resid = float(
                    np.max(np.abs(pinv_closed - np.linalg.pinv(S, rcond=1e-10)))
                )
                return [
                    TrialResult(("one_em_step_distance", i, dist)),
                    TrialResult(("pinv_identity_residual", i, resid)),
                ]
            except MomestError as exc:
                return [TrialResult(("one_em_step_distance", i, ""), error=str(exc))]

        return task

    results = _run_grid([instance(i) for i in range(n_instances)], config.threads)

    # marginal-likelihood landscape probe on the 1-d three-outcome family
    fm = FeatureMap(np.array([[2.0, 1.0, 0.0]]))
    S = np.array(
        [[1 / 3, 1 / 6, 1 / 4], [1 / 3, 1 / 6, 1 / 2], [1 / 3, 2 / 3, 1 / 4]]
    )
    q = S @ distribution(fm, np.array([1.0]))
    grid = np.linspace(-10.0, 10.0, 401)
    values = np.array(
        [marginal_ll([t], EmpiricalObsDist(q, 0), S, fm) for t in grid]
    )
    second = np.diff(values, 2)
    sign_change = float(second.max() > 1e-9 and second.min() < -1e-9)
    results.append([TrialResult(("marginal_ll_nonconcave", 0, sign_change))])
    requirement = moment_requirement_check(fm, S)
    results.append(
        [TrialResult(("moment_requirement_residual", 0, requirement.residual))]
    )
    return header, results


def run_region_count(config: ExperimentConfig):
    """Count-annotation pipeline against the fully supervised baseline."""
    opts = config.options
    vocab_size = int(opts.get("vocab_size", 12))
    n_labels = int(opts.get("n_labels", 3))
    n_train = int(opts.get("n_train", 150))
    n_test = int(opts.get("n_test", 150))
    window = int(opts.get("window", 1))
    tag_subset = int(opts.get("tag_subset_size", n_labels))
    groups = tuple(opts.get("feature_groups", ["word"]))
    include_em = bool(opts.get("include_em", False))
    grid = config.ns or (200, 1000, 5000)
    header = [
        "estimator",
        "n_annotations",
        "window",
        "tag_subset_size",
        "trial",
        "train_accuracy",
        "test_accuracy",
        "error",
    ]

    task_data = make_task(
        vocab_size, n_labels, n_train, n_test, seed=config.seed,
        length_range=tuple(opts.get("length_range", (5, 12))),
    )
    model = build_feature_model(task_data.vocab, n_labels, groups=groups)

    def point(idx, n_ann, trial):
        def job():
            rows = []
            rng = _stream(config.seed, idx, trial)
            scheme = AnnotationScheme(
                n_annotations=n_ann,
                window=window,
                tag_subset_size=tag_subset,
                project_w=bool(opts.get("project_w", True)),
            )
            try:
                report = end_to_end_fit(task_data, scheme, model, rng)
                rows.append(
                    TrialResult(
                        (
                            "moment",
                            n_ann,
                            window,
                            tag_subset,
                            trial,
                            report.train_accuracy,
                            report.test_accuracy,
                        )
                    )
                )
                if include_em:
                    ann_rng = _stream(config.seed, idx, trial, 1)
                    annotations = sample_annotations(
                        task_data.train, n_ann, window, tag_subset, n_labels, ann_rng
                    )
                    theta_em = exact_marginal_em_baseline(
                        annotations,
                        task_data.train,
                        model,
                        theta0=report.theta,
                        max_iter=int(opts.get("em_iterations", 50)),
                    ).theta
                    rows.append(
                        TrialResult(
                            (
                                "marginal_em",
                                n_ann,
                                window,
                                tag_subset,
                                trial,
                                accuracy(model, theta_em, task_data.train),
                                accuracy(model, theta_em, task_data.test),
                            )
                        )
                    )
            except MomestError as exc:
                rows.append(
                    TrialResult(
                        ("moment", n_ann, window, tag_subset, trial, "", ""),
                        error=str(exc),
                    )
                )
            return rows

        return job

    tasks = [
        point(idx, n_ann, trial)
        for idx, n_ann in enumerate(grid)
        for trial in range(config.trials)
    ]
    results = _run_grid(tasks, config.threads)

    try:
        sup_theta = supervised_fit(task_data, model).theta
        baseline = TrialResult(
            (
                "supervised",
                0,
                window,
                tag_subset,
                0,
                accuracy(model, sup_theta, task_data.train),
                accuracy(model, sup_theta, task_data.test),
            )
        )
    except MomestError as exc:
        baseline = TrialResult(
            ("supervised", 0, window, tag_subset, 0, "", ""), error=str(exc)
        )
    results.append([baseline])
    return header, results


def run_private_regression(config: ExperimentConfig):
    """R^2 of privately estimated regressions across privacy levels."""
    opts = config.options
    d = int(opts.get("d", 3))
    n = int(config.ns[0]) if config.ns else 20_000
    noise = float(opts.get("noise", 0.05))
    schemes = list(opts.get("schemes", ["per_value", "mixed_coord"]))
    alphas = config.alphas or (0.5, 1.0, 2.0, 4.0, 8.0)
    header = ["alpha", "trial", "scheme", "r2_residual", "r2_standard", "n"]

    base = synthetic_regression(n, d, seed=config.seed, noise=noise)

    def point(idx, alpha, scheme, trial):
        def job():
            rng = _stream(config.seed, idx, trial)
            try:
                batch = privatize_dataset(base.X, base.Y, scheme, alpha, rng)
                sxx, sxy = aggregate_moments(batch)
                _, r2_residual, r2_standard = solve_and_score(sxx, sxy, base.X, base.Y)
                return [
                    TrialResult((alpha, trial, scheme, r2_residual, r2_standard, n))
                ]
            except MomestError as exc:
                return [
                    TrialResult((alpha, trial, scheme, "", "", n), error=str(exc))
                ]

        return job

    tasks = []
    idx = 0
    for alpha in alphas:
        for scheme in schemes:
            for trial in range(config.trials):
                tasks.append(point(idx, alpha, scheme, trial))
            idx += 1
    return header, _run_grid(tasks, config.threads)


def run_audit(config: ExperimentConfig):
    """Exhaustive privacy audit of every channel across a level grid."""
    fm, _ = _load_model(config)
    alphas = config.alphas or (0.5, 1.0, 2.0)
    epsilons = config.epsilons or (0.2, 0.5, 0.8)
    header = ["channel", "param", "dimension", "max_log_ratio", "bound", "error"]

    def audit_point(kind, param):
        def job():
            try:
                if kind == "classic_rr":
                    channel = ClassicRR.uniform(param, fm.m)
                    bound = channel.dp_level() if param < 1.0 else float("inf")
                elif kind == "per_value":
                    channel = PerValue.for_family(fm, alpha=param)
                    bound = param
                elif kind == "coordinate_release":
                    channel = CoordinateRelease(
                        alpha=param, d=fm.d, c=fm.upper_bound or 1.0
                    )
                    bound = param
                else:
                    raise ValueError(kind)
                ratio = dp_audit(channel, fm)
                return [TrialResult((kind, param, fm.d, ratio, bound))]
            except MomestError as exc:
                return [TrialResult((kind, param, fm.d, "", ""), error=str(exc))]

        return job

    if config.channel is not None:
        kind = config.channel["kind"]
        grid = epsilons if kind == "classic_rr" else alphas
        tasks = [audit_point(kind, param) for param in grid]
    else:
        tasks = [audit_point("classic_rr", eps) for eps in epsilons]
        tasks += [audit_point("coordinate_release", a) for a in alphas]
        tasks += [audit_point("per_value", a) for a in alphas]
    return header, _run_grid(tasks, config.threads)


EXPERIMENTS = {
    "efficiency_curve": run_efficiency_curve,
    "mc_validate": run_mc_validate,
    "geometry": run_geometry,
    "region_count": run_region_count,
    "private_regression": run_private_regression,
    "audit": run_audit,
}


def run_experiment(config: ExperimentConfig) -> int:
    """Run one experiment, write its CSV and manifest, return an exit code
    (nonzero iff any trial recorded an error)."""
    start = time.perf_counter()
    header, nested = EXPERIMENTS[config.experiment](config)
    rows: list[TrialResult] = [r for group in nested for r in group]
    with open(config.out, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            fields = [_fmt(v) for v in row.values]
            if "error" in header:
                fields.append(row.error)
            writer.writerow(fields)
    n_errors = sum(1 for row in rows if row.error)
    manifest = {
        "experiment": config.experiment,
        "config": {
            "experiment": config.experiment,
            "seed": config.seed,
            "out": config.out,
            "threads": config.threads,
            "model": config.model,
            "channel": config.channel,
            "epsilons": list(config.epsilons),
            "alphas": list(config.alphas),
            "ns": list(config.ns),
            "trials": config.trials,
            "options": config.options,
        },
        "package_version": __version__,
        "rows": len(rows),
        "errors": n_errors,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    with open(config.out + ".manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return 1 if n_errors else 0
