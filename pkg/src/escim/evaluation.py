"""Metrics, experiment plumbing and the sweep protocols.

An experiment fixes one log (and its oracle, for simulated data), carves a
test split and a validation split out of it, and downsamples the training
non-clicks. Every model in a comparison sees exactly the same rows; only
the run seed (initialization, shuffling, dropout, z draws) varies.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .counterfactual import (CounterfactualConfig, CounterfactualLabelSet, LabelRun, generate_labels, label_f1,
                             transform_top_fraction)
from .data import InteractionLog, atomic_write_text, downsample_indices, split_indices
from .errors import UndefinedMetricError
from .metrics import auc
from .model import EscimModel, TrainConfig, TrainResult, init_model, predict, train
from .objectives import ObjectiveKind, ObjectiveSpec, ctcvr_loss, ctr_loss, naive_cvr_loss
from .simulator import Oracle, oracle_ideal_loss

# tags for data-level seeds (run-level tags live next to the code that draws)
SEED_TEST_SPLIT, SEED_VAL_SPLIT, SEED_DOWNSAMPLE = 1, 2, 3

ALPHA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
THRESHOLD_GRID = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0)
ABLATION_VARIANTS = ("none", "prior", "posterior")


def derive_seed(root: int, purpose: int) -> int:
    """32-bit seed for one purpose, derived from the root seed."""
    return int(np.random.SeedSequence([int(root), int(purpose)]).generate_state(1)[0])


def _rounded(x):
    return None if x is None else float(x)


# -- reports ----------------------------------------------------------------------------------


@dataclass
class MetricReport:
    seed: int
    cvr_auc: float
    ctcvr_auc: float
    losses: dict = field(default_factory=dict)
    oracle_cvr_auc_d: float | None = None
    oracle_ideal_loss: float | None = None
    label_stats: dict | None = None
    latent: dict | None = None
    n_test: int = 0

    def to_json(self) -> dict:
        doc = {
            "seed": self.seed,
            "n_test": self.n_test,
            "cvr_auc": self.cvr_auc,
            "ctcvr_auc": self.ctcvr_auc,
            "losses": {k: self.losses[k] for k in sorted(self.losses)},
            "oracle_cvr_auc_d": _rounded(self.oracle_cvr_auc_d),
            "oracle_ideal_loss": _rounded(self.oracle_ideal_loss),
            "label_stats": None if self.label_stats is None else dict(sorted(self.label_stats.items())),
            "latent": self.latent,
        }
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _population_auc(scores, labels, population: str) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"{population}: {exc}") from None


def evaluate(model: EscimModel, test: InteractionLog, oracle: Oracle | None = None, seed: int = 0,
             label_stats: dict | None = None) -> MetricReport:
    """CVR AUC over clicked test rows, CTCVR AUC over all test rows, plus oracle metrics if given."""
    pred = predict(model, test)
    c = test.click.astype(np.float64)
    v = test.conversion.astype(np.float64)
    clicked = test.click == 1
    cvr = _population_auc(pred.p_cvr[clicked], test.conversion[clicked], "clicked test samples")
    ctcvr = _population_auc(pred.p_ctcvr, test.conversion, "exposed test samples")
    losses = {"ctr": ctr_loss(pred.p_ctr, c), "ctcvr": ctcvr_loss(pred.p_ctr, pred.p_cvr, c, v)}
    if clicked.any():
        losses["cvr_naive"] = naive_cvr_loss(pred.p_cvr, v, clicked)
    report = MetricReport(seed, cvr, ctcvr, losses, label_stats=label_stats, n_test=len(test))
    if oracle is not None:
        report.oracle_cvr_auc_d = _population_auc(pred.p_cvr, oracle.v_do1, "exposure space (oracle)")
        report.oracle_ideal_loss = oracle_ideal_loss(test, oracle, pred.p_cvr)
    return report


# -- latent conversion analysis ------------------------------------------------------------------


def latent_conversion_subset(train: InteractionLog, val: InteractionLog, test: InteractionLog) -> np.ndarray:
    """Test rows of users with no click in train or val and at least one click in test."""
    seen = np.union1d(train.user_id[train.click == 1], val.user_id[val.click == 1])
    clicking = np.unique(test.user_id[test.click == 1])
    latent_users = np.setdiff1d(clicking, seen)
    return np.flatnonzero(np.isin(test.user_id, latent_users))


@dataclass
class Histogram:
    bin_low: np.ndarray
    bin_high: np.ndarray
    counts: np.ndarray
    mean: float | None
    n: int

    @property
    def empty(self) -> bool:
        return self.n == 0

    def to_json(self) -> dict:
        if self.empty:
            return {"empty": True}
        return {"empty": False, "n": self.n, "mean": self.mean, "counts": self.counts.tolist()}

    def to_csv(self) -> str:
        rows = ["bin_low,bin_high,count"]
        rows += [f"{lo!r},{hi!r},{int(c)}" for lo, hi, c in zip(self.bin_low.tolist(), self.bin_high.tolist(),
                                                               self.counts.tolist())]
        return "\n".join(rows) + "\n"


def export_histograms(predictions, n_bins: int = 20) -> Histogram:
    """Fixed-width bins on [0, 1]; an empty input yields the empty marker (n = 0)."""
    x = np.asarray(predictions, dtype=np.float64).ravel()
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    if x.size == 0:
        return Histogram(edges[:-1], edges[1:], np.zeros(n_bins, dtype=np.int64), None, 0)
    counts, _ = np.histogram(np.clip(x, 0.0, 1.0), bins=edges)
    return Histogram(edges[:-1], edges[1:], counts.astype(np.int64), float(x.mean()), int(x.size))


def latent_report(model: EscimModel, train: InteractionLog, val: InteractionLog, test: InteractionLog,
                  n_bins: int = 20) -> dict:
    """Metrics on the latent-conversion subset, or ``{"empty": True}``."""
    idx = latent_conversion_subset(train, val, test)
    if idx.size == 0:
        return {"empty": True}
    sub = test.subset(idx)
    pred = predict(model, sub)
    clicked = sub.click == 1

    def maybe_auc(scores, labels):
        try:
            return auc(scores, labels)
        except UndefinedMetricError:
            return None

    both = clicked & (sub.conversion == 1)
    return {
        "empty": False,
        "n": int(idx.size),
        "cvr_auc": maybe_auc(pred.p_cvr[clicked], sub.conversion[clicked]),
        "ctcvr_auc": maybe_auc(pred.p_ctcvr, sub.conversion),
        "hist_pcvr": export_histograms(pred.p_cvr[both], n_bins).to_json(),
        "hist_pctcvr": export_histograms(pred.p_ctcvr[both], n_bins).to_json(),
    }


# -- experiment setup ------------------------------------------------------------------------------


@dataclass
class ExperimentData:
    log: InteractionLog
    oracle: Oracle | None
    train_idx: np.ndarray  # rows of ``log`` used for training, after downsampling
    val_idx: np.ndarray
    test_idx: np.ndarray
    train_full_idx: np.ndarray  # training rows before downsampling

    def __post_init__(self):
        self.train = self.log.subset(self.train_idx)
        self.val = self.log.subset(self.val_idx)
        self.test = self.log.subset(self.test_idx)
        self.train_full = self.log.subset(self.train_full_idx)

    def oracle_of(self, idx):
        return None if self.oracle is None else self.oracle.subset(idx)


def prepare_experiment(log: InteractionLog, oracle: Oracle | None = None, test_fraction: float = 0.2,
                       val_fraction: float = 0.1, downsample_ratio: int | None = 5, seed: int = 0) -> ExperimentData:
    """Test split, validation split (of the rest) and non-click downsampling of the training part."""
    rest, test_idx = split_indices(len(log), test_fraction, derive_seed(seed, SEED_TEST_SPLIT))
    fit_pos, val_pos = split_indices(len(rest), val_fraction, derive_seed(seed, SEED_VAL_SPLIT))
    train_full, val_idx = rest[fit_pos], rest[val_pos]
    train_idx = train_full
    if downsample_ratio:
        keep = downsample_indices(log.subset(train_full), int(downsample_ratio), derive_seed(seed, SEED_DOWNSAMPLE))
        train_idx = train_full[keep]
    return ExperimentData(log, oracle, train_idx, val_idx, test_idx, train_full)


@dataclass(frozen=True)
class ExperimentSettings:
    train: TrainConfig = TrainConfig(lr=1e-3)
    objective: ObjectiveSpec = ObjectiveSpec()
    counterfactual: CounterfactualConfig = CounterfactualConfig()
    cf_method: str = "max"
    tower_dims: tuple = (64, 32)
    embedding_std: float = 0.1


def fit(data: ExperimentData, kind, seed: int, settings: ExperimentSettings = ExperimentSettings(),
        cf_labels=None, **objective_overrides) -> TrainResult:
    """Train one objective on the experiment's training view."""
    spec = replace(settings.objective, kind=ObjectiveKind.parse(kind), **objective_overrides)
    model = init_model(data.log.schema, settings.tower_dims, with_imputation=spec.kind == ObjectiveKind.ESCM2_DR,
                       seed=seed, embedding_std=settings.embedding_std)
    oracle_v = val_oracle_v = None
    if spec.kind == ObjectiveKind.IDEAL:
        oracle_v = data.oracle.v_do1[data.train_idx]
        val_oracle_v = data.oracle.v_do1[data.val_idx]
    return train(model, data.train, spec, cf_labels=cf_labels, config=replace(settings.train, seed=seed),
                 val_log=data.val, oracle_v=oracle_v, val_oracle_v=val_oracle_v)


def make_labels(data: ExperimentData, seed: int, settings: ExperimentSettings = ExperimentSettings(),
                method: str | None = None, variant: str | None = None) -> LabelRun:
    """Counterfactual labels over the non-clicked rows of the training view."""
    cfg = settings.counterfactual if variant is None else replace(settings.counterfactual, z_variant=variant)
    return generate_labels(data.train, seed, method or settings.cf_method, cfg)


def label_stats(data: ExperimentData, labelset: CounterfactualLabelSet) -> dict:
    stats = {"mean": labelset.mean, "method": labelset.method, "threshold_or_k": float(labelset.threshold_or_k)}
    if data.oracle is not None:
        truth = data.oracle.v_do1[data.train_idx][labelset.indices]
        stats["f1"] = label_f1(labelset.labels, truth)
        stats["f1_all_ones"] = label_f1(np.ones_like(truth), truth)
    return stats


def run_seed(data: ExperimentData, kind, seed: int, settings: ExperimentSettings = ExperimentSettings(),
             labelset: CounterfactualLabelSet | None = None, **objective_overrides) -> MetricReport:
    """Fit + evaluate on the test split for one seed."""
    kind = ObjectiveKind.parse(kind)
    cf = None
    if kind == ObjectiveKind.ESCIM:
        if labelset is None:
            labelset = make_labels(data, seed, settings).labelset
        cf = labelset.aligned(len(data.train))
    result = fit(data, kind, seed, settings, cf_labels=cf, **objective_overrides)
    stats = label_stats(data, labelset) if labelset is not None else None
    return evaluate(result.model, data.test, data.oracle_of(data.test_idx), seed, stats)


# -- sweeps ---------------------------------------------------------------------------------------


@dataclass
class SweepRow:
    name: str
    value: float
    cvr_aucs: list
    ctcvr_aucs: list

    @property
    def mean_cvr_auc(self):
        return float(np.mean(self.cvr_aucs))

    @property
    def mean_ctcvr_auc(self):
        return float(np.mean(self.ctcvr_aucs))

    @property
    def std_cvr_auc(self):
        return float(np.std(self.cvr_aucs))

    @property
    def std_ctcvr_auc(self):
        return float(np.std(self.ctcvr_aucs))

    def to_json(self) -> dict:
        return {"name": self.name, "value": self.value, "mean_cvr_auc": self.mean_cvr_auc,
                "std_cvr_auc": self.std_cvr_auc, "mean_ctcvr_auc": self.mean_ctcvr_auc,
                "std_ctcvr_auc": self.std_ctcvr_auc, "cvr_aucs": list(self.cvr_aucs),
                "ctcvr_aucs": list(self.ctcvr_aucs)}


@dataclass
class SweepResult:
    kind: str
    knob: str
    seeds: list
    grid: list  # SweepRow

    def __post_init__(self):
        if not self.grid:
            raise ValueError("a sweep needs at least one grid point")

    def row(self, name) -> SweepRow:
        for r in self.grid:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"kind": self.kind, "knob": self.knob, "seeds": list(self.seeds),
                "grid": [r.to_json() for r in self.grid]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.dumps())


def sweep_threads() -> int:
    """Worker cap for sweep jobs from ``ESCIM_THREADS`` (default 1)."""
    raw = os.environ.get("ESCIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_jobs(jobs):
    """Run zero-argument callables; results come back in submission order."""
    threads = sweep_threads()
    if threads == 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


def threshold_sweep(pcvr_by_seed: dict, grid, train_eval, operating_points: dict | None = None,
                    indices=None) -> SweepResult:
    """Retrain with the top ceil(m |N|) counterfactual pCVRs labelled 1, for each target mean m.

    ``train_eval(seed, labelset)`` returns ``(cvr_auc, ctcvr_auc)``.
    ``operating_points`` maps a name (e.g. "max") to per-seed label sets,
    which become extra rows whose value is their mean label. ``indices``
    are the row indices the pCVRs belong to (default: positions).
    """
    seeds = sorted(pcvr_by_seed)
    entries = []
    for m in grid:
        entries.append((f"m={m:g}", float(m), {s: transform_top_fraction(pcvr_by_seed[s], m, indices) for s in seeds}))
    for name, by_seed in (operating_points or {}).items():
        mean = float(np.mean([by_seed[s].mean for s in seeds]))
        entries.append((name, mean, by_seed))
    jobs = [(lambda s=s, ls=ls: train_eval(s, ls)) for _, _, by_seed in entries for s, ls in
            sorted(by_seed.items())]
    results = iter(_run_jobs(jobs))
    rows = []
    for name, value, by_seed in entries:
        got = [next(results) for _ in by_seed]
        rows.append(SweepRow(name, value, [g[0] for g in got], [g[1] for g in got]))
    return SweepResult("threshold", "label_mean", seeds, rows)


def experiment_threshold_sweep(data: ExperimentData, seeds, settings: ExperimentSettings = ExperimentSettings(),
                               grid=THRESHOLD_GRID) -> SweepResult:
    """Threshold sweep on ESCIM with the max and ratio operating points included."""
    from .counterfactual import transform_ratio
    from .data import partition_spaces

    runs = {s: make_labels(data, s, settings, method="max") for s in seeds}
    sp = partition_spaces(data.train)
    pcvr = {s: r.labelset.pcvr_cf for s, r in runs.items()}
    ratio = {}
    for s, r in runs.items():
        ls = transform_ratio(r.labelset.pcvr_cf, sp.V.size, sp.C.size, sp.N.size, r.labelset.indices)
        ratio[s] = ls
    ops = {"max": {s: r.labelset for s, r in runs.items()}, "ratio": ratio}

    def train_eval(seed, labelset):
        rep = run_seed(data, ObjectiveKind.ESCIM, seed, settings, labelset)
        return rep.cvr_auc, rep.ctcvr_auc

    return threshold_sweep(pcvr, grid, train_eval, ops, sp.N)


def alpha_sweep(data: ExperimentData, seeds, settings: ExperimentSettings = ExperimentSettings(),
                grid=ALPHA_GRID, labels_by_seed: dict | None = None) -> SweepResult:
    """ESCIM with alpha_f fixed at 0.1 and alpha_cf varied; labels computed once per seed."""
    if labels_by_seed is None:
        labels_by_seed = {s: make_labels(data, s, settings).labelset for s in seeds}
    jobs = [(lambda s=s, a=a: run_seed(data, ObjectiveKind.ESCIM, s, settings, labels_by_seed[s],
                                       alpha_f=0.1, alpha_cf=float(a))) for a in grid for s in seeds]
    reports = iter(_run_jobs(jobs))
    rows = []
    for a in grid:
        got = [next(reports) for _ in seeds]
        rows.append(SweepRow(f"alpha_cf={a:g}", float(a), [r.cvr_auc for r in got], [r.ctcvr_auc for r in got]))
    return SweepResult("alpha", "alpha_cf", list(seeds), rows)


def posterior_ablation(data: ExperimentData, seeds, settings: ExperimentSettings = ExperimentSettings()) -> dict:
    """ESCIM-max with z dropped ("none"), drawn from the prior, or abducted ("posterior")."""
    jobs = []
    for variant in ABLATION_VARIANTS:
        for s in seeds:
            def job(s=s, variant=variant):
                ls = make_labels(data, s, settings, method="max", variant=variant).labelset
                return run_seed(data, ObjectiveKind.ESCIM, s, settings, ls)
            jobs.append(job)
    reports = iter(_run_jobs(jobs))
    return {variant: [next(reports) for _ in seeds] for variant in ABLATION_VARIANTS}


def ablation_sweep_result(reports: dict, seeds) -> SweepResult:
    rows = [SweepRow(v, float(i), [r.cvr_auc for r in reports[v]], [r.ctcvr_auc for r in reports[v]])
            for i, v in enumerate(ABLATION_VARIANTS)]
    return SweepResult("ablation", "z_variant", list(seeds), rows)


def compare_objectives(data: ExperimentData, kinds, seeds, settings: ExperimentSettings = ExperimentSettings(),
                       labels_by_seed: dict | None = None) -> dict:
    """Per objective, one MetricReport per seed; ESCIM reuses ``labels_by_seed`` if given."""
    kinds = [ObjectiveKind.parse(k) for k in kinds]
    if ObjectiveKind.ESCIM in kinds and labels_by_seed is None:
        labels_by_seed = {s: make_labels(data, s, settings).labelset for s in seeds}
    jobs = [(lambda k=k, s=s: run_seed(data, k, s, settings,
                                       labels_by_seed[s] if k == ObjectiveKind.ESCIM else None))
            for k in kinds for s in seeds]
    reports = iter(_run_jobs(jobs))
    return {k.value: [next(reports) for _ in seeds] for k in kinds}
