"""Synthetic exposure logs from a known structural causal model.

Structure: features X drive the click C; X, C and an exogenous Gaussian Z
drive the conversion V, which is only observed when C = 1. Both structural
functions are logistic-linear in a fixed random embedding of the categorical
features, so true propensities and potential outcomes V(C:=1) are known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import FeatureSchema, InteractionLog, atomic_write_text, default_schema
from .errors import CalibrationError, ContractError
from .numeric import bce

SHARD_SIZE = 50_000
CALIBRATION_DRAWS = 50_000


@dataclass(frozen=True)
class ScmConfig:
    schema: FeatureSchema = field(default_factory=default_schema)
    n_samples: int = 200_000
    target_ctr: float = 0.04
    target_cvr_given_click: float = 0.05
    z_dim: int = 8
    z_weight_scale: float = 1.0
    seed: int = 0
    shared_fraction: float = 0.5
    scm_embedding_dim: int = 4
    click_score_std: float = 1.0
    conv_score_std: float = 1.0

    def __post_init__(self):
        if not 0 < self.target_ctr < 1:
            raise ContractError("target_ctr must lie in (0, 1)")
        if not 0 < self.target_cvr_given_click < 1:
            raise ContractError("target_cvr_given_click must lie in (0, 1)")
        if self.z_dim < 1:
            raise ContractError("z_dim must be >= 1")
        if self.z_weight_scale < 0:
            raise ContractError("z_weight_scale must be nonnegative")
        if not 0 <= self.shared_fraction <= 1:
            raise ContractError("shared_fraction must lie in [0, 1]")
        if self.n_samples < 0:
            raise ContractError("n_samples must be nonnegative")


@dataclass(eq=False)
class GroundTruthScm:
    """Linear score weights over the per-field random embeddings.

    ``click_coeffs`` and ``conv_coeffs`` are per-field tables of scalar
    effects (embedding dotted with the field's weight vector); ``z_weights``
    has unit norm scaled by ``z_weight_scale``.
    """

    click_coeffs: list  # per field: (cardinality,) array
    conv_coeffs: list
    z_weights: np.ndarray
    a_c: float = 0.0
    a_v: float = 0.0

    def click_score(self, features):
        return sum(t[features[:, f]] for f, t in enumerate(self.click_coeffs))

    def conv_score(self, features, z):
        return sum(t[features[:, f]] for f, t in enumerate(self.conv_coeffs)) + z @ self.z_weights

    def p_click(self, features):
        return expit(self.click_score(features) + self.a_c)

    def p_conv_do1(self, features, z):
        return expit(self.conv_score(features, z) + self.a_v)


@dataclass(eq=False)
class Oracle:
    """Simulator-only ground truth aligned row-for-row with a log."""

    z_true: np.ndarray
    p_click_true: np.ndarray
    p_conv_do1_true: np.ndarray
    v_do1: np.ndarray

    def __len__(self):
        return len(self.v_do1)

    def __getitem__(self, i):
        return OracleSample(self.z_true[i], float(self.p_click_true[i]), float(self.p_conv_do1_true[i]),
                            int(self.v_do1[i]))

    def subset(self, idx) -> "Oracle":
        return Oracle(self.z_true[idx], self.p_click_true[idx], self.p_conv_do1_true[idx], self.v_do1[idx])


@dataclass(frozen=True)
class OracleSample:
    z_true: np.ndarray
    p_click_true: float
    p_conv_do1_true: float
    v_do1: int


def _seeds(config: ScmConfig):
    ss = np.random.SeedSequence(config.seed)
    structure, calibration, data = ss.spawn(3)
    return structure, calibration, data


def build_scm(config: ScmConfig) -> GroundTruthScm:
    """Draw the structural weights (intercepts left at zero)."""
    rng = np.random.default_rng(_seeds(config)[0])
    schema = config.schema
    k = config.scm_embedding_dim
    d = schema.n_fields * k
    tables = [rng.normal(size=(card, k)) for card in schema.cardinalities]
    w_c = rng.normal(size=d)
    shared = rng.random(d) < config.shared_fraction
    w_v = np.where(shared, w_c, rng.normal(size=d))
    # score variance is ||w||^2 because the table rows are standard normal
    w_c *= config.click_score_std / np.sqrt(d)
    w_v *= config.conv_score_std / np.sqrt(d)
    click = [tables[f] @ w_c[f * k:(f + 1) * k] for f in range(schema.n_fields)]
    conv = [tables[f] @ w_v[f * k:(f + 1) * k] for f in range(schema.n_fields)]
    z_w = rng.normal(size=config.z_dim)
    z_w *= config.z_weight_scale / np.linalg.norm(z_w)
    return GroundTruthScm(click, conv, z_w)


def _sample_features(rng, schema, n):
    return np.stack([rng.integers(0, card, size=n) for card in schema.cardinalities], axis=1) \
        if n else np.zeros((0, schema.n_fields), dtype=np.int64)


def _bisect(fn, target, lo=-30.0, hi=30.0, iters=100):
    f_lo, f_hi = fn(lo) - target, fn(hi) - target
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(f"target {target} not bracketed by intercepts [{lo}, {hi}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f_mid = fn(mid) - target
        if abs(f_mid) <= 1e-12 * target or hi - lo < 1e-13:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    if abs(fn(0.5 * (lo + hi)) - target) > 0.05 * target:
        raise CalibrationError("intercept bisection did not converge in 100 iterations")
    return 0.5 * (lo + hi)


def calibrate_intercepts(config: ScmConfig, scm: GroundTruthScm | None = None):
    """Bisect the click and conversion intercepts onto the target rates.

    The conversion intercept targets the conversion rate among clicks,
    E[p_click * p_conv] / E[p_click], over the same Monte-Carlo draws.
    """
    scm = scm or build_scm(config)
    rng = np.random.default_rng(_seeds(config)[1])
    feats = _sample_features(rng, config.schema, CALIBRATION_DRAWS)
    z = rng.normal(size=(CALIBRATION_DRAWS, config.z_dim))
    s_c = scm.click_score(feats)
    s_v = scm.conv_score(feats, z)
    a_c = _bisect(lambda a: expit(s_c + a).mean(), config.target_ctr)
    w = expit(s_c + a_c)
    w /= w.sum()
    a_v = _bisect(lambda a: float(w @ expit(s_v + a)), config.target_cvr_given_click)
    return a_c, a_v


def calibrated_scm(config: ScmConfig) -> GroundTruthScm:
    scm = build_scm(config)
    scm.a_c, scm.a_v = calibrate_intercepts(config, scm)
    return scm


def generate_log(config: ScmConfig, scm: GroundTruthScm | None = None):
    """Draw ``n_samples`` exposures; returns ``(log, oracle)``.

    Rows are generated in fixed-size shards with seeds spawned per shard, so
    output depends only on the config.
    """
    scm = scm or calibrated_scm(config)
    n = config.n_samples
    n_shards = max(1, -(-n // SHARD_SIZE))
    shard_seeds = _seeds(config)[2].spawn(n_shards)
    parts = []
    for s, seed in enumerate(shard_seeds):
        m = min(SHARD_SIZE, n - s * SHARD_SIZE)
        rng = np.random.default_rng(seed)
        feats = _sample_features(rng, config.schema, m)
        p_c = scm.p_click(feats)
        c = (rng.random(m) < p_c).astype(np.int8)
        z = rng.normal(size=(m, config.z_dim))
        p_v = scm.p_conv_do1(feats, z)
        v_do1 = (rng.random(m) < p_v).astype(np.int8)
        parts.append((feats, p_c, c, z, p_v, v_do1))
    feats, p_c, c, z, p_v, v_do1 = (np.concatenate([p[i] for p in parts]) for i in range(6))
    names = config.schema.names
    user = feats[:, names.index("user_id")] if "user_id" in names else np.zeros(n, dtype=np.int64)
    item = feats[:, names.index("item_id")] if "item_id" in names else np.zeros(n, dtype=np.int64)
    log = InteractionLog(config.schema, user, item, feats, c, c * v_do1)
    return log, Oracle(z, p_c, p_v, v_do1)


def oracle_ideal_loss(log: InteractionLog, oracle: Oracle, predictions) -> float:
    """Mean BCE of pCVR against the potential outcome V(C:=1) over all of D."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != (len(log),) or len(oracle) != len(log):
        raise ContractError(f"need one prediction per exposure ({len(log)}), got {predictions.shape}")
    return float(np.mean(bce(predictions, oracle.v_do1)))


def write_oracle_csv(oracle: Oracle, path) -> None:
    k = oracle.z_true.shape[1]
    header = ["sample_index", "p_click_true", "p_conv_do1_true", "v_do1"] + [f"z_{j}" for j in range(k)]
    lines = [",".join(header)]
    for i in range(len(oracle)):
        zs = ",".join(repr(float(v)) for v in oracle.z_true[i])
        lines.append(f"{i},{float(oracle.p_click_true[i])!r},{float(oracle.p_conv_do1_true[i])!r},"
                     f"{int(oracle.v_do1[i])},{zs}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_oracle_csv(path) -> Oracle:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[0] and not np.array_equal(arr[:, 0], np.arange(arr.shape[0])):
        raise ContractError("oracle CSV sample_index column must be 0..n-1 in order")
    return Oracle(arr[:, 4:].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].astype(np.int8))
