"""Training objectives for CTR/CVR multi-task models.

The public loss functions take predicted probabilities and labels and return
a scalar. :func:`evaluate_objective` assembles a full objective and also
returns gradients with respect to the CTR and CVR tower logits, which is
what the trainer back-propagates.

Propensities (the predicted CTR used as an inverse weight) are treated as
constants: no CVR-side term sends gradient into the CTR tower through its
weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractError, UndefinedPopulationError
from .numeric import PROB_EPS, bce, bce_logit_grad


class ObjectiveKind(str, Enum):
    IDEAL = "ideal"
    NAIVE = "naive"
    ESMM = "esmm"
    ESCM2_IPS = "escm2_ips"
    ESCM2_DR = "escm2_dr"
    DCMT = "dcmt"
    ESCIM = "escim"

    @classmethod
    def parse(cls, name) -> "ObjectiveKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace("²", "2")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        raise ContractError(f"unknown objective {name!r}")


CF_WEIGHT_MODES = ("inverse_ctr", "inverse_one_minus_ctr")


@dataclass(frozen=True)
class PropensityClip:
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ContractError(f"clip epsilon must lie in (0, 0.5), got {self.epsilon}")

    def inverse(self, p):
        return 1.0 / np.clip(np.asarray(p, dtype=np.float64), self.epsilon, 1.0)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: ObjectiveKind = ObjectiveKind.ESCIM
    alpha: float = 0.1
    alpha_f: float = 0.1
    alpha_cf: float = 1e-4
    clip: PropensityClip = field(default_factory=PropensityClip)
    cf_weight_mode: str = "inverse_ctr"

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind.parse(self.kind))
        if self.cf_weight_mode not in CF_WEIGHT_MODES:
            raise ContractError(f"cf_weight_mode must be one of {CF_WEIGHT_MODES}")
        if min(self.alpha, self.alpha_f, self.alpha_cf) < 0:
            raise ContractError("objective weights must be nonnegative")


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _mask(click_mask, n):
    m = np.asarray(click_mask).astype(bool)
    if m.shape != (n,):
        raise ContractError(f"mask of shape {m.shape} does not match batch of {n}")
    return m


def _require(mask, space):
    count = int(mask.sum())
    if count == 0:
        raise UndefinedPopulationError(f"expectation over an empty {space} space")
    return count


# -- individual terms: (value, d_ctr_logit, d_cvr_logit) ------------------------------------


def _ctr_term(p_ctr, c):
    n = len(p_ctr)
    return float(np.mean(bce(p_ctr, c))), bce_logit_grad(p_ctr, c) / n


def _ctcvr_term(p_ctr, p_cvr, c, v):
    n = len(p_ctr)
    q = p_ctr * p_cvr
    y = c * v
    value = float(np.mean(bce(q, y)))
    inside = (q > PROB_EPS) & (q < 1.0 - PROB_EPS)
    base = np.where(inside, (q - y) / (1.0 - q), 0.0) / n
    return value, base * (1.0 - p_ctr), base * (1.0 - p_cvr)


def _weighted_cvr_term(p_cvr, y, weights, mask, space):
    """Mean over ``mask`` of weights * bce(p_cvr, y)."""
    count = _require(mask, space)
    ell = bce(p_cvr, y)
    value = float(np.sum(np.where(mask, weights * ell, 0.0)) / count)
    grad = np.where(mask, weights * bce_logit_grad(p_cvr, y), 0.0) / count
    return value, grad


# -- public scalar losses ----------------------------------------------------------------


def ctr_loss(p_ctr, c) -> float:
    return _ctr_term(_arr(p_ctr), _arr(c))[0]


def ctcvr_loss(p_ctr, p_cvr, c, v) -> float:
    return _ctcvr_term(_arr(p_ctr), _arr(p_cvr), _arr(c), _arr(v))[0]


def naive_cvr_loss(p_cvr, v, click_mask) -> float:
    p_cvr = _arr(p_cvr)
    mask = _mask(click_mask, len(p_cvr))
    return _weighted_cvr_term(p_cvr, _arr(v), 1.0, mask, "click")[0]


def ips_cvr_loss(p_cvr, v, p_ctr, click_mask, clip: PropensityClip = PropensityClip(),
                 reduction: str = "click") -> float:
    """Inverse-propensity weighted BCE over the clicked rows.

    ``reduction="click"`` averages over |C|, the form used in training.
    ``reduction="exposure"`` divides the same sum by |D| instead, which is
    the Horvitz-Thompson estimator of the mean loss over all exposures.
    """
    p_cvr = _arr(p_cvr)
    mask = _mask(click_mask, len(p_cvr))
    value = _weighted_cvr_term(p_cvr, _arr(v), clip.inverse(p_ctr), mask, "click")[0]
    if reduction == "click":
        return value
    if reduction == "exposure":
        return value * int(mask.sum()) / len(p_cvr)
    raise ContractError(f"reduction must be 'click' or 'exposure', got {reduction!r}")


def dr_cvr_loss(p_cvr, v, p_ctr, imputed_loss, click_mask, clip: PropensityClip = PropensityClip()) -> float:
    """Mean over D of imputed + c * (e + e^2) / p_ctr, with e = bce - imputed on clicks."""
    p_cvr = _arr(p_cvr)
    mask = _mask(click_mask, len(p_cvr))
    imputed = _arr(imputed_loss)
    if np.any(imputed < 0):
        raise ContractError("imputed losses must be nonnegative")
    e = np.where(mask, bce(p_cvr, _arr(v)) - imputed, 0.0)
    return float(np.mean(imputed + mask * (e + e * e) * clip.inverse(p_ctr)))


def dcmt_cvr_loss(p_cvr, v, p_ctr, click_mask, clip: PropensityClip = PropensityClip()) -> float:
    p_cvr, p_ctr = _arr(p_cvr), _arr(p_ctr)
    mask = _mask(click_mask, len(p_cvr))
    f, _ = _weighted_cvr_term(p_cvr, _arr(v), clip.inverse(p_ctr), mask, "click")
    cf, _ = _weighted_cvr_term(p_cvr, 1.0, clip.inverse(1.0 - p_ctr), ~mask, "counterfactual")
    return f + cf


def cf_cvr_loss(p_cvr, p_ctr, cf_labels, clip: PropensityClip = PropensityClip(),
                cf_weight_mode: str = "inverse_ctr") -> float:
    """Counterfactual CVR loss over rows carrying a label (label >= 0)."""
    p_cvr, p_ctr, labels = _arr(p_cvr), _arr(p_ctr), _arr(cf_labels)
    w = _cf_weights(p_ctr, clip, cf_weight_mode)
    return _weighted_cvr_term(p_cvr, np.maximum(labels, 0), w, labels >= 0, "counterfactual")[0]


def _cf_weights(p_ctr, clip, mode):
    if mode == "inverse_ctr":
        return clip.inverse(p_ctr)
    if mode == "inverse_one_minus_ctr":
        return clip.inverse(1.0 - p_ctr)
    raise ContractError(f"unknown cf_weight_mode {mode!r}")


def check_cf_labels(cf_labels, c):
    """Counterfactual labels must cover exactly the non-clicked rows (-1 marks 'no label')."""
    labels = np.asarray(cf_labels)
    c = np.asarray(c)
    if labels.shape != c.shape:
        raise ContractError(f"cf_labels shape {labels.shape} != batch shape {c.shape}")
    has = labels >= 0
    if np.any(has & (c == 1)):
        raise ContractError("counterfactual labels supplied for clicked samples")
    if np.any(~has & (c == 0)):
        raise ContractError("non-clicked samples without a counterfactual label")
    if np.any(has & (labels > 1)):
        raise ContractError("counterfactual labels must be binary")


def escim_objective(p_ctr, p_cvr, c, v, cf_labels, alpha_f=0.1, alpha_cf=1e-4,
                    clip: PropensityClip = PropensityClip(), cf_weight_mode="inverse_ctr"):
    """Total ESCIM loss and its components as a dict."""
    spec = ObjectiveSpec(ObjectiveKind.ESCIM, alpha_f=alpha_f, alpha_cf=alpha_cf, clip=clip,
                         cf_weight_mode=cf_weight_mode)
    out = evaluate_objective(spec, p_ctr, p_cvr, c, v, cf_labels=cf_labels)
    return out.total, out.components


def esmm_objective(p_ctr, p_cvr, c, v) -> float:
    return ctr_loss(p_ctr, c) + ctcvr_loss(p_ctr, p_cvr, c, v)


# -- full objectives with gradients ------------------------------------------------------------


@dataclass
class ObjectiveValue:
    total: float
    components: dict
    d_ctr: np.ndarray  # gradient wrt CTR logits
    d_cvr: np.ndarray  # gradient wrt CVR logits
    d_imputed: np.ndarray | None = None  # gradient wrt imputation head output
    skipped: tuple = ()


def evaluate_objective(spec: ObjectiveSpec, p_ctr, p_cvr, c, v, cf_labels=None, imputed=None,
                       oracle_v=None, on_empty: str = "raise") -> ObjectiveValue:
    """Evaluate ``spec`` on one batch.

    ``on_empty="skip"`` drops space-conditional terms whose space is empty in
    this batch and lists them in ``skipped`` instead of raising.
    """
    p_ctr, p_cvr, c, v = _arr(p_ctr), _arr(p_cvr), _arr(c), _arr(v)
    n = len(p_ctr)
    if not (p_cvr.shape == c.shape == v.shape == (n,)):
        raise ContractError("predictions and labels must be 1-D arrays of equal length")
    clicked = c == 1
    kind = spec.kind
    comps = {}
    skipped = []
    d_ctr = np.zeros(n)
    d_cvr = np.zeros(n)
    d_imp = None

    val, g = _ctr_term(p_ctr, c)
    comps["ctr"] = val
    d_ctr += g

    def add_cvr(name, weight, fn):
        nonlocal d_cvr
        try:
            val, g = fn()
        except UndefinedPopulationError:
            if on_empty != "skip":
                raise
            skipped.append(name)
            return
        comps[name] = val
        d_cvr = d_cvr + weight * g

    if kind in (ObjectiveKind.ESMM, ObjectiveKind.ESCM2_IPS, ObjectiveKind.ESCM2_DR, ObjectiveKind.DCMT,
                ObjectiveKind.ESCIM):
        val, gc, gv = _ctcvr_term(p_ctr, p_cvr, c, v)
        comps["ctcvr"] = val
        d_ctr += gc
        d_cvr += gv
    weights = {"ctr": 1.0, "ctcvr": 1.0}

    if kind == ObjectiveKind.IDEAL:
        if oracle_v is None:
            raise ContractError("the ideal objective needs oracle potential outcomes")
        ov = _arr(oracle_v)
        add_cvr("cvr_ideal", 1.0, lambda: _weighted_cvr_term(p_cvr, ov, 1.0, np.ones(n, bool), "exposure"))
        weights["cvr_ideal"] = 1.0
    elif kind == ObjectiveKind.NAIVE:
        add_cvr("cvr_naive", 1.0, lambda: _weighted_cvr_term(p_cvr, v, 1.0, clicked, "click"))
        weights["cvr_naive"] = 1.0
    elif kind == ObjectiveKind.ESCM2_IPS:
        add_cvr("cvr_ips", spec.alpha, lambda: _weighted_cvr_term(p_cvr, v, spec.clip.inverse(p_ctr), clicked, "click"))
        weights["cvr_ips"] = spec.alpha
    elif kind == ObjectiveKind.ESCM2_DR:
        if imputed is None:
            raise ContractError("ESCM2-DR needs imputed losses from the imputation tower")
        imputed = _arr(imputed)
        ell = bce(p_cvr, v)
        e = np.where(clicked, ell - imputed, 0.0)
        inv = spec.clip.inverse(p_ctr)
        comps["cvr_dr"] = float(np.mean(imputed + clicked * (e + e * e) * inv))
        weights["cvr_dr"] = spec.alpha
        # imputed loss is held fixed here; the imputation head has its own term below
        d_cvr = d_cvr + spec.alpha * clicked * (1.0 + 2.0 * e) * inv * bce_logit_grad(p_cvr, v) / n
        n_c = int(clicked.sum())
        if n_c:
            comps["imputation"] = float(np.sum(e * e) / n_c)
            weights["imputation"] = 1.0
            d_imp = np.where(clicked, -2.0 * e, 0.0) / n_c
        else:
            if on_empty != "skip":
                raise UndefinedPopulationError("expectation over an empty click space")
            skipped.append("imputation")
            d_imp = np.zeros(n)
    elif kind == ObjectiveKind.DCMT:
        add_cvr("cvr_dcmt_f", spec.alpha,
                lambda: _weighted_cvr_term(p_cvr, v, spec.clip.inverse(p_ctr), clicked, "click"))
        add_cvr("cvr_dcmt_cf", spec.alpha,
                lambda: _weighted_cvr_term(p_cvr, 1.0, spec.clip.inverse(1.0 - p_ctr), ~clicked, "counterfactual"))
        weights["cvr_dcmt_f"] = weights["cvr_dcmt_cf"] = spec.alpha
    elif kind == ObjectiveKind.ESCIM:
        add_cvr("cvr_f", spec.alpha_f, lambda: _weighted_cvr_term(p_cvr, v, spec.clip.inverse(p_ctr), clicked, "click"))
        weights["cvr_f"] = spec.alpha_f
        if spec.alpha_cf > 0:
            if cf_labels is None:
                raise ContractError("ESCIM needs counterfactual labels")
            labels = np.asarray(cf_labels)
            check_cf_labels(labels, c)
            w = _cf_weights(p_ctr, spec.clip, spec.cf_weight_mode)
            add_cvr("cvr_cf", spec.alpha_cf,
                    lambda: _weighted_cvr_term(p_cvr, np.maximum(labels, 0), w, labels >= 0, "counterfactual"))
            weights["cvr_cf"] = spec.alpha_cf

    total = sum(weights[k] * val for k, val in comps.items())
    return ObjectiveValue(float(total), comps, d_ctr, d_cvr, d_imp, tuple(skipped))
