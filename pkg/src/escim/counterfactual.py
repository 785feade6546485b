"""Counterfactual conversion labels for non-clicked exposures.

Pipeline: pre-train a conversion mechanism f(x, z) on clicked samples with
z drawn once from N(0, I); fit an amortized Gaussian posterior q(z | x, v)
with a VAE; intervene do(C = 1) on every non-clicked sample and predict
f(x, z) with z drawn from the posterior; finally turn the predicted
counterfactual pCVRs into hard labels (max or ratio transform).
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionLog, atomic_write_text, partition_spaces
from .errors import ContractError
from .metrics import auc
from .model import embed_rows, embedding_grads, init_embeddings
from .numeric import (Mlp, adam_init, adam_step, bce, bce_logit_grad, bce_with_logits, init_mlp, mlp_backward,
                      mlp_forward)

SEED_PRETRAIN_Z, SEED_PRETRAIN_INIT, SEED_PRETRAIN_SHUFFLE, SEED_PRETRAIN_DROPOUT, SEED_PRETRAIN_VAL = 21, 22, 23, 24, 25
SEED_VAE_INIT, SEED_VAE_SHUFFLE, SEED_VAE_EPS = 31, 32, 33
Z_VARIANTS = ("posterior", "prior", "none")
LOGVAR_BOUND = 10.0


@dataclass(frozen=True)
class CounterfactualConfig:
    hidden_dims: tuple = (64, 32)
    encoder_dims: tuple = (64, 32)
    decoder_dims: tuple = (64, 32)
    lr: float = 1e-3
    weight_decay: float = 1e-6
    l2: float = 1e-4
    dropout: float = 0.1
    batch_size: int = 256
    pretrain_epochs: int = 100
    pretrain_patience: int = 10
    pretrain_min_epochs: int = 10
    pretrain_val_fraction: float = 0.1
    pretrain_stop_metric: str = "auc"
    vae_epochs: int = 20
    beta_max: float = 0.2
    anneal_fraction: float = 0.2
    anchor_weight: float = 1.0
    n_z_draws: int = 1
    embedding_std: float = 0.1
    z_variant: str = "posterior"

    def __post_init__(self):
        if self.z_variant not in Z_VARIANTS:
            raise ContractError(f"z_variant must be one of {Z_VARIANTS}")
        if self.n_z_draws < 1:
            raise ContractError("n_z_draws must be >= 1")
        if self.pretrain_stop_metric not in ("auc", "bce"):
            raise ContractError("pretrain_stop_metric must be 'auc' or 'bce'")
        if not 0 <= self.anneal_fraction <= 1:
            raise ContractError("anneal_fraction must lie in [0, 1]")


# -- pre-training ---------------------------------------------------------------------------


@dataclass(eq=False)
class PretrainNet:
    """Conversion mechanism f(x, z) with its own embedding tables."""

    embeddings: list
    f_theta: Mlp
    z_dim: int

    def parameters(self):
        out = {f"emb{f}": t for f, t in enumerate(self.embeddings)}
        out.update(self.f_theta.parameters("f."))
        return out

    def assign(self, params):
        self.embeddings = [params[f"emb{f}"] for f in range(len(self.embeddings))]
        self.f_theta.assign(params, "f.")

    def inputs(self, features, z):
        x = embed_rows(self.embeddings, features)
        if self.z_dim == 0:
            return x
        return np.concatenate([x, z], axis=1)

    def predict(self, features, z=None) -> np.ndarray:
        if self.z_dim and z is None:
            raise ContractError("this conversion net needs z")
        return mlp_forward(self.f_theta, self.inputs(features, z))[0][:, 0]


@dataclass
class PretrainResult:
    net: PretrainNet
    indices: np.ndarray  # clicked sample indices, in dataset order
    z: np.ndarray  # the z attached to each tuple, fixed for the whole run
    z_hashes: list = field(default_factory=list)  # one digest per epoch
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1


def array_digest(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def _weight_keys(params):
    return [k for k in params if "." in k and k.split(".", 1)[1].startswith("w")]


def pretrain(log: InteractionLog, clicked, seed: int, config: CounterfactualConfig = CounterfactualConfig(),
             use_z: bool = True) -> PretrainResult:
    """Fit f on tuples (x, z, v) of clicked samples; z ~ N(0, I) drawn once up front.

    A seeded ``pretrain_val_fraction`` of the tuples is held out. After
    ``pretrain_min_epochs`` warm-up epochs, training stops once the held-out
    score has not improved for ``pretrain_patience`` epochs, and the best
    snapshot is kept.
    """
    clicked = np.asarray(clicked, dtype=np.int64)
    if clicked.size == 0:
        raise ContractError("pre-training needs at least one clicked sample")
    schema = log.schema
    z_dim = schema.total_embedding_dim if use_z else 0
    z = np.random.default_rng([seed, SEED_PRETRAIN_Z]).standard_normal((clicked.size, z_dim))
    z.setflags(write=False)
    rng = np.random.default_rng([seed, SEED_PRETRAIN_INIT])
    net = PretrainNet(init_embeddings(schema, rng, config.embedding_std),
                      init_mlp([schema.total_embedding_dim + z_dim, *config.hidden_dims, 1], "sigmoid", rng), z_dim)
    feats = log.features[clicked]
    v = log.conversion[clicked].astype(np.float64)
    n_val = int(round(config.pretrain_val_fraction * clicked.size)) if clicked.size > 1 else 0
    perm0 = np.random.default_rng([seed, SEED_PRETRAIN_VAL]).permutation(clicked.size)
    val_rows, fit_rows = np.sort(perm0[:n_val]), np.sort(perm0[n_val:])

    params = net.parameters()
    state = adam_init(params, lr=config.lr, weight_decay=config.weight_decay)
    wkeys = _weight_keys(params)
    result = PretrainResult(net, clicked, z)
    best, best_params, bad = np.inf, dict(params), 0
    n = fit_rows.size
    for epoch in range(config.pretrain_epochs):
        result.z_hashes.append(array_digest(z))
        perm = fit_rows[np.random.default_rng([seed, SEED_PRETRAIN_SHUFFLE, epoch]).permutation(n)]
        total = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            drop_rng = np.random.default_rng([seed, SEED_PRETRAIN_DROPOUT, epoch, step])
            loss_sum, grads = pretrain_batch_gradients(net, feats[idx], z[idx], v[idx], config.dropout, drop_rng)
            total += loss_sum
            for k in wkeys:
                grads[k] = grads[k] + config.l2 * params[k]
            params, state = adam_step(state, params, grads)
            net.assign(params)
        result.losses.append(total / max(n, 1))
        if val_rows.size:
            score = _held_out_score(net, feats[val_rows], z[val_rows], v[val_rows], config.pretrain_stop_metric)
            result.val_losses.append(score)
        else:
            score = -epoch
        if epoch + 1 < min(config.pretrain_min_epochs, config.pretrain_epochs):
            continue  # warm-up: the nearly constant initial net can win a held-out AUC by chance
        if score < best:
            best, best_params, bad, result.best_epoch = score, dict(params), 0, epoch
        else:
            bad += 1
            if bad >= config.pretrain_patience:
                break
    net.assign(best_params)
    return result


def pretrain_batch_gradients(net: PretrainNet, features, z, v, dropout: float = 0.0, rng=None):
    """Summed BCE of f(x, z) on one batch and gradients of its mean for f and the embeddings."""
    x = net.inputs(features, z)
    p, cache = mlp_forward(net.f_theta, x, dropout, dropout > 0, rng)
    p = p[:, 0]
    g = mlp_backward(net.f_theta, cache, (bce_logit_grad(p, v) / len(v))[:, None], wrt="logits")
    grads = g.as_dict("f.")
    width = sum(t.shape[1] for t in net.embeddings)
    for f, ge in enumerate(embedding_grads(net.embeddings, features, g.input[:, :width])):
        grads[f"emb{f}"] = ge
    return float(bce_with_logits(cache.logits[:, 0], v).sum()), grads


def _held_out_score(net, features, z, v, metric):
    """Lower is better: BCE, or 1 - AUC (the label transforms only use the ranking)."""
    if metric == "bce" or v.min() == v.max():
        return pretrain_loss(net, features, z, v)
    return 1.0 - auc(net.predict(features, z), v)


def pretrain_loss(net: PretrainNet, features, z, v) -> float:
    """Mean BCE of f(x, z) against v over the given tuples."""
    return float(np.mean(bce(net.predict(features, z), v)))


# -- abduction ------------------------------------------------------------------------------


@dataclass(eq=False)
class AbductionVae:
    """Encoder (x, v) -> (mu, log sigma^2); decoder (z, x) -> p(v = 1).

    Both read x through the (frozen) embedding tables of the pre-trained net.
    """

    encoder: Mlp
    decoder: Mlp
    embeddings: list
    z_dim: int
    beta_max: float = 0.2
    anneal_fraction: float = 0.2
    losses: list = field(default_factory=list)

    def parameters(self):
        return {**self.encoder.parameters("enc."), **self.decoder.parameters("dec.")}

    def assign(self, params):
        self.encoder.assign(params, "enc.")
        self.decoder.assign(params, "dec.")


@dataclass
class PosteriorGaussian:
    mu: np.ndarray
    sigma: np.ndarray


def beta_schedule(step: int, total_steps: int, beta_max: float, anneal_fraction: float) -> float:
    """Linear KL warm-up from 0 to beta_max over the first anneal_fraction of steps."""
    ramp = anneal_fraction * total_steps
    if ramp <= 0:
        return beta_max
    return beta_max * min(1.0, step / ramp)


def gaussian_kl(mu, logvar) -> np.ndarray:
    """Per-row KL(N(mu, sigma^2) || N(0, I))."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=1)


def _encode(vae, x_emb, v, train_mode=False, rng=None, dropout=0.0):
    enc_in = np.concatenate([x_emb, np.asarray(v, dtype=np.float64)[:, None]], axis=1)
    out, cache = mlp_forward(vae.encoder, enc_in, dropout, train_mode, rng)
    mu = out[:, :vae.z_dim]
    raw = out[:, vae.z_dim:]
    logvar = np.clip(raw, -LOGVAR_BOUND, LOGVAR_BOUND)
    return mu, logvar, raw, cache


def _decoder_from_f(f_theta: Mlp, emb_width: int, z_dim: int) -> Mlp:
    """Copy of f with its first layer rows permuted from (x, z) to (z, x) input order."""
    dec = f_theta.copy()
    w0 = dec.weights[0]
    dec.weights[0] = np.concatenate([w0[emb_width:], w0[:emb_width]], axis=0)
    return dec


def vae_batch_loss(vae: AbductionVae, x_emb, v, eps, beta, z_target=None, anchor_weight=0.0,
                   train_mode=False, rng=None, dropout=0.0):
    """Negative ELBO (reconstruction + beta * KL) plus the optional anchor term.

    Returns ``(loss, parts, grads)`` with gradients for encoder and decoder.
    """
    n = len(v)
    mu, logvar, raw, enc_cache = _encode(vae, x_emb, v, train_mode, rng, dropout)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    p, dec_cache = mlp_forward(vae.decoder, np.concatenate([z, x_emb], axis=1), dropout, train_mode, rng)
    p = p[:, 0]
    recon = float(np.mean(bce_with_logits(dec_cache.logits[:, 0], v)))
    kl_rows = gaussian_kl(mu, logvar)
    kl = float(np.mean(kl_rows))
    loss = recon + beta * kl

    g_dec = mlp_backward(vae.decoder, dec_cache, (bce_logit_grad(p, v) / n)[:, None], wrt="logits")
    dz = g_dec.input[:, :vae.z_dim]
    d_mu = dz + beta * mu / n
    d_logvar = dz * 0.5 * sigma * eps + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    d_logvar = np.where(np.abs(raw) < LOGVAR_BOUND, d_logvar, 0.0)
    g_enc = mlp_backward(vae.encoder, enc_cache, np.concatenate([d_mu, d_logvar], axis=1), wrt="output")
    grads = {**g_enc.as_dict("enc."), **g_dec.as_dict("dec.")}
    parts = {"recon": recon, "kl": kl, "anchor": 0.0}

    if z_target is not None and anchor_weight > 0:
        pa, cache_a = mlp_forward(vae.decoder, np.concatenate([z_target, x_emb], axis=1), dropout, train_mode, rng)
        pa = pa[:, 0]
        anchor = float(np.mean(bce_with_logits(cache_a.logits[:, 0], v)))
        parts["anchor"] = anchor
        loss += anchor_weight * anchor
        g_a = mlp_backward(vae.decoder, cache_a, (anchor_weight * bce_logit_grad(pa, v) / n)[:, None], wrt="logits")
        for k, g in g_a.as_dict("dec.").items():
            grads[k] = grads[k] + g
    return loss, parts, grads


def train_vae(log: InteractionLog, clicked, z_targets, config: CounterfactualConfig, net: PretrainNet,
              seed: int = 0) -> AbductionVae:
    """Fit q(z | x, v) on clicked samples by maximizing the annealed ELBO.

    The decoder starts as a copy of the pre-trained mechanism and is kept
    close to it by replaying the pre-training tuples ``(x, z_target, v)``
    through it (weight ``anchor_weight``), so abducted z live in the same
    coordinates the mechanism was trained on.
    """
    clicked = np.asarray(clicked, dtype=np.int64)
    if clicked.size == 0:
        raise ContractError("abduction needs at least one clicked sample")
    z_dim = net.z_dim
    if z_dim == 0:
        raise ContractError("the conversion net has no exogenous input to abduct")
    z_targets = np.asarray(z_targets, dtype=np.float64)
    if z_targets.shape != (clicked.size, z_dim):
        raise ContractError(f"z_targets must have shape {(clicked.size, z_dim)}")
    schema = log.schema
    emb_width = schema.total_embedding_dim
    rng = np.random.default_rng([seed, SEED_VAE_INIT])
    encoder = init_mlp([emb_width + 1, *config.encoder_dims, 2 * z_dim], "identity", rng)
    # start at the prior: mu = 0, log sigma^2 = 0
    encoder.weights[-1] *= 0.01
    if tuple(config.decoder_dims) == tuple(net.f_theta.layer_dims[1:-1]):
        decoder = _decoder_from_f(net.f_theta, emb_width, z_dim)
    else:
        decoder = init_mlp([z_dim + emb_width, *config.decoder_dims, 1], "sigmoid", rng)
    vae = AbductionVae(encoder, decoder, net.embeddings, z_dim, config.beta_max, config.anneal_fraction)

    x_all = embed_rows(net.embeddings, log.features[clicked])
    v_all = log.conversion[clicked].astype(np.float64)
    n = clicked.size
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.vae_epochs
    params = vae.parameters()
    state = adam_init(params, lr=config.lr, weight_decay=config.weight_decay)
    wkeys = _weight_keys(params)
    step = 0
    for epoch in range(config.vae_epochs):
        perm = np.random.default_rng([seed, SEED_VAE_SHUFFLE, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            eps_rng = np.random.default_rng([seed, SEED_VAE_EPS, step])
            eps = eps_rng.standard_normal((len(idx), z_dim))
            beta = beta_schedule(step, total_steps, config.beta_max, config.anneal_fraction)
            loss, parts, grads = vae_batch_loss(vae, x_all[idx], v_all[idx], eps, beta, z_targets[idx],
                                                config.anchor_weight, True, eps_rng, config.dropout)
            for k in wkeys:
                grads[k] = grads[k] + config.l2 * params[k]
            params, state = adam_step(state, params, grads)
            vae.assign(params)
            vae.losses.append({"step": step, "beta": beta, **parts, "neg_elbo": parts["recon"] + beta * parts["kl"]})
            step += 1
    return vae


def sample_noise(indices, z_dim: int, seed: int, draw: int = 0) -> np.ndarray:
    """Standard-normal rows keyed by (seed, draw, sample index), independent of batch composition."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, z_dim))
    for r, i in enumerate(indices.tolist()):
        out[r] = np.random.default_rng([seed, draw, i]).standard_normal(z_dim)
    return out


def abduct(vae: AbductionVae, features, v, indices, seed: int, draw: int = 0):
    """Posterior q(z | x, v) per row plus one reparameterized draw per row."""
    x_emb = embed_rows(vae.embeddings, features)
    mu, logvar, _, _ = _encode(vae, x_emb, v)
    sigma = np.exp(0.5 * logvar)
    eps = sample_noise(indices, vae.z_dim, seed, draw)
    return PosteriorGaussian(mu, sigma), mu + sigma * eps


def _pcvr_under_do_click(net, vae, log, indices, v_obs, seed, n_draws, variant):
    """f(x, z) for the given rows with z abducted from (x, v_obs), drawn from the prior, or absent."""
    indices = np.asarray(indices, dtype=np.int64)
    feats = log.features[indices]
    if variant == "none" or net.z_dim == 0:
        if net.z_dim:
            raise ContractError("variant 'none' needs a conversion net trained without z")
        return net.predict(feats)
    acc = np.zeros(indices.size)
    for draw in range(n_draws):
        if variant == "posterior":
            if vae is None:
                raise ContractError("posterior variant needs a trained VAE")
            _, z = abduct(vae, feats, v_obs, indices, seed, draw)
        else:
            z = sample_noise(indices, net.z_dim, seed, draw)
        acc += net.predict(feats, z)
    return acc / n_draws


def predict_counterfactual_cvr(net: PretrainNet, vae: AbductionVae | None, log: InteractionLog, non_clicked,
                               seed: int, n_z_draws: int = 1, variant: str = "posterior") -> np.ndarray:
    """Counterfactual pCVR under do(C = 1) for each non-clicked index (observed v = 0)."""
    non_clicked = np.asarray(non_clicked, dtype=np.int64)
    return _pcvr_under_do_click(net, vae, log, non_clicked, np.zeros(non_clicked.size), seed, n_z_draws, variant)


def factual_cvr(net, vae, log, clicked, seed, n_z_draws=1, variant="posterior") -> np.ndarray:
    """pCVR of clicked samples through the same abduct -> f path (input to the max transform)."""
    clicked = np.asarray(clicked, dtype=np.int64)
    return _pcvr_under_do_click(net, vae, log, clicked, log.conversion[clicked].astype(np.float64), seed,
                                n_z_draws, variant)


# -- label transforms -------------------------------------------------------------------------


@dataclass
class CounterfactualLabelSet:
    indices: np.ndarray  # sample indices of N, in order
    labels: np.ndarray  # int8 per index
    method: str
    threshold_or_k: float
    pcvr_cf: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.pcvr_cf = np.asarray(self.pcvr_cf, dtype=np.float64)
        if not (self.indices.shape == self.labels.shape == self.pcvr_cf.shape):
            raise ContractError("indices, labels and pcvr_cf must align")

    @property
    def mean(self) -> float:
        return float(self.labels.mean()) if self.labels.size else 0.0

    def aligned(self, n: int) -> np.ndarray:
        """Length-n label vector with -1 on rows outside the labelled domain."""
        out = np.full(n, -1, dtype=np.int8)
        out[self.indices] = self.labels
        return out

    def write(self, csv_path, sidecar_path) -> None:
        lines = ["sample_index,pcvr_cf,label"]
        lines += [f"{i},{p!r},{l}" for i, p, l in zip(self.indices.tolist(), self.pcvr_cf.tolist(),
                                                    self.labels.tolist())]
        atomic_write_text(csv_path, "\n".join(lines) + "\n")
        meta = {"method": self.method, "threshold_or_k": self.threshold_or_k, "seed": self.seed}
        atomic_write_text(sidecar_path, json.dumps(meta, indent=2) + "\n")

    @classmethod
    def read(cls, csv_path, sidecar_path) -> "CounterfactualLabelSet":
        arr = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        with open(sidecar_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        return cls(arr[:, 0].astype(np.int64), arr[:, 2].astype(np.int8), meta["method"],
                   meta["threshold_or_k"], arr[:, 1], meta.get("seed"))


def transform_max(pcvr_cf, clicked_pcvr, indices=None) -> CounterfactualLabelSet:
    """Label 1 iff the counterfactual pCVR reaches the largest clicked pCVR."""
    pcvr_cf = np.asarray(pcvr_cf, dtype=np.float64)
    clicked_pcvr = np.asarray(clicked_pcvr, dtype=np.float64)
    if clicked_pcvr.size == 0:
        raise ContractError("the max transform needs at least one clicked pCVR")
    tau = float(clicked_pcvr.max())
    indices = np.arange(pcvr_cf.size) if indices is None else indices
    return CounterfactualLabelSet(indices, (pcvr_cf >= tau).astype(np.int8), "max", tau, pcvr_cf)


def ratio_k(n_v: int, n_c: int, n_n: int) -> int:
    if n_c < 1:
        raise ContractError("the ratio transform needs at least one clicked sample")
    return min(n_n, (n_v * n_n) // n_c)


def top_k_stream(scores, k: int) -> np.ndarray:
    """Positions of the k largest scores in one pass with a size-k min-heap.

    A newcomer replaces the current minimum only if strictly larger, so
    among equal scores the earlier position is kept.
    """
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    heap = []
    for pos, s in enumerate(np.asarray(scores, dtype=np.float64).tolist()):
        key = (s, -pos)
        if len(heap) < k:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    return np.sort(np.array([-p for _, p in heap], dtype=np.int64))


def transform_ratio(pcvr_cf, n_v: int, n_c: int, n_n: int | None = None, indices=None) -> CounterfactualLabelSet:
    """Label the top-k counterfactual pCVRs with k = floor(|V| * |N| / |C|)."""
    pcvr_cf = np.asarray(pcvr_cf, dtype=np.float64)
    n_n = pcvr_cf.size if n_n is None else n_n
    if n_n != pcvr_cf.size:
        raise ContractError("|N| must equal the number of counterfactual pCVRs")
    k = ratio_k(n_v, n_c, n_n)
    labels = np.zeros(pcvr_cf.size, dtype=np.int8)
    labels[top_k_stream(pcvr_cf, k)] = 1
    indices = np.arange(pcvr_cf.size) if indices is None else indices
    return CounterfactualLabelSet(indices, labels, "ratio", k, pcvr_cf)


def transform_top_fraction(pcvr_cf, mean_label: float, indices=None) -> CounterfactualLabelSet:
    """Label the top ceil(m * |N|) scores; used by the threshold sweep."""
    pcvr_cf = np.asarray(pcvr_cf, dtype=np.float64)
    if not 0.0 <= mean_label <= 1.0:
        raise ContractError("target label mean must lie in [0, 1]")
    k = min(pcvr_cf.size, int(np.ceil(mean_label * pcvr_cf.size - 1e-9)))
    labels = np.zeros(pcvr_cf.size, dtype=np.int8)
    labels[top_k_stream(pcvr_cf, k)] = 1
    indices = np.arange(pcvr_cf.size) if indices is None else indices
    return CounterfactualLabelSet(indices, labels, "top_fraction", float(mean_label), pcvr_cf)


@dataclass
class CounterfactualSpace:
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.indices.size


def build_counterfactual_space(log: InteractionLog, labelset: CounterfactualLabelSet) -> CounterfactualSpace:
    """Pair every non-clicked sample with its counterfactual label; clicked rows are untouched."""
    N = partition_spaces(log).N
    if not np.array_equal(np.sort(labelset.indices), N):
        raise ContractError("label set domain differs from the non-click space of this log")
    return CounterfactualSpace(labelset.indices, log.features[labelset.indices], labelset.labels)


# -- composition ----------------------------------------------------------------------------


@dataclass
class LabelRun:
    labelset: CounterfactualLabelSet
    net: PretrainNet
    vae: AbductionVae | None
    clicked_pcvr: np.ndarray
    pretrain: PretrainResult


def generate_labels(log: InteractionLog, seed: int, method: str = "max",
                    config: CounterfactualConfig = CounterfactualConfig()) -> LabelRun:
    """Pre-train, abduct, intervene, predict and transform for one log."""
    sp = partition_spaces(log)
    if sp.C.size == 0:
        raise ContractError("no clicked samples: counterfactual labels need a non-empty click space "
                            "(check the click column or disable downsampling)")
    variant = config.z_variant
    pre = pretrain(log, sp.C, seed, config, use_z=variant != "none")
    vae = train_vae(log, sp.C, pre.z, config, pre.net, seed) if variant == "posterior" else None
    pcvr_cf = predict_counterfactual_cvr(pre.net, vae, log, sp.N, seed, config.n_z_draws, variant)
    clicked_pcvr = factual_cvr(pre.net, vae, log, sp.C, seed, config.n_z_draws, variant)
    if method == "max":
        ls = transform_max(pcvr_cf, clicked_pcvr, sp.N)
    elif method == "ratio":
        ls = transform_ratio(pcvr_cf, sp.V.size, sp.C.size, sp.N.size, sp.N)
    else:
        raise ContractError(f"unknown transform {method!r}")
    ls.seed = seed
    return LabelRun(ls, pre.net, vae, clicked_pcvr, pre)


def label_f1(labels, truth) -> float:
    labels = np.asarray(labels).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int(np.sum(labels & truth))
    denom = int(labels.sum()) + int(truth.sum())
    return 2.0 * tp / denom if denom else 0.0
