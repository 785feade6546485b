"""Shared-embedding CTR/CVR multi-task model, its trainer and checkpoint format."""

from __future__ import annotations

import copy
import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FeatureSchema, InteractionLog, atomic_write_bytes, batches
from .errors import ContractError, ShapeError
from .numeric import Mlp, adam_init, adam_step, init_mlp, mlp_backward, mlp_forward
from .objectives import ObjectiveKind, ObjectiveSpec, ctcvr_loss, evaluate_objective

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ESCM"
CHECKPOINT_VERSION = 1
PREDICT_CHUNK = 65_536

# purpose tags for seed derivation
SEED_INIT, SEED_SHUFFLE, SEED_DROPOUT = 11, 12, 13


def embed_rows(tables, features) -> np.ndarray:
    """Concatenate per-field embedding rows: (n, n_fields * dim)."""
    features = np.asarray(features, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != len(tables):
        raise ShapeError(f"expected (n, {len(tables)}) feature ids, got {features.shape}")
    for f, t in enumerate(tables):
        col = features[:, f]
        if col.size and (col.min() < 0 or col.max() >= t.shape[0]):
            raise ContractError(f"feature id out of range for field {f} (cardinality {t.shape[0]})")
    if not tables:
        return np.zeros((len(features), 0))
    return np.concatenate([t[features[:, f]] for f, t in enumerate(tables)], axis=1)


def embedding_grads(tables, features, d_rows) -> list[np.ndarray]:
    dim = tables[0].shape[1] if tables else 0
    grads = []
    for f, t in enumerate(tables):
        g = np.zeros_like(t)
        np.add.at(g, features[:, f], d_rows[:, f * dim:(f + 1) * dim])
        grads.append(g)
    return grads


def init_embeddings(schema: FeatureSchema, rng, std: float) -> list[np.ndarray]:
    return [rng.normal(0.0, std, size=(card, schema.embedding_dim)) for card in schema.cardinalities]


@dataclass(eq=False)
class EscimModel:
    schema: FeatureSchema
    embeddings: list[np.ndarray]
    ctr_tower: Mlp
    cvr_tower: Mlp
    imputation_tower: Mlp | None = None

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"emb.{name}": t for name, t in zip(self.schema.names, self.embeddings)}
        out.update(self.ctr_tower.parameters("ctr."))
        out.update(self.cvr_tower.parameters("cvr."))
        if self.imputation_tower is not None:
            out.update(self.imputation_tower.parameters("imp."))
        return out

    def assign(self, params) -> None:
        for f, name in enumerate(self.schema.names):
            t = params[f"emb.{name}"]
            if t.shape != self.embeddings[f].shape:
                raise ShapeError(f"embedding {name}: {t.shape} != {self.embeddings[f].shape}")
            self.embeddings[f] = t
        self.ctr_tower.assign(params, "ctr.")
        self.cvr_tower.assign(params, "cvr.")
        if self.imputation_tower is not None:
            self.imputation_tower.assign(params, "imp.")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "EscimModel":
        return copy.deepcopy(self)


def init_model(schema: FeatureSchema, tower_dims=(64, 32), with_imputation: bool = False, seed: int = 0,
               embedding_std: float = 0.1) -> EscimModel:
    rng = np.random.default_rng([seed, SEED_INIT])
    width = schema.total_embedding_dim
    dims = [width, *tower_dims, 1]
    emb = init_embeddings(schema, rng, embedding_std)
    ctr = init_mlp(dims, "sigmoid", rng)
    cvr = init_mlp(dims, "sigmoid", rng)
    imp = init_mlp(dims, "softplus", rng) if with_imputation else None
    return EscimModel(schema, emb, ctr, cvr, imp)


def embed(model: EscimModel, features) -> np.ndarray:
    return embed_rows(model.embeddings, features)


@dataclass
class BatchPrediction:
    p_ctr: np.ndarray
    p_cvr: np.ndarray
    p_ctcvr: np.ndarray
    imputed: np.ndarray | None = None


def _features(batch):
    return batch.features if isinstance(batch, InteractionLog) else np.asarray(batch, dtype=np.int64)


def predict(model: EscimModel, batch) -> BatchPrediction:
    """Eval-mode predictions for a log or an (n, n_fields) id matrix."""
    feats = _features(batch)
    parts = []
    for start in range(0, max(len(feats), 1), PREDICT_CHUNK):
        x = embed(model, feats[start:start + PREDICT_CHUNK])
        p_ctr = mlp_forward(model.ctr_tower, x)[0][:, 0]
        p_cvr = mlp_forward(model.cvr_tower, x)[0][:, 0]
        imp = mlp_forward(model.imputation_tower, x)[0][:, 0] if model.imputation_tower is not None else None
        parts.append((p_ctr, p_cvr, imp))
    p_ctr = np.concatenate([p[0] for p in parts])
    p_cvr = np.concatenate([p[1] for p in parts])
    imp = np.concatenate([p[2] for p in parts]) if model.imputation_tower is not None else None
    return BatchPrediction(p_ctr, p_cvr, p_ctr * p_cvr, imp)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    l2: float = 1e-4
    dropout: float = 0.1
    batch_size: int = 512
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0


@dataclass
class TrainResult:
    model: EscimModel
    trace: list = field(default_factory=list)
    best_epoch: int = -1


def _check_inputs(model, log, spec, cf_labels, oracle_v):
    if spec.kind == ObjectiveKind.ESCIM and spec.alpha_cf > 0 and cf_labels is None:
        raise ContractError("objective ESCIM requires counterfactual labels")
    if spec.kind == ObjectiveKind.ESCM2_DR and model.imputation_tower is None:
        raise ContractError("objective ESCM2-DR requires a model with an imputation tower")
    if spec.kind == ObjectiveKind.IDEAL and oracle_v is None:
        raise ContractError("objective IDEAL is only available with oracle potential outcomes")
    if cf_labels is not None and len(cf_labels) != len(log):
        raise ContractError("cf_labels must be aligned with the training log (-1 on clicked rows)")


def _evaluate_set(model, log_, spec, cf_labels, oracle_v):
    if spec.kind == ObjectiveKind.ESCIM and cf_labels is None:
        # held-out rows carry no counterfactual labels; score the factual part only
        spec = replace(spec, alpha_cf=0.0)
    pred = predict(model, log_)
    c = log_.click.astype(np.float64)
    v = log_.conversion.astype(np.float64)
    out = evaluate_objective(spec, pred.p_ctr, pred.p_cvr, c, v, cf_labels=cf_labels, imputed=pred.imputed,
                             oracle_v=oracle_v, on_empty="skip")
    comps = dict(out.components)
    comps.setdefault("ctcvr", ctcvr_loss(pred.p_ctr, pred.p_cvr, c, v))
    return out.total, comps


def batch_gradients(model: EscimModel, features, c, v, objective: ObjectiveSpec, cf_labels=None, oracle_v=None,
                    dropout: float = 0.0, rng=None):
    """Objective value and gradients for every model parameter on one batch.

    Dropout is active when ``dropout > 0``; all towers share ``rng`` so a
    fixed seed gives a fixed set of masks.
    """
    train_mode = dropout > 0
    x = embed(model, features)
    p_ctr, ctr_cache = mlp_forward(model.ctr_tower, x, dropout, train_mode, rng)
    p_cvr, cvr_cache = mlp_forward(model.cvr_tower, x, dropout, train_mode, rng)
    imputed = imp_cache = None
    if model.imputation_tower is not None:
        imputed, imp_cache = mlp_forward(model.imputation_tower, x, dropout, train_mode, rng)
        imputed = imputed[:, 0]
    out = evaluate_objective(objective, p_ctr[:, 0], p_cvr[:, 0], c, v, cf_labels=cf_labels, imputed=imputed,
                             oracle_v=oracle_v, on_empty="skip")
    g_ctr = mlp_backward(model.ctr_tower, ctr_cache, out.d_ctr[:, None], wrt="logits")
    g_cvr = mlp_backward(model.cvr_tower, cvr_cache, out.d_cvr[:, None], wrt="logits")
    grads = {**g_ctr.as_dict("ctr."), **g_cvr.as_dict("cvr.")}
    dx = g_ctr.input + g_cvr.input
    if imp_cache is not None:
        d_imp = out.d_imputed if out.d_imputed is not None else np.zeros(len(c))
        g_imp = mlp_backward(model.imputation_tower, imp_cache, d_imp[:, None])
        grads.update(g_imp.as_dict("imp."))
        dx = dx + g_imp.input
    for name, g in zip(model.schema.names, embedding_grads(model.embeddings, np.asarray(features), dx)):
        grads[f"emb.{name}"] = g
    return out, grads


def train(model: EscimModel, log_: InteractionLog, objective: ObjectiveSpec, cf_labels=None,
          config: TrainConfig = TrainConfig(), val_log: InteractionLog | None = None, val_cf_labels=None,
          oracle_v=None, val_oracle_v=None) -> TrainResult:
    """Train in place with Adam; returns the best-validation snapshot.

    ``cf_labels`` is aligned with ``log_`` and holds -1 on clicked rows.
    Early stopping watches the validation CTCVR loss.
    """
    _check_inputs(model, log_, objective, cf_labels, oracle_v)
    params = model.parameters()
    state = adam_init(params, lr=config.lr, weight_decay=config.weight_decay)
    weight_keys = [k for k in params if k.split(".", 1)[0] in ("ctr", "cvr", "imp") and k.split(".", 1)[1][0] == "w"]
    c_all = log_.click.astype(np.float64)
    v_all = log_.conversion.astype(np.float64)
    feats_all = log_.features
    cf_all = None if cf_labels is None else np.asarray(cf_labels)
    ov_all = None if oracle_v is None else np.asarray(oracle_v, dtype=np.float64)

    best_val, best_params, best_epoch, bad = np.inf, None, -1, 0
    trace = []
    for epoch in range(config.max_epochs):
        totals, comp_sums, comp_counts, skipped = [], {}, {}, 0
        for step, idx in enumerate(batches(len(log_), config.batch_size, config.seed * 1000 + SEED_SHUFFLE, epoch)):
            feats = feats_all[idx]
            rng = np.random.default_rng([config.seed, SEED_DROPOUT, epoch, step])
            out, grads = batch_gradients(
                model, feats, c_all[idx], v_all[idx], objective,
                cf_labels=None if cf_all is None else cf_all[idx],
                oracle_v=None if ov_all is None else ov_all[idx], dropout=config.dropout, rng=rng,
            )
            skipped += len(out.skipped)
            totals.append(out.total)
            for k, val in out.components.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + val
                comp_counts[k] = comp_counts.get(k, 0) + 1

            for k in weight_keys:
                grads[k] = grads[k] + config.l2 * params[k]
            params, state = adam_step(state, params, grads)
            model.assign(params)

        entry = {
            "epoch": epoch,
            "train_total": float(np.mean(totals)),
            "train_components": {k: comp_sums[k] / comp_counts[k] for k in sorted(comp_sums)},
            "skipped_terms": skipped,
        }
        if not all(np.isfinite(v) for v in [entry["train_total"], *entry["train_components"].values()]):
            from .errors import NumericError

            raise NumericError(f"non-finite training loss at epoch {epoch}")
        if val_log is not None and len(val_log):
            val_total, val_comps = _evaluate_set(model, val_log, objective, val_cf_labels, val_oracle_v)
            entry["val_total"] = val_total
            entry["val_components"] = {k: val_comps[k] for k in sorted(val_comps)}
            score = val_comps["ctcvr"]
        else:
            score = -epoch  # without validation the last epoch wins
        trace.append(entry)
        log.debug("epoch %d %s", epoch, entry)
        if score < best_val:
            best_val, best_params, best_epoch, bad = score, dict(params), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    if best_params is not None:
        model.assign(best_params)
    return TrainResult(model, trace, best_epoch)


# -- checkpoints -------------------------------------------------------------------------------


def checkpoint_bytes(model: EscimModel) -> bytes:
    """Binary layout: magic, u32 version, u64 schema hash, then per tensor
    u32 name length, utf-8 name, u32 ndim, u64 dims, float64 LE data."""
    out = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, model.schema.hash64())]
    for name, arr in model.parameters().items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model: EscimModel, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def read_tensors(blob: bytes, schema: FeatureSchema) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError("not an ESCM checkpoint (bad magic)")
    version, schema_hash = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    if schema_hash != schema.hash64():
        raise ContractError("checkpoint was written for a different feature schema")
    pos = 16
    tensors = {}
    try:
        while pos < len(blob):
            pos = _read_tensor(blob, pos, tensors)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ContractError(f"truncated or corrupt checkpoint at byte {pos}: {exc}") from None
    return tensors


def _read_tensor(blob, pos, tensors):
    """Parse one tensor record starting at ``pos``; returns the next offset."""
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    name = blob[pos:pos + n].decode("utf-8")
    pos += n
    (ndim,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
    pos += 8 * count
    return pos


def load_checkpoint(path, schema: FeatureSchema) -> EscimModel:
    with open(path, "rb") as fh:
        tensors = read_tensors(fh.read(), schema)

    def tower(prefix, output):
        layers = sorted(int(k[len(prefix) + 1:]) for k in tensors if k.startswith(prefix + "w"))
        if not layers:
            return None
        return Mlp([tensors[f"{prefix}w{l}"] for l in layers], [tensors[f"{prefix}b{l}"] for l in layers], output)

    missing = [name for name in schema.names if f"emb.{name}" not in tensors]
    if missing or "ctr.w0" not in tensors or "cvr.w0" not in tensors:
        raise ContractError(f"checkpoint lacks required tensors (embeddings {missing} or a tower)")
    emb = [tensors[f"emb.{name}"] for name in schema.names]
    return EscimModel(schema, emb, tower("ctr.", "sigmoid"), tower("cvr.", "sigmoid"), tower("imp.", "softplus"))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
