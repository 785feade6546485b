"""Interaction logs: CSV I/O, the D/C/N/V partition, splitting and batching.

Logs are stored column-wise in numpy arrays; :class:`Sample` is only a row
view for callers that want one record at a time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIntegrityError, ParseError

ID_COLUMNS = ("user_id", "item_id")


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple  # ((name, cardinality), ...)
    embedding_dim: int = 4

    def __post_init__(self):
        fields = tuple((str(n), int(c)) for n, c in self.fields)
        object.__setattr__(self, "fields", fields)
        names = [n for n, _ in fields]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate field names in schema: {names}")
        if any(c < 1 for _, c in fields):
            raise ContractError("field cardinalities must be >= 1")
        if self.embedding_dim < 1:
            raise ContractError("embedding_dim must be >= 1")
        for reserved in ("click", "conversion"):
            if reserved in names:
                raise ContractError(f"{reserved!r} cannot be a feature field")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([c for _, c in self.fields], dtype=np.int64)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def total_embedding_dim(self) -> int:
        return self.n_fields * self.embedding_dim

    def csv_header(self) -> list[str]:
        extra = [n for n in self.names if n not in ID_COLUMNS]
        return [*ID_COLUMNS, *extra, "click", "conversion"]

    def to_json(self) -> dict:
        return {"fields": [{"name": n, "cardinality": c} for n, c in self.fields],
                "embedding_dim": self.embedding_dim}

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureSchema":
        try:
            fields = tuple((f["name"], f["cardinality"]) for f in doc["fields"])
            return cls(fields, int(doc.get("embedding_dim", 4)))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed schema document: {exc}") from exc

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def hash64(self) -> int:
        import hashlib

        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def default_schema() -> FeatureSchema:
    """Desk-scale schema: user and item ids plus six context fields."""
    cards = [50, 50, 20, 20, 10, 10, 5, 5]
    names = ["user_id", "item_id", "f2", "f3", "f4", "f5", "f6", "f7"]
    return FeatureSchema(tuple(zip(names, cards)), embedding_dim=4)


@dataclass(frozen=True)
class Sample:
    user_id: int
    item_id: int
    feature_ids: tuple
    click: int
    conversion: int


@dataclass(eq=False)
class InteractionLog:
    schema: FeatureSchema
    user_id: np.ndarray
    item_id: np.ndarray
    features: np.ndarray  # (n, n_fields) int64
    click: np.ndarray  # int8
    conversion: np.ndarray  # int8

    def __post_init__(self):
        n = len(self.click)
        self.user_id = np.asarray(self.user_id, dtype=np.int64).reshape(n)
        self.item_id = np.asarray(self.item_id, dtype=np.int64).reshape(n)
        self.features = np.asarray(self.features, dtype=np.int64).reshape(n, self.schema.n_fields)
        self.click = np.asarray(self.click, dtype=np.int8)
        self.conversion = np.asarray(self.conversion, dtype=np.int8)
        self.validate()

    def validate(self):
        if np.any((self.click != 0) & (self.click != 1)) or np.any(
            (self.conversion != 0) & (self.conversion != 1)
        ):
            raise DataIntegrityError("click and conversion must be binary")
        bad = np.flatnonzero((self.conversion == 1) & (self.click == 0))
        if bad.size:
            raise DataIntegrityError(f"row {int(bad[0])}: conversion=1 without a click")
        if self.features.size:
            over = (self.features < 0) | (self.features >= self.schema.cardinalities)
            if over.any():
                r, f = np.argwhere(over)[0]
                raise DataIntegrityError(
                    f"row {int(r)}: feature {self.schema.names[f]!r} id {int(self.features[r, f])} "
                    f"outside cardinality {int(self.schema.cardinalities[f])}"
                )

    def __len__(self):
        return len(self.click)

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.user_id[i]), int(self.item_id[i]), tuple(int(v) for v in self.features[i]),
                      int(self.click[i]), int(self.conversion[i]))

    def subset(self, idx) -> "InteractionLog":
        idx = np.asarray(idx, dtype=np.int64)
        return InteractionLog(self.schema, self.user_id[idx], self.item_id[idx], self.features[idx],
                              self.click[idx], self.conversion[idx])

    @classmethod
    def from_samples(cls, schema: FeatureSchema, samples) -> "InteractionLog":
        samples = list(samples)
        feats = np.array([s.feature_ids for s in samples], dtype=np.int64).reshape(len(samples), schema.n_fields)
        return cls(schema, [s.user_id for s in samples], [s.item_id for s in samples], feats,
                   [s.click for s in samples], [s.conversion for s in samples])


def _column_sources(schema: FeatureSchema):
    header = schema.csv_header()
    return header, [header.index(name) for name in schema.names]


def load_csv(path, schema: FeatureSchema) -> InteractionLog:
    """Read a log CSV with header ``user_id,item_id,<fields...>,click,conversion``."""
    header, sources = _column_sources(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1)
        if got != header:
            raise ParseError(f"header {got} does not match schema header {header}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", line=lineno)
            try:
                vals = [int(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"non-integer value ({exc})", line=lineno) from None
            if vals[-1] == 1 and vals[-2] == 0:
                raise DataIntegrityError(f"line {lineno}: conversion=1 recorded without a click")
            rows.append(vals)
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), len(header))
    try:
        return InteractionLog(schema, arr[:, 0], arr[:, 1], arr[:, sources], arr[:, -2], arr[:, -1])
    except DataIntegrityError as exc:
        raise DataIntegrityError(f"{exc} (data row numbering starts at 0 after the header)") from None


def write_csv(log: InteractionLog, path) -> None:
    header, sources = _column_sources(log.schema)
    cols = np.empty((len(log), len(header)), dtype=np.int64)
    cols[:, 0] = log.user_id
    cols[:, 1] = log.item_id
    for f, src in enumerate(sources):
        cols[:, src] = log.features[:, f]
    cols[:, -2] = log.click
    cols[:, -1] = log.conversion
    lines = [",".join(header)] + [",".join(map(str, row)) for row in cols.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


@dataclass(frozen=True)
class Spaces:
    D: np.ndarray
    C: np.ndarray
    N: np.ndarray
    V: np.ndarray


def partition_spaces(log: InteractionLog) -> Spaces:
    clicked = log.click == 1
    return Spaces(
        D=np.arange(len(log)),
        C=np.flatnonzero(clicked),
        N=np.flatnonzero(~clicked),
        V=np.flatnonzero(log.conversion == 1),
    )


def split(log: InteractionLog, val_fraction: float, seed: int):
    """Plain seeded random split into (train, val); row order is preserved within each part."""
    if not 0.0 <= val_fraction < 1.0:
        raise ContractError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n = len(log)
    n_val = int(round(val_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return log.subset(train_idx), log.subset(val_idx)


def split_indices(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def downsample_negatives(log: InteractionLog, ratio: int, seed: int) -> InteractionLog:
    """Keep every click and at most ``ratio * |C|`` non-clicks, drawn without replacement."""
    return log.subset(downsample_indices(log, ratio, seed))


def downsample_indices(log: InteractionLog, ratio: int, seed: int) -> np.ndarray:
    if ratio < 1:
        raise ContractError("ratio must be >= 1")
    sp = partition_spaces(log)
    budget = ratio * len(sp.C)
    if len(sp.N) <= budget:
        return sp.D
    keep_n = np.random.default_rng(seed).choice(sp.N, size=budget, replace=False)
    return np.sort(np.concatenate([sp.C, keep_n]))


def batches(n_or_log, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the permutation is keyed by (seed, epoch)."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = n_or_log if isinstance(n_or_log, (int, np.integer)) else len(n_or_log)
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(int(n))
    return [perm[i:i + batch_size] for i in range(0, int(n), batch_size)]
