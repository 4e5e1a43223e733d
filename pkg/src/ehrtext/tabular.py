"""Structured-record side: feature schema, ordinal encoding and the TabNet-style encoder."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import (
    ContractViolation,
    DivergenceError,
    EmptySchemaError,
    InvalidInputError,
    MaskingError,
    SchemaMismatchError,
)
from .numerics import sparsemax

logger = logging.getLogger(__name__)

CATEGORICAL = "categorical"
NUMERICAL = "numerical"
UNKNOWN_INDEX = 0
OUTPUT_DIM = 128

STAGES = ("pretrain-masked", "pretrain-cl", "finetune")


def is_missing(value: Any) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return isinstance(value, str) and value.strip() == ""


def as_number(value: Any) -> float | None:
    """Parse ``value`` as a float, or return None if it is not numeric."""
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value.strip())
        except ValueError:
            return None
    return None


def category_key(value: Any) -> str:
    """Canonical string form of a categorical cell (``1.0`` and ``"1"`` agree)."""
    num = as_number(value)
    if num is not None and math.isfinite(num):
        return str(int(num)) if num.is_integer() else repr(num)
    return str(value)


@dataclass
class Column:
    name: str
    role: str
    vocabulary: list[str] = field(default_factory=list)
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.role == CATEGORICAL:
            if not self.vocabulary:
                raise InvalidInputError(f"column {self.name!r}: empty vocabulary")
            if len(set(self.vocabulary)) != len(self.vocabulary):
                raise InvalidInputError(f"column {self.name!r}: duplicate vocabulary entries")
        elif self.role == NUMERICAL:
            if not self.std > 0:
                raise InvalidInputError(f"column {self.name!r}: std must be positive")
        else:
            raise InvalidInputError(f"column {self.name!r}: unknown role {self.role!r}")

    @property
    def cardinality(self) -> int:
        """Embedding-table size, including the reserved unknown slot."""
        return len(self.vocabulary) + 1


@dataclass
class FeatureSchema:
    columns: list[Column]

    def __post_init__(self):
        if not self.columns:
            raise EmptySchemaError("schema has no columns")
        self._cat_lookup = [
            {v: i + 1 for i, v in enumerate(c.vocabulary)} for c in self.categorical
        ]

    @property
    def d(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def categorical(self) -> list[Column]:
        return [c for c in self.columns if c.role == CATEGORICAL]

    @property
    def numerical(self) -> list[Column]:
        return [c for c in self.columns if c.role == NUMERICAL]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "columns": [
                {"name": c.name, "role": c.role, "vocabulary": c.vocabulary,
                 "mean": c.mean, "std": c.std}
                for c in self.columns
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FeatureSchema":
        return cls([Column(**c) for c in payload["columns"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.to_dict() == other.to_dict()


def build_schema(
    rows: Sequence[Mapping[str, Any]], exclude: Iterable[str] = ()
) -> FeatureSchema:
    """Infer column roles and statistics from raw rows.

    Columns holding any non-numeric string, or fewer than three distinct
    numeric values, become categorical; everything else is numerical. Columns
    with a missing cell and constant columns are dropped.
    """
    if not rows:
        raise InvalidInputError("cannot build a schema from an empty table")
    names: list[str] = []
    for row in rows:
        for name in row:
            if name not in names:
                names.append(name)
    exclude = list(exclude)
    for name in exclude:
        if name not in names:
            logger.warning("excluded column %r not present in table", name)
    columns = []
    for name in names:
        if name in exclude:
            continue
        values = [row.get(name) for row in rows]
        if any(is_missing(v) for v in values):
            logger.info("dropping column %r: contains missing values", name)
            continue
        nums = [as_number(v) for v in values]
        numeric = all(n is not None and math.isfinite(n) for n in nums)
        distinct = set(nums) if numeric else {category_key(v) for v in values}
        if len(distinct) < 2:
            logger.info("dropping column %r: constant", name)
            continue
        if numeric and len(distinct) >= 3:
            arr = np.asarray(nums, dtype=np.float64)
            columns.append(Column(name, NUMERICAL, mean=float(arr.mean()), std=float(arr.std())))
        else:
            vocab = sorted({category_key(v) for v in values})
            columns.append(Column(name, CATEGORICAL, vocabulary=vocab))
    if not columns:
        raise EmptySchemaError("every column was dropped")
    return FeatureSchema(columns)


@dataclass
class TabularBatch:
    cat: torch.Tensor
    num: torch.Tensor
    y: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.cat.shape[0]

    @property
    def n_rows(self) -> int:
        return self.cat.shape[0]

    def subset(self, idx) -> "TabularBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TabularBatch(self.cat[idx], self.num[idx], None if self.y is None else self.y[idx])

    def to(self, dtype: torch.dtype) -> "TabularBatch":
        return TabularBatch(self.cat, self.num.to(dtype), None if self.y is None else self.y.to(dtype))


def encode_rows(
    schema: FeatureSchema,
    rows: Sequence[Mapping[str, Any]],
    labels: Sequence[int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> TabularBatch:
    """Ordinal-encode categoricals (0 = unknown) and standardize numericals."""
    missing = [c.name for c in schema.columns if any(c.name not in r for r in rows)]
    if missing:
        raise SchemaMismatchError(f"rows lack schema columns: {missing}")
    n = len(rows)
    cats = schema.categorical
    cat = np.zeros((n, len(cats)), dtype=np.int64)
    for j, (col, lookup) in enumerate(zip(cats, schema._cat_lookup)):
        for i, row in enumerate(rows):
            cat[i, j] = lookup.get(category_key(row[col.name]), UNKNOWN_INDEX)
    nums = schema.numerical
    num = np.zeros((n, len(nums)), dtype=np.float64)
    for j, col in enumerate(nums):
        for i, row in enumerate(rows):
            value = as_number(row[col.name])
            if value is None or not math.isfinite(value):
                raise InvalidInputError(
                    f"column {col.name!r} row {i}: expected a number, got {row[col.name]!r}"
                )
            num[i, j] = (value - col.mean) / col.std
    y = None
    if labels is not None:
        if len(labels) != n:
            raise ContractViolation("labels and rows differ in length")
        y = torch.as_tensor(np.asarray(labels, dtype=np.float64), dtype=dtype)
    return TabularBatch(torch.from_numpy(cat), torch.from_numpy(num).to(dtype), y)


def embedding_dim(vocab_size: int) -> int:
    return min(8, math.ceil(vocab_size / 2))


class GLUBlock(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 2 * out_dim, bias=False)
        self.norm = nn.LayerNorm(2 * out_dim)

    def forward(self, x):
        return nn.functional.glu(self.norm(self.fc(x)), dim=-1)


class FeatureTransformer(nn.Module):
    """Shared GLU blocks followed by step-specific ones, with scaled residuals."""

    def __init__(self, shared: nn.ModuleList, in_dim: int, out_dim: int, n_independent: int):
        super().__init__()
        self.shared = shared
        first_in = out_dim if len(shared) else in_dim
        self.specific = nn.ModuleList(
            GLUBlock(first_in if i == 0 else out_dim, out_dim) for i in range(n_independent)
        )

    def forward(self, x):
        scale = math.sqrt(0.5)
        first = True
        for block in list(self.shared) + list(self.specific):
            if first:
                x = block(x)
                first = False
            else:
                x = (x + block(x)) * scale
        return x


class AttentiveTransformer(nn.Module):
    def __init__(self, n_a: int, n_features: int, init_scale: float = 1.0):
        super().__init__()
        self.fc = nn.Linear(n_a, n_features, bias=False)
        self.norm = nn.LayerNorm(n_features)
        # a small logit scale starts sparsemax near-uniform over all features
        nn.init.constant_(self.norm.weight, init_scale)

    def forward(self, a, prior):
        return sparsemax(self.norm(self.fc(a)) * prior)


class TabNetEncoder(nn.Module):
    """Sequential attentive encoder mapping a :class:`TabularBatch` to R^128.

    Each decision step selects features with a sparsemax mask over the
    ``d`` schema columns (embedding dimensions of one column share its mask
    weight), scaled by a running prior ``prior * (gamma - mask)``.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        n_d: int = 64,
        n_a: int = 64,
        n_steps: int = 3,
        gamma: float = 1.3,
        n_shared: int = 2,
        n_independent: int = 2,
        output_dim: int = OUTPUT_DIM,
        mask_scale: float | None = None,
    ):
        super().__init__()
        if output_dim != OUTPUT_DIM:
            raise ContractViolation("the encoder output dimension is fixed at 128")
        if n_shared < 1:
            raise ContractViolation("at least one shared block is required")
        self.schema = schema
        self.n_d, self.n_a, self.n_steps, self.gamma = n_d, n_a, n_steps, gamma
        self.embeddings = nn.ModuleList(
            nn.Embedding(c.cardinality, embedding_dim(len(c.vocabulary)))
            for c in schema.categorical
        )
        # post-embedding layout, in schema column order
        group, slots = [], []
        cat_i = num_i = 0
        for f, col in enumerate(schema.columns):
            if col.role == CATEGORICAL:
                width = self.embeddings[cat_i].embedding_dim
                slots.append(("cat", cat_i))
                cat_i += 1
            else:
                width = 1
                slots.append(("num", num_i))
                num_i += 1
            group.extend([f] * width)
        self._slots = slots
        self.register_buffer("group", torch.tensor(group, dtype=torch.long), persistent=False)
        self.input_dim = len(group)
        width = n_d + n_a
        self.shared = nn.ModuleList(
            GLUBlock(self.input_dim if i == 0 else width, width) for i in range(n_shared)
        )
        self.initial_splitter = FeatureTransformer(self.shared, self.input_dim, width, n_independent)
        self.feat_transformers = nn.ModuleList(
            FeatureTransformer(self.shared, self.input_dim, width, n_independent)
            for _ in range(n_steps)
        )
        self.att_transformers = nn.ModuleList(
            AttentiveTransformer(n_a, schema.d, 1.0 / schema.d if mask_scale is None else mask_scale)
            for _ in range(n_steps)
        )
        self.final = nn.Linear(n_d, output_dim)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named parameter groups used by the freeze plan."""
        groups = {
            "embeddings": list(self.embeddings.parameters()),
            "initial_split": list(self.shared[0].parameters()),
        }
        taken = {id(p) for ps in groups.values() for p in ps}
        groups["rest"] = [p for p in self.parameters() if id(p) not in taken]
        return groups

    def embed(self, batch: TabularBatch) -> torch.Tensor:
        dtype = batch.num.dtype
        parts = []
        for kind, j in self._slots:
            if kind == "cat":
                parts.append(self.embeddings[j](batch.cat[:, j]).to(dtype))
            else:
                parts.append(batch.num[:, j : j + 1])
        return torch.cat(parts, dim=1)

    def forward(
        self,
        batch: TabularBatch,
        cell_mask: torch.Tensor | None = None,
        return_masks: bool = False,
    ):
        """Encode ``batch``; ``cell_mask`` (N x d, True = hidden) blanks inputs.

        Hidden cells are zeroed and removed from the initial attention prior.
        """
        x = self.embed(batch)
        n = x.shape[0]
        prior = torch.ones(n, self.schema.d, dtype=x.dtype)
        if cell_mask is not None:
            keep = (~cell_mask).to(x.dtype)
            x = x * keep[:, self.group]
            prior = prior * keep
        a = self.initial_splitter(x)[:, self.n_d :]
        out = torch.zeros(n, self.n_d, dtype=x.dtype)
        masks = []
        for step in range(self.n_steps):
            mask = self.att_transformers[step](a, prior)
            if not torch.isfinite(mask).all():
                raise DivergenceError(f"non-finite attention mask at decision step {step}")
            masks.append(mask)
            prior = prior * (self.gamma - mask)
            h = self.feat_transformers[step](x * mask[:, self.group])
            out = out + torch.relu(h[:, : self.n_d])
            a = h[:, self.n_d :]
        e = self.final(out)
        if not torch.isfinite(e).all():
            raise DivergenceError("non-finite encoder output after the final decision step")
        return (e, masks) if return_masks else e


class ReconstructionHead(nn.Module):
    """Decoder predicting every numerical value and categorical index from e."""

    def __init__(self, schema: FeatureSchema, hidden: int = OUTPUT_DIM):
        super().__init__()
        self.n_num = len(schema.numerical)
        self.cat_sizes = [c.cardinality for c in schema.categorical]
        self.net = nn.Sequential(
            nn.Linear(OUTPUT_DIM, hidden), nn.ReLU(),
            nn.Linear(hidden, self.n_num + sum(self.cat_sizes)),
        )

    def forward(self, e):
        out = self.net(e)
        num = out[:, : self.n_num]
        logits = list(torch.split(out[:, self.n_num :], self.cat_sizes, dim=1)) if self.cat_sizes else []
        return num, logits


def sample_cell_mask(n: int, d: int, rate: float, generator: torch.Generator) -> torch.Tensor:
    return torch.rand(n, d, generator=generator) < rate


def reconstruction_loss(
    encoder: TabNetEncoder,
    head: ReconstructionHead,
    batch: TabularBatch,
    cell_mask: torch.Tensor,
    categorical_weight: float = 1.0,
) -> torch.Tensor:
    """MSE over hidden numericals plus cross-entropy over hidden categoricals."""
    schema = encoder.schema
    e = encoder(batch, cell_mask=cell_mask)
    pred_num, logits = head(e)
    roles = [c.role for c in schema.columns]
    num_cols = [f for f, r in enumerate(roles) if r == NUMERICAL]
    cat_cols = [f for f, r in enumerate(roles) if r == CATEGORICAL]
    loss = e.new_zeros(())
    if num_cols:
        m = cell_mask[:, num_cols]
        if m.any():
            loss = loss + ((pred_num - batch.num)[m] ** 2).mean()
    if cat_cols:
        m = cell_mask[:, cat_cols]
        count = int(m.sum())
        if count:
            total = e.new_zeros(())
            for j, lg in enumerate(logits):
                rows = m[:, j]
                if rows.any():
                    total = total + nn.functional.cross_entropy(
                        lg[rows], batch.cat[rows, j], reduction="sum"
                    )
            loss = loss + categorical_weight * total / count
    return loss


def masked_pretrain_step(
    encoder: TabNetEncoder,
    head: ReconstructionHead,
    batch: TabularBatch,
    mask_rate: float = 0.25,
    generator: torch.Generator | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> torch.Tensor:
    """One masked-feature reconstruction step.

    Draws a Bernoulli(``mask_rate``) mask per cell; if no cell is hidden the
    mask is redrawn once and then :class:`MaskingError` is raised. When an
    optimizer is given the loss is backpropagated and a step taken.
    """
    if not 0 < mask_rate < 1:
        raise InvalidInputError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    n, d = batch.n_rows, encoder.schema.d
    cell_mask = sample_cell_mask(n, d, mask_rate, generator)
    if not cell_mask.any():
        cell_mask = sample_cell_mask(n, d, mask_rate, generator)
        if not cell_mask.any():
            raise MaskingError("no cell was masked after resampling; raise mask_rate or batch size")
    loss = reconstruction_loss(encoder, head, batch, cell_mask)
    if not torch.isfinite(loss):
        raise DivergenceError("reconstruction loss is not finite")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        loss = loss.detach()
    return loss


def freeze_plan(stage: str) -> frozenset[str]:
    """Parameter groups held fixed during ``stage``."""
    if stage not in STAGES:
        raise ContractViolation(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage == "pretrain-masked":
        return frozenset()
    return frozenset({"embeddings", "initial_split"})


def apply_freeze(encoder: TabNetEncoder, stage: str) -> frozenset[str]:
    frozen = freeze_plan(stage)
    for name, params in encoder.parameter_groups().items():
        for p in params:
            p.requires_grad_(name not in frozen)
    return frozen
