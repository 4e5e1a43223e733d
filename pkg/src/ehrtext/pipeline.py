"""Three-stage training: masked tabular pretraining, record-note contrastive
pretraining and supervised fine-tuning, plus prediction and comparisons."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .contrastive import ProjectionHeads, Temperature, clip_loss, retrieval_recall_at_k
from .data import PairedDataset, SplitPlan, reduce_fraction
from .evaluation import Report, SeedResults, auroc
from .exceptions import (
    ConfigError,
    ContractViolation,
    DataError,
    DivergenceError,
    SchemaMismatchError,
    StageMismatchError,
    UndefinedAUCError,
)
from .numerics import AdamW
from .tabular import (
    OUTPUT_DIM,
    FeatureSchema,
    ReconstructionHead,
    TabNetEncoder,
    TabularBatch,
    apply_freeze,
    build_schema,
    encode_rows,
    masked_pretrain_step,
)
from .text import (
    DEFAULT_DROP_HEADERS,
    NoteChunks,
    TextEncoder,
    Vocab,
    chunk,
    pad_chunks,
    pool_by_owner,
    preprocess_note,
)

logger = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "pretrain-masked": dict(lr=1e-3, weight_decay=1e-4, epochs=20),
    "pretrain-cl": dict(lr=1e-4, weight_decay=1e-4, epochs=13),
    "finetune": dict(lr=5e-4, weight_decay=1e-4, epochs=15),
}


def derive_seed(seed: int, *names: Any) -> int:
    """Independent sub-stream seed for a named stage or purpose."""
    key = ":".join([str(seed)] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & (2**63 - 1)


@dataclass
class RunConfig:
    stage: str = "pretrain-cl"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 13
    tau: float = 0.1
    learnable_tau: bool = False
    seed: int = 0
    deterministic: bool = True
    data_parallel: int = 1
    mask_rate: float = 0.25
    holdout: int = 100
    # tabular encoder
    n_d: int = 64
    n_a: int = 64
    n_steps: int = 3
    gamma: float = 1.3
    n_shared: int = 2
    n_independent: int = 2
    # text encoder
    text_layers: int = 4
    text_heads: int = 8
    text_ffn: int = 1024
    text_frozen: int = 2
    vocab_min_freq: int = 2
    chunk_size: int = 256
    drop_headers: list[str] = field(default_factory=lambda: list(DEFAULT_DROP_HEADERS))
    # downstream head
    head_hidden: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.data_parallel < 1:
            raise ConfigError("data_parallel must be >= 1")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "RunConfig":
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {stage!r}")
        values = dict(STAGE_DEFAULTS[stage], stage=stage)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingAborted(DivergenceError):
    """Raised on divergence; carries the last good checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


def _seeded(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def _set_determinism(cfg: RunConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)


def _epoch_batches(n: int, batch_size: int, seed: int, drop_last: bool = False) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and len(batches) > 1 and len(batches[-1]) < batch_size:
        batches = batches[:-1]
    return batches


def _prefixed(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().clone() for k, v in module.state_dict().items()}


def _trainable(*modules: nn.Module) -> list[nn.Parameter]:
    return [p for m in modules for p in m.parameters() if p.requires_grad]


def _optimizer_tensors(opt: torch.optim.Optimizer, named: Mapping[str, nn.Parameter]) -> dict:
    by_id = {id(p): name for name, p in named.items()}
    out = {}
    for p, st in opt.state.items():
        name = by_id.get(id(p))
        if name is None or not st:
            continue
        out[f"{name}.exp_avg"] = st["exp_avg"].detach().clone()
        out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
        out[f"{name}.step"] = torch.tensor(st["step"], dtype=torch.int64)
    return out


def build_encoder(schema: FeatureSchema, cfg: RunConfig) -> TabNetEncoder:
    return TabNetEncoder(schema, n_d=cfg.n_d, n_a=cfg.n_a, n_steps=cfg.n_steps, gamma=cfg.gamma,
                         n_shared=cfg.n_shared, n_independent=cfg.n_independent)


def encoder_from_checkpoint(ckpt: Checkpoint) -> TabNetEncoder:
    if ckpt.schema is None or not ckpt.has("tabular"):
        raise StageMismatchError(f"checkpoint ({ckpt.stage}) holds no tabular encoder")
    cfg = RunConfig.from_dict(ckpt.config)
    enc = build_encoder(FeatureSchema.from_dict(ckpt.schema), cfg)
    enc.load_state_dict(ckpt.section("tabular"))
    return enc


TABULAR_ARCH = ("n_d", "n_a", "n_steps", "gamma", "n_shared", "n_independent")


def inherit_architecture(cfg: RunConfig, init: Checkpoint) -> RunConfig:
    """``cfg`` with the tabular encoder shape taken from ``init``."""
    return replace(cfg, **{k: init.config[k] for k in TABULAR_ARCH if k in init.config})


def _log_epoch(history: list, log: Callable[[dict], None] | None, record: dict) -> None:
    history.append(record)
    logger.info("%s", json.dumps(record))
    if log is not None:
        log(record)


# masked pretraining ---------------------------------------------------------

def run_masked_pretrain(
    cfg: RunConfig,
    rows: Sequence[Mapping[str, Any]],
    exclude: Sequence[str] = (),
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Fit the schema on ``rows`` and pretrain encoder + decoder by masked reconstruction."""
    if len(rows) == 0:
        raise DataError("the pretraining pool is empty")
    _set_determinism(cfg)
    schema = build_schema(rows, exclude)
    batch = encode_rows(schema, rows)
    encoder = _seeded(derive_seed(cfg.seed, "tabular-init"), lambda: build_encoder(schema, cfg))
    head = _seeded(derive_seed(cfg.seed, "recon-init"), lambda: ReconstructionHead(schema))
    apply_freeze(encoder, "pretrain-masked")
    opt = AdamW(_trainable(encoder, head), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "mask"))

    def snapshot(history):
        named = {**{f"tabular.{k}": p for k, p in encoder.named_parameters()},
                 **{f"recon.{k}": p for k, p in head.named_parameters()}}
        return Checkpoint(
            "pretrain-masked", {**_prefixed("tabular", encoder), **_prefixed("recon", head)},
            cfg.to_dict(), schema.to_dict(), None, _optimizer_tensors(opt, named),
            {"history": list(history)},
        )

    history: list[dict] = []
    last_good = snapshot(history)
    for epoch in range(cfg.epochs):
        losses, weights = [], []
        for idx in _epoch_batches(len(rows), cfg.batch_size, derive_seed(cfg.seed, "masked-epoch", epoch)):
            try:
                loss = masked_pretrain_step(encoder, head, batch.subset(idx), cfg.mask_rate, gen, opt)
            except DivergenceError as exc:
                raise TrainingAborted(f"masked pretraining diverged in epoch {epoch}: {exc}", last_good) from exc
            losses.append(loss.item())
            weights.append(len(idx))
        mean = float(np.average(losses, weights=weights))
        if not math.isfinite(mean):
            raise TrainingAborted(f"non-finite loss in epoch {epoch}", last_good)
        _log_epoch(history, log, {"stage": "pretrain-masked", "epoch": epoch, "loss": mean, "metric": None})
        last_good = snapshot(history)
    return last_good


# contrastive pretraining ----------------------------------------------------

class NoteCache:
    """Frozen-prefix activations for every chunk of a note collection.

    The embeddings and frozen layers never change during contrastive
    training, so their outputs are computed once and reused.
    """

    def __init__(self, encoder: TextEncoder, notes: Sequence[NoteChunks], batch_chunks: int = 64):
        self.owner_chunks: list[list[int]] = []
        flat: list[list[int]] = []
        for note in notes:
            self.owner_chunks.append(list(range(len(flat), len(flat) + note.l)))
            flat.extend(note.chunks)
        order = sorted(range(len(flat)), key=lambda i: len(flat[i]))
        self.hidden: list[torch.Tensor | None] = [None] * len(flat)
        with torch.no_grad():
            for s in range(0, len(order), batch_chunks):
                sel = order[s : s + batch_chunks]
                ids, valid = pad_chunks([flat[i] for i in sel])
                h = encoder.prefix(ids, valid)
                for row, i in enumerate(sel):
                    self.hidden[i] = h[row, : len(flat[i])].clone()

    def batch(self, note_idx: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        chunk_ids = [c for i in note_idx for c in self.owner_chunks[i]]
        owner = torch.tensor([j for j, i in enumerate(note_idx) for _ in self.owner_chunks[i]])
        width = max(self.hidden[c].shape[0] for c in chunk_ids)
        dim = self.hidden[chunk_ids[0]].shape[1]
        x = torch.zeros(len(chunk_ids), width, dim)
        valid = torch.zeros(len(chunk_ids), width, dtype=torch.bool)
        for r, c in enumerate(chunk_ids):
            h = self.hidden[c]
            x[r, : h.shape[0]] = h
            valid[r, : h.shape[0]] = True
        return x, valid, owner


def tokenize_notes(notes: Sequence[str], vocab: Vocab, cfg: RunConfig) -> list[NoteChunks]:
    return [chunk(vocab.encode(preprocess_note(n, cfg.drop_headers)), cfg.chunk_size) for n in notes]


def build_text_encoder(vocab_size: int, cfg: RunConfig) -> TextEncoder:
    return TextEncoder(vocab_size, n_layers=cfg.text_layers, n_heads=cfg.text_heads,
                       ffn_dim=cfg.text_ffn, max_len=cfg.chunk_size, n_frozen=cfg.text_frozen)


class ContrastiveModel(nn.Module):
    def __init__(self, tabular: TabNetEncoder, text: TextEncoder, heads: ProjectionHeads, temperature: Temperature):
        super().__init__()
        self.tabular, self.text, self.heads, self.temperature = tabular, text, heads, temperature

    def embed_pairs(self, batch: TabularBatch, cache: NoteCache, note_idx: Sequence[int]):
        x, valid, owner = cache.batch(note_idx)
        t = pool_by_owner(self.text.suffix_cls(x, valid), owner, len(note_idx))
        e = self.tabular(batch)
        return self.heads(e, t)


def run_contrastive_pretrain(
    cfg: RunConfig,
    dataset: PairedDataset,
    init: Checkpoint,
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Align the tabular encoder with a note encoder under the CLIP loss.

    The tabular encoder starts from the masked checkpoint ``init``; its
    embeddings and first shared block stay frozen, as do the text embeddings
    and the first ``text_frozen`` text layers. The last ``cfg.holdout`` pairs
    of a seeded permutation are held out for recall@1 reporting. Gradients are
    always computed over the whole batch, which is what an all-gather
    data-parallel CLIP step computes as well.
    """
    if init.stage != "pretrain-masked":
        raise StageMismatchError(f"contrastive pretraining needs a masked checkpoint, got {init.stage!r}")
    if len(dataset) == 0:
        raise DataError("the pretraining pool is empty")
    cfg = inherit_architecture(cfg, init)
    _set_determinism(cfg)
    schema = FeatureSchema.from_dict(init.schema)
    tabular = encoder_from_checkpoint(init)
    apply_freeze(tabular, "pretrain-cl")

    perm = np.random.default_rng(derive_seed(cfg.seed, "holdout")).permutation(len(dataset))
    n_hold = cfg.holdout if len(dataset) >= 2 * cfg.holdout + cfg.batch_size else 0
    train_idx = np.sort(perm[: len(perm) - n_hold])
    hold_idx = np.sort(perm[len(perm) - n_hold :])

    clean_train = [preprocess_note(dataset.notes[i], cfg.drop_headers) for i in train_idx]
    vocab = Vocab.build(clean_train, cfg.vocab_min_freq)
    text = _seeded(derive_seed(cfg.seed, "text-init"), lambda: build_text_encoder(len(vocab), cfg))
    text.apply_freeze()
    heads = _seeded(derive_seed(cfg.seed, "proj-init"), ProjectionHeads)
    temperature = Temperature(cfg.tau, cfg.learnable_tau)
    model = ContrastiveModel(tabular, text, heads, temperature)

    batch = encode_rows(schema, dataset.rows)
    cache = NoteCache(text, tokenize_notes(dataset.notes, vocab, cfg))
    opt = AdamW(_trainable(model), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def snapshot(history):
        tensors = {**_prefixed("tabular", tabular), **_prefixed("text", text),
                   **_prefixed("proj", heads), **_prefixed("temp", temperature)}
        named = dict(model.named_parameters())
        return Checkpoint("pretrain-cl", tensors, cfg.to_dict(), schema.to_dict(), vocab.to_dict(),
                          _optimizer_tensors(opt, named),
                          {"history": list(history), "init_hash": init.content_hash})

    def held_out_recall() -> float | None:
        if n_hold == 0:
            return None
        with torch.no_grad():
            z_e, z_t = model.embed_pairs(batch.subset(hold_idx), cache, hold_idx)
        return retrieval_recall_at_k(z_e, z_t, 1)

    history: list[dict] = []
    last_good = snapshot(history)
    for epoch in range(cfg.epochs):
        losses = []
        for b in _epoch_batches(len(train_idx), cfg.batch_size,
                                derive_seed(cfg.seed, "cl-epoch", epoch), drop_last=True):
            idx = train_idx[b]
            z_e, z_t = model.embed_pairs(batch.subset(idx), cache, idx)
            loss = clip_loss(z_e, z_t, temperature())
            if not torch.isfinite(loss):
                raise TrainingAborted(f"contrastive loss diverged in epoch {epoch}", last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        record = {"stage": "pretrain-cl", "epoch": epoch, "loss": float(np.mean(losses)),
                  "metric": held_out_recall()}
        _log_epoch(history, log, record)
        last_good = snapshot(history)
    return last_good


def contrastive_model_from_checkpoint(ckpt: Checkpoint) -> tuple[ContrastiveModel, Vocab, RunConfig]:
    if ckpt.stage != "pretrain-cl":
        raise StageMismatchError(f"expected a contrastive checkpoint, got {ckpt.stage!r}")
    cfg = RunConfig.from_dict(ckpt.config)
    vocab = Vocab.from_dict(ckpt.vocab)
    text = build_text_encoder(len(vocab), cfg)
    text.load_state_dict(ckpt.section("text"))
    heads = ProjectionHeads()
    heads.load_state_dict(ckpt.section("proj"))
    temperature = Temperature(cfg.tau, cfg.learnable_tau)
    temperature.load_state_dict(ckpt.section("temp"))
    return ContrastiveModel(encoder_from_checkpoint(ckpt), text, heads, temperature), vocab, cfg


def embed_dataset(ckpt: Checkpoint, dataset: PairedDataset) -> tuple[torch.Tensor, torch.Tensor]:
    """Projected (z_e, z_t) for every pair under a contrastive checkpoint."""
    model, vocab, cfg = contrastive_model_from_checkpoint(ckpt)
    schema = FeatureSchema.from_dict(ckpt.schema)
    with torch.no_grad():
        cache = NoteCache(model.text, tokenize_notes(dataset.notes, vocab, cfg))
        return model.embed_pairs(encode_rows(schema, dataset.rows), cache, list(range(len(dataset))))


# fine-tuning ------------------------------------------------------------------

class DownstreamHead(nn.Module):
    """Two linear layers, 128 -> hidden -> 1, with a ReLU between."""

    def __init__(self, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(OUTPUT_DIM, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, e):
        return self.fc2(torch.relu(self.fc1(e))).squeeze(-1)


class DownstreamModel(nn.Module):
    def __init__(self, encoder: TabNetEncoder, head: DownstreamHead):
        super().__init__()
        self.encoder, self.head = encoder, head

    def forward(self, batch: TabularBatch) -> torch.Tensor:
        """Logits; ``torch.sigmoid`` of these is the predicted probability."""
        return self.head(self.encoder(batch))


def bce(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    return -(y * torch.log(probs) + (1 - y) * torch.log1p(-probs)).mean()


def bce_with_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return nn.functional.binary_cross_entropy_with_logits(logits, y)


def data_parallel_gradients(
    params: Sequence[torch.Tensor],
    loss_fn: Callable[[np.ndarray], torch.Tensor],
    n_rows: int,
    width: int,
) -> list[torch.Tensor]:
    """Gradients of a row-mean loss computed over ``width`` shards and averaged.

    Each shard's gradient is weighted by its share of the rows, which makes
    the result equal to the full-batch gradient for any mean-over-rows loss.
    """
    if width < 1:
        raise ContractViolation("width must be >= 1")
    shards = [s for s in np.array_split(np.arange(n_rows), width) if len(s)]
    total = [torch.zeros_like(p) for p in params]
    for shard in shards:
        grads = torch.autograd.grad(loss_fn(shard), params, allow_unused=True)
        for acc, g in zip(total, grads):
            if g is not None:
                acc.add_(g, alpha=len(shard) / n_rows)
    return total


def _check_labels(y: Sequence[int], what: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.size == 0 or not np.isin(arr, (0, 1)).all():
        raise DataError(f"{what} labels must be non-empty and binary")
    return arr


def run_finetune(
    cfg: RunConfig,
    train_rows: Sequence[Mapping[str, Any]],
    train_labels: Sequence[int],
    init: Checkpoint,
    task: str = "task",
    val_rows: Sequence[Mapping[str, Any]] | None = None,
    val_labels: Sequence[int] | None = None,
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Fine-tune the pretrained tabular encoder plus a new head with BCE.

    Returns the epoch with the best validation AUC (validation loss when AUC
    is undefined; the final epoch without a validation set).
    """
    if init.stage not in ("pretrain-cl", "pretrain-masked"):
        raise StageMismatchError(f"fine-tuning needs a pretrained checkpoint, got {init.stage!r}")
    y = _check_labels(train_labels, "training")
    if len(np.unique(y)) < 2:
        raise DataError("training labels contain a single class; AUROC would be undefined")
    cfg = inherit_architecture(cfg, init)
    _set_determinism(cfg)
    encoder = encoder_from_checkpoint(init)
    schema = encoder.schema
    _check_columns(schema, train_rows)
    frozen = apply_freeze(encoder, "finetune")
    head = _seeded(derive_seed(cfg.seed, "head-init", task), lambda: DownstreamHead(cfg.head_hidden))
    model = DownstreamModel(encoder, head)
    batch = encode_rows(schema, train_rows, y)
    val = None
    if val_rows is not None:
        val = encode_rows(schema, val_rows, _check_labels(val_labels, "validation"))
    params = _trainable(model)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def snapshot(history, best):
        return Checkpoint(
            "finetune", {**_prefixed("tabular", encoder), **_prefixed("head", head)},
            cfg.to_dict(), schema.to_dict(), None, {},
            {"history": list(history), "task": task, "frozen": sorted(frozen),
             "init_stage": init.stage, "init_hash": init.content_hash, **best},
        )

    history: list[dict] = []
    best_key, best_ckpt = None, None
    for epoch in range(cfg.epochs):
        losses, weights = [], []
        for idx in _epoch_batches(len(y), cfg.batch_size, derive_seed(cfg.seed, "ft-epoch", task, epoch)):
            sub = batch.subset(idx)
            if cfg.data_parallel > 1:
                grads = data_parallel_gradients(
                    params, lambda s: bce_with_logits(model(sub.subset(s)), sub.y[s]), len(idx),
                    cfg.data_parallel)
                with torch.no_grad():
                    loss = bce_with_logits(model(sub), sub.y)
                for p, g in zip(params, grads):
                    p.grad = g
            else:
                loss = bce_with_logits(model(sub), sub.y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
            if not torch.isfinite(loss):
                raise TrainingAborted(f"fine-tuning diverged in epoch {epoch}", best_ckpt)
            opt.step()
            losses.append(loss.item())
            weights.append(len(idx))
        metric = None
        key = epoch  # no validation set: last epoch wins
        if val is not None:
            with torch.no_grad():
                logits = model(val)
            try:
                metric = auroc(torch.sigmoid(logits.double()).numpy(), val.y.numpy().astype(int))
                key = metric
            except UndefinedAUCError:
                key = -float(bce_with_logits(logits, val.y))
        _log_epoch(history, log, {"stage": "finetune", "epoch": epoch,
                                  "loss": float(np.average(losses, weights=weights)), "metric": metric})
        if best_key is None or key > best_key:
            best_key = key
            best_ckpt = snapshot(history, {"best_epoch": epoch, "best_val_auc": metric})
    best_ckpt.meta["history"] = list(history)
    return best_ckpt


def _check_columns(schema: FeatureSchema, rows: Sequence[Mapping[str, Any]]) -> None:
    missing = sorted({c for c in schema.names for r in rows if c not in r})
    if missing:
        raise SchemaMismatchError(f"rows are missing schema columns: {missing}")


def downstream_from_checkpoint(ckpt: Checkpoint) -> DownstreamModel:
    if ckpt.stage != "finetune":
        raise StageMismatchError(f"prediction needs a fine-tuned checkpoint, got {ckpt.stage!r}")
    cfg = RunConfig.from_dict(ckpt.config)
    head = DownstreamHead(cfg.head_hidden)
    head.load_state_dict(ckpt.section("head"))
    return DownstreamModel(encoder_from_checkpoint(ckpt), head)


def predict(ckpt: Checkpoint, rows: Sequence[Mapping[str, Any]]) -> np.ndarray:
    """Predicted probabilities for ``rows`` under a fine-tuned checkpoint."""
    model = downstream_from_checkpoint(ckpt)
    _check_columns(model.encoder.schema, rows)
    with torch.no_grad():
        logits = model(encode_rows(model.encoder.schema, rows))
    return torch.sigmoid(logits.double()).numpy()


def embed_rows(ckpt: Checkpoint, rows: Sequence[Mapping[str, Any]]) -> np.ndarray:
    """Tabular representations e (N x 128) from any checkpoint holding an encoder."""
    encoder = encoder_from_checkpoint(ckpt)
    _check_columns(encoder.schema, rows)
    with torch.no_grad():
        return encoder(encode_rows(encoder.schema, rows)).double().numpy()


# comparisons ------------------------------------------------------------------

def run_comparison(
    task: str,
    variants: Mapping[str, Checkpoint],
    dataset: PairedDataset,
    plan: SplitPlan,
    cfg: RunConfig | None = None,
    fractions: Sequence[float] = (1.0, 0.5),
    reference: str = "cl-init",
) -> tuple[Report, list[SeedResults]]:
    """Fine-tune every variant on every subset and fraction; report test AUCs.

    Training (and validation) indices are halved deterministically for
    fraction 0.5; test indices are never reduced.
    """
    cfg = cfg or RunConfig.for_stage("finetune")
    if task not in dataset.labels:
        raise DataError(f"dataset has no labels for task {task!r}")
    labels = dataset.labels[task]
    results = []
    for name in sorted(variants):
        for fraction in fractions:
            aucs, seeds = [], []
            for s, subset in enumerate(plan.subsets):
                seed = derive_seed(cfg.seed, "subset", s)
                train = reduce_fraction(subset["train"], fraction, derive_seed(seed, "fraction", fraction, "train"))
                val = reduce_fraction(subset["val"], fraction, derive_seed(seed, "fraction", fraction, "val"))
                run_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
                ckpt = run_finetune(
                    run_cfg, [dataset.rows[i] for i in train], [labels[i] for i in train],
                    variants[name], task, [dataset.rows[i] for i in val], [labels[i] for i in val],
                )
                test = subset["test"]
                probs = predict(ckpt, [dataset.rows[i] for i in test])
                try:
                    aucs.append(auroc(probs, [labels[i] for i in test]))
                except UndefinedAUCError as exc:
                    raise UndefinedAUCError(
                        f"{name} fraction {fraction} subset {s}: {exc}") from exc
                seeds.append(seed)
            results.append(SeedResults(task, name, aucs, fraction, seeds))
    return Report.from_results(results, reference), results
