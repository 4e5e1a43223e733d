"""Paired record/note datasets: synthetic generation, CSV/JSONL I/O, split plans."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import ndtri

from .exceptions import ConfigError, DataError, DuplicateKeyError, EmptyJoinError, InsufficientDataError

logger = logging.getLogger(__name__)

LABEL_PREFIX = "label_"
DEFAULT_TASKS = ("readmission", "critical")

_FILLER = (
    "patient was seen and evaluated the team reported no acute distress with stable course "
    "during admission and plan discussed at length with family"
).split()
_DECOY = "please call your doctor if you notice fever contrast scan performed per protocol signed".split()
_SYLLABLES = ("ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "zi", "pa", "do", "fu", "ge", "hi")
_MONTH_NAMES = ("January", "March", "May", "July", "September", "November")


@dataclass
class SynthConfig:
    """Parameters of the latent-factor generator.

    A shared latent ``z`` drives part of the numerical columns, every
    categorical column, the note topics and the labels. A nuisance latent
    ``u`` drives the remaining numerical columns only.
    """

    latent_dim: int = 6
    n_numerical: int = 16
    n_nuisance_numerical: int = 16
    nuisance_dim: int = 4
    cardinalities: tuple[int, ...] = (2, 3, 4, 2)
    words_per_topic: int = 8
    note_topic_words: int = 40
    topic_sharpness: float = 2.5
    noise: float = 1.0
    nuisance_scale: float = 1.0
    label_scale: float = 2.0
    label_bias: float = -0.5
    tasks: tuple[str, ...] = DEFAULT_TASKS
    label_weights: dict[str, list[float]] | None = None
    n_pairs: int = 5000
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be >= 1")
        if self.words_per_topic < 1:
            raise ConfigError("topic vocabulary is empty")
        if any(c < 2 for c in self.cardinalities):
            raise ConfigError("categorical cardinalities must be >= 2")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if self.label_weights is not None:
            for task in self.tasks:
                w = self.label_weights.get(task)
                if w is None or len(w) != self.latent_dim:
                    raise ConfigError(f"label_weights[{task!r}] must have latent_dim entries")


@dataclass
class PairedDataset:
    ids: list[str]
    rows: list[dict[str, Any]]
    notes: list[str]
    labels: dict[str, list[int]]
    provenance: str = "synthetic"
    latent: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.ids)
        if len(self.rows) != n or len(self.notes) != n:
            raise DataError("rows, notes and ids differ in length")
        for task, ys in self.labels.items():
            if len(ys) != n:
                raise DataError(f"labels for {task!r} differ in length")
        if len(set(self.ids)) != n:
            raise DataError("pair ids are not unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def tasks(self) -> list[str]:
        return list(self.labels)

    def subset(self, idx: Sequence[int]) -> "PairedDataset":
        idx = list(idx)
        return PairedDataset(
            [self.ids[i] for i in idx],
            [self.rows[i] for i in idx],
            [self.notes[i] for i in idx],
            {t: [ys[i] for i in idx] for t, ys in self.labels.items()},
            self.provenance,
            None if self.latent is None else self.latent[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return (self.ids, self.rows, self.notes, self.labels) == (
            other.ids, other.rows, other.notes, other.labels
        )


def _topic_words(k: int, per_topic: int) -> list[list[str]]:
    words, seen = [], set()
    for topic in range(k):
        group = []
        i = 0
        while len(group) < per_topic:
            a = _SYLLABLES[(topic * 7 + i) % len(_SYLLABLES)]
            b = _SYLLABLES[(topic * 3 + i * 5 + 1) % len(_SYLLABLES)]
            c = _SYLLABLES[(i + topic) % len(_SYLLABLES)]
            w = f"{a}{b}{c}{'x' * (i // len(_SYLLABLES))}"
            i += 1
            if w not in seen:
                seen.add(w)
                group.append(w)
        words.append(group)
    return words


def _label_weights(cfg: SynthConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if cfg.label_weights is not None:
        return {t: np.asarray(cfg.label_weights[t], dtype=np.float64) for t in cfg.tasks}
    out = {}
    for task in cfg.tasks:
        w = rng.standard_normal(cfg.latent_dim)
        out[task] = cfg.label_scale * w / np.linalg.norm(w)
    return out


def _fake_date(rng: np.random.Generator) -> str:
    y, m, d = int(rng.integers(2008, 2020)), int(rng.integers(1, 13)), int(rng.integers(1, 29))
    style = int(rng.integers(0, 3))
    if style == 0:
        return f"{y:04d}-{m:02d}-{d:02d}"
    if style == 1:
        return f"{m}/{d}/{y}"
    return f"{_MONTH_NAMES[m % len(_MONTH_NAMES)]} {d}, {y}"


def _render_note(words: list[str], decoys: list[str], rng: np.random.Generator) -> str:
    half = len(words) // 2
    hpi = " ".join(words[:half])
    course = " ".join(words[half:])
    vitals = f"BP {int(rng.integers(90, 160))}/{int(rng.integers(50, 100))}, HR {int(rng.integers(50, 120))}."
    return (
        f"Admission Date: {_fake_date(rng)}\n"
        f"History of Present Illness:\n{hpi.capitalize()}; seen on {_fake_date(rng)}. {vitals}\n"
        f"Technique:\n{' '.join(decoys[:4])} {int(rng.integers(1, 99))} mg.\n"
        f"Brief Hospital Course:\n{course} (dose {rng.uniform(0.5, 5):.1f} mg)!\n"
        f"Discharge Instructions:\n{' '.join(decoys[4:])}, {_fake_date(rng)}.\n"
    )


def generate_synthetic(cfg: SynthConfig) -> PairedDataset:
    """Draw ``cfg.n_pairs`` aligned record/note pairs with binary labels.

    Per pair: ``z ~ N(0, I)``; numericals are ``A z + noise`` (plus nuisance
    columns ``B u + noise``); categoricals bucket a noisy projection of ``z``
    at normal quantiles; the note samples topic words from
    ``softmax(sharpness * [z, -z])`` wrapped in removable dates, numbers,
    punctuation and decoy sections; each task label is
    ``Bernoulli(sigmoid(w . z + b))``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k, n = cfg.latent_dim, cfg.n_pairs
    A = rng.standard_normal((cfg.n_numerical, k)) / math.sqrt(k)
    B = rng.standard_normal((cfg.n_nuisance_numerical, cfg.nuisance_dim)) / math.sqrt(max(cfg.nuisance_dim, 1))
    P = rng.standard_normal((len(cfg.cardinalities), k))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    weights = _label_weights(cfg, rng)
    # one word group per pole of each latent factor
    topics = _topic_words(2 * k, cfg.words_per_topic)

    z = rng.standard_normal((n, k))
    u = rng.standard_normal((n, cfg.nuisance_dim))
    num = z @ A.T + cfg.noise * rng.standard_normal((n, cfg.n_numerical))
    nuis = cfg.nuisance_scale * (u @ B.T) + cfg.noise * rng.standard_normal((n, cfg.n_nuisance_numerical))
    proj = (z @ P.T + cfg.noise * rng.standard_normal((n, len(cfg.cardinalities)))) / math.sqrt(1 + cfg.noise**2)
    logits = {t: z @ w + cfg.label_bias for t, w in weights.items()}
    label_u = {t: rng.random(n) for t in cfg.tasks}

    ids, rows, notes = [], [], []
    for i in range(n):
        row: dict[str, Any] = {}
        for j in range(cfg.n_numerical):
            row[f"lab_{j:02d}"] = round(float(num[i, j]), 4)
        for j in range(cfg.n_nuisance_numerical):
            row[f"vital_{j:02d}"] = round(float(nuis[i, j]), 4)
        for j, card in enumerate(cfg.cardinalities):
            cuts = ndtri(np.arange(1, card) / card)
            bucket = int(np.searchsorted(cuts, proj[i, j]))
            row[f"cat_{j:02d}"] = bucket if card == 2 else f"v{bucket}"
        poles = np.concatenate([z[i], -z[i]])
        p = np.exp(cfg.topic_sharpness * (poles - poles.max()))
        p /= p.sum()
        topic_draw = rng.choice(2 * k, size=cfg.note_topic_words, p=p)
        words = [topics[t][int(rng.integers(cfg.words_per_topic))] for t in topic_draw]
        filler = rng.choice(len(_FILLER), size=max(4, cfg.note_topic_words // 4))
        words = words + [_FILLER[f] for f in filler]
        order = rng.permutation(len(words))
        words = [words[o] for o in order]
        decoys = [_DECOY[d] for d in rng.choice(len(_DECOY), size=8)] + list(topics[int(rng.integers(2 * k))][:2])
        ids.append(f"p{i:06d}")
        rows.append(row)
        notes.append(_render_note(words, decoys, rng))
    labels = {
        t: [int(label_u[t][i] < 1.0 / (1.0 + math.exp(-logits[t][i]))) for i in range(n)]
        for t in cfg.tasks
    }
    return PairedDataset(ids, rows, notes, labels, "synthetic", latent=z)


def _parse_cell(text: str) -> Any:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _cell_text(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_dataset(ds: PairedDataset, directory, key: str = "id") -> tuple[Path, Path]:
    """Write ``tabular.csv`` (labels as ``label_<task>`` columns) and ``notes.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = list(ds.rows[0]) if ds.rows else []
    label_cols = [LABEL_PREFIX + t for t in ds.labels]
    csv_path = directory / "tabular.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key] + columns + label_cols)
        for i, row in enumerate(ds.rows):
            labels = [ds.labels[t][i] for t in ds.labels]
            w.writerow([ds.ids[i]] + [_cell_text(row[c]) for c in columns] + [str(v) for v in labels])
    notes_path = directory / "notes.jsonl"
    with open(notes_path, "w", encoding="utf-8") as fh:
        for pid, text in zip(ds.ids, ds.notes):
            fh.write(json.dumps({"id": pid, "text": text}, ensure_ascii=False) + "\n")
    return csv_path, notes_path


@dataclass
class IngestReport:
    pairs: int
    rows_without_notes: int
    notes_without_rows: int

    @property
    def dropped(self) -> int:
        return self.rows_without_notes

    def __str__(self) -> str:
        return (f"{self.pairs} pairs, {self.rows_without_notes} dropped "
                f"({self.notes_without_rows} notes without records)")


def ingest(
    csv_path,
    notes_path,
    key: str = "id",
    label_columns: Sequence[str] | None = None,
    return_report: bool = False,
):
    """Inner-join a record CSV with a notes JSONL file on ``key``.

    Label columns default to every ``label_<task>`` column. Records without a
    note and notes without a record are dropped and counted.
    """
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty CSV") from None
        if key not in header:
            raise DataError(f"join key {key!r} not in CSV header")
        records = [dict(zip(header, cells)) for cells in reader if cells]
    if label_columns is None:
        label_columns = [c for c in header if c.startswith(LABEL_PREFIX)]
    seen: dict[str, int] = {}
    dupes = []
    for rec in records:
        seen[rec[key]] = seen.get(rec[key], 0) + 1
    dupes = sorted(k for k, c in seen.items() if c > 1)
    if dupes:
        raise DuplicateKeyError(f"duplicate join keys in CSV: {dupes[:20]}")

    notes: dict[str, str] = {}
    with open(notes_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            nid = str(obj["id"])
            if nid in notes:
                raise DuplicateKeyError(f"duplicate note id {nid!r} (line {lineno})")
            notes[nid] = obj["text"]

    ids, rows, texts = [], [], []
    labels: dict[str, list[int]] = {
        (c[len(LABEL_PREFIX):] if c.startswith(LABEL_PREFIX) else c): [] for c in label_columns
    }
    for rec in records:
        pid = rec[key]
        if pid not in notes:
            continue
        ids.append(pid)
        rows.append({c: _parse_cell(v) for c, v in rec.items() if c != key and c not in label_columns})
        texts.append(notes[pid])
        for c, task in zip(label_columns, labels):
            labels[task].append(int(float(rec[c])))
    if not ids:
        raise EmptyJoinError("no record has a matching note")
    report = IngestReport(len(ids), len(records) - len(ids), len(set(notes) - set(ids)))
    logger.info("ingest: %s", report)
    ds = PairedDataset(ids, rows, texts, labels, "ingested")
    return (ds, report) if return_report else ds


@dataclass
class SplitPlan:
    pretrain_pool: list[int]
    subsets: list[dict[str, list[int]]]
    seed: int = 0

    def validate(self) -> None:
        pool = set(self.pretrain_pool)
        used: set[int] = set()
        for s in self.subsets:
            parts = [set(s["train"]), set(s["val"]), set(s["test"])]
            if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
                raise DataError("train/val/test overlap within a subset")
            idx = parts[0] | parts[1] | parts[2]
            if idx & used or idx & pool:
                raise DataError("subsets overlap each other or the pretraining pool")
            used |= idx

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def make_split_plan(
    n: int | PairedDataset,
    n_subsets: int = 5,
    trainval_size: int = 600,
    test_size: int = 250,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> SplitPlan:
    """Carve ``n_subsets`` disjoint train/val/test subsets; the rest is the pretraining pool."""
    if not isinstance(n, int):
        n = len(n)
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    need = n_subsets * (trainval_size + test_size)
    if need + 1 > n:
        raise InsufficientDataError(
            f"need {need} pairs for subsets plus at least one for pretraining, have {n}"
        )
    perm = np.random.default_rng(seed).permutation(n).tolist()
    n_val = int(round(trainval_size * val_fraction))
    subsets = []
    for s in range(n_subsets):
        block = perm[s * (trainval_size + test_size) : (s + 1) * (trainval_size + test_size)]
        subsets.append({
            "train": sorted(block[n_val:trainval_size]),
            "val": sorted(block[:n_val]),
            "test": sorted(block[trainval_size:]),
        })
    plan = SplitPlan(sorted(perm[need:]), subsets, seed)
    plan.validate()
    return plan


def reduce_fraction(indices: Sequence[int], fraction: float, seed: int) -> list[int]:
    """Deterministic subsample keeping ``round(fraction * len)`` indices."""
    if fraction >= 1.0:
        return list(indices)
    keep = max(1, int(round(len(indices) * fraction)))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(indices), size=keep, replace=False)
    return sorted(indices[i] for i in chosen)
