"""Note-side processing: cleaning, tokenization, chunking and the chunk encoder."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .exceptions import ContractViolation, DivergenceError

PAD, UNK, CLS = 0, 1, 2
RESERVED = {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS}
CHUNK_SIZE = 256
TEXT_DIM = 768

DEFAULT_DROP_HEADERS = (
    "Technique",
    "Discharge Instructions",
    "Followup Instructions",
    "Admission Date",
    "Discharge Date",
    "Date of Birth",
    "Name",
    "Unit No",
    "Attending",
    "Facility",
)

_MONTHS = (
    r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?"
    r"|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)"
)
_DATE_PATTERNS = [
    re.compile(r"\b\d{4}-\d{1,2}-\d{1,2}\b"),
    re.compile(r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"),
    re.compile(rf"\b\d{{1,2}}-{_MONTHS}-\d{{2,4}}\b"),
    re.compile(rf"\b{_MONTHS}\.?\s+\d{{1,2}}(?:st|nd|rd|th)?,?\s+\d{{4}}\b"),
    re.compile(rf"\b\d{{1,2}}(?:st|nd|rd|th)?\s+{_MONTHS}\.?,?\s+\d{{4}}\b"),
]
_NUMBER = re.compile(r"\d+(?:[.,]\d+)*")
_PUNCT = re.compile(r"[^\w\s]|_")
_SPACE = re.compile(r"\s+")
_HEADER = re.compile(r"^[ \t]*([A-Za-z][A-Za-z /&()'-]{0,60}?)[ \t]*:", re.MULTILINE)


def normalize_text(raw: str) -> str:
    """Lowercase, drop dates, numbers and punctuation, collapse whitespace."""
    text = raw.lower()
    for pattern in _DATE_PATTERNS:
        text = pattern.sub(" ", text)
    text = _NUMBER.sub(" ", text)
    text = _PUNCT.sub(" ", text)
    return _SPACE.sub(" ", text).strip()


def _header_key(name: str) -> str:
    return " ".join(name.lower().split())


def strip_sections(raw: str, drop_headers: Iterable[str] = DEFAULT_DROP_HEADERS) -> str:
    """Remove sections whose header is in ``drop_headers``.

    A header is a line beginning with a short alphabetic label followed by a
    colon; a section runs until the next header or the end of the document.
    Matching is case-insensitive.
    """
    drop = {_header_key(h) for h in drop_headers}
    starts = [(m.start(), _header_key(m.group(1))) for m in _HEADER.finditer(raw)]
    if not any(key in drop for _, key in starts):
        return raw
    pieces = [raw[: starts[0][0]]]
    bounds = [s for s, _ in starts] + [len(raw)]
    for (start, key), end in zip(starts, bounds[1:]):
        if key not in drop:
            pieces.append(raw[start:end])
    return "".join(pieces)


def preprocess_note(raw: str, drop_headers: Iterable[str] = DEFAULT_DROP_HEADERS) -> str:
    return normalize_text(strip_sections(raw, drop_headers))


class Vocab:
    """Whitespace-token vocabulary with reserved PAD/UNK/CLS ids."""

    def __init__(self, tokens: Sequence[str], frequencies: Sequence[int] | None = None):
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("duplicate tokens in vocabulary")
        if any(t in RESERVED for t in tokens):
            raise ContractViolation("reserved tokens cannot be reassigned")
        self.tokens = list(tokens)
        self.frequencies = list(frequencies) if frequencies is not None else [0] * len(tokens)
        self._ids = {t: i + len(RESERVED) for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 2) -> "Vocab":
        counts = Counter(tok for text in texts for tok in text.split())
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept, [counts[t] for t in kept])

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.to_dict() == other.to_dict()

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(tok, UNK) for tok in text.split()]

    def to_dict(self) -> dict:
        entries = [{"token": t, "id": i, "frequency": 0} for t, i in RESERVED.items()]
        entries += [
            {"token": t, "id": self._ids[t], "frequency": f}
            for t, f in zip(self.tokens, self.frequencies)
        ]
        return {"version": 1, "entries": entries}

    @classmethod
    def from_dict(cls, payload) -> "Vocab":
        entries = sorted(
            (e for e in payload["entries"] if e["token"] not in RESERVED), key=lambda e: e["id"]
        )
        for expected, e in enumerate(entries, start=len(RESERVED)):
            if e["id"] != expected:
                raise ContractViolation(f"vocabulary ids are not contiguous at {e['token']!r}")
        return cls([e["token"] for e in entries], [e["frequency"] for e in entries])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class NoteChunks:
    chunks: list[list[int]]

    @property
    def l(self) -> int:  # noqa: E743 - chunk count
        return len(self.chunks)

    def attention_masks(self) -> list[list[int]]:
        return [[1] * len(c) for c in self.chunks]


def chunk(token_ids: Sequence[int], chunk_size: int = CHUNK_SIZE) -> NoteChunks:
    """Split ids in order into CLS-prefixed pieces of at most ``chunk_size`` ids."""
    if chunk_size < 2:
        raise ContractViolation("chunk_size must leave room for CLS and one token")
    body = chunk_size - 1
    ids = list(token_ids)
    if not ids:
        return NoteChunks([[CLS]])
    return NoteChunks([[CLS] + ids[i : i + body] for i in range(0, len(ids), body)])


def pad_chunks(chunks: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack chunks into ``(ids, valid)`` tensors, right-padded with PAD."""
    width = max(len(c) for c in chunks)
    ids = torch.full((len(chunks), width), PAD, dtype=torch.long)
    valid = torch.zeros((len(chunks), width), dtype=torch.bool)
    for i, c in enumerate(chunks):
        ids[i, : len(c)] = torch.as_tensor(c, dtype=torch.long)
        valid[i, : len(c)] = True
    return ids, valid


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ContractViolation("dim must be divisible by n_heads")
        self.n_heads, self.head_dim = n_heads, dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, valid, n_queries: int | None = None, return_weights: bool = False):
        b, L, dim = x.shape
        xq = x if n_queries is None else x[:, :n_queries]
        q = self.q(xq).view(b, -1, self.n_heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(x).view(b, L, 2, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        h = (weights @ v).transpose(1, 2).reshape(b, -1, dim)
        h = self.out(h)
        return (h, weights) if return_weights else h


class EncoderLayer(nn.Module):
    """Pre-norm transformer block: attention then a GELU feed-forward."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, x, valid, n_queries: int | None = None):
        h = x if n_queries is None else x[:, :n_queries]
        h = h + self.attn(self.norm1(x), valid, n_queries)
        return h + self.ffn(self.norm2(h))


class TextEncoder(nn.Module):
    """Chunk encoder producing one 768-d CLS vector per chunk.

    The first ``n_frozen`` layers (plus the embeddings) form a frozen prefix
    whose activations can be cached; the remaining layers are trainable.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int = TEXT_DIM,
        n_layers: int = 4,
        n_heads: int = 8,
        ffn_dim: int = 1024,
        max_len: int = CHUNK_SIZE,
        n_frozen: int = 2,
    ):
        super().__init__()
        if not 0 <= n_frozen <= n_layers:
            raise ContractViolation("n_frozen must lie in [0, n_layers]")
        self.dim, self.max_len, self.n_frozen = dim, max_len, n_frozen
        self.token_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Embedding(max_len, dim)
        self.layers = nn.ModuleList(EncoderLayer(dim, n_heads, ffn_dim) for _ in range(n_layers))
        self.final_norm = nn.LayerNorm(dim)
        self.apply(_init_weights)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"embeddings": list(self.token_emb.parameters()) + list(self.pos_emb.parameters())}
        for i, layer in enumerate(self.layers):
            groups[f"layer_{i}"] = list(layer.parameters())
        groups["final_norm"] = list(self.final_norm.parameters())
        return groups

    def frozen_groups(self) -> frozenset[str]:
        return frozenset(["embeddings"] + [f"layer_{i}" for i in range(self.n_frozen)])

    def apply_freeze(self) -> frozenset[str]:
        frozen = self.frozen_groups()
        for name, params in self.parameter_groups().items():
            for p in params:
                p.requires_grad_(name not in frozen)
        return frozen

    def prefix(self, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Hidden states after the embeddings and the frozen layers."""
        if ids.shape[1] > self.max_len:
            raise ContractViolation(f"chunk longer than {self.max_len} ids")
        pos = torch.arange(ids.shape[1])
        x = self.token_emb(ids) + self.pos_emb(pos)[None]
        for layer in self.layers[: self.n_frozen]:
            x = layer(x, valid)
        return x

    def suffix_cls(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Run the trainable layers and return the final-layer CLS vectors."""
        rest = self.layers[self.n_frozen :]
        if len(rest) == 0:
            return self.final_norm(x[:, 0])
        for layer in rest[:-1]:
            x = layer(x, valid)
        # only the CLS query is needed in the last layer
        x = rest[-1](x, valid, n_queries=1)
        return self.final_norm(x[:, 0])

    def cls_embeddings(self, chunks: Sequence[Sequence[int]]) -> torch.Tensor:
        ids, valid = pad_chunks(chunks)
        cls = self.suffix_cls(self.prefix(ids, valid), valid)
        if not torch.isfinite(cls).all():
            raise DivergenceError("non-finite CLS embedding from the text encoder")
        return cls

    def attention_weights(self, chunks: Sequence[Sequence[int]], layer: int = 0) -> torch.Tensor:
        """Attention probabilities of ``layer`` (batch x heads x L x L), for inspection."""
        ids, valid = pad_chunks(chunks)
        pos = torch.arange(ids.shape[1])
        x = self.token_emb(ids) + self.pos_emb(pos)[None]
        for block in self.layers[:layer]:
            x = block(x, valid)
        blk = self.layers[layer]
        _, w = blk.attn(blk.norm1(x), valid, return_weights=True)
        return w

    def encode_notes(self, notes: Sequence[NoteChunks]) -> torch.Tensor:
        """Mean-pooled CLS representation per note, shape (n_notes, dim)."""
        flat = [c for note in notes for c in note.chunks]
        owner = torch.tensor([i for i, note in enumerate(notes) for _ in note.chunks])
        return pool_by_owner(self.cls_embeddings(flat), owner, len(notes))


def pool_by_owner(cls: torch.Tensor, owner: torch.Tensor, n: int) -> torch.Tensor:
    """Average rows of ``cls`` grouped by ``owner`` index, in chunk order."""
    sums = cls.new_zeros(n, cls.shape[1]).index_add(0, owner, cls)
    counts = torch.bincount(owner, minlength=n).to(cls.dtype)
    return sums / counts[:, None]


def encode_note(encoder: TextEncoder, chunks: NoteChunks) -> torch.Tensor:
    """t = mean over chunks of the final-layer CLS embedding."""
    return encoder.encode_notes([chunks])[0]


def _init_weights(module):
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.normal_(module.weight, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
