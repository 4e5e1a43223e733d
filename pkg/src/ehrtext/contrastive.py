"""Projection heads, the symmetric CLIP objective and retrieval diagnostics."""
from __future__ import annotations

import math

import torch
from torch import nn

from .exceptions import ConfigError, ContractViolation
from .numerics import cosine_similarity_matrix, l2_normalize
from .tabular import OUTPUT_DIM
from .text import TEXT_DIM

SHARED_DIM = 128


class ProjectionHeads(nn.Module):
    """One linear map per modality into the shared space, then L2 normalization."""

    def __init__(self, ehr_dim: int = OUTPUT_DIM, text_dim: int = TEXT_DIM, shared_dim: int = SHARED_DIM):
        super().__init__()
        self.ehr = nn.Linear(ehr_dim, shared_dim)
        self.text = nn.Linear(text_dim, shared_dim)

    def forward(self, e: torch.Tensor, t: torch.Tensor):
        if e.shape[0] != t.shape[0]:
            raise ContractViolation(f"row counts differ: {e.shape[0]} vs {t.shape[0]}")
        return l2_normalize(self.ehr(e)), l2_normalize(self.text(t))


def project(heads: ProjectionHeads, e: torch.Tensor, t: torch.Tensor):
    return heads(e, t)


class Temperature(nn.Module):
    """Softmax temperature; fixed unless ``learnable`` (then stored as log tau)."""

    def __init__(self, tau: float = 0.1, learnable: bool = False):
        super().__init__()
        if not tau > 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        log_tau = torch.tensor(math.log(tau))
        if learnable:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    def forward(self) -> torch.Tensor:
        return self.log_tau.exp()


def _directional_ce(logits: torch.Tensor, dim: int) -> torch.Tensor:
    # cross-entropy with the diagonal as target, max-subtracted for stability
    m = logits.max(dim=dim, keepdim=True).values.detach()
    lse = (logits - m).exp().sum(dim=dim).log() + m.squeeze(dim)
    return (lse - logits.diagonal()).mean()


def clip_loss(z_e: torch.Tensor, z_t: torch.Tensor, tau=0.1) -> torch.Tensor:
    """Sum of the EHR-to-text and text-to-EHR cross-entropies.

    ``tau`` may be a float or a scalar tensor (learnable temperature).
    """
    if z_e.shape != z_t.shape or z_e.dim() != 2 or z_e.shape[0] < 1:
        raise ContractViolation(f"bad embedding shapes {tuple(z_e.shape)}, {tuple(z_t.shape)}")
    if isinstance(tau, torch.Tensor):
        if not bool(tau > 0):
            raise ConfigError("temperature must be positive")
    elif not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = cosine_similarity_matrix(z_e, z_t) / tau
    return _directional_ce(logits, dim=1) + _directional_ce(logits, dim=0)


def clip_loss_from_similarity(s: torch.Tensor, tau=0.1) -> torch.Tensor:
    """CLIP loss for a precomputed similarity matrix (rows: EHR, columns: text)."""
    if s.dim() != 2 or s.shape[0] != s.shape[1]:
        raise ContractViolation("similarity matrix must be square")
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = s / tau
    return _directional_ce(logits, dim=1) + _directional_ce(logits, dim=0)


def retrieval_recall_at_k(z_e: torch.Tensor, z_t: torch.Tensor, k: int = 1) -> float:
    """Fraction of rows whose true partner ranks in the top ``k``.

    Ties are resolved toward the lower column index.
    """
    n = z_e.shape[0]
    if not 1 <= k <= n:
        raise ContractViolation(f"need 1 <= k <= N, got k={k}, N={n}")
    with torch.no_grad():
        s = cosine_similarity_matrix(z_e, z_t)
        diag = s.diagonal()[:, None]
        cols = torch.arange(n)
        ahead = (s > diag) | ((s == diag) & (cols[None, :] < cols[:, None]))
        rank = ahead.sum(dim=1)
    return float((rank < k).double().mean())
