"""Differentiable primitives, AdamW and a finite-difference gradient checker.

Tensors and reverse-mode autodiff come from torch; the operations below are
the ones the encoders and losses are built from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch

from .exceptions import (
    ContractViolation,
    DegenerateVectorError,
    DivergenceError,
    GradcheckError,
    InvalidInputError,
)

__all__ = [
    "sparsemax",
    "cosine_similarity_matrix",
    "l2_normalize",
    "AdamWState",
    "adamw_step",
    "AdamW",
    "gradcheck",
    "check_finite",
]


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise DivergenceError(f"non-finite values in {where}")
    return t


class _Sparsemax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v):
        z_sorted, _ = torch.sort(v, dim=-1, descending=True)
        n = v.shape[-1]
        ks = torch.arange(1, n + 1, dtype=v.dtype, device=v.device)
        cumsum = z_sorted.cumsum(dim=-1)
        support = (1 + ks * z_sorted) > cumsum
        k = support.sum(dim=-1, keepdim=True)
        tau = (cumsum.gather(-1, k - 1) - 1) / k.to(v.dtype)
        out = torch.clamp(v - tau, min=0)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        (out,) = ctx.saved_tensors
        active = (out > 0).to(grad_out.dtype)
        n_active = active.sum(dim=-1, keepdim=True)
        v_hat = (grad_out * active).sum(dim=-1, keepdim=True) / n_active
        return active * (grad_out - v_hat)


def sparsemax(v: torch.Tensor) -> torch.Tensor:
    """Euclidean projection of each row of ``v`` onto the probability simplex.

    Works along the last dimension. The backward pass uses the Jacobian of the
    active support, ``diag(s) - s s^T / |S|``.
    """
    if v.shape[-1] < 1:
        raise InvalidInputError("sparsemax needs at least one entry")
    if not torch.isfinite(v).all():
        raise InvalidInputError("sparsemax input contains NaN or Inf")
    return _Sparsemax.apply(v)


def l2_normalize(x: torch.Tensor, atol: float = 0.0) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms <= atol).any():
        bad = torch.nonzero(norms.squeeze(-1) <= atol).flatten().tolist()
        raise DegenerateVectorError(f"zero-norm rows at {bad[:10]}")
    return x / norms


def cosine_similarity_matrix(E: torch.Tensor, T: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities, entry (i, j) = cos(E[i], T[j])."""
    if E.dim() != 2 or T.dim() != 2 or E.shape[1] != T.shape[1]:
        raise ContractViolation(f"incompatible shapes {tuple(E.shape)} and {tuple(T.shape)}")
    return l2_normalize(E) @ l2_normalize(T).T


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def init_for(self, params: Sequence[torch.Tensor]) -> "AdamWState":
        self.exp_avg = [torch.zeros_like(p) for p in params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in params]
        self.step = 0
        return self


def _adamw_update(p, g, m, v, step, lr, wd, beta1, beta2, eps):
    # decoupled decay first, then the bias-corrected Adam step
    if wd:
        p.mul_(1 - lr * wd)
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamWState
) -> tuple[Sequence[torch.Tensor], AdamWState]:
    """Apply one AdamW update in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ContractViolation("params and grads differ in length")
    if not state.exp_avg:
        state.init_for(params)
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractViolation(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
    state.step += 1
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        _adamw_update(p, g, m, v, state.step, state.lr, state.weight_decay,
                      state.beta1, state.beta2, state.eps)
    return params, state


class AdamW(torch.optim.Optimizer):
    """AdamW with decoupled weight decay, driven by :func:`_adamw_update`.

    Parameters without a gradient are skipped entirely, so frozen tensors are
    neither decayed nor moved.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ContractViolation(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise ContractViolation(f"weight_decay must be >= 0, got {weight_decay}")
        super().__init__(params, dict(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                _adamw_update(p, p.grad, st["exp_avg"], st["exp_avg_sq"], st["step"],
                              group["lr"], group["weight_decay"], beta1, beta2, group["eps"])
        return loss


def gradcheck(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Compare autograd against central differences.

    Returns max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    ``x`` should be float64. ``coords`` restricts the check to a subset of the
    flattened coordinates.
    """
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ContractViolation("gradcheck needs a scalar-valued function")
    if not torch.isfinite(out):
        raise GradcheckError("non-finite function value at the base point")
    (analytic,) = torch.autograd.grad(out, x)
    analytic = analytic.detach().reshape(-1)
    flat = x.detach().reshape(-1).clone()
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = f(flat.view_as(x)).item()
            flat[i] = orig - eps
            f_minus = f(flat.view_as(x)).item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradcheckError(f"non-finite function value perturbing coordinate {i}")
            a = analytic[i].item()
            if not math.isfinite(a):
                raise GradcheckError(f"non-finite analytic gradient at coordinate {i}")
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
