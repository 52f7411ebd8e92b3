"""Loss terms and the two composite test-time objectives.

All functions accept tensors (or anything array-like) and return 0-d tensors
so they remain differentiable with respect to the prompt parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import torch

from .core import InvalidInputError, as_tensor

PROB_FLOOR = 1e-12
OrthogonalitySign = Literal["paper_eq7", "text_semantics"]
SIGNS = ("paper_eq7", "text_semantics")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    ``orthogonality_sign="text_semantics"`` adds ``beta * cos(p_bg, p)`` so that
    minimizing the loss pushes the background prediction away from the full
    image prediction; ``"paper_eq7"`` subtracts it instead.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    beta: float = 1.0
    orthogonality_sign: OrthogonalitySign = "text_semantics"
    use_ce: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
        if self.orthogonality_sign not in SIGNS:
            raise InvalidInputError(f"unknown orthogonality_sign {self.orthogonality_sign!r}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.terms.items()})
        return out


def _pair(p, q) -> tuple[torch.Tensor, torch.Tensor]:
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return p, q


def kl_divergence(p, q) -> torch.Tensor:
    """``sum_c p_c log(p_c / q_c)`` with probabilities floored at 1e-12 inside the logs."""
    p, q = _pair(p, q)
    return (p * (p.clamp_min(PROB_FLOOR).log() - q.clamp_min(PROB_FLOOR).log())).sum()


def entropy_reg(p) -> torch.Tensor:
    """Shannon entropy divided by the number of classes (``0 log 0 = 0``)."""
    p = as_tensor(p)
    return -(p * p.clamp_min(PROB_FLOOR).log()).sum() / p.shape[-1]


def distribution_cosine(p, q) -> torch.Tensor:
    p, q = _pair(p, q)
    return torch.dot(p, q) / (p.norm() * q.norm())


def _sign(w: LossWeights) -> float:
    return 1.0 if w.orthogonality_sign == "text_semantics" else -1.0


def bse_loss(p_fg, p_bg, p, w: LossWeights) -> torch.Tensor:
    """Foreground consistency plus signed background agreement."""
    return kl_divergence(p_fg, p) + _sign(w) * w.beta * distribution_cosine(p_bg, p)


def pseudo_ce(p, pseudo_label: int) -> torch.Tensor:
    p = as_tensor(p)
    if not 0 <= int(pseudo_label) < p.shape[-1]:
        raise InvalidInputError(f"pseudo label {pseudo_label} out of range for C={p.shape[-1]}")
    return -p[int(pseudo_label)].clamp_min(PROB_FLOOR).log()


def _ce_term(p, pseudo_label: int, w: LossWeights) -> torch.Tensor:
    ce = pseudo_ce(p, pseudo_label)
    return ce if w.use_ce else ce * 0.0


def total_loss_biprompt(p, p_fg, p_bg, pseudo_label: int, w: LossWeights) -> LossBreakdown:
    """``CE + lambda1 * BSE + lambda2 * ent`` on the original view's prediction."""
    p = as_tensor(p)
    ce = _ce_term(p, pseudo_label, w)
    kl = kl_divergence(p_fg, p)
    cos = distribution_cosine(p_bg, p)
    bse = kl + _sign(w) * w.beta * cos
    ent = entropy_reg(p)
    total = ce + w.lambda1 * bse + w.lambda2 * ent
    return LossBreakdown(total, {"ce": ce, "bse": bse, "kl_fg": kl, "cos_bg": cos, "ent": ent})


def total_loss_seraser(p, p_erased, pseudo_label: int, w: LossWeights) -> LossBreakdown:
    """``CE + lambda1 * KL(p || p_erased) + lambda2 * ent``."""
    p = as_tensor(p)
    ce = _ce_term(p, pseudo_label, w)
    kl = kl_divergence(p, p_erased)
    ent = entropy_reg(p)
    total = ce + w.lambda1 * kl + w.lambda2 * ent
    return LossBreakdown(total, {"ce": ce, "kl_erased": kl, "ent": ent})
