"""Contrastive alignment losses: image-class, image-attribute, class-attribute.

All three losses divide cosine similarities by a shared learnable temperature.
The attribute weights enter either literally (where cosine similarity absorbs
positive scaling, leaving them inert) or as additive log-weights on the logits;
the mode is a config switch because the two readings differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

WEIGHTING_MODES = ("cosine_inert", "log_weight")
DEFAULT_WEIGHTING = "log_weight"
COSINE_EPS = 1e-8


class LossError(ValueError):
    pass


class Temperature(nn.Module):
    """Trainable positive temperature, parameterized as exp of a free scalar."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        if init <= 0:
            raise LossError(f"temperature must be positive, got {init}")
        self.log_tau = nn.Parameter(torch.tensor(math.log(init), dtype=torch.float64))

    @property
    def value(self) -> torch.Tensor:
        return self.log_tau.exp()


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between the last dims of u and v (broadcasting)."""
    un = u.norm(dim=-1)
    vn = v.norm(dim=-1)
    if (un < COSINE_EPS).any() or (vn < COSINE_EPS).any():
        raise LossError("cosine similarity of a (near-)zero vector")
    return (u * v).sum(dim=-1) / (un * vn)


def _as_tau(tau) -> torch.Tensor:
    if isinstance(tau, Temperature):
        t = tau.value
    elif isinstance(tau, torch.Tensor):
        t = tau
    else:
        t = torch.as_tensor(tau, dtype=torch.float64)
    if float(t.detach()) <= 0:
        raise LossError(f"temperature must be positive, got {float(t.detach())}")
    return t


def _pairwise_cosine(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(..., P, d) x (Q, d) -> (..., P, Q) cosine similarities."""
    return cosine_sim(x.unsqueeze(-2), y)


def image_class_loss(
    grouped: torch.Tensor, class_feats: torch.Tensor, label, tau
) -> torch.Tensor:
    """Per-group cross entropy of grouped features against class features, summed over groups.

    grouped: (T, d) or (B, T, d); class_feats: (K, d) or (B, K, d); label: int or (B,).
    Batched input returns the mean over instances.
    """
    tau_t = _as_tau(tau)
    if grouped.ndim == 2:
        grouped = grouped.unsqueeze(0)
        class_feats = class_feats.unsqueeze(0)
        label = torch.as_tensor([int(label)], device=grouped.device)
    else:
        label = torch.as_tensor(label, device=grouped.device)
    k = class_feats.shape[-2]
    if (label >= k).any() or (label < 0).any():
        raise LossError(f"class index out of range for K={k}")
    logits = cosine_sim(grouped.unsqueeze(-2), class_feats.unsqueeze(-3)) / tau_t
    if not torch.isfinite(logits).all():
        raise LossError("non-finite image-class similarity")
    logp = logits.log_softmax(dim=-1)
    picked = logp.gather(-1, label.view(-1, 1, 1).expand(-1, grouped.shape[1], 1))
    return -picked.sum(dim=(1, 2)).mean()


def _weighted_infonce(
    anchors: torch.Tensor, attr_feats: torch.Tensor, weights: torch.Tensor,
    tau, mode: str,
) -> torch.Tensor:
    """Sum over anchors and attributes of -log softmax against all attributes.

    anchors: (..., P, d); attr_feats: (M, d); weights: (M,) or (..., M) simplex.
    """
    if mode not in WEIGHTING_MODES:
        raise LossError(f"unknown attribute weighting mode {mode!r}")
    tau_t = _as_tau(tau)
    weights = torch.as_tensor(weights, dtype=anchors.dtype, device=anchors.device)
    if (weights <= 0).any():
        raise LossError("attribute weights must be strictly positive")
    logits = _pairwise_cosine(anchors, attr_feats) / tau_t  # (..., P, M)
    if not torch.isfinite(logits).all():
        raise LossError("non-finite attribute similarity")
    if mode == "log_weight":
        logits = logits + weights.log().unsqueeze(-2)
    logp = logits.log_softmax(dim=-1)
    return -logp.sum(dim=(-2, -1))


def image_attribute_loss(
    grouped: torch.Tensor, attr_feats: torch.Tensor, weights, tau,
    mode: str = DEFAULT_WEIGHTING,
) -> torch.Tensor:
    """InfoNCE between each grouped feature vector and the weighted attribute features.

    grouped: (T, d) or (B, T, d). Batched input returns the mean over instances.
    """
    per_instance = _weighted_infonce(grouped, attr_feats, weights, tau, mode)
    return per_instance.mean() if per_instance.ndim else per_instance


def class_attribute_loss(
    class_feats: torch.Tensor, attr_feats: torch.Tensor, weights, tau,
    mode: str = DEFAULT_WEIGHTING,
) -> torch.Tensor:
    """Same InfoNCE form with class features as anchors.

    class_feats: (K, d) or (B, K, d).
    """
    per_instance = _weighted_infonce(class_feats, attr_feats, weights, tau, mode)
    return per_instance.mean() if per_instance.ndim else per_instance


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    ic: float
    ia: float
    ca: float
    alpha: float
    beta: float
    total: float

    def as_dict(self) -> dict:
        return {
            "ce": self.ce, "ic": self.ic, "ia": self.ia, "ca": self.ca,
            "alpha": self.alpha, "beta": self.beta, "total": self.total,
        }


def total_loss(ce, ic, ia, ca, alpha: float = 1.0, beta: float = 0.5):
    """Combine the four components: ce + ic + alpha*ia + beta*ca.

    Accepts floats or scalar tensors; returns (total, LossBreakdown). Non-finite
    components abort with the offending name.
    """
    def scalar(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    parts = {"ce": ce, "ic": ic, "ia": ia, "ca": ca}
    for name, value in parts.items():
        if not math.isfinite(scalar(value)):
            raise LossError(f"non-finite loss component {name!r}: {scalar(value)}")
    total = ce + ic + alpha * ia + beta * ca
    breakdown = LossBreakdown(
        ce=scalar(ce), ic=scalar(ic), ia=scalar(ia), ca=scalar(ca),
        alpha=float(alpha), beta=float(beta), total=scalar(total),
    )
    return total, breakdown
