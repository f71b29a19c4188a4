"""Loss terms and their uncertainty-weighted combination.

Each objective ``t`` carries a log-variance ``s_t``. Regression terms enter
as ``0.5 * exp(-s) * L + 0.5 * s``, classification terms as
``exp(-s) * L + 0.5 * s``, and the adversarial term as ``s_gan * L`` with
``s_gan`` held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NORMAL_EPS = 1e-8

KINDS = {"l1": "regression", "normal": "regression", "seg": "classification", "gan": "adversarial"}


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def height_normals(h: torch.Tensor, gsd: float = 1.0, height_scale: float = 1.0) -> torch.Tensor:
    """Unnormalized normals ``(-dh/dx, -dh/dy, 1)`` stacked on the last axis.

    ``h`` is ``(..., H, W)``; gradients use central differences inside and
    one-sided differences on the border, in meters when ``height_scale``
    converts ``h`` to meters.
    """
    if h.shape[-1] < 2 or h.shape[-2] < 2:
        raise ValueError("normals need at least 2x2 heights")
    d_row, d_col = torch.gradient(h * height_scale, spacing=gsd, dim=(-2, -1))
    return torch.stack([-d_col, -d_row, torch.ones_like(h)], dim=-1)


def cosine_normal_loss(n_pred: torch.Tensor, n_true: torch.Tensor) -> torch.Tensor:
    """``1 - mean cosine`` between two normal fields ``(..., 3)``; in [0, 2]."""
    dot = (n_pred * n_true).sum(-1)
    # the floor only guards degenerate vectors; unit-scale normals pass through unbiased
    norm_p = torch.sqrt((n_pred * n_pred).sum(-1).clamp_min(NORMAL_EPS))
    norm_t = torch.sqrt((n_true * n_true).sum(-1).clamp_min(NORMAL_EPS))
    return 1.0 - (dot / (norm_p * norm_t)).mean()


def normal_loss(pred: torch.Tensor, target: torch.Tensor, gsd: float = 1.0, height_scale: float = 1.0) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return cosine_normal_loss(height_normals(pred, gsd, height_scale), height_normals(target, gsd, height_scale))


def gan_generator_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    return ((scores_fake - 1.0) ** 2).mean()


def discriminator_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((scores_real - 1.0) ** 2).mean() + 0.5 * (scores_fake ** 2).mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; ``logits`` are channel-first ``(N, C, H, W)``."""
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    return F.cross_entropy(logits, labels.long())


def effective_weight(s, kind: str):
    """``(w, r)`` for a log-variance ``s`` of the given objective kind."""
    exp = torch.exp if isinstance(s, torch.Tensor) else math.exp
    if kind == "regression":
        return 0.5 * exp(-s), 0.5 * s
    if kind == "classification":
        return exp(-s), 0.5 * s
    if kind == "adversarial":
        return s, 0.0 * s
    raise ValueError(f"unknown objective kind {kind!r}")


class WeightState(nn.Module):
    """Log-variances ``s_l1, s_normal, s_seg`` (learnable) and fixed ``s_gan``."""

    LEARNABLE = ("l1", "normal", "seg")

    def __init__(self, s_l1: float = 0.0, s_normal: float = 0.0, s_seg: float = 0.0, s_gan: float = 1.0,
                 learnable: bool = True):
        super().__init__()
        self.s = nn.ParameterDict({
            "l1": nn.Parameter(torch.tensor(float(s_l1), dtype=torch.float64), requires_grad=learnable),
            "normal": nn.Parameter(torch.tensor(float(s_normal), dtype=torch.float64), requires_grad=learnable),
            "seg": nn.Parameter(torch.tensor(float(s_seg), dtype=torch.float64), requires_grad=learnable),
        })
        self.register_buffer("s_gan", torch.tensor(float(s_gan), dtype=torch.float64))
        self.learnable = learnable

    def get(self, name: str) -> torch.Tensor:
        return self.s_gan if name == "gan" else self.s[name]

    def values(self) -> dict[str, float]:
        out = {k: float(self.s[k].detach()) for k in self.LEARNABLE}
        out["gan"] = float(self.s_gan)
        return out

    def to_dict(self) -> dict:
        return {"s_l1": float(self.s["l1"].detach()), "s_normal": float(self.s["normal"].detach()),
                "s_seg": float(self.s["seg"].detach()),
                "s_gan": float(self.s_gan), "learnable": self.learnable}

    @classmethod
    def from_dict(cls, d: dict) -> WeightState:
        return cls(d.get("s_l1", 0.0), d.get("s_normal", 0.0), d.get("s_seg", 0.0), d.get("s_gan", 1.0),
                   d.get("learnable", True))


@dataclass
class LossReport:
    raw: dict[str, torch.Tensor]
    weights: dict[str, torch.Tensor]
    regularizers: dict[str, torch.Tensor]
    total: torch.Tensor
    s: dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {}
        for name in ("l1", "normal", "seg", "gan"):
            if name in self.raw:
                row[f"loss_{name}"] = float(self.raw[name].detach())
                row[f"w_{name}"] = float(self.weights[name].detach())
                row[f"r_{name}"] = float(self.regularizers[name].detach())
        for name, v in self.s.items():
            row[f"s_{name}"] = v
        row["total"] = float(self.total.detach())
        return row


def combine_multitask(raw: dict[str, torch.Tensor], ws: WeightState, active) -> LossReport:
    """Sum ``L * w + r`` over the active objectives."""
    active = [a for a in ("l1", "normal", "seg", "gan") if a in set(active)]
    missing = [a for a in active if a not in raw]
    if missing:
        raise KeyError(f"missing raw loss for active objectives {missing}")
    weights, regs, parts = {}, {}, []
    for name in active:
        w, r = effective_weight(ws.get(name), KINDS[name])
        loss = raw[name]
        weights[name], regs[name] = w, r
        parts.append(loss * w + r)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossReport({a: raw[a] for a in active}, weights, regs, total, ws.values())
