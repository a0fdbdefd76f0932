"""Training objectives: reconstruction, class-prior-adjusted BCE, totals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_AUX_WEIGHT = 0.8


@dataclass
class LossBreakdown:
    reconstruction: float
    auxiliary: float
    total: float
    p_norm: float

    def as_dict(self) -> dict:
        return {
            "reconstruction": self.reconstruction,
            "auxiliary": self.auxiliary,
            "total": self.total,
            "p_norm": self.p_norm,
        }


@dataclass
class ClassPrior:
    """Empirical class fractions; every class must actually occur."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if (self.counts <= 0).any():
            raise ValueError("every class needs at least one example (pi in (0,1))")

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "ClassPrior":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def pi(self) -> np.ndarray:
        return self.counts / self.total

    def logit_bias(self) -> np.ndarray:
        """Per-class log-odds log(pi) - log(1 - pi)."""
        pi = self.pi
        if ((pi <= 0) | (pi >= 1)).any():
            raise ValueError("class fraction of 0 or 1 leaves the logit bias undefined")
        return np.log(pi) - np.log1p(-pi)


def recon_loss(
    x: torch.Tensor,
    xhat: torch.Tensor,
    p: float = 2.0,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Batch-averaged l_p reconstruction: (sum |x - xhat|^p)^(1/p) / n.

    The norm runs over every entry of every instance; passing ``mask``
    restricts it to the masked points (the masked-only ablation).
    """
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(xhat.shape)}")
    if p < 1:
        raise ValueError("p must be >= 1")
    n = x.shape[0] if x.ndim >= 3 else 1
    diff = (x - xhat).abs()
    if mask is not None:
        diff = diff * torch.as_tensor(np.asarray(mask), dtype=diff.dtype)
    return diff.pow(p).sum().pow(1.0 / p) / n


def balbce_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    prior: ClassPrior,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Prior-adjusted one-vs-rest binary cross-entropy.

    Each class logit is shifted by the class log-odds before the sigmoid, the
    per-class binary losses are summed, and the result is averaged over the
    batch.  ``weights`` (defaulting to 1) scales per-class terms.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, n_classes)")
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    B, C = logits.shape
    bias = torch.as_tensor(prior.logit_bias(), dtype=logits.dtype)
    if bias.shape[0] != C:
        raise ValueError(f"prior covers {bias.shape[0]} classes, logits have {C}")
    labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    onehot = torch.nn.functional.one_hot(labels_t, C).to(logits.dtype)
    w = torch.ones(C, dtype=logits.dtype) if weights is None else torch.as_tensor(weights, dtype=logits.dtype)
    per_point = torch.nn.functional.binary_cross_entropy_with_logits(
        logits + bias, onehot, reduction="none"
    )
    return (per_point * w).sum(dim=1).mean()


def total_pretrain_loss(
    reconstruction: torch.Tensor,
    auxiliary: torch.Tensor | float = 0.0,
    aux_weight: float = DEFAULT_AUX_WEIGHT,
    p: float = 2.0,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine the reconstruction and balancing terms; returns the
    differentiable total plus a plain-float breakdown for telemetry."""
    aux = auxiliary if isinstance(auxiliary, torch.Tensor) else torch.as_tensor(float(auxiliary))
    total = reconstruction + aux_weight * aux.to(reconstruction.dtype)
    breakdown = LossBreakdown(
        reconstruction=float(reconstruction.detach()),
        auxiliary=float(aux.detach()),
        total=float(total.detach()),
        p_norm=p,
    )
    return total, breakdown
