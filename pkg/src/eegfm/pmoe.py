"""Sparsely routed feed-forward blocks with a shared expert.

Every feed-forward site in the encoder is one of these layers; a layer with
zero experts degenerates to the shared expert alone, which is how the
progressive schedule switches expertless shallow layers into routed deep
ones.  Routing is noisy top-k: the softmax is taken over the k largest
(noise-perturbed) router logits only, all other weights are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import NumericalError, RngStream

_EPS = 1e-10


class FeedForward(nn.Module):
    """Two-layer FFN; swiglu uses a gated first layer."""

    def __init__(self, d_model: int, hidden: int, activation: str = "swiglu"):
        super().__init__()
        if activation not in ("relu", "gelu", "swiglu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.w_in = nn.Linear(d_model, hidden)
        self.w_gate = nn.Linear(d_model, hidden) if activation == "swiglu" else None
        self.w_out = nn.Linear(hidden, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.activation == "swiglu":
            return self.w_out(torch.nn.functional.silu(self.w_gate(x)) * self.w_in(x))
        act = torch.relu if self.activation == "relu" else torch.nn.functional.gelu
        return self.w_out(act(self.w_in(x)))


@dataclass
class GateOutput:
    """Routing weights plus the utilization statistics the balancing loss needs.

    ``weights`` rows are probability vectors with at most k nonzeros.
    ``importance`` is the per-expert summed gate mass (differentiable);
    ``load`` the hard routed-token count; ``load_smooth`` the differentiable
    expected-routing estimate used by the balancing term (falls back to the
    hard count when routing is noiseless).
    """

    weights: torch.Tensor  # (tokens, E)
    importance: torch.Tensor  # (E,)
    load: torch.Tensor  # (E,) hard counts
    load_smooth: torch.Tensor  # (E,)
    k: int

    @property
    def n_experts(self) -> int:
        return self.weights.shape[-1]


def topk_softmax(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax over the k largest entries of the last axis; zeros elsewhere.

    Ties are broken toward the lowest index (stable descending sort).
    """
    E = logits.shape[-1]
    if not 1 <= k <= E:
        raise ValueError(f"k must lie in [1, {E}], got {k}")
    order = torch.argsort(logits, dim=-1, descending=True, stable=True)
    top = order[..., :k]
    picked = torch.gather(logits, -1, top)
    soft = torch.softmax(picked, dim=-1)
    out = torch.zeros_like(logits)
    return out.scatter(-1, top, soft)


class PMoELayer(nn.Module):
    """Routed experts + shared expert for one feed-forward site."""

    def __init__(
        self,
        d_model: int,
        n_experts: int,
        expert_width: int,
        shared_width: int,
        activation: str = "swiglu",
        noise_std: float = 0.001,
        top_k_fraction: float = 0.5,
    ):
        super().__init__()
        if n_experts < 0:
            raise ValueError("n_experts must be >= 0")
        self.n_experts = n_experts
        self.noise_std = noise_std
        self.top_k_fraction = top_k_fraction
        self.experts = nn.ModuleList(
            FeedForward(d_model, expert_width, activation) for _ in range(n_experts)
        )
        self.shared = FeedForward(d_model, shared_width, activation)
        self.router = nn.Linear(d_model, n_experts, bias=False) if n_experts >= 1 else None

    @property
    def k(self) -> int:
        return max(1, math.ceil(self.top_k_fraction * self.n_experts))

    def forward(self, zhat: torch.Tensor, rng: RngStream | None = None, training: bool = False):
        """Returns (output, GateOutput or None).  The caller adds the residual."""
        flat = zhat.reshape(-1, zhat.shape[-1])
        gate = None
        if self.n_experts >= 1:
            gate = route(flat, self, self.k, rng, training)
        y = pmoe_forward(flat, self, gate)
        return y.reshape(zhat.shape), gate


def route(
    tokens: torch.Tensor,
    layer: PMoELayer,
    k: int,
    rng: RngStream | None = None,
    training: bool = False,
) -> GateOutput:
    """Noisy top-k gate over the layer's experts for a batch of tokens."""
    if layer.n_experts < 1:
        raise ValueError("route requires at least one expert")
    clean = layer.router(tokens)
    noisy = clean
    use_noise = training and layer.noise_std > 0 and rng is not None
    if use_noise:
        noise = torch.as_tensor(
            rng.normal(size=tuple(clean.shape), scale=layer.noise_std),
            dtype=clean.dtype,
        )
        noisy = clean + noise
    weights = topk_softmax(noisy, k)
    importance = weights.sum(dim=0)
    load = (weights > 0).sum(dim=0).to(clean.dtype)
    if use_noise and k < layer.n_experts:
        load_smooth = _expected_load(clean, noisy, layer.noise_std, k)
    else:
        load_smooth = load
    return GateOutput(weights=weights, importance=importance, load=load, load_smooth=load_smooth, k=k)


def _expected_load(clean: torch.Tensor, noisy: torch.Tensor, noise_std: float, k: int) -> torch.Tensor:
    """Differentiable per-expert expected routing count.

    For each token and expert, the probability that a fresh noise draw keeps
    the expert in the top k equals Phi((clean - threshold)/std), where the
    threshold is the k-th largest competing noisy logit: the (k+1)-th overall
    value if the expert currently sits in the top k, the k-th otherwise.
    """
    sorted_noisy, _ = torch.sort(noisy, dim=-1, descending=True)
    kth = sorted_noisy[..., k - 1 : k]
    kplus1 = sorted_noisy[..., k : k + 1]
    in_topk = noisy >= kth
    threshold = torch.where(in_topk, kplus1, kth)
    z = (clean - threshold) / noise_std
    prob = 0.5 * (1.0 + torch.erf(z / math.sqrt(2.0)))
    return prob.sum(dim=0)


def pmoe_forward(zhat: torch.Tensor, layer: PMoELayer, gate: GateOutput | None) -> torch.Tensor:
    """Weighted expert mixture plus the shared expert.

    Experts receive only the tokens that route to them; zero-weight experts
    are never evaluated for a token, and the result is identical (to fp
    accuracy) to the dense weighted sum.
    """
    y = layer.shared(zhat)
    if layer.n_experts == 0 or gate is None:
        return y
    for e in range(layer.n_experts):
        sel = torch.nonzero(gate.weights[:, e] > 0, as_tuple=True)[0]
        if sel.numel() == 0:
            continue
        out_e = layer.experts[e](zhat[sel])
        if not torch.isfinite(out_e).all():
            raise NumericalError(f"non-finite output from expert {e}")
        y = y.index_add(0, sel, gate.weights[sel, e : e + 1] * out_e)
    return y


def aux_loss(gates: list[GateOutput], w_importance: float) -> torch.Tensor:
    """Balancing loss: w * (CV^2(importance) + CV^2(expected load)) per gate.

    Gates over fewer than two experts contribute nothing (there is nothing to
    balance).  CV^2 uses the population variance.
    """

    def cv_squared(x: torch.Tensor) -> torch.Tensor:
        return x.var(unbiased=False) / (x.mean() ** 2 + _EPS)

    total = torch.zeros((), dtype=torch.float64)
    for gate in gates:
        if gate.n_experts < 2:
            continue
        term = cv_squared(gate.importance) + cv_squared(gate.load_smooth.to(gate.importance.dtype))
        total = total.to(term.dtype) + w_importance * term
    return total
