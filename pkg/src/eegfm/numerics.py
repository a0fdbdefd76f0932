"""Numeric foundations: deterministic random streams and gradient checking.

Arrays are ``torch.Tensor``s (float64 is the reference dtype for all
verification work; float32 is allowed for speed-sensitive training).  Nothing
in this package reads hidden global random state: every stochastic operation
takes an :class:`RngStream`, and identical ``(seed, position)`` pairs yield
identical draws on every platform (numpy PCG64 guarantee).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Build a tensor in the reference dtype."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype)
    if requires_grad:
        t.requires_grad_(True)
    return t


def require_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(f"non-finite values in {where}")
    return t


class RngStream:
    """Deterministic random stream with labeled sub-stream splitting.

    A stream is single-owner: draws advance ``position`` and must not be
    shared across concurrent tasks.  ``split(label)`` derives an independent
    child stream whose seed depends only on ``(seed, label)``, so concurrent
    units of work each get their own stream reproducibly.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._torch_gen: torch.Generator | None = None

    def split(self, label: str) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    def torch_uniform(self, shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Uniform [0,1) tensor from a generator owned by this stream.

        Used on hot paths (dropout masks) where numpy draws plus conversion
        would dominate; the generator is seeded from this stream's seed, so
        the no-hidden-global-state contract still holds.
        """
        if self._torch_gen is None:
            self._torch_gen = torch.Generator()
            self._torch_gen.manual_seed(self.seed ^ 0x5DEECE66D)
        self.position += 1
        return torch.rand(tuple(shape), generator=self._torch_gen, dtype=dtype)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        self.position += 1
        return self._gen.uniform(low, high, size=size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        self.position += 1
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        self.position += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    def poisson(self, lam: float, size=None):
        self.position += 1
        return self._gen.poisson(lam, size=size)


def seeded_stream(seed: int) -> RngStream:
    """Entry point for all randomness in the package."""
    return RngStream(seed)


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients against central differences."""

    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    note: str = field(default="")

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        msg = f"[{status}] {self.op_name}: rel={self.max_rel_error:.3e} abs={self.max_abs_error:.3e}"
        return msg + (f" ({self.note})" if self.note else "")


def gradient_check(
    op,
    inputs,
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
    op_name: str | None = None,
) -> GradReport:
    """Verify the reverse-mode gradient of ``op`` against central differences.

    ``op`` must be pure and map the given tensors to a tensor; non-scalar
    outputs are contracted with a fixed cosine probe so a single backward pass
    yields the full Jacobian-vector information.  Each input component is then
    perturbed by ±eps and the analytic derivative is compared with
    ``(f(x+eps) - f(x-eps)) / (2 eps)``.

    A component is acceptable when its relative error is below ``rel_tol`` or
    its absolute error is below ``abs_floor`` (the latter absorbs components
    whose true derivative is ~0, where relative error is meaningless).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    name = op_name or getattr(op, "__name__", "op")
    leaves = []
    for x in inputs:
        leaf = x.detach().to(torch.float64).clone().requires_grad_(True)
        leaves.append(leaf)

    def scalarize(out: torch.Tensor) -> torch.Tensor:
        if out.numel() == 1:
            return out.reshape(())
        # fixed probe: cos(0.7·i) over flattened entries, deterministic
        idx = torch.arange(out.numel(), dtype=torch.float64)
        probe = torch.cos(0.7 * idx).reshape(out.shape)
        return (out * probe).sum()

    out = op(*leaves)
    if not torch.isfinite(out.detach()).all():
        return GradReport(name, math.inf, math.inf, False, note="non-finite op output")
    scalar = scalarize(out)
    analytic = torch.autograd.grad(scalar, leaves, allow_unused=True)

    max_rel = 0.0
    max_abs = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            g = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = scalarize(op(*leaves)).item()
                flat[i] = orig - eps
                f_minus = scalarize(op(*leaves)).item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    return GradReport(
                        name, math.inf, math.inf, False,
                        note=f"non-finite op output while perturbing component {i}",
                    )
                numeric = (f_plus - f_minus) / (2 * eps)
                a = gflat[i].item()
                abs_err = abs(a - numeric)
                max_abs = max(max_abs, abs_err)
                if abs_err >= abs_floor:
                    rel = abs_err / max(abs(a), abs(numeric), 1e-300)
                    max_rel = max(max_rel, rel)
    passed = max_rel < rel_tol or max_abs < abs_floor
    return GradReport(name, max_rel, max_abs, passed)


class _MethodWrapper(torch.nn.Module):
    """Exposes an arbitrary module method as a forward for functional_call."""

    def __init__(self, module: torch.nn.Module, fn):
        super().__init__()
        self.inner = module
        self._fn = fn

    def forward(self, *args):
        return self._fn(self.inner, *args)


def module_gradient_check(
    module: torch.nn.Module,
    inputs,
    op_name: str,
    forward=None,
    **kwargs,
) -> GradReport:
    """Gradient-check a torch module jointly over its inputs and parameters.

    The module is evaluated functionally (parameters substituted per probe)
    so the check covers every learnable array.  ``forward`` customizes the
    call, e.g. ``lambda m, x: m.encode(x)[-1]``; default is ``module(*args)``.
    """
    module = module.to(torch.float64)
    wrapper = _MethodWrapper(module, forward or (lambda m, *args: m(*args)))
    names = [n for n, _ in wrapper.named_parameters()]
    params = [p.detach() for _, p in wrapper.named_parameters()]
    n_inputs = len(inputs)

    def op(*tensors):
        overrides = dict(zip(names, tensors[n_inputs:]))
        return torch.func.functional_call(wrapper, overrides, tuple(tensors[:n_inputs]))

    return gradient_check(op, list(inputs) + params, op_name=op_name, **kwargs)
