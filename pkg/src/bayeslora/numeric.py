"""Dense float64 linear algebra and a thin reverse-mode gradient registry.

All matrices are ``torch.Tensor`` objects in double precision. Gradients come
from torch autograd; :class:`GradientTape` only adds a named parameter
registry and the error contract the rest of the package relies on.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterable, Mapping, Optional, Union

import torch

DTYPE = torch.float64

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DecompositionError(ArithmeticError):
    """Cholesky factorization failed; ``pivot`` is the 0-based failing index."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class ParameterError(ValueError):
    """An argument lies outside its admissible domain."""


class TapeUsageError(RuntimeError):
    pass


def as_matrix(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def matmul(a, b) -> torch.Tensor:
    a, b = as_matrix(a), as_matrix(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def _check_square_symmetric(k: torch.Tensor, tol: float = 1e-10) -> None:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"expected a square matrix, got {tuple(k.shape)}")
    scale = max(1.0, float(k.detach().abs().max())) if k.numel() else 1.0
    if float((k.detach() - k.detach().T).abs().max()) > tol * scale:
        raise DimensionError("matrix is not symmetric")


def cholesky(k, jitter: Optional[float] = None) -> torch.Tensor:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises :class:`DecompositionError` on failure. If ``jitter`` is given the
    factorization is retried exactly once with ``jitter * I`` added.
    """
    k = as_matrix(k)
    _check_square_symmetric(k)
    chol, info = torch.linalg.cholesky_ex(k)
    if int(info) == 0:
        return chol
    pivot = int(info) - 1
    if jitter is not None:
        logger.warning("cholesky failed at pivot %d; retrying with jitter %.1e", pivot, jitter)
        eye = torch.eye(k.shape[0], dtype=k.dtype)
        chol, info = torch.linalg.cholesky_ex(k + jitter * eye)
        if int(info) == 0:
            return chol
        pivot = int(info) - 1
    raise DecompositionError(f"matrix is not positive definite (pivot {pivot})", pivot)


def logdet_psd(k, jitter: Optional[float] = None) -> torch.Tensor:
    chol = cholesky(k, jitter=jitter)
    return 2.0 * torch.log(torch.diagonal(chol)).sum()


def cho_solve(chol: torch.Tensor, rhs: torch.Tensor) -> torch.Tensor:
    """Solve ``(L L^T) x = rhs`` given the lower factor ``L``."""
    return torch.cholesky_solve(rhs, chol, upper=False)


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
    return x


class GradientTape:
    """Named registry of differentiable leaves.

    One tape belongs to one training step. Leaves are float64 tensors with
    ``requires_grad`` set; :func:`grad` differentiates a scalar with respect
    to every registered leaf.
    """

    def __init__(self, params: Optional[Mapping[str, torch.Tensor]] = None):
        self.params: Dict[str, torch.Tensor] = {}
        for name, value in (params or {}).items():
            self.watch(name, value)

    def watch(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise TapeUsageError(f"parameter {name!r} already registered")
        leaf = value if isinstance(value, torch.Tensor) and value.is_leaf else as_matrix(value).detach().clone()
        if leaf.dtype != DTYPE:
            leaf = leaf.detach().to(DTYPE)
        leaf.requires_grad_(True)
        self.params[name] = leaf
        return leaf

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "GradientTape":
        tape = cls()
        for name, p in module.named_parameters():
            if p.requires_grad:
                tape.params[name] = p
        return tape


def grad(tape: GradientTape, output: Union[torch.Tensor, float], retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``output`` for all tape leaves.

    Leaves the output does not depend on get zero gradients.
    """
    if not isinstance(output, torch.Tensor):
        raise TapeUsageError("output was not produced under a gradient tape")
    if output.numel() != 1:
        raise TapeUsageError(f"output must be a scalar, got shape {tuple(output.shape)}")
    names = list(tape.params)
    leaves = [tape.params[n] for n in names]
    if not output.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, leaves)}
    grads = torch.autograd.grad(output.reshape(()), leaves, retain_graph=retain_graph, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, leaves, grads)}


def finite_difference_grad(fn, params: Iterable[torch.Tensor], step: float = 1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor in ``params``.

    Perturbs ``params`` in place and restores them.
    """
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = float(fn())
                flat[i] = orig - step
                fm = float(fn())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * step)
            out.append(g)
    return out
