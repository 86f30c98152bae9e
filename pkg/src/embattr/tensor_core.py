"""Differentiable tensor engine.

Thin layer over :mod:`torch.autograd` that fixes the conventions the rest of
the package relies on: float64 everywhere, explicit shape errors, zero
gradients for unreachable inputs and gradients that can themselves be
differentiated (``create_graph=True``).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    """Create a float64 tensor from array-like data."""
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    return t.requires_grad_(requires_grad)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    sa, sb = tuple(a.shape), tuple(b.shape)
    for i, (da, db) in enumerate(zip(reversed(sa), reversed(sb))):
        if da != db and da != 1 and db != 1:
            axis = -(i + 1)
            raise ShapeError(
                f"{kind}: shape mismatch {list(sa)} vs {list(sb)} "
                f"at axis {axis} ({da} != {db})"
            )


_ELEMENTWISE_BINARY: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "pow": torch.pow,
    "maximum": torch.maximum,
}

_ELEMENTWISE_UNARY: dict[str, Callable[[Tensor], Tensor]] = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "abs": torch.abs,
    "sqrt": torch.sqrt,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
    "relu": F.relu,
}

_REDUCE = {"sum", "mean", "amax", "amin", "var"}

OP_KINDS = tuple(_ELEMENTWISE_BINARY) + tuple(_ELEMENTWISE_UNARY) + (
    "matmul", "reshape", "transpose") + tuple(sorted(_REDUCE))


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Apply a primitive op by name.

    Supported kinds are listed in :data:`OP_KINDS`. Reductions accept ``dim``
    and ``keepdim``; ``reshape`` takes ``shape``; ``transpose`` takes
    ``dims``; ``var`` takes ``correction`` (0 = population, 1 = sample).

    Raises:
        ShapeError: operand shapes are incompatible; the message names the
            offending dimensions.
        ValueError: unknown op kind or wrong arity.
    """
    if kind in _ELEMENTWISE_BINARY:
        if len(inputs) != 2:
            raise ValueError(f"{kind} takes 2 inputs, got {len(inputs)}")
        a, b = inputs
        _broadcast_shape(a, b, kind)
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if len(inputs) != 1:
            raise ValueError(f"{kind} takes 1 input, got {len(inputs)}")
        return _ELEMENTWISE_UNARY[kind](inputs[0])
    if kind == "matmul":
        a, b = inputs
        if a.dim() < 1 or b.dim() < 1:
            raise ShapeError("matmul: operands must have at least one dimension")
        ka = a.shape[-1]
        kb = b.shape[-2] if b.dim() >= 2 else b.shape[0]
        if ka != kb:
            raise ShapeError(
                f"matmul: shape mismatch {list(a.shape)} @ {list(b.shape)} "
                f"(inner dims {ka} != {kb})"
            )
        return torch.matmul(a, b)
    if kind == "reshape":
        (a,) = inputs
        shape = tuple(kwargs["shape"])
        n = int(np.prod([d for d in shape if d != -1])) if shape else 1
        if -1 not in shape and n != a.numel():
            raise ShapeError(
                f"reshape: cannot view {list(a.shape)} ({a.numel()} elements) "
                f"as {list(shape)} ({n} elements)"
            )
        return a.reshape(shape)
    if kind == "transpose":
        (a,) = inputs
        return a.permute(*kwargs.get("dims", reversed(range(a.dim()))))
    if kind in _REDUCE:
        (a,) = inputs
        dim = kwargs.get("dim")
        keepdim = kwargs.get("keepdim", False)
        if kind == "var":
            return torch.var(a, dim=dim, correction=kwargs.get("correction", 1),
                             keepdim=keepdim)
        fn = getattr(torch, kind)
        if dim is None:
            return fn(a)
        return fn(a, dim=dim, keepdim=keepdim)
    raise ValueError(f"unknown op kind {kind!r}")


def grad(output: Tensor, wrt: Sequence[Tensor] | Tensor, create_graph: bool = False,
         retain_graph: bool | None = None) -> list[Tensor]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get a zero gradient of matching
    shape instead of an error. With ``create_graph`` the returned gradients
    are graph nodes and can be differentiated again.
    """
    if isinstance(wrt, Tensor):
        wrt = [wrt]
    wrt = list(wrt)
    if output.numel() != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {list(output.shape)}")
    if retain_graph is None:
        retain_graph = create_graph
    live = [i for i, w in enumerate(wrt) if w.requires_grad]
    out = [torch.zeros_like(w) for w in wrt]
    if not live or not output.requires_grad:
        return out
    grads = torch.autograd.grad(
        output.reshape(()), [wrt[i] for i in live],
        create_graph=create_graph, retain_graph=retain_graph, allow_unused=True,
    )
    for i, g in zip(live, grads):
        if g is not None:
            out[i] = g
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative discrepancy between autograd and central differences.

    Returns ``max_j |g_j - fd_j| / (|g_j| + eps)`` where ``g`` is the analytic
    gradient of the scalar ``f`` at ``x`` and ``fd`` the central difference
    with step ``eps``.
    """
    x0 = x.detach().clone().to(DTYPE)
    xr = x0.clone().requires_grad_(True)
    (analytic,) = grad(f(xr), [xr])
    analytic = analytic.detach().reshape(-1)
    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    # f may take gradients internally, so it runs with autograd enabled
    for j in range(flat.numel()):
        orig = flat[j].item()
        flat[j] = orig + eps
        fp = float(f(x0).detach())
        flat[j] = orig - eps
        fm = float(f(x0).detach())
        flat[j] = orig
        numeric[j] = (fp - fm) / (2 * eps)
    if flat.numel() == 0:
        return 0.0
    err = (analytic - numeric).abs() / (analytic.abs() + eps)
    return float(err.max())
