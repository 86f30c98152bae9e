"""Channel/embedding aggregation, upscaling, normalisation and sparsity.

All functions take torch tensors (or array-likes) and keep the autograd graph,
so they can sit inside a training loss. Leading batch dimensions are allowed
everywhere; the aggregated axes are always counted from the right:

* stack:              (..., N, C, H, W)
* channel-aggregated: (..., N, H, W)
* map:                (..., H, W)
"""

from __future__ import annotations

import enum

import numpy as np
import torch

from .tensor_core import DTYPE, Tensor


class Aggregator(str, enum.Enum):
    MEAN = "mean"
    MEANABS = "abs"
    VAR = "var"

    @classmethod
    def parse(cls, value) -> "Aggregator":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        aliases = {"mean": cls.MEAN, "abs": cls.MEANABS, "meanabs": cls.MEANABS,
                   "var": cls.VAR, "variance": cls.VAR}
        if key not in aliases:
            raise ValueError(f"unknown aggregator {value!r}")
        return aliases[key]


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def sample_variance(x: Tensor, dim: int) -> Tensor:
    """Unbiased (n-1) variance; a single element has variance 0."""
    n = x.shape[dim]
    if n == 1:
        return torch.zeros_like(x.select(dim, 0))
    return torch.var(x, dim=dim, correction=1)


def population_variance(x: Tensor, dim: int) -> Tensor:
    """Population variance E[X^2] - E[X]^2 (computed as mean squared deviation)."""
    mu = x.mean(dim=dim, keepdim=True)
    return ((x - mu) ** 2).mean(dim=dim)


def reduce(x: Tensor, aggregator, dim: int) -> Tensor:
    agg = Aggregator.parse(aggregator)
    if agg is Aggregator.MEAN:
        return x.mean(dim=dim)
    if agg is Aggregator.MEANABS:
        return x.abs().mean(dim=dim)
    return sample_variance(x, dim)


def aggregate(values, aggregator) -> float:
    """Aggregate a multiset of floats.

    ``var`` is the unbiased sample variance, so ``{-1, 1, 0, 0}`` gives 2/3.
    """
    x = _t(values).reshape(-1)
    if x.numel() == 0:
        raise ValueError("cannot aggregate an empty multiset")
    return float(reduce(x, aggregator, 0))


def channel_aggregate(stack, aggregator) -> Tensor:
    """(..., N, C, H, W) -> (..., N, H, W), reducing over channels."""
    vals = _t(stack if isinstance(stack, Tensor) else getattr(stack, "values", stack))
    if vals.dim() < 4:
        raise ValueError(f"stack must have shape (..., N, C, H, W), got {list(vals.shape)}")
    return reduce(vals, aggregator, -3)


def embedding_aggregate(ca, aggregator) -> Tensor:
    """(..., N, H, W) -> (..., H, W), reducing over embedding dimensions."""
    ca = _t(ca)
    if ca.dim() < 3:
        raise ValueError(f"expected (..., N, H, W), got {list(ca.shape)}")
    return reduce(ca, aggregator, -3)


def upscale(m, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upscaling of the last two axes to ``size``.

    Output pixel (r, c) takes source pixel (floor(r*h/H), floor(c*w/W)); for
    integral ratios this is exact block replication.
    """
    m = _t(m)
    h, w = m.shape[-2:]
    H, W = size
    if H < h or W < w:
        raise ValueError(f"upscale target {[H, W]} smaller than source {[h, w]}")
    if (H, W) == (h, w):
        return m
    rows = torch.div(torch.arange(H) * h, H, rounding_mode="floor")
    cols = torch.div(torch.arange(W) * w, W, rounding_mode="floor")
    return m[..., rows[:, None], cols[None, :]]


def normalize(m, ndim: int = 2) -> Tensor:
    """Min-max rescale the last ``ndim`` axes to [0, 1]; constant maps become 0."""
    m = _t(m)
    dims = tuple(range(-ndim, 0))
    lo = m.amin(dim=dims, keepdim=True)
    hi = m.amax(dim=dims, keepdim=True)
    span = hi - lo
    ok = span > 0
    safe = torch.where(ok, span, torch.ones_like(span))
    return torch.where(ok, (m - lo) / safe, torch.zeros_like(m))


def sparsity(m, absolute: bool = False) -> Tensor | float:
    """Mean of the normalised map (lower = sparser).

    Pass ``absolute=True`` for mean-aggregated maps, whose sign carries no
    magnitude information.
    """
    m = _t(m)
    if absolute:
        m = m.abs()
    s = normalize(m).mean(dim=(-2, -1))
    return float(s) if s.dim() == 0 else s


def attribution_map(stack, channel_agg, embedding_agg, size: tuple[int, int] | None = None,
                    normalized: bool = True) -> Tensor:
    """Full chain stack -> C -> E -> upscale -> normalise.

    ``stack`` has shape (..., N, C, H_p, W_p); the result (..., H, W).
    """
    m = embedding_aggregate(channel_aggregate(stack, channel_agg), embedding_agg)
    if size is not None:
        m = upscale(m, size)
    return normalize(m) if normalized else m
