"""Attribution stacks between a probe layer and every embedding dimension."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .nn_layers import Network
from .tensor_core import Tensor, grad


class SaliencyMethod(str, enum.Enum):
    VANILLA = "vanilla"
    ACTXGRAD = "actxgrad"
    GRADCAM = "gradcam"

    @classmethod
    def parse(cls, value) -> "SaliencyMethod":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {
            "vanilla": cls.VANILLA, "vanillagradients": cls.VANILLA, "grad": cls.VANILLA,
            "actxgrad": cls.ACTXGRAD, "activationstimesgradients": cls.ACTXGRAD,
            "gradxact": cls.ACTXGRAD,
            "gradcam": cls.GRADCAM,
        }
        if key not in aliases:
            raise ValueError(f"unknown saliency method {value!r}")
        return aliases[key]


@dataclass
class AttributionStack:
    """Raw attributions of one sample: ``values`` has shape (N, C_p, H_p, W_p)."""

    values: Tensor
    probe: int
    method: SaliencyMethod
    sample_id: int | None = None

    @property
    def embedding_dim(self) -> int:
        return self.values.shape[0]


def attribute_batch(net: Network, xs: Tensor, p: int, method="vanilla",
                    differentiable: bool = False, activation: Tensor | None = None) -> Tensor:
    """Attribution stacks for a batch, shape (B, N, C_p, H_p, W_p).

    One backward pass per embedding dimension. Per-sample results are only
    independent of the batch companions when nothing between the probe and
    the embedding mixes samples (evaluation-mode batch norm, or no batch
    norm downstream of ``p``).

    With ``differentiable`` the gradients are built with ``create_graph`` so
    the returned stacks can be differentiated w.r.t. the network parameters.
    ``activation`` lets a caller pass an already computed phi_p(xs) that is
    part of a live graph.
    """
    method = SaliencyMethod.parse(method)
    net._check_probe(p)
    phi = net.activation(xs, p) if activation is None else activation
    if method is SaliencyMethod.GRADCAM and phi.dim() != 4:
        raise ValueError(f"Grad-CAM needs a spatial probe; probe {p} has shape {list(phi.shape[1:])}")
    if not phi.requires_grad:
        phi = phi.detach().requires_grad_(True)
    z = net.embed_from(phi, p)
    grads = []
    for i in range(z.shape[1]):
        (g,) = grad(z[:, i].sum(), [phi], create_graph=differentiable, retain_graph=True)
        grads.append(g)
    g = torch.stack(grads, dim=1)  # (B, N, *phi.shape[1:])
    a = phi.unsqueeze(1)
    if method is SaliencyMethod.VANILLA:
        vals = g
    elif method is SaliencyMethod.ACTXGRAD:
        vals = a * g
    else:
        alpha = g.mean(dim=(-2, -1), keepdim=True)
        vals = torch.relu((alpha * a).sum(dim=2, keepdim=True))
    if vals.dim() == 3:
        vals = vals[:, :, None, None, :]
    if not differentiable:
        vals = vals.detach()
    return vals


def attribute(net: Network, x: Tensor, p: int, method="vanilla", sample_id=None) -> AttributionStack:
    """Attribution stack of a single sample ``x`` (shape = network input shape)."""
    if x.dim() == len(net.input_shape):
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError("attribute expects one sample; use attribute_batch for batches")
    vals = attribute_batch(net, x, p, method)[0]
    return AttributionStack(vals, p, SaliencyMethod.parse(method), sample_id)
