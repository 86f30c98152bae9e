"""Score-constrained training loss.

The training loss subtracts weighted noise and variance scores, computed with
differentiable attribution stacks at one probe layer, from the usual
reconstruction + classification loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .aggregation import Aggregator
from .models import base_loss
from .nn_layers import Network, frozen_bn_stats
from .saliency import SaliencyMethod, attribute_batch
from .scores import ScoreConfig, mae, map_size, maps_from_stacks, variance_from_stacks

_CONSTRAINT_STREAM = 101


@dataclass(frozen=True)
class ConstraintCfg:
    """Score constraints: ``loss -= lambda_noise * N + lambda_var * V``."""

    lambda_noise: float = 0.0
    lambda_var: float = 0.0
    period: int = 20
    probe: int = 2
    method: SaliencyMethod = SaliencyMethod.ACTXGRAD
    channel_agg: Aggregator = Aggregator.MEANABS
    embedding_agg: Aggregator = Aggregator.MEANABS

    def __post_init__(self):
        if self.lambda_noise < 0 or self.lambda_var < 0:
            raise ValueError("constraint coefficients must be >= 0")
        if self.period < 1:
            raise ValueError("constraint period must be >= 1")
        object.__setattr__(self, "method", SaliencyMethod.parse(self.method))
        object.__setattr__(self, "channel_agg", Aggregator.parse(self.channel_agg))
        object.__setattr__(self, "embedding_agg", Aggregator.parse(self.embedding_agg))

    @property
    def active(self) -> bool:
        return self.lambda_noise > 0 or self.lambda_var > 0

    @property
    def score_config(self) -> ScoreConfig:
        return ScoreConfig(self.method, self.channel_agg, self.embedding_agg, (self.probe,))

    def to_dict(self) -> dict:
        return {"lambda_noise": self.lambda_noise, "lambda_var": self.lambda_var,
                "period": self.period, "probe": self.probe, "method": self.method.value,
                "channel_agg": self.channel_agg.value, "embedding_agg": self.embedding_agg.value}


def constraint_noise(seed: int, step: int, shape, dtype) -> torch.Tensor:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_CONSTRAINT_STREAM, step)))
    return torch.as_tensor(rng.random(tuple(shape)), dtype=dtype)


def score_terms(net: Network, x: torch.Tensor, cfg: ConstraintCfg, phi=None, noise=None):
    """Differentiable batch-mean noise and variance scores at ``cfg.probe``.

    Returns ``(N, V)``; a term whose coefficient is zero comes back as None.
    The noise batch is pushed through batch norm without touching the
    running statistics.
    """
    p = cfg.probe
    sc = cfg.score_config
    if phi is None:
        phi = net.activation(x, p)
    stacks = attribute_batch(net, x, p, cfg.method, differentiable=True, activation=phi)
    n_term = v_term = None
    if cfg.lambda_noise > 0:
        if noise is None:
            noise = torch.rand_like(x)
        with frozen_bn_stats(net):
            phi_n = net.activation(noise, p)
        stacks_n = attribute_batch(net, noise, p, cfg.method, differentiable=True,
                                   activation=phi_n)
        size = map_size(net, p)
        n_term = mae(maps_from_stacks(stacks, sc, size), maps_from_stacks(stacks_n, sc, size)).mean()
    if cfg.lambda_var > 0:
        v_term = variance_from_stacks(stacks, cfg.channel_agg).mean()
    return n_term, v_term


def training_loss(net: Network, x, y, cfg: ConstraintCfg | None, step: int = 0, seed: int = 0):
    """Loss for one mini-batch and the network outputs.

    Score terms are added only when ``cfg`` is active and ``step`` is a
    multiple of ``cfg.period``; otherwise this is the plain model loss.
    """
    apply = cfg is not None and cfg.active and step % cfg.period == 0
    out, cap = net(x, capture=(cfg.probe,) if apply else ())
    loss = base_loss(net, out, x, y)
    if apply:
        noise = constraint_noise(seed, step, x.shape, x.dtype) if cfg.lambda_noise > 0 else None
        n_term, v_term = score_terms(net, x, cfg, phi=cap[cfg.probe], noise=noise)
        if n_term is not None:
            loss = loss - cfg.lambda_noise * n_term
        if v_term is not None:
            loss = loss - cfg.lambda_var * v_term
    return loss, out


def constrained_loss(net: Network, batch, cfg: ConstraintCfg | None, step: int = 0,
                     seed: int = 0) -> torch.Tensor:
    """L_rec + L_class - lambda_noise * N - lambda_var * V for ``batch = (x, y)``."""
    x, y = batch
    return training_loss(net, x, y, cfg, step, seed)[0]
