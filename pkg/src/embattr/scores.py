"""Noise score, benchmark score, variance score and per-layer score curves."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .aggregation import Aggregator, attribution_map, channel_aggregate, normalize, population_variance
from .nn_layers import Network, eval_mode
from .saliency import SaliencyMethod, attribute_batch
from .tensor_core import Tensor

CURVE_COLUMNS = ("probe", "noise_mean", "noise_std", "benchmark_mean", "benchmark_std",
                 "var_mean", "var_std", "n_samples")


@dataclass(frozen=True)
class ScoreConfig:
    method: SaliencyMethod = SaliencyMethod.VANILLA
    channel_agg: Aggregator = Aggregator.MEANABS
    embedding_agg: Aggregator = Aggregator.MEANABS
    probes: tuple[int, ...] = (1, 2)
    seed: int = 0
    binarize: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", SaliencyMethod.parse(self.method))
        object.__setattr__(self, "channel_agg", Aggregator.parse(self.channel_agg))
        object.__setattr__(self, "embedding_agg", Aggregator.parse(self.embedding_agg))
        object.__setattr__(self, "probes", tuple(int(p) for p in self.probes))
        if self.binarize is not None and not 0 < self.binarize < 1:
            raise ValueError(f"binarize threshold must lie in (0, 1), got {self.binarize}")

    def with_(self, **kw) -> "ScoreConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"method": self.method.value, "channel_agg": self.channel_agg.value,
                "embedding_agg": self.embedding_agg.value, "probes": list(self.probes),
                "seed": self.seed, "binarize": self.binarize}


def noise_inputs(seed: int, sample_id: int, shape, count: int = 2) -> list[np.ndarray]:
    """``count`` U(0,1) inputs from the RNG stream of ``sample_id``.

    The first draw is x_noise, the second y_noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(sample_id),)))
    return [rng.random(tuple(shape)) for _ in range(count)]


def _as_batch(net: Network, x) -> Tensor:
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(x) if not isinstance(x, Tensor) else x, dtype=dtype)
    if x.dim() == len(net.input_shape):
        x = x.unsqueeze(0)
    return x.reshape(-1, *net.input_shape)


def map_size(net: Network, p: int) -> tuple[int, int] | None:
    """Upscaling target for probe ``p``: input resolution for spatial probes."""
    shape = net.probe_shape(p)
    if len(shape) != 3:
        return None
    return tuple(net.input_shape[-2:])


def maps_from_stacks(stacks: Tensor, config: ScoreConfig, size) -> Tensor:
    return attribution_map(stacks, config.channel_agg, config.embedding_agg, size)


def mae(a: Tensor, b: Tensor) -> Tensor:
    """Per-map mean absolute difference over the last two axes."""
    return (a - b).abs().mean(dim=(-2, -1))


def variance_from_stacks(stacks: Tensor, channel_agg, binarize: float | None = None) -> Tensor:
    """Variance score of each stack in (B, N, C, H, W) -> (B,).

    Each channel-aggregated dimension map is normalised to [0, 1]
    (optionally thresholded to {0, 1}); the population variance across the
    N dimensions is averaged over positions, so the result is <= 1/4.
    """
    if stacks.shape[-4] < 2:
        raise ValueError(f"variance score needs embedding dim >= 2, got {stacks.shape[-4]}")
    dim_maps = normalize(channel_aggregate(stacks, channel_agg))
    if binarize is not None:
        dim_maps = (dim_maps >= binarize).to(dim_maps.dtype)
    return population_variance(dim_maps, dim=-3).mean(dim=(-2, -1))


def full_maps(net: Network, xs: Tensor, p: int, config: ScoreConfig) -> Tensor:
    stacks = attribute_batch(net, xs, p, config.method)
    return maps_from_stacks(stacks, config, map_size(net, p))


def noise_score(net: Network, x, p: int, config: ScoreConfig, sample_id: int = 0,
                x_noise=None) -> float:
    """Normalised-map MAE between ``x`` and a uniform-noise input.

    ``x_noise`` defaults to the first draw of stream ``sample_id``.
    """
    x = _as_batch(net, x)
    if x_noise is None:
        x_noise = noise_inputs(config.seed, sample_id, net.input_shape, 1)[0]
    xn = _as_batch(net, x_noise)
    with eval_mode(net):
        maps = full_maps(net, torch.cat([x, xn]), p, config)
    return float(mae(maps[0], maps[1]))


def benchmark_score(net: Network, p: int, config: ScoreConfig, sample_id: int = 0,
                    inputs=None) -> float:
    """Noise score between two independent uniform-noise inputs."""
    if inputs is None:
        inputs = noise_inputs(config.seed, sample_id, net.input_shape, 2)
    xn, yn = (_as_batch(net, v) for v in inputs)
    with eval_mode(net):
        maps = full_maps(net, torch.cat([yn, xn]), p, config)
    return float(mae(maps[0], maps[1]))


def variance_score(net: Network, x, p: int, config: ScoreConfig) -> float:
    x = _as_batch(net, x)
    with eval_mode(net):
        stacks = attribute_batch(net, x, p, config.method)
    return float(variance_from_stacks(stacks, config.channel_agg, config.binarize)[0])


@dataclass
class ScoreEntry:
    probe: int
    noise: np.ndarray
    benchmark: np.ndarray
    variance: np.ndarray

    @staticmethod
    def _std(v: np.ndarray) -> float:
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def row(self) -> dict:
        return {
            "probe": self.probe,
            "noise_mean": float(np.mean(self.noise)), "noise_std": self._std(self.noise),
            "benchmark_mean": float(np.mean(self.benchmark)),
            "benchmark_std": self._std(self.benchmark),
            "var_mean": float(np.mean(self.variance)), "var_std": self._std(self.variance),
            "n_samples": len(self.noise),
        }


@dataclass
class ScoreCurve:
    entries: list[ScoreEntry] = field(default_factory=list)
    config: ScoreConfig | None = None

    @property
    def n_samples(self) -> int:
        return len(self.entries[0].noise) if self.entries else 0

    def rows(self) -> list[dict]:
        return [e.row() for e in self.entries]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows()])


def score_curve(net: Network, samples, config: ScoreConfig, sample_ids=None,
                chunk: int = 25, with_variance: bool = True) -> ScoreCurve:
    """Noise, benchmark and variance scores for every probe in ``config``.

    Sample ``k`` draws its noise inputs from RNG stream ``sample_ids[k]``
    (default ``k``), so results do not depend on batching or order.
    """
    if not config.probes:
        raise ValueError("score curve needs at least one probe")
    xs = _as_batch(net, samples)
    ids = list(range(len(xs))) if sample_ids is None else [int(i) for i in sample_ids]
    if len(ids) != len(xs):
        raise ValueError("sample_ids length does not match samples")
    draws = [noise_inputs(config.seed, i, net.input_shape, 2) for i in ids]
    xn = _as_batch(net, np.stack([d[0] for d in draws]))
    yn = _as_batch(net, np.stack([d[1] for d in draws]))
    curve = ScoreCurve(config=config)
    with eval_mode(net):
        for p in config.probes:
            size = map_size(net, p)
            noise, bench, var = [], [], []
            for s in range(0, len(xs), chunk):
                sl = slice(s, s + chunk)
                b = len(xs[sl])
                stacks = attribute_batch(net, torch.cat([xs[sl], xn[sl], yn[sl]]), p, config.method)
                maps = maps_from_stacks(stacks, config, size)
                mx, mn, my = maps[:b], maps[b:2 * b], maps[2 * b:]
                noise.append(mae(mx, mn))
                bench.append(mae(my, mn))
                if with_variance and stacks.shape[1] >= 2:
                    var.append(variance_from_stacks(stacks[:b], config.channel_agg, config.binarize))
            v = torch.cat(var).numpy() if var else np.full(len(xs), np.nan)
            curve.entries.append(ScoreEntry(p, torch.cat(noise).numpy(), torch.cat(bench).numpy(), v))
    return curve


def avg_noise_score(curve: ScoreCurve) -> float:
    """Mean of the per-probe noise scores of a curve."""
    if not curve.entries:
        raise ValueError("empty curve")
    return float(np.mean(curve.column("noise_mean")))
