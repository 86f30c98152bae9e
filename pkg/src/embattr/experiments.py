"""Experiment harnesses built on the score functions.

* :func:`run_drift`: noise score under additive Gaussian drift.
* :func:`run_layer_randomization`: single-layer re-initialisation vs accuracy.
* :func:`run_variance_curves`: binarised variance curves, trained vs untrained.
* :func:`constrained_loss` (from :mod:`embattr.constraint`): training loss
  with score terms.
* :func:`sparsity_study`: sparsity of aggregated maps per scheme.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .aggregation import (Aggregator, attribution_map, channel_aggregate, normalize,
                          population_variance, sparsity)
from .models import evaluate
from .nn_layers import Network, eval_mode, init_parameters
from .constraint import ConstraintCfg, constrained_loss, score_terms, training_loss  # noqa: F401
from .scores import ScoreConfig, _as_batch, avg_noise_score, full_maps, mae, noise_inputs, score_curve

log = logging.getLogger(__name__)

# spawn-key tags separating RNG streams that share a user seed
_DRIFT_STREAM = 102
_PICK_STREAM = 103

DEFAULT_LAMBDA_GRID = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0)


def spearman(xs, ys) -> float:
    """Spearman rank correlation (average ranks for ties).

    Returns NaN when either ranking has zero variance.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("spearman needs at least 2 pairs")
    rx = rankdata(x) - (len(x) + 1) / 2
    ry = rankdata(y) - (len(y) + 1) / 2
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return float("nan")
    return float(np.clip(rx @ ry / den, -1.0, 1.0))


def pick_samples(n_total: int, n: int, seed: int) -> np.ndarray:
    """``n`` distinct indices out of ``n_total``, reproducible from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_PICK_STREAM,)))
    return np.sort(rng.choice(n_total, size=min(n, n_total), replace=False))


# -- dataset drift ------------------------------------------------------------

@dataclass(frozen=True)
class DriftSpec:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    clamp: bool = True
    n_samples: int = 25
    probe: int = 2
    seed: int = 0

    def __post_init__(self):
        lams = tuple(float(v) for v in self.lambdas)
        if any(v < 0 for v in lams):
            raise ValueError("drift amounts must be >= 0")
        if 0.0 not in lams:
            lams = (0.0,) + lams
        object.__setattr__(self, "lambdas", tuple(sorted(set(lams))))


@dataclass
class DriftResult:
    rows: list[dict]
    rho: float
    rho_raw: float
    excluded: list[int] = field(default_factory=list)


def drift_noise(seed: int, sample_id: int, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_DRIFT_STREAM, int(sample_id))))
    return rng.standard_normal(tuple(shape))


def run_drift(net: Network, images, spec: DriftSpec, config: ScoreConfig,
              sample_ids=None) -> DriftResult:
    """Relative noise-score change (N(x) - N(x_lam)) / N(x) per drift amount.

    Each sample keeps one Gaussian drift direction and one noise reference
    across the whole grid. Samples with N(x) = 0 are dropped.
    """
    images = np.asarray(images)
    if sample_ids is None:
        sample_ids = pick_samples(len(images), spec.n_samples, spec.seed)
    sample_ids = [int(i) for i in sample_ids]
    xs = images[sample_ids].reshape(len(sample_ids), *net.input_shape)
    ys = np.stack([drift_noise(spec.seed, i, net.input_shape) for i in sample_ids])
    xn = _as_batch(net, np.stack([noise_inputs(config.seed, i, net.input_shape, 1)[0]
                                  for i in sample_ids]))
    p = spec.probe
    with eval_mode(net):
        ref = full_maps(net, xn, p, config)
        raw = {}
        for lam in spec.lambdas:
            xl = xs + lam * ys
            if spec.clamp:
                xl = np.clip(xl, 0.0, 1.0)
            raw[lam] = mae(full_maps(net, _as_batch(net, xl), p, config), ref).numpy()
    base = raw[0.0]
    keep = base > 0
    excluded = [sid for sid, k in zip(sample_ids, keep) if not k]
    if excluded:
        log.warning("drift: %d samples with zero noise score excluded", len(excluded))
    rows = []
    for lam in spec.lambdas:
        rel = (base[keep] - raw[lam][keep]) / base[keep]
        rows.append({"lambda": lam, "relative_mean": float(rel.mean()),
                     "relative_std": float(rel.std(ddof=1)) if rel.size > 1 else 0.0,
                     "noise_mean": float(raw[lam][keep].mean()), "n_samples": int(keep.sum())})
    lams = [r["lambda"] for r in rows]
    rho = spearman([r["relative_mean"] for r in rows], lams)
    rho_raw = spearman([r["noise_mean"] for r in rows], lams)
    return DriftResult(rows, rho, rho_raw, excluded)


# -- layer randomisation ------------------------------------------------------

def randomizable_layers(net: Network) -> list[str]:
    """Conv and linear layers of the encoder, in forward order."""
    return [n for n, m in net.encoder_layers()
            if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d, torch.nn.Linear))]


def randomize(net: Network, layer: str | None, seed: int) -> Network:
    """Copy of ``net`` with one layer re-initialised (``None``: no change, ``"All"``: every layer)."""
    out = copy.deepcopy(net)
    gen = torch.Generator().manual_seed(seed)
    if layer is None or layer == "None":
        return out
    if layer == "All":
        init_parameters(out, gen)
        for m in out.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.reset_running_stats()
        return out
    layers = dict(out.encoder_layers())
    if layer not in layers:
        raise KeyError(f"unknown layer {layer!r}; have {sorted(layers)}")
    init_parameters(layers[layer], gen)
    return out


def run_layer_randomization(net: Network, test_set, config: ScoreConfig, n_samples: int = 25,
                            seed: int = 0, layers=None) -> tuple[list[dict], float]:
    """Accuracy and average noise score per randomised layer.

    Rows are ``None``, each layer in ``layers`` (default: every conv/linear
    encoder layer) and ``All``. Returns the rows and Spearman rho between
    average noise score and test accuracy.
    """
    targets = ["None"] + list(layers if layers is not None else randomizable_layers(net)) + ["All"]
    ids = pick_samples(len(test_set.images), n_samples, seed)
    samples = np.asarray(test_set.images)[ids]
    rows = []
    for k, name in enumerate(targets):
        m = randomize(net, name, seed + 1000 + k)
        acc = evaluate(m, test_set.images, test_set.labels)["accuracy"]
        curve = score_curve(m, samples, config, sample_ids=ids, with_variance=False)
        rows.append({"layer": name, "avg_noise": avg_noise_score(curve), "accuracy": acc})
        log.info("randomized %s: %s", name, rows[-1])
    rho = spearman([r["avg_noise"] for r in rows], [r["accuracy"] for r in rows])
    return rows, rho


# -- variance curves ----------------------------------------------------------

def run_variance_curves(models: dict, samples, config: ScoreConfig, sample_ids=None) -> list[dict]:
    """Binarised (default threshold 0.5) variance score per probe for each model."""
    if config.binarize is None:
        config = config.with_(binarize=0.5)
    rows = []
    for name, net in models.items():
        curve = score_curve(net, samples, config, sample_ids=sample_ids)
        for r in curve.rows():
            rows.append({"model": name, "probe": r["probe"], "var_mean": r["var_mean"],
                         "var_std": r["var_std"], "n_samples": r["n_samples"]})
    return rows


# -- sparsity -----------------------------------------------------------------

DEFAULT_SCHEMES = tuple((c, e) for c in ("mean", "abs", "var") for e in ("mean", "abs", "var"))


def scheme_sparsity(stacks: torch.Tensor, channel_agg, embedding_agg, size=None) -> torch.Tensor:
    """Sparsity of each sample's aggregated map; mean-aggregated maps use |map|."""
    m = attribution_map(stacks, channel_agg, embedding_agg, size, normalized=False)
    signed = Aggregator.MEAN in (Aggregator.parse(channel_agg), Aggregator.parse(embedding_agg))
    return torch.as_tensor(sparsity(m, absolute=signed)).reshape(-1)


def var_vs_abs(ca: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of the population-variance and mean-absolute embedding maps.

    ``ca`` (..., N, H, W) is min-max normalised to [0, 1] as a whole first, so
    every per-position multiset lies in [0, 1].
    """
    x = normalize(ca, ndim=3)
    v = population_variance(x, dim=-3).mean(dim=(-2, -1))
    a = x.abs().mean(dim=-3).mean(dim=(-2, -1))
    return v, a


def sparsity_study(stacks: torch.Tensor, probe: int, schemes=DEFAULT_SCHEMES, size=None) -> list[dict]:
    """Sparsity per aggregation scheme for stacks (B, N, C, H, W).

    Besides one row per scheme, emits a ``check`` row comparing the variance
    and mean-absolute embedding aggregations on [0, 1]-normalised
    ``abs``-channel maps, which must satisfy var <= abs sample by sample.
    """
    rows = []
    for c, e in schemes:
        s = scheme_sparsity(stacks, c, e, size)
        rows.append({"probe": probe, "scheme": f"C={c},E={e}", "sparsity": float(s.mean()),
                     "n_samples": int(s.numel())})
    v, a = var_vs_abs(channel_aggregate(stacks, "abs"))
    rows.append({"probe": probe, "scheme": "check:var<=abs", "sparsity": float((v <= a).double().mean()),
                 "n_samples": int(v.numel())})
    return rows


# -- constrained training table ----------------------------------------------

BOTTLENECKS = (2, 3, 5, 10)
TABLE_SEEDS = (0, 1, 2, 3)
TABLE_CONFIGS = {
    "orig": None,
    "NS": ConstraintCfg(lambda_noise=1.0),
    "VS": ConstraintCfg(lambda_var=1.0),
    "NS+VS": ConstraintCfg(lambda_noise=0.1, lambda_var=0.1),
}


def constrained_table(train_set, test_set, configs=("orig", "NS+VS"), bottlenecks=BOTTLENECKS,
                      seeds=TABLE_SEEDS, dtype: str = "float32", cache_dir=None,
                      progress: bool = False) -> list[dict]:
    """Final test accuracy (%) of ``constrained_ae`` per config, bottleneck and seed.

    ``configs`` are keys of :data:`TABLE_CONFIGS` or ``(name, ConstraintCfg)``
    pairs. Runs go through the training cache, so a repeated call is cheap.
    """
    from .models import ModelRecipe
    from .runs import trained_model

    rows = []
    for item in configs:
        name, cfg = (item, TABLE_CONFIGS[item]) if isinstance(item, str) else item
        for s in bottlenecks:
            for seed in seeds:
                recipe = ModelRecipe("constrained_ae", bottleneck=s, seed=seed, dtype=dtype)
                _, log_rows = trained_model(recipe, train_set, test_set, constraint=cfg,
                                            cache_dir=cache_dir, progress=progress)
                acc = [r["accuracy"] for r in log_rows if r["split"] == "test"][-1]
                rows.append({"config": name, "bottleneck": s, "seed": seed, "accuracy": 100.0 * acc})
                log.info("table %s s=%d seed=%d: %.2f", name, s, seed, rows[-1]["accuracy"])
    return rows


def summarize_table(rows: list[dict]) -> list[dict]:
    """Mean and sample std of accuracy per (config, bottleneck)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["config"], r["bottleneck"]), []).append(r["accuracy"])
    out = []
    for (name, s), accs in groups.items():
        a = np.asarray(accs)
        out.append({"config": name, "bottleneck": s, "mean": float(a.mean()),
                    "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0, "n_seeds": len(a)})
    return out
