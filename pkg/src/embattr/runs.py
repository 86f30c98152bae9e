"""Trained-model cache.

Training runs are keyed by the recipe, the constraint settings, a digest of
the training data and a digest of the source files that influence training.
A cached checkpoint is reused only when all four match, so editing any of
those modules forces a retrain.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .io import read_csv, write_csv
from .models import ModelRecipe, build, train
from .nn_layers import load_state, loads_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

_PKG = Path(__file__).parent
TRAINING_SOURCES = ("tensor_core.py", "nn_layers.py", "models.py")
CONSTRAINT_SOURCES = TRAINING_SOURCES + ("constraint.py", "saliency.py", "aggregation.py", "scores.py")


def source_digest(files=TRAINING_SOURCES) -> str:
    h = hashlib.sha256()
    for f in files:
        h.update(f.encode())
        h.update((_PKG / f).read_bytes())
    return h.hexdigest()


def data_digest(dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(dataset.labels, dtype=np.uint8).tobytes())
    return h.hexdigest()


def default_cache_dir() -> Path:
    return Path(os.environ.get("EMBATTR_CACHE", ".embattr_cache"))


def run_key(recipe: ModelRecipe, constraint, train_set) -> dict:
    files = CONSTRAINT_SOURCES if constraint is not None else TRAINING_SOURCES
    return {
        "recipe": recipe.to_dict(),
        "constraint": constraint.to_dict() if constraint is not None else None,
        "data": data_digest(train_set),
        "source": source_digest(files),
    }


def trained_model(recipe: ModelRecipe, train_set, test_set=None, constraint=None,
                  cache_dir=None, progress: bool = False):
    """Train ``recipe`` or load it from the cache. Returns ``(net, log_rows)``.

    The returned network is float64 regardless of the training dtype.
    """
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    cache.mkdir(parents=True, exist_ok=True)
    key = run_key(recipe, constraint, train_set)
    tag = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    stem = f"{recipe.name}-s{recipe.bottleneck}-seed{recipe.seed}-{tag}"
    ckpt, log_csv = cache / f"{stem}.ckpt", cache / f"{stem}.csv"
    net = build(recipe)
    if ckpt.exists() and log_csv.exists():
        tensors, meta = loads_checkpoint(ckpt.read_bytes())
        if meta.get("key") == key:
            load_state(net, tensors)
            rows = [{"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]),
                     "accuracy": float(r["accuracy"])} for r in read_csv(log_csv)]
            return net, rows
    result = train(net, train_set, recipe, constraint=constraint, test_set=test_set,
                   progress=progress)
    net.to(torch.float64)
    save_checkpoint(net, ckpt, {"key": key})
    write_csv(result.log, log_csv, ["epoch", "split", "loss", "accuracy"])
    return net, result.log
