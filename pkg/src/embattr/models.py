"""Concrete architectures and the training loop.

Three recipes:

* ``drift_ae``: convolutional autoencoder with a 32-dim bottleneck, used for
  the dataset-drift study.
* ``constrained_ae``: two conv blocks, a linear bottleneck of size ``s``, a
  10-way classifier on the bottleneck and a fully connected decoder. Trained
  with optional score constraints.
* ``mnist_cnn``: the ``constrained_ae`` encoder with only the classifier head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .nn_layers import (Adam, LayerSpec, Network, conv, eval_mode, init_parameters,
                        loss_cross_entropy, loss_mse)

log = logging.getLogger(__name__)

RECIPES = ("drift_ae", "constrained_ae", "mnist_cnn")

# epochs per bottleneck size for constrained_ae
EPOCHS_BY_BOTTLENECK = {2: 20, 3: 15, 5: 10, 10: 5}
DRIFT_AE_EPOCHS = 5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelRecipe:
    name: str
    bottleneck: int = 10
    seed: int = 0
    epochs: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    dtype: str = "float64"

    def __post_init__(self):
        if self.name not in RECIPES:
            raise ValueError(f"unknown recipe {self.name!r}; expected one of {RECIPES}")
        if self.bottleneck < 1:
            raise ValueError("bottleneck must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        if self.name == "drift_ae":
            return DRIFT_AE_EPOCHS
        return EPOCHS_BY_BOTTLENECK.get(self.bottleneck, 5)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)


def _constrained_encoder(s: int) -> list[list[LayerSpec]]:
    return [
        [conv("8/5/1/2"), LayerSpec("batchnorm"), LayerSpec("softplus")],
        [conv("4/5/1/2"), LayerSpec("batchnorm"), LayerSpec("softplus")],
        [LayerSpec("flatten"), LayerSpec("linear", units=s)],
    ]


def build(recipe: ModelRecipe, input_shape=(1, 28, 28)) -> Network:
    """Build and initialise the network for ``recipe`` (seeded)."""
    h, w = input_shape[1:]
    if recipe.name == "drift_ae":
        pool = LayerSpec("maxpool", kernel=2, ceil_mode=True)
        blocks = [
            [conv("8/5/1/2"), LayerSpec("batchnorm"), LayerSpec("relu"), pool],
            [conv("4/5/1/2"), LayerSpec("batchnorm"), LayerSpec("relu"), pool],
            [conv("2/5/1/2"), LayerSpec("batchnorm"), pool],
        ]
        up = LayerSpec("upsample_nn", scale=2)
        decoder = [
            up, conv("4/5/1/2"), LayerSpec("batchnorm"), LayerSpec("relu"),
            up, conv("8/5/1/2"), LayerSpec("batchnorm"), LayerSpec("relu"),
            up, conv("1/5/1/2"), LayerSpec("sigmoid"),
            LayerSpec("crop", size=(h, w)),
        ]
        net = Network(blocks, input_shape, decoder=decoder, name="drift_ae")
    elif recipe.name == "constrained_ae":
        net = Network(
            _constrained_encoder(recipe.bottleneck), input_shape,
            classifier=[LayerSpec("linear", units=10)],
            decoder=[LayerSpec("linear", units=32), LayerSpec("relu"),
                     LayerSpec("linear", units=math.prod(input_shape)), LayerSpec("sigmoid")],
            name="constrained_ae",
        )
    else:
        net = Network(_constrained_encoder(recipe.bottleneck), input_shape,
                      classifier=[LayerSpec("linear", units=10)], name="mnist_cnn")
    init_parameters(net, torch.Generator().manual_seed(recipe.seed))
    net.recipe = recipe
    return net


def reinit_layer(net: Network, name: str, seed: int) -> None:
    """Re-initialise one named encoder layer (``block<k>.<idx>``) in place."""
    layers = dict(net.encoder_layers())
    if name not in layers:
        raise KeyError(f"no parameterised encoder layer {name!r}; have {sorted(layers)}")
    init_parameters(layers[name], torch.Generator().manual_seed(seed))


def base_loss(net: Network, out: dict, x, y) -> torch.Tensor:
    """Reconstruction and/or classification loss, depending on the heads present."""
    loss = x.new_zeros(())
    if "reconstruction" in out:
        loss = loss + loss_mse(out["reconstruction"], x)
    if "logits" in out and y is not None:
        loss = loss + loss_cross_entropy(out["logits"], y)
    return loss


def evaluate(net: Network, images, labels, batch_size: int = 1000) -> dict:
    """Mean loss and (if there is a classifier) accuracy on a labelled set."""
    dtype = next(net.parameters()).dtype
    x_all = torch.as_tensor(images, dtype=dtype).reshape(-1, *net.input_shape)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    total, correct = 0.0, 0
    with eval_mode(net), torch.no_grad():
        for i in range(0, len(x_all), batch_size):
            x, y = x_all[i:i + batch_size], y_all[i:i + batch_size]
            out, _ = net(x)
            total += float(base_loss(net, out, x, y)) * len(x)
            if "logits" in out:
                correct += int((out["logits"].argmax(1) == y).sum())
    n = len(x_all)
    acc = correct / n if net.classifier is not None else float("nan")
    return {"loss": total / n, "accuracy": acc}


@dataclass
class TrainResult:
    net: Network
    log: list[dict] = field(default_factory=list)

    @property
    def test_accuracy(self) -> float:
        rows = [r for r in self.log if r["split"] == "test"]
        return rows[-1]["accuracy"] if rows else float("nan")


def train(net: Network, train_set, recipe: ModelRecipe, constraint=None, test_set=None,
          progress: bool = False) -> TrainResult:
    """Train ``net`` with Adam on ``train_set`` for ``recipe.n_epochs`` epochs.

    ``train_set``/``test_set`` expose ``images`` (n, 28, 28) in [0, 1] and
    ``labels``. ``constraint`` is an optional
    :class:`embattr.constraint.ConstraintCfg`; score terms are added every
    ``constraint.period`` mini-batches. The shuffle order and the constraint's
    noise inputs come from separate seeded streams, so a constraint with both
    coefficients at zero reproduces the unconstrained trajectory exactly.
    """
    from .constraint import training_loss

    if constraint is not None and constraint.active and net.classifier is None:
        raise ValueError("score constraints need the constrained_ae recipe")
    dtype = recipe.torch_dtype
    net.to(dtype)
    images = torch.as_tensor(np.asarray(train_set.images), dtype=dtype).reshape(-1, *net.input_shape)
    labels = torch.as_tensor(np.asarray(train_set.labels), dtype=torch.long)
    n = len(images)
    shuffle = torch.Generator().manual_seed(recipe.seed)
    opt = Adam(net.parameters(), lr=recipe.lr)
    result = TrainResult(net)
    step = 0
    for epoch in range(1, recipe.n_epochs + 1):
        net.train()
        perm = torch.randperm(n, generator=shuffle)
        run_loss, run_correct = 0.0, 0
        for start in range(0, n, recipe.batch_size):
            idx = perm[start:start + recipe.batch_size]
            x, y = images[idx], labels[idx]
            loss, out = training_loss(net, x, y, constraint, step=step, seed=recipe.seed)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            run_loss += float(loss.detach()) * len(idx)
            if "logits" in out:
                run_correct += int((out["logits"].detach().argmax(1) == y).sum())
            step += 1
        acc = run_correct / n if net.classifier is not None else float("nan")
        result.log.append({"epoch": epoch, "split": "train", "loss": run_loss / n, "accuracy": acc})
        if test_set is not None:
            ev = evaluate(net, test_set.images, test_set.labels)
            result.log.append({"epoch": epoch, "split": "test", **ev})
        if progress:
            log.info("%s epoch %d: %s", net.name, epoch, result.log[-1])
    if recipe.n_epochs == 0 and test_set is not None:
        ev = evaluate(net, test_set.images, test_set.labels)
        result.log.append({"epoch": 0, "split": "test", **ev})
    return result


def fresh_copy(net: Network) -> Network:
    """Deep copy (parameters and buffers) of a built network."""
    import copy

    return copy.deepcopy(net)


def with_seed(recipe: ModelRecipe, seed: int) -> ModelRecipe:
    return replace(recipe, seed=seed)
