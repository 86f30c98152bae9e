import numpy as np
import pytest
import torch

from embattr.constraint import ConstraintCfg, training_loss
from embattr.io import IdxDataset
from embattr.models import (EPOCHS_BY_BOTTLENECK, ModelRecipe, TrainingDiverged, build, evaluate,
                            reinit_layer, train)


def test_drift_ae_shapes():
    net = build(ModelRecipe("drift_ae"))
    assert net.embedding_dim == 32
    assert net.probe_shape(2) == (4, 7, 7)
    assert net.probe_shape(1) == (8, 14, 14)
    out, _ = net(torch.zeros(2, 1, 28, 28, dtype=torch.float64))
    assert out["embedding"].shape == (2, 32)
    assert out["reconstruction"].shape == (2, 1, 28, 28)
    assert "logits" not in out


@pytest.mark.parametrize("s", [2, 3, 5, 10])
def test_constrained_ae_shapes(s):
    net = build(ModelRecipe("constrained_ae", bottleneck=s))
    out, cap = net(torch.zeros(3, 1, 28, 28, dtype=torch.float64), capture=(2,))
    assert out["logits"].shape == (3, 10)
    assert out["embedding"].shape == (3, s)
    assert out["reconstruction"].shape == (3, 1, 28, 28)
    assert cap[2].shape == (3, 4, 28, 28)


def test_mnist_cnn_has_no_decoder():
    net = build(ModelRecipe("mnist_cnn", bottleneck=10))
    out, _ = net(torch.zeros(1, 1, 28, 28, dtype=torch.float64))
    assert set(out) == {"embedding", "logits"}


def test_epoch_schedule():
    assert {s: ModelRecipe("constrained_ae", bottleneck=s).n_epochs for s in (2, 3, 5, 10)} == \
        EPOCHS_BY_BOTTLENECK == {2: 20, 3: 15, 5: 10, 10: 5}
    assert ModelRecipe("drift_ae").n_epochs == 5


def test_unknown_recipe():
    with pytest.raises(ValueError, match="unknown recipe"):
        ModelRecipe("resnet18")


def test_same_seed_bit_identical_init():
    a = build(ModelRecipe("drift_ae", seed=11)).state_dict()
    b = build(ModelRecipe("drift_ae", seed=11)).state_dict()
    c = build(ModelRecipe("drift_ae", seed=12)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_reinit_layer_only_touches_target():
    net = build(ModelRecipe("mnist_cnn", seed=0))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    reinit_layer(net, "block2.0", seed=5)
    after = net.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed == {"blocks.1.0.weight", "blocks.1.0.bias"}
    with pytest.raises(KeyError):
        reinit_layer(net, "block9.0", seed=0)


@pytest.fixture(scope="module")
def tiny(mnist_train, mnist_test):
    return mnist_train.subset(slice(0, 320)), mnist_test.subset(slice(0, 200))


def _train(tiny, constraint=None, seed=0, epochs=1):
    tr, te = tiny
    recipe = ModelRecipe("constrained_ae", bottleneck=3, seed=seed, epochs=epochs)
    net = build(recipe)
    return train(net, tr, recipe, constraint=constraint, test_set=te)


def test_zero_coefficients_follow_unconstrained_trajectory(tiny):
    ref = _train(tiny)
    zero = _train(tiny, ConstraintCfg(lambda_noise=0.0, lambda_var=0.0, period=1))
    for k, v in ref.net.state_dict().items():
        assert torch.equal(v, zero.net.state_dict()[k]), k
    assert ref.log == zero.log


def test_huge_period_matches_unconstrained_after_first_step(tiny):
    """With a period longer than the run only step 0 carries score terms."""
    cfg = ConstraintCfg(lambda_noise=0.1, lambda_var=0.1, period=10**9)
    tr, _ = tiny
    recipe = ModelRecipe("constrained_ae", bottleneck=3, seed=0, epochs=1)
    a, b = build(recipe), build(recipe)
    x = torch.as_tensor(tr.images[:64], dtype=torch.float64).reshape(-1, 1, 28, 28)
    y = torch.as_tensor(tr.labels[:64].astype(np.int64))
    for step in range(1, 5):
        la, _ = training_loss(a, x, y, cfg, step=step)
        lb, _ = training_loss(b, x, y, None, step=step)
        assert torch.equal(la, lb)


def test_training_is_deterministic(tiny):
    a, b = _train(tiny, seed=3), _train(tiny, seed=3)
    assert a.log == b.log
    assert all(torch.equal(v, b.net.state_dict()[k]) for k, v in a.net.state_dict().items())


def test_log_rows(tiny):
    res = _train(tiny, epochs=2)
    assert [(r["epoch"], r["split"]) for r in res.log] == [(1, "train"), (1, "test"),
                                                           (2, "train"), (2, "test")]
    assert all(np.isfinite(r["loss"]) for r in res.log)
    assert res.test_accuracy == res.log[-1]["accuracy"]


def test_constraint_active_training_runs(tiny):
    res = _train(tiny, ConstraintCfg(lambda_noise=0.1, lambda_var=0.1, period=2))
    assert np.isfinite(res.log[-1]["loss"])


def test_zero_epochs_near_chance(mnist_test):
    accs = []
    for seed in range(4):
        recipe = ModelRecipe("constrained_ae", bottleneck=10, seed=seed, epochs=0)
        res = train(build(recipe), mnist_test.subset(slice(0, 10)), recipe, test_set=mnist_test)
        assert [r["epoch"] for r in res.log] == [0]
        accs.append(res.test_accuracy)
    assert 0.04 < np.mean(accs) < 0.18


def test_divergence_guard(tiny):
    tr, _ = tiny
    bad = IdxDataset(tr.images.copy(), tr.labels)
    bad.images[5, 3, 3] = np.nan
    recipe = ModelRecipe("constrained_ae", bottleneck=2, epochs=1, batch_size=320)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(build(recipe), bad, recipe)


def test_constraint_needs_classifier(tiny):
    tr, _ = tiny
    recipe = ModelRecipe("drift_ae", epochs=1)
    with pytest.raises(ValueError):
        train(build(recipe), tr, recipe, constraint=ConstraintCfg(lambda_var=0.1))


def test_short_training_beats_chance(mnist_train, mnist_test):
    recipe = ModelRecipe("mnist_cnn", bottleneck=10, seed=0, epochs=2)
    net = build(recipe)
    train(net, mnist_train.subset(slice(0, 2000)), recipe)
    assert evaluate(net, mnist_test.images[:500], mnist_test.labels[:500])["accuracy"] > 0.5
