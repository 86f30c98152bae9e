"""Command-line entry point.

Every subcommand writes its CSV/PGM artifacts and a ``manifest.txt`` into the
output directory. The manifest is a ``key=value`` file that can be passed
back through ``--config`` to repeat the run.

Output directory precedence: ``--out`` flag, then ``$EMBATTR_OUT``, then the
config file, then ``./out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__

log = logging.getLogger("embattr")

COMMANDS = ("train", "attribute", "noise-curve", "var-curve", "randomize-layers", "drift",
            "constrained-train", "sparsity-study")

# recipe used when a command has to train its own model
DEFAULT_RECIPE = {
    "train": "drift_ae", "attribute": "drift_ae", "noise-curve": "drift_ae",
    "var-curve": "drift_ae", "randomize-layers": "mnist_cnn", "drift": "drift_ae",
    "sparsity-study": "drift_ae",
}


class CliError(Exception):
    """User-facing failure; reported as a single line."""


# -- argument parsing -----------------------------------------------------------

def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--seed", type=int, help="global seed (required)")
    g.add_argument("--config", type=Path, help="key=value file; flags override it")
    g.add_argument("--data-dir", type=Path, help="directory with the MNIST IDX files")
    g.add_argument("--out", type=Path, help="output directory (env EMBATTR_OUT)")
    g.add_argument("--checkpoint", type=Path, help="model checkpoint; trained if absent")
    g.add_argument("--recipe", choices=("drift_ae", "constrained_ae", "mnist_cnn"))
    g.add_argument("--bottleneck", type=int, help="constrained_ae / mnist_cnn bottleneck size")
    g.add_argument("--epochs", type=int, help="override the recipe's epoch count")
    g.add_argument("--train-dtype", choices=("float32", "float64"),
                   help="training precision (analysis always runs at float64)")
    g.add_argument("--cache-dir", type=Path, help="trained-model cache")
    s = common.add_argument_group("scores")
    s.add_argument("--method", help="vanilla | actxgrad | gradcam")
    s.add_argument("--probe", type=int, help="probe layer p")
    s.add_argument("--probes", type=_csv_ints, help="comma-separated probes for curves")
    s.add_argument("--C", dest="channel_agg", help="channel aggregator: mean | abs | var")
    s.add_argument("--E", dest="embedding_agg", help="embedding aggregator: mean | abs | var")
    s.add_argument("--n-samples", type=int, help="number of test samples")
    s.add_argument("--binarize", type=float, help="variance-score threshold")
    c = common.add_argument_group("experiments")
    c.add_argument("--sample", type=int, help="test-set index (attribute)")
    c.add_argument("--lambda-grid", type=_csv_floats, help="drift amounts")
    c.add_argument("--no-clamp", dest="clamp", action="store_const", const=False,
                   help="do not clamp drifted samples to [0, 1]")
    c.add_argument("--lambda-noise", type=float, help="noise-score constraint weight")
    c.add_argument("--lambda-var", type=float, help="variance-score constraint weight")
    c.add_argument("--period", type=int, help="apply the constraint every N mini-batches")
    c.add_argument("--bottlenecks", type=_csv_ints, help="constrained-train: bottleneck sizes")
    c.add_argument("--seeds", type=_csv_ints, help="constrained-train: seeds")
    c.add_argument("--configs", help="constrained-train: comma-separated of orig,NS,VS,NS+VS")

    parser = argparse.ArgumentParser(prog="embattr", description="Embedding attribution toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    helps = {
        "train": "train a model and save its checkpoint",
        "attribute": "attribution heatmap (PGM) and sparsity for one sample",
        "noise-curve": "noise/benchmark/variance score curve over probes",
        "var-curve": "binarised variance curves, trained vs untrained",
        "randomize-layers": "per-layer randomisation vs accuracy",
        "drift": "noise score under dataset drift",
        "constrained-train": "accuracy table for score-constrained training",
        "sparsity-study": "sparsity per aggregation scheme",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


DEFAULTS = {
    "data_dir": None, "checkpoint": None, "recipe": None, "bottleneck": 10, "epochs": None,
    "train_dtype": "float32", "cache_dir": None, "method": "actxgrad", "probe": 2,
    "probes": None, "channel_agg": "abs", "embedding_agg": "abs", "n_samples": None,
    "binarize": None, "sample": 0, "lambda_grid": None, "clamp": True, "lambda_noise": 0.0,
    "lambda_var": 0.0, "period": 20, "bottlenecks": [2, 3, 5, 10], "seeds": [0, 1, 2, 3],
    "configs": "orig,NS+VS",
}

_PARSERS = {
    "seed": int, "bottleneck": int, "epochs": int, "probe": int, "n_samples": int, "sample": int,
    "period": int, "binarize": float, "lambda_noise": float, "lambda_var": float,
    "probes": _csv_ints, "lambda_grid": _csv_floats, "bottlenecks": _csv_ints, "seeds": _csv_ints,
    "clamp": lambda v: v.lower() in ("1", "true", "yes"),
    "data_dir": Path, "checkpoint": Path, "cache_dir": Path, "out": Path,
}

# manifest entries that describe the run rather than configure it
_RECORD_ONLY = {"command", "version", "checkpoint_sha256", "rho", "rho_raw", "sparsity"}


def read_config(path: Path) -> dict:
    """Parse a ``key=value`` config file (a run manifest is a valid config)."""
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key=value")
        key = key.strip().replace("-", "_")
        if key.startswith("sha256:") or key in _RECORD_ONLY:
            continue
        if key not in DEFAULTS and key not in ("seed", "out"):
            raise CliError(f"{path}:{n}: unknown config key {key!r}")
        value = value.strip()
        if value in ("", "None"):
            out[key] = None
            continue
        try:
            out[key] = _PARSERS.get(key, str)(value)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise CliError(f"{path}:{n}: bad value for {key}: {e}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, environment and flags into one config."""
    cfg = dict(DEFAULTS)
    cfg["recipe"] = DEFAULT_RECIPE.get(args.command)
    file_cfg = read_config(args.config) if args.config else {}
    cfg.update(file_cfg)
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("config", "command", "verbose")}
    cfg.update(flags)
    if args.out is not None:
        cfg["out"] = args.out
    elif os.environ.get("EMBATTR_OUT"):
        cfg["out"] = Path(os.environ["EMBATTR_OUT"])
    else:
        cfg["out"] = Path(cfg.get("out") or "out")
    if cfg.get("seed") is None:
        raise CliError("--seed is required")
    cfg["command"] = args.command
    return cfg


def validate(cfg: dict) -> None:
    """Check every path and value before any compute starts."""
    from .io import find_mnist

    data = find_mnist(cfg["data_dir"])
    if data is None:
        where = cfg["data_dir"] or "$EMBATTR_MNIST, ./data/mnist or ../data/mnist"
        raise CliError(f"MNIST IDX files not found in {where}")
    cfg["data_dir"] = data
    if cfg["checkpoint"] is not None and cfg["command"] != "train" and not Path(cfg["checkpoint"]).is_file():
        raise CliError(f"checkpoint not found: {cfg['checkpoint']}")
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise CliError(f"output path is not a directory: {out}")
    try:
        from .aggregation import Aggregator
        from .saliency import SaliencyMethod

        SaliencyMethod.parse(cfg["method"])
        Aggregator.parse(cfg["channel_agg"])
        Aggregator.parse(cfg["embedding_agg"])
    except ValueError as e:
        raise CliError(str(e)) from None
    if cfg["binarize"] is not None and not 0 < cfg["binarize"] < 1:
        raise CliError("--binarize must lie in (0, 1)")
    if cfg["n_samples"] is not None and cfg["n_samples"] < 1:
        raise CliError("--n-samples must be >= 1")
    if cfg["period"] < 1:
        raise CliError("--period must be >= 1")
    if cfg["lambda_noise"] < 0 or cfg["lambda_var"] < 0:
        raise CliError("constraint weights must be >= 0")
    out.mkdir(parents=True, exist_ok=True)


# -- helpers --------------------------------------------------------------------

def _recipe(cfg: dict, seed: int | None = None):
    from .models import ModelRecipe

    try:
        return ModelRecipe(cfg["recipe"], bottleneck=cfg["bottleneck"],
                           seed=cfg["seed"] if seed is None else seed, epochs=cfg["epochs"],
                           dtype=cfg["train_dtype"])
    except ValueError as e:
        raise CliError(str(e)) from None


def _constraint(cfg: dict):
    from .constraint import ConstraintCfg

    if cfg["lambda_noise"] == 0 and cfg["lambda_var"] == 0:
        return None
    return ConstraintCfg(cfg["lambda_noise"], cfg["lambda_var"], cfg["period"],
                         probe=cfg["probe"], method=cfg["method"],
                         channel_agg=cfg["channel_agg"], embedding_agg=cfg["embedding_agg"])


def _datasets(cfg: dict):
    from .io import load_mnist

    return load_mnist(cfg["data_dir"], "train"), load_mnist(cfg["data_dir"], "test")


def load_model(path: Path):
    """Rebuild a network from a checkpoint written by ``train``."""
    from .models import ModelRecipe, build
    from .nn_layers import CheckpointError, load_state, loads_checkpoint

    try:
        tensors, meta = loads_checkpoint(Path(path).read_bytes())
    except CheckpointError as e:
        raise CliError(f"{path}: {e}") from None
    rec = meta.get("recipe") or meta.get("key", {}).get("recipe")
    if rec is None:
        raise CliError(f"{path}: checkpoint has no recipe metadata")
    net = build(ModelRecipe(**rec))
    try:
        load_state(net, tensors)
    except CheckpointError as e:
        raise CliError(f"{path}: {e}") from None
    return net


def get_model(cfg: dict, train_set, test_set):
    """Checkpoint if given, otherwise train (through the cache)."""
    from .io import file_sha256
    from .runs import trained_model

    if cfg["checkpoint"] is not None:
        cfg["checkpoint_sha256"] = file_sha256(cfg["checkpoint"])
        return load_model(cfg["checkpoint"])
    net, _ = trained_model(_recipe(cfg), train_set, test_set, constraint=_constraint(cfg),
                           cache_dir=cfg["cache_dir"])
    return net


def _score_config(cfg: dict, probes=None):
    from .scores import ScoreConfig

    return ScoreConfig(cfg["method"], cfg["channel_agg"], cfg["embedding_agg"],
                       tuple(probes if probes is not None else [cfg["probe"]]),
                       seed=cfg["seed"], binarize=cfg["binarize"])


def _curve_probes(cfg: dict, net) -> list[int]:
    probes = cfg["probes"] or [p for p in net.probes if p > 0]
    for p in probes:
        if p not in net.probes:
            raise CliError(f"probe {p} not found; valid probes are {net.probes}")
    return probes


def _check_probe(cfg: dict, net) -> None:
    if cfg["probe"] not in net.probes:
        raise CliError(f"probe {cfg['probe']} not found; valid probes are {net.probes}")


def _manifest_config(cfg: dict) -> dict:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, Path):
            v = str(v)
        out[k] = "None" if v is None else v
    out["version"] = __version__
    return out


def finish(cfg: dict, artifacts: list[Path], extra: dict | None = None) -> None:
    from .io import write_manifest

    record = dict(cfg)
    record.update(extra or {})
    write_manifest(_manifest_config(record), Path(cfg["out"]) / "manifest.txt", artifacts)


# -- commands -------------------------------------------------------------------

def cmd_train(cfg):
    from .io import write_csv
    from .nn_layers import save_checkpoint
    from .runs import trained_model

    tr, te = _datasets(cfg)
    recipe, constraint = _recipe(cfg), _constraint(cfg)
    net, rows = trained_model(recipe, tr, te, constraint=constraint, cache_dir=cfg["cache_dir"])
    out = Path(cfg["out"])
    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] is not None else out / f"{recipe.name}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt, {"recipe": recipe.to_dict(),
                                "constraint": constraint.to_dict() if constraint else None})
    log_csv = out / "train_log.csv"
    write_csv(rows, log_csv, ["epoch", "split", "loss", "accuracy"])
    test = [r for r in rows if r["split"] == "test"]
    if test:
        print(f"final test loss={test[-1]['loss']:.6g} accuracy={test[-1]['accuracy']:.6g}")
    print(f"checkpoint: {ckpt}")
    finish(cfg, [ckpt, log_csv])


def cmd_attribute(cfg):
    from .aggregation import Aggregator, attribution_map, sparsity
    from .io import write_csv, write_pgm
    from .nn_layers import eval_mode
    from .saliency import attribute_batch
    from .scores import _as_batch, map_size

    tr, te = _datasets(cfg)
    net = get_model(cfg, tr, te)
    _check_probe(cfg, net)
    i = cfg["sample"]
    if not 0 <= i < len(te):
        raise CliError(f"--sample {i} outside the test set (0..{len(te) - 1})")
    with eval_mode(net):
        try:
            st = attribute_batch(net, _as_batch(net, te.images[i]), cfg["probe"], cfg["method"])
        except ValueError as e:
            raise CliError(str(e)) from None
    raw = attribution_map(st, cfg["channel_agg"], cfg["embedding_agg"], map_size(net, cfg["probe"]),
                          normalized=False)[0]
    if raw.dim() != 2 or raw.shape[0] == 1:
        raw = raw.reshape(1, -1)
    signed = Aggregator.MEAN in (Aggregator.parse(cfg["channel_agg"]), Aggregator.parse(cfg["embedding_agg"]))
    value = float(sparsity(raw, absolute=signed))
    from .aggregation import normalize

    norm = normalize(raw.abs() if signed else raw).numpy()
    out = Path(cfg["out"])
    stem = f"attr_p{cfg['probe']}_{cfg['method']}_C{cfg['channel_agg']}_E{cfg['embedding_agg']}_s{i}"
    pgm, csv = out / f"{stem}.pgm", out / f"{stem}.csv"
    write_pgm(norm, pgm)
    write_csv(norm, csv, [f"c{j}" for j in range(norm.shape[1])])
    print(f"sparsity={value!r}")
    print(f"heatmap: {pgm}")
    finish(cfg, [pgm, csv], {"sparsity": value})


def _samples(cfg, te, default: int):
    from .experiments import pick_samples

    ids = pick_samples(len(te), cfg["n_samples"] or default, cfg["seed"])
    return ids, te.images[ids]


def cmd_noise_curve(cfg):
    from .io import write_csv
    from .scores import CURVE_COLUMNS, score_curve

    tr, te = _datasets(cfg)
    net = get_model(cfg, tr, te)
    probes = _curve_probes(cfg, net)
    ids, xs = _samples(cfg, te, 50)
    curve = score_curve(net, xs, _score_config(cfg, probes), sample_ids=ids)
    path = Path(cfg["out"]) / "noise_curve.csv"
    write_csv(curve.rows(), path, list(CURVE_COLUMNS))
    for r in curve.rows():
        print(f"p={r['probe']} N={r['noise_mean']:.4f} N0={r['benchmark_mean']:.4f} V={r['var_mean']:.4f}")
    finish(cfg, [path])


def cmd_var_curve(cfg):
    from .experiments import run_variance_curves
    from .io import write_csv
    from .models import build

    tr, te = _datasets(cfg)
    trained = get_model(cfg, tr, te)
    untrained = build(trained.recipe)
    probes = _curve_probes(cfg, trained)
    ids, xs = _samples(cfg, te, 50)
    sc = _score_config(cfg, probes)
    if sc.binarize is None:
        sc = sc.with_(binarize=0.5)
    rows = run_variance_curves({"trained": trained, "untrained": untrained}, xs, sc, sample_ids=ids)
    path = Path(cfg["out"]) / "var_curve.csv"
    write_csv(rows, path, ["model", "probe", "var_mean", "var_std", "n_samples"])
    for r in rows:
        print(f"{r['model']} p={r['probe']} V={r['var_mean']:.4f}")
    finish(cfg, [path])


def cmd_randomize_layers(cfg):
    from .experiments import run_layer_randomization
    from .io import write_csv

    tr, te = _datasets(cfg)
    net = get_model(cfg, tr, te)
    if net.classifier is None:
        raise CliError("randomize-layers needs a model with a classifier head")
    probes = _curve_probes(cfg, net)
    rows, rho = run_layer_randomization(net, te, _score_config(cfg, probes),
                                        n_samples=cfg["n_samples"] or 25, seed=cfg["seed"])
    path = Path(cfg["out"]) / "randomize_layers.csv"
    write_csv(rows, path, ["layer", "avg_noise", "accuracy"])
    print(f"rho={rho!r}")
    finish(cfg, [path], {"rho": rho})


def cmd_drift(cfg):
    from .experiments import DEFAULT_LAMBDA_GRID, DriftSpec, run_drift
    from .io import write_csv

    tr, te = _datasets(cfg)
    net = get_model(cfg, tr, te)
    _check_probe(cfg, net)
    try:
        spec = DriftSpec(tuple(cfg["lambda_grid"] or DEFAULT_LAMBDA_GRID), clamp=cfg["clamp"],
                         n_samples=cfg["n_samples"] or 25, probe=cfg["probe"], seed=cfg["seed"])
    except ValueError as e:
        raise CliError(str(e)) from None
    res = run_drift(net, te.images, spec, _score_config(cfg))
    path = Path(cfg["out"]) / "drift.csv"
    write_csv(res.rows, path, ["lambda", "relative_mean", "relative_std", "noise_mean", "n_samples"])
    print(f"rho={res.rho!r} rho_raw={res.rho_raw!r}")
    finish(cfg, [path], {"rho": res.rho, "rho_raw": res.rho_raw})


def cmd_constrained_train(cfg):
    from .constraint import ConstraintCfg
    from .experiments import TABLE_CONFIGS, constrained_table, summarize_table
    from .io import write_csv

    names = [c.strip() for c in cfg["configs"].split(",") if c.strip()]
    configs = []
    for name in names:
        if name not in TABLE_CONFIGS:
            raise CliError(f"unknown table config {name!r}; choose from {sorted(TABLE_CONFIGS)}")
        base = TABLE_CONFIGS[name]
        if base is not None:
            base = ConstraintCfg(base.lambda_noise, base.lambda_var, cfg["period"], cfg["probe"],
                                 cfg["method"], cfg["channel_agg"], cfg["embedding_agg"])
        configs.append((name, base))
    tr, te = _datasets(cfg)
    rows = constrained_table(tr, te, configs, bottlenecks=cfg["bottlenecks"], seeds=cfg["seeds"],
                             dtype=cfg["train_dtype"], cache_dir=cfg["cache_dir"])
    out = Path(cfg["out"])
    runs, summary = out / "constrained_runs.csv", out / "constrained_table.csv"
    write_csv(rows, runs, ["config", "bottleneck", "seed", "accuracy"])
    srows = summarize_table(rows)
    write_csv(srows, summary, ["config", "bottleneck", "mean", "std", "n_seeds"])
    for r in srows:
        print(f"{r['config']} s={r['bottleneck']}: {r['mean']:.2f} +- {r['std']:.2f}")
    finish(cfg, [runs, summary])


def cmd_sparsity_study(cfg):
    from .experiments import sparsity_study
    from .io import write_csv
    from .nn_layers import eval_mode
    from .saliency import attribute_batch
    from .scores import _as_batch, map_size

    tr, te = _datasets(cfg)
    net = get_model(cfg, tr, te)
    probes = _curve_probes(cfg, net)
    ids, xs = _samples(cfg, te, 25)
    rows = []
    with eval_mode(net):
        for p in probes:
            st = attribute_batch(net, _as_batch(net, xs), p, cfg["method"])
            rows += sparsity_study(st, p, size=map_size(net, p))
    path = Path(cfg["out"]) / "sparsity.csv"
    write_csv(rows, path, ["probe", "scheme", "sparsity", "n_samples"])
    for r in rows:
        print(f"p={r['probe']} {r['scheme']}: {r['sparsity']:.4f}")
    finish(cfg, [path])


HANDLERS = {
    "train": cmd_train, "attribute": cmd_attribute, "noise-curve": cmd_noise_curve,
    "var-curve": cmd_var_curve, "randomize-layers": cmd_randomize_layers, "drift": cmd_drift,
    "constrained-train": cmd_constrained_train, "sparsity-study": cmd_sparsity_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve(args)
        validate(cfg)
        HANDLERS[args.command](cfg)
    except CliError as e:
        print(f"embattr {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"embattr {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
