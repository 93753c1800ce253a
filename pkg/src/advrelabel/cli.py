"""Command-line front-end: reproducible experiment runs from JSON configs.

Commands: train, attack, synth, sweep, transforms, transfer, detect.
Resolution order is defaults, then the --config file, then flags; the fully
resolved config is written into the output directory before the run, so any
run directory documents exactly what produced it.  Reruns with an identical
resolved config write byte-identical outputs.

Exit codes: 0 success, 2 usage or config error, 3 experiment-level failure
(for example an attack that exhausts its budget), 4 corrupt input file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attack import (
    AttackConfig,
    PgmFormatError,
    config_from_dict,
    config_to_dict,
    difference_image,
    gaussian_start_image,
    read_pgm,
    relabel,
    result_to_json,
    synthesize_from_noise,
    trace_to_csv,
    write_pgm,
)
from .data import Dataset, IdxFormatError, generate_shapes, load_idx
from .detection import (
    ImpostorConfig,
    impostor_experiment,
    impostor_to_json,
)
from .model import (
    Architecture,
    CheckpointError,
    Model,
    TrainConfig,
    load_checkpoint,
    reference_architecture,
    save_checkpoint,
    train,
)
from .robustness import (
    build_adversarial_pool,
    nonstationarity_experiment,
    nonstationarity_to_json,
    pair_sweep,
    sweep_to_csv,
    sweep_to_json,
    transfer_check,
    transfer_to_json,
    transform_suite,
    transform_to_json,
)


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid parameter value."""


class ExperimentError(RuntimeError):
    """A run that started but could not produce its result."""


def default_config() -> dict:
    """Every field a command may read, with its default."""
    return {
        "seed": 0,
        "workers": 1,
        "out": "run",
        "checkpoint": "model.ckpt",
        "dataset": {
            "source": "generated",  # generated | idx
            "seed": None,  # null means the global seed
            "classes": 10,
            "per_class": 500,
            "test_per_class": 100,
            "size": 28,
            "train_images": None,
            "train_labels": None,
            "test_images": None,
            "test_labels": None,
        },
        "architecture": {
            "num_classes": 10,
            "input_shape": [1, 28, 28],
            "conv_channels": [8, 16],
            "dense_width": 64,
        },
        "training": {
            "learning_rate": 0.05,
            "epochs": 10,
            "batch_size": 32,
            "seed": None,  # null means the global seed
        },
        "attack": {
            "alpha": 1.0,
            "max_iterations": 500,
            "distortion_cap": 0.1,
            "gradient_mode": "sign",
            "success_confidence": 0.5,
            "clamp_pixels": True,
            "rng_seed": None,  # null means the global seed
            "trace": False,
        },
        "attack_run": {
            "image_index": 0,  # index into the test split
            "image_pgm": None,  # a PGM path overrides the index
            "target": 1,
        },
        "synth": {"target": 0},
        "sweep": {"exemplars_per_class": 2},
        "transforms": {"samples": 20},
        "transfer": {"checkpoint_b": None, "samples": 20},
        "detect": {
            "target_class": None,
            "repeats": 10,
            "relabelled_per_repeat": 50,
            "train_per_origin": 20,
            "test_per_origin": 30,
            "feature_kind": "penultimate",
            "shuffle_origins": False,
            "standardize": False,
            "C": 1.0,
            "gamma": None,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="ascii") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for flag, path in [
        ("seed", ("seed",)),
        ("out", ("out",)),
        ("workers", ("workers",)),
        ("checkpoint", ("checkpoint",)),
        ("target", getattr(args, "target_path", None)),
        ("image_index", ("attack_run", "image_index")),
        ("image_pgm", ("attack_run", "image_pgm")),
        ("exemplars", ("sweep", "exemplars_per_class")),
        ("samples", getattr(args, "samples_path", None)),
        ("checkpoint_b", ("transfer", "checkpoint_b")),
    ]:
        value = getattr(args, flag, None)
        if value is None or path is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    # null seeds inherit the global seed so the echoed config is concrete
    for block, key in [("dataset", "seed"), ("training", "seed"), ("attack", "rng_seed")]:
        if cfg[block][key] is None:
            cfg[block][key] = cfg["seed"]
    if args.command in ("attack", "synth"):
        cfg["attack"]["trace"] = True  # these commands always write the trace
    for key in ("seed", "workers"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}")
    if cfg["workers"] < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg['workers']}")
    return cfg


def _write(path, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="") as f:
        f.write(text)


def prepare_out(cfg: dict, command: str):
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    echo = {"command": command, **cfg}
    _write(os.path.join(out, "resolved_config.json"), json.dumps(echo, sort_keys=True, indent=2) + "\n")
    return out


def build_architecture(cfg: dict) -> Architecture:
    block = cfg["architecture"]
    try:
        return reference_architecture(
            num_classes=block["num_classes"],
            input_shape=tuple(block["input_shape"]),
            conv_channels=tuple(block["conv_channels"]),
            dense_width=block["dense_width"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"architecture: {exc}")


def build_dataset(cfg: dict, split: str) -> Dataset:
    block = cfg["dataset"]
    if block["source"] == "generated":
        per = block["per_class"] if split == "train" else block["test_per_class"]
        try:
            return generate_shapes(
                block["seed"], classes=block["classes"], per_class=per,
                size=block["size"], split=split,
            )
        except ValueError as exc:
            raise ConfigError(f"dataset: {exc}")
    if block["source"] == "idx":
        images = block[f"{split}_images"]
        labels = block[f"{split}_labels"]
        if images is None or labels is None:
            raise ConfigError(f"dataset: idx source needs {split}_images and {split}_labels paths")
        return load_idx(images, labels, split=split)
    raise ConfigError(f"dataset: unknown source {block['source']!r}")


def build_attack_config(cfg: dict) -> AttackConfig:
    try:
        return config_from_dict(cfg["attack"])
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}")


def build_impostor_config(cfg: dict, attack: AttackConfig) -> ImpostorConfig:
    block = dict(cfg["detect"])
    block.pop("target_class")
    try:
        return ImpostorConfig(attack=attack, **block)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"detect: {exc}")


def load_model_checkpoint(path) -> Model:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}")


def _check_target(target, num_classes: int, allow_none: bool = False):
    if target is None and allow_none:
        return None
    if not isinstance(target, int) or isinstance(target, bool) or not 0 <= target < num_classes:
        raise ConfigError(f"target must be an integer in [0, {num_classes}), got {target!r}")
    return target


def run_experiment(fn):
    """Distinguish runtime failures (exit 3) from config errors (exit 2)."""
    try:
        return fn()
    except (CheckpointError, PgmFormatError, IdxFormatError, ConfigError):
        raise
    except ValueError as exc:
        raise ExperimentError(str(exc))


def _write_attack_outputs(out, original: np.ndarray, result) -> None:
    _write(os.path.join(out, "result.json"), result_to_json(result))
    write_pgm(os.path.join(out, "original.pgm"), original)
    write_pgm(os.path.join(out, "perturbed.pgm"), result.perturbed)
    write_pgm(os.path.join(out, "difference.pgm"), difference_image(result.perturbed, original))
    if result.trace is not None:
        _write(os.path.join(out, "trace.csv"), trace_to_csv(result))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    arch = build_architecture(cfg)
    block = cfg["training"]
    try:
        train_config = TrainConfig(
            learning_rate=block["learning_rate"], epochs=block["epochs"],
            batch_size=block["batch_size"], seed=block["seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}")
    train_data = build_dataset(cfg, "train")
    test_data = build_dataset(cfg, "test")
    out = prepare_out(cfg, "train")
    model = run_experiment(lambda: train(arch, train_data, test_data, train_config))
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    metrics = {
        "test_accuracy": model.metadata.test_accuracy,
        "epochs": model.metadata.epochs,
        "learning_rate": model.metadata.learning_rate,
        "batch_size": model.metadata.batch_size,
        "seed": model.metadata.seed,
        "train_images": len(train_data),
        "test_images": len(test_data),
    }
    _write(os.path.join(out, "metrics.json"), json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return 0


def _load_attack_image(cfg: dict, model: Model) -> np.ndarray:
    block = cfg["attack_run"]
    if block["image_pgm"] is not None:
        image = read_pgm(block["image_pgm"])
    else:
        dataset = build_dataset(cfg, "test")
        index = block["image_index"]
        if not isinstance(index, int) or not 0 <= index < len(dataset):
            raise ConfigError(f"attack_run.image_index {index!r} out of range for {len(dataset)} images")
        image = dataset.images[index].pixels
    if image.shape != model.architecture.input_shape:
        raise ConfigError(
            f"image shape {image.shape} does not match model input {model.architecture.input_shape}"
        )
    return image


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    attack_config = build_attack_config(cfg)
    target = _check_target(cfg["attack_run"]["target"], model.architecture.num_classes)
    image = _load_attack_image(cfg, model)
    out = prepare_out(cfg, "attack")
    result = run_experiment(lambda: relabel(model, image, target, attack_config))
    _write_attack_outputs(out, image, result)
    return 0 if result.success else 3


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    attack_config = build_attack_config(cfg)
    target = _check_target(cfg["synth"]["target"], model.architecture.num_classes)
    out = prepare_out(cfg, "synth")
    start = gaussian_start_image(model.architecture.input_shape, attack_config.rng_seed)
    result = run_experiment(lambda: synthesize_from_noise(model, target, attack_config))
    _write_attack_outputs(out, start, result)
    return 0 if result.success else 3


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    attack_config = build_attack_config(cfg)
    dataset = build_dataset(cfg, "test")
    exemplars = cfg["sweep"]["exemplars_per_class"]
    if not isinstance(exemplars, int) or exemplars < 1:
        raise ConfigError(f"sweep.exemplars_per_class must be a positive integer, got {exemplars!r}")
    out = prepare_out(cfg, "sweep")
    report = run_experiment(
        lambda: pair_sweep(model, dataset, exemplars, attack_config, workers=cfg["workers"])
    )
    _write(os.path.join(out, "sweep.json"), sweep_to_json(report))
    _write(os.path.join(out, "sweep.csv"), sweep_to_csv(report))
    return 0


def cmd_transforms(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    attack_config = build_attack_config(cfg)
    dataset = build_dataset(cfg, "test")
    samples = cfg["transforms"]["samples"]
    out = prepare_out(cfg, "transforms")

    def run():
        pool = build_adversarial_pool(model, dataset, samples, attack_config)
        return transform_suite(model, [r for _, r in pool])

    _write(os.path.join(out, "transforms.json"), transform_to_json(run_experiment(run)))
    return 0


def cmd_transfer(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    other = cfg["transfer"]["checkpoint_b"]
    if other is None:
        raise ConfigError("transfer needs transfer.checkpoint_b (or --checkpoint-b)")
    model_b = load_model_checkpoint(other)
    attack_config = build_attack_config(cfg)
    dataset = build_dataset(cfg, "test")
    out = prepare_out(cfg, "transfer")
    report = run_experiment(
        lambda: transfer_check(model, model_b, dataset, cfg["transfer"]["samples"], attack_config)
    )
    _write(os.path.join(out, "transfer.json"), transfer_to_json(report))
    return 0


def cmd_detect(args) -> int:
    cfg = resolve_config(args)
    model = load_model_checkpoint(cfg["checkpoint"])
    attack_config = build_attack_config(cfg)
    impostor_config = build_impostor_config(cfg, attack_config)
    dataset = build_dataset(cfg, "test")
    target = _check_target(
        cfg["detect"]["target_class"], model.architecture.num_classes, allow_none=True
    )
    out = prepare_out(cfg, "detect")
    report = run_experiment(
        lambda: impostor_experiment(
            model, dataset, target, impostor_config, seed=cfg["seed"], workers=cfg["workers"]
        )
    )
    _write(os.path.join(out, "detect.json"), impostor_to_json(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advrelabel",
        description="train a small image classifier and probe it with targeted relabelling attacks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--out", help="output directory (default 'run')")
        p.add_argument("--workers", type=int, help="parallel worker cap (default 1)")

    p = sub.add_parser("train", help="train a model, write checkpoint and metrics")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="relabel one image toward a target class")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to attack")
    p.add_argument("--target", type=int, help="target class index")
    p.add_argument("--image-index", type=int, dest="image_index", help="test-set image index")
    p.add_argument("--image-pgm", dest="image_pgm", help="read the image from a PGM file instead")
    p.set_defaults(func=cmd_attack, target_path=("attack_run", "target"))

    p = sub.add_parser("synth", help="grow a target-class image out of Gaussian noise")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to attack")
    p.add_argument("--target", type=int, help="target class index")
    p.set_defaults(func=cmd_synth, target_path=("synth", "target"))

    p = sub.add_parser("sweep", help="all source/target class pairs attack sweep")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to attack")
    p.add_argument("--exemplars", type=int, help="exemplars per class")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("transforms", help="re-classify adversarials after crop/translate/mirror")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to attack")
    p.add_argument("--samples", type=int, help="number of adversarials")
    p.set_defaults(func=cmd_transforms, samples_path=("transforms", "samples"))

    p = sub.add_parser("transfer", help="evaluate adversarials against a second model")
    common(p)
    p.add_argument("--checkpoint", help="model the adversarials are built on")
    p.add_argument("--checkpoint-b", dest="checkpoint_b", help="model they are evaluated on")
    p.add_argument("--samples", type=int, help="number of adversarials")
    p.set_defaults(func=cmd_transfer, samples_path=("transfer", "samples"))

    p = sub.add_parser("detect", help="impostor detection from hidden-layer features")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--target", type=int, help="fixed target class (default: random per repeat)")
    p.set_defaults(func=cmd_detect, target_path=("detect", "target_class"))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (CheckpointError, PgmFormatError, IdxFormatError) as exc:
        print(f"error: corrupt input: {exc}", file=sys.stderr)
        return 4
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())
