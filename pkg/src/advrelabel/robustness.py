"""Robustness experiments around the relabelling attack: the all-pairs
class/target success sweep under a distortion cap, reversion under image
transformations (crop, translate, mirror), transfer of adversarials to an
independently trained model, and the single-big-step control that probes
gradient non-stationarity.

Every experiment is deterministic given the attack config's rng_seed.
Successes reported by the sweep are re-verified here by recomputing the
final probabilities and the distortion, not trusted from the attack module.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, AttackResult, config_to_dict, relabel, single_step_control
from .data import Dataset
from .metrics import distortion
from .model import Model, predict_batch, predict_probabilities

TRANSFORM_NAMES = ("identity", "crop", "translate", "mirror")


def crop_rescale(image: np.ndarray, fraction: float = 0.8) -> np.ndarray:
    """Central crop to `fraction` of each spatial extent, nearest-neighbor rescale back."""
    c, h, w = image.shape
    ch, cw = int(round(h * fraction)), int(round(w * fraction))
    top, left = (h - ch) // 2, (w - cw) // 2
    cropped = image[:, top : top + ch, left : left + cw]
    rows = np.arange(h) * ch // h
    cols = np.arange(w) * cw // w
    return cropped[:, rows][:, :, cols]


def translate_right(image: np.ndarray, pixels: int = 2) -> np.ndarray:
    """Shift right with zero fill."""
    out = np.zeros_like(image)
    out[:, :, pixels:] = image[:, :, : image.shape[2] - pixels]
    return out


def mirror(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def apply_transform(name: str, image: np.ndarray) -> np.ndarray:
    if name == "identity":
        return image
    if name == "crop":
        return crop_rescale(image)
    if name == "translate":
        return translate_right(image)
    if name == "mirror":
        return mirror(image)
    raise ValueError(f"unknown transform {name!r}")


# ---------------------------------------------------------------------------
# pair sweep


@dataclass
class PairSweepReport:
    num_classes: int
    exemplars_per_class: int
    distortion_cap: float
    seed: int
    attempts: np.ndarray  # (K,K) int, diagonal zero
    successes: np.ndarray  # (K,K) int
    success_rate: np.ndarray  # (K,K), NaN on the diagonal
    mean_distortion: np.ndarray  # (K,K) over successes, NaN where none
    mean_iterations: np.ndarray  # (K,K) over successes, NaN where none
    overall_success_rate: float
    shortfalls: dict[int, int]  # class -> exemplars actually found, when < requested
    skipped_misclassified: dict[int, int]  # class -> misclassified exemplars skipped
    success_target_probabilities: tuple[float, ...]  # final p_target per success
    success_distortions: tuple[float, ...]
    config: AttackConfig


def _verified_outcome(model: Model, image: np.ndarray, result: AttackResult, config: AttackConfig):
    """Recompute the success invariant from the perturbed image itself."""
    probs = predict_probabilities(model, result.perturbed)
    rep = distortion(result.perturbed, image)
    ok = (
        int(np.argmax(probs)) == result.target_label
        and probs[result.target_label] >= config.success_confidence
        and rep.rms <= config.distortion_cap
    )
    if result.success and not ok:
        raise RuntimeError(
            f"attack reported success for target {result.target_label} but "
            f"recomputation disagrees (p={probs[result.target_label]:.4f}, rms={rep.rms:.4f})"
        )
    return float(probs[result.target_label]), rep.rms


def _sweep_chunk(args):
    model, source, images, targets, config = args
    rows = []
    for t in targets:
        for image in images:
            r = relabel(model, image, t, config)
            p_final, rms = _verified_outcome(model, image, r, config)
            rows.append((source, t, r.success, rms, r.iterations_used, p_final))
    return rows


def select_exemplars(
    model: Model, dataset: Dataset, per_class: int, seed: int
) -> tuple[dict[int, list[int]], dict[int, int]]:
    """Seeded choice of correctly classified exemplar indices for every class.

    Returns (class -> chosen dataset indices, class -> misclassified skipped).
    """
    preds = np.argmax(predict_batch(model, dataset.stacked_pixels()), axis=1)
    chosen: dict[int, list[int]] = {}
    skipped: dict[int, int] = {}
    for c in range(dataset.num_classes):
        pool = np.asarray(dataset.by_class(c))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101, c]))
        order = pool[rng.permutation(pool.size)] if pool.size else pool
        picked: list[int] = []
        miss = 0
        for i in order:
            if len(picked) == per_class:
                break
            if preds[i] == c:
                picked.append(int(i))
            else:
                miss += 1
        chosen[c] = picked
        skipped[c] = miss
    return chosen, skipped


def pair_sweep(
    model: Model,
    dataset: Dataset,
    exemplars_per_class: int,
    config: AttackConfig | None = None,
    workers: int = 1,
) -> PairSweepReport:
    """relabel every ordered (source, target) class pair on m exemplars each."""
    config = config or AttackConfig()
    if exemplars_per_class < 1:
        raise ValueError(f"exemplars_per_class must be >= 1, got {exemplars_per_class}")
    k = dataset.num_classes
    chosen, skipped = select_exemplars(model, dataset, exemplars_per_class, config.rng_seed)
    shortfalls = {c: len(v) for c, v in chosen.items() if len(v) < exemplars_per_class}
    tasks = []
    for c in range(k):
        images = [dataset.images[i].pixels for i in chosen[c]]
        targets = [t for t in range(k) if t != c]
        tasks.append((model, c, images, targets, config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_sweep_chunk, tasks))
    else:
        chunks = [_sweep_chunk(t) for t in tasks]
    attempts = np.zeros((k, k), dtype=np.int64)
    successes = np.zeros((k, k), dtype=np.int64)
    dist_sum = np.zeros((k, k))
    iter_sum = np.zeros((k, k))
    final_ps: list[float] = []
    dists: list[float] = []
    for rows in chunks:
        for c, t, ok, rms, iters, p_final in rows:
            attempts[c, t] += 1
            if ok:
                successes[c, t] += 1
                dist_sum[c, t] += rms
                iter_sum[c, t] += iters
                final_ps.append(p_final)
                dists.append(rms)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(attempts > 0, successes / np.maximum(attempts, 1), np.nan)
        mean_dist = np.where(successes > 0, dist_sum / np.maximum(successes, 1), np.nan)
        mean_iter = np.where(successes > 0, iter_sum / np.maximum(successes, 1), np.nan)
    np.fill_diagonal(rate, np.nan)
    total = int(attempts.sum())
    overall = float(successes.sum() / total) if total else 0.0
    return PairSweepReport(
        num_classes=k,
        exemplars_per_class=exemplars_per_class,
        distortion_cap=config.distortion_cap,
        seed=config.rng_seed,
        attempts=attempts,
        successes=successes,
        success_rate=rate,
        mean_distortion=mean_dist,
        mean_iterations=mean_iter,
        overall_success_rate=overall,
        shortfalls=shortfalls,
        skipped_misclassified=skipped,
        success_target_probabilities=tuple(final_ps),
        success_distortions=tuple(dists),
        config=config,
    )


def _matrix(arr: np.ndarray) -> list[list[float | None]]:
    return [[None if np.isnan(v) else float(v) for v in row] for row in arr.astype(float)]


def sweep_to_json(report: PairSweepReport) -> str:
    payload = {
        "num_classes": report.num_classes,
        "exemplars_per_class": report.exemplars_per_class,
        "distortion_cap": report.distortion_cap,
        "seed": report.seed,
        "attempts": report.attempts.tolist(),
        "successes": report.successes.tolist(),
        "success_rate": _matrix(report.success_rate),
        "mean_distortion": _matrix(report.mean_distortion),
        "mean_iterations": _matrix(report.mean_iterations),
        "overall_success_rate": report.overall_success_rate,
        "shortfalls": {str(c): v for c, v in sorted(report.shortfalls.items())},
        "skipped_misclassified": {str(c): v for c, v in sorted(report.skipped_misclassified.items())},
        "success_target_probabilities": list(report.success_target_probabilities),
        "success_distortions": list(report.success_distortions),
        "config": config_to_dict(report.config),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def sweep_to_csv(report: PairSweepReport) -> str:
    """K x K success-rate matrix; diagonal cells are marked degenerate."""
    k = report.num_classes
    lines = ["source\\target," + ",".join(str(t) for t in range(k))]
    for c in range(k):
        cells = []
        for t in range(k):
            if t == c:
                cells.append("degenerate")
            else:
                v = report.success_rate[c, t]
                cells.append("nan" if np.isnan(v) else f"{v:.17g}")
        lines.append(f"{c}," + ",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# adversarial pool (shared by the transform/transfer/non-stationarity runs)


def build_adversarial_pool(
    model: Model,
    dataset: Dataset,
    count: int,
    config: AttackConfig | None = None,
) -> list[tuple[int, AttackResult]]:
    """Up to `count` successful relabellings of correctly classified images.

    Targets are drawn uniformly from the other classes by the config seed;
    returns (dataset index, result) pairs in deterministic order.
    """
    config = config or AttackConfig()
    preds = np.argmax(predict_batch(model, dataset.stacked_pixels()), axis=1)
    labels = dataset.labels()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 202]))
    order = rng.permutation(len(dataset))
    pool: list[tuple[int, AttackResult]] = []
    for i in order:
        if len(pool) == count:
            break
        label = int(labels[i])
        target = int(rng.integers(dataset.num_classes - 1))
        if target >= label:
            target += 1
        if preds[i] != label:
            continue
        r = relabel(model, dataset.images[i].pixels, target, config)
        if r.success:
            pool.append((int(i), r))
    return pool


# ---------------------------------------------------------------------------
# transformation reversion


@dataclass
class TransformReport:
    sample_size: int
    counts: dict[str, dict[str, int]]  # transform -> {reverted, stayed_target, other}


def transform_suite(model: Model, adversarials: list[AttackResult]) -> TransformReport:
    """Re-classify each successful adversarial after crop/translate/mirror."""
    if not adversarials:
        raise ValueError("transform_suite: no adversarials given")
    if not all(r.success for r in adversarials):
        raise ValueError("transform_suite: all adversarials must be successful")
    counts = {name: {"reverted": 0, "stayed_target": 0, "other": 0} for name in TRANSFORM_NAMES}
    for r in adversarials:
        for name in TRANSFORM_NAMES:
            image = apply_transform(name, r.perturbed)
            pred = int(np.argmax(predict_probabilities(model, image)))
            if pred == r.target_label:
                counts[name]["stayed_target"] += 1
            elif pred == r.original_label:
                counts[name]["reverted"] += 1
            else:
                counts[name]["other"] += 1
    return TransformReport(sample_size=len(adversarials), counts=counts)


def transform_to_json(report: TransformReport) -> str:
    payload = {"sample_size": report.sample_size, "counts": report.counts}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# cross-model transfer


@dataclass
class TransferReport:
    n: int  # successful adversarials built on model A
    requested: int
    still_target: float
    reverted_original: float
    other: float
    clean_control_accuracy: float  # model B on the unperturbed originals


def transfer_check(
    model_a: Model,
    model_b: Model,
    dataset: Dataset,
    n_samples: int,
    config: AttackConfig | None = None,
) -> TransferReport:
    """Evaluate adversarials built on model A against model B."""
    config = config or AttackConfig()
    pool = build_adversarial_pool(model_a, dataset, n_samples, config)
    if not pool:
        raise ValueError("transfer_check: no successful adversarials on model A")
    still = reverted = other = clean_correct = 0
    for i, r in pool:
        pred = int(np.argmax(predict_probabilities(model_b, r.perturbed)))
        if pred == r.target_label:
            still += 1
        elif pred == r.original_label:
            reverted += 1
        else:
            other += 1
        clean_pred = int(np.argmax(predict_probabilities(model_b, dataset.images[i].pixels)))
        clean_correct += int(clean_pred == dataset.images[i].label)
    n = len(pool)
    return TransferReport(
        n=n,
        requested=n_samples,
        still_target=still / n,
        reverted_original=reverted / n,
        other=other / n,
        clean_control_accuracy=clean_correct / n,
    )


def transfer_to_json(report: TransferReport) -> str:
    payload = {
        "n": report.n,
        "requested": report.requested,
        "still_target": report.still_target,
        "reverted_original": report.reverted_original,
        "other": report.other,
        "clean_control_accuracy": report.clean_control_accuracy,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# gradient non-stationarity: iterative vs one big step


@dataclass
class NonStationarityReport:
    attempts: int
    paired: int  # iterative successes, each given a single-step control
    skipped: int  # iterative failures: control not applicable
    iterative_success_rate: float  # over attempts
    single_step_success_rate: float  # over paired controls
    untargeted_misclassification_rate: float  # controls that left the original label


def nonstationarity_experiment(
    model: Model,
    dataset: Dataset,
    n_pairs: int,
    config: AttackConfig | None = None,
) -> NonStationarityReport:
    """Paired comparison: iterative attack vs one step of equivalent length."""
    config = config or AttackConfig()
    preds = np.argmax(predict_batch(model, dataset.stacked_pixels()), axis=1)
    labels = dataset.labels()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 303]))
    order = rng.permutation(len(dataset))
    attempts = paired = skipped = single_succ = untargeted = 0
    for i in order:
        if attempts == n_pairs:
            break
        label = int(labels[i])
        target = int(rng.integers(dataset.num_classes - 1))
        if target >= label:
            target += 1
        if preds[i] != label:
            continue
        image = dataset.images[i].pixels
        r = relabel(model, image, target, config)
        attempts += 1
        if not r.success:
            skipped += 1
            continue
        ctl = single_step_control(model, image, target, config.alpha * r.iterations_used, config)
        paired += 1
        single_succ += int(ctl.success)
        untargeted += int(int(np.argmax(ctl.final_probabilities)) != ctl.original_label)
    if attempts == 0:
        raise ValueError("nonstationarity_experiment: no correctly classified images")
    return NonStationarityReport(
        attempts=attempts,
        paired=paired,
        skipped=skipped,
        iterative_success_rate=paired / attempts,
        single_step_success_rate=single_succ / paired if paired else 0.0,
        untargeted_misclassification_rate=untargeted / paired if paired else 0.0,
    )


def nonstationarity_to_json(report: NonStationarityReport) -> str:
    payload = {
        "attempts": report.attempts,
        "paired": report.paired,
        "skipped": report.skipped,
        "iterative_success_rate": report.iterative_success_rate,
        "single_step_success_rate": report.single_step_success_rate,
        "untargeted_misclassification_rate": report.untargeted_misclassification_rate,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
