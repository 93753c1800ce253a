"""Impostor detection on hidden-layer features.

A soft-margin RBF-kernel SVM, trained by sequential pairwise optimization
of the dual, separates features of genuine class members from features of
images adversarially relabelled into that class.  The experiment protocol:
per repeat, relabel 50 images from other classes into the target class,
collect features of the 50 impostors and 50 true exemplars, train on 20
of each, test on the remaining 30 of each, and average accuracy over 10
repeats.  Controls: shuffled origin labels (should be chance), softmax
probabilities as features (the signal should live below the output layer),
and an optional feature standardization switch.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, config_to_dict, relabel
from .data import Dataset
from .model import Model, penultimate_features, predict_probabilities

FEATURE_KINDS = ("penultimate", "softmax")

_SUPPORT_EPS = 1e-10


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray  # (n_s, d)
    alphas: np.ndarray  # (n_s,), each in [0, C]
    labels: np.ndarray  # (n_s,), each +1 or -1
    bias: float
    gamma: float
    C: float


def _rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """K[i, j] = exp(-gamma * ||a_i - b_j||^2)."""
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(features: np.ndarray) -> float:
    """1 / (d * mean per-coordinate variance), guarded for constant features."""
    d = features.shape[1]
    mean_var = float(np.mean(np.var(features, axis=0)))
    return 1.0 / (d * max(mean_var, 1e-12))


def _assemble(positives: np.ndarray, negatives: np.ndarray):
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if positives.ndim != 2 or negatives.ndim != 2:
        raise ValueError("feature sets must be 2-D (samples, dimensions)")
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ValueError("both classes must be non-empty")
    if positives.shape[1] != negatives.shape[1]:
        raise ValueError(
            f"feature dimensions differ: {positives.shape[1]} vs {negatives.shape[1]}"
        )
    if not np.isfinite(positives).all() or not np.isfinite(negatives).all():
        raise ValueError("features must be finite")
    x = np.vstack([positives, negatives])
    y = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    return x, y


def _solve_dual(
    x: np.ndarray, y: np.ndarray, gamma: float, C: float, tol: float, max_sweeps: int
) -> tuple[np.ndarray, float]:
    """Sequential pairwise optimization of the soft-margin dual.

    Deterministic given input order: the partner index is chosen by the
    largest error gap, falling back to a scan from index zero.
    """
    n = len(x)
    kernel = _rbf_kernel(x, x, gamma)
    alphas = np.zeros(n)
    bias = 0.0

    def errors_now() -> np.ndarray:
        return kernel @ (alphas * y) + bias - y

    def take_step(i: int, j: int, errors: np.ndarray) -> bool:
        nonlocal bias
        if i == j:
            return False
        ai, aj = alphas[i], alphas[j]
        yi, yj = y[i], y[j]
        if yi != yj:
            low, high = max(0.0, aj - ai), min(C, C + aj - ai)
        else:
            low, high = max(0.0, ai + aj - C), min(C, ai + aj)
        if low >= high:
            return False
        eta = kernel[i, i] + kernel[j, j] - 2.0 * kernel[i, j]
        if eta <= 0:
            return False
        aj_new = float(np.clip(aj + yj * (errors[i] - errors[j]) / eta, low, high))
        if abs(aj_new - aj) < 1e-8 * (aj_new + aj + 1e-8):
            return False
        ai_new = ai + yi * yj * (aj - aj_new)
        b1 = (
            bias
            - errors[i]
            - yi * (ai_new - ai) * kernel[i, i]
            - yj * (aj_new - aj) * kernel[i, j]
        )
        b2 = (
            bias
            - errors[j]
            - yi * (ai_new - ai) * kernel[i, j]
            - yj * (aj_new - aj) * kernel[j, j]
        )
        alphas[i], alphas[j] = ai_new, aj_new
        if 0.0 < ai_new < C:
            bias = b1
        elif 0.0 < aj_new < C:
            bias = b2
        else:
            bias = (b1 + b2) / 2.0
        return True

    def examine(j: int) -> bool:
        errors = errors_now()
        r = errors[j] * y[j]
        if not ((r < -tol and alphas[j] < C) or (r > tol and alphas[j] > 0)):
            return False
        gaps = np.abs(errors - errors[j])
        gaps[j] = -1.0
        if take_step(int(np.argmax(gaps)), j, errors):
            return True
        for i in np.flatnonzero((alphas > 0) & (alphas < C)):
            if take_step(int(i), j, errors_now()):
                return True
        for i in range(n):
            if take_step(i, j, errors_now()):
                return True
        return False

    examine_all = True
    for _ in range(max_sweeps):
        changed = 0
        if examine_all:
            for j in range(n):
                changed += examine(j)
        else:
            for j in np.flatnonzero((alphas > 0) & (alphas < C)):
                changed += examine(int(j))
        if examine_all:
            if changed == 0:
                break
            examine_all = False
        elif changed == 0:
            examine_all = True
    return alphas, bias


def svm_train(
    positives: np.ndarray,
    negatives: np.ndarray,
    gamma: float | None = None,
    C: float = 1.0,
    tol: float = 1e-3,
    max_sweeps: int = 1000,
) -> SvmModel:
    """Fit the soft-margin RBF dual; keep only the support vectors."""
    x, y = _assemble(positives, negatives)
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if gamma is None:
        gamma = default_gamma(x)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    alphas, bias = _solve_dual(x, y, gamma, C, tol, max_sweeps)
    keep = alphas > _SUPPORT_EPS
    return SvmModel(
        support_vectors=x[keep].copy(),
        alphas=alphas[keep].copy(),
        labels=y[keep].copy(),
        bias=float(bias),
        gamma=float(gamma),
        C=float(C),
    )


def svm_decision(svm: SvmModel, features: np.ndarray) -> np.ndarray:
    """Decision values for a (n, d) batch or a single (d,) vector."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    if features.shape[1] != svm.support_vectors.shape[1]:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match "
            f"training dimension {svm.support_vectors.shape[1]}"
        )
    k = _rbf_kernel(features, svm.support_vectors, svm.gamma)
    values = k @ (svm.alphas * svm.labels) + svm.bias
    return values[0] if single else values


def svm_predict(svm: SvmModel, features: np.ndarray) -> tuple[int, float]:
    """(label, decision value) for one feature vector; label is +1 or -1.

    A decision value of exactly zero maps to +1.
    """
    value = float(svm_decision(svm, np.asarray(features, dtype=np.float64)))
    return (1 if value >= 0.0 else -1), value


def kkt_violation(
    positives: np.ndarray,
    negatives: np.ndarray,
    gamma: float | None = None,
    C: float = 1.0,
    tol: float = 1e-3,
    max_sweeps: int = 1000,
) -> float:
    """Largest KKT violation after solving the dual on the given data.

    Re-runs the deterministic solver so every training alpha is visible;
    returns max over points of the appropriate margin defect:
    alpha = 0 needs y f(x) >= 1, alpha = C needs y f(x) <= 1, interior
    alphas need y f(x) = 1.  Non-positive values mean full satisfaction.
    """
    x, y = _assemble(positives, negatives)
    if gamma is None:
        gamma = default_gamma(x)
    alphas, bias = _solve_dual(x, y, gamma, C, tol, max_sweeps)
    margins = y * (_rbf_kernel(x, x, gamma) @ (alphas * y) + bias)
    worst = -np.inf
    for a, m in zip(alphas, margins):
        if a <= _SUPPORT_EPS:
            worst = max(worst, 1.0 - m)
        elif a >= C - _SUPPORT_EPS:
            worst = max(worst, m - 1.0)
        else:
            worst = max(worst, abs(m - 1.0))
    return float(worst)


# ---------------------------------------------------------------------------
# impostor experiment


@dataclass(frozen=True)
class ImpostorConfig:
    repeats: int = 10
    relabelled_per_repeat: int = 50
    train_per_origin: int = 20
    test_per_origin: int = 30
    feature_kind: str = "penultimate"
    shuffle_origins: bool = False
    standardize: bool = False
    C: float = 1.0
    gamma: float | None = None
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(
                f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}"
            )
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.train_per_origin + self.test_per_origin > self.relabelled_per_repeat:
            raise ValueError("train + test exceeds the samples collected per origin")


@dataclass
class ImpostorReport:
    accuracies: tuple[float, ...]  # per completed repeat
    mean_accuracy: float
    target_classes: tuple[int, ...]  # per completed repeat
    skipped_repeats: int
    repeats_requested: int
    feature_kind: str
    shuffle_origins: bool
    standardize: bool
    seed: int
    config: ImpostorConfig


def _extract_features(model: Model, images: list[np.ndarray], kind: str) -> np.ndarray:
    if kind == "penultimate":
        rows = [penultimate_features(model, im) for im in images]
    else:
        rows = [predict_probabilities(model, im) for im in images]
    return np.stack(rows)


def _run_repeat(args):
    model, dataset, target_class, config, seed, repeat = args
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 404, int(repeat)]))
    target = int(rng.integers(dataset.num_classes)) if target_class is None else int(target_class)
    count = config.relabelled_per_repeat
    genuine_idx = np.asarray(dataset.by_class(target))
    if genuine_idx.size < count:
        raise ValueError(
            f"class {target} has {genuine_idx.size} exemplars, need {count}"
        )
    genuine_pick = genuine_idx[rng.permutation(genuine_idx.size)][:count]
    others = np.flatnonzero(dataset.labels() != target)
    others = others[rng.permutation(others.size)]
    impostor_images: list[np.ndarray] = []
    for i in others:
        if len(impostor_images) == count:
            break
        r = relabel(model, dataset.images[int(i)].pixels, target, config.attack)
        if r.success:
            impostor_images.append(r.perturbed)
    if len(impostor_images) < count:
        return repeat, target, None  # not enough successful relabellings
    genuine = _extract_features(
        model, [dataset.images[int(i)].pixels for i in genuine_pick], config.feature_kind
    )
    impostor = _extract_features(model, impostor_images, config.feature_kind)
    features = np.vstack([genuine, impostor])
    origins = np.concatenate([np.ones(count), -np.ones(count)])
    if config.shuffle_origins:
        origins = origins[rng.permutation(len(origins))]
    pos = np.flatnonzero(origins > 0)
    neg = np.flatnonzero(origins < 0)
    pos = pos[rng.permutation(pos.size)]
    neg = neg[rng.permutation(neg.size)]
    n_train = config.train_per_origin
    n_test = config.test_per_origin
    train_idx = np.concatenate([pos[:n_train], neg[:n_train]])
    test_idx = np.concatenate(
        [pos[n_train : n_train + n_test], neg[n_train : n_train + n_test]]
    )
    x_train, y_train = features[train_idx], origins[train_idx]
    x_test, y_test = features[test_idx], origins[test_idx]
    if config.standardize:
        mu = x_train.mean(axis=0)
        sd = np.maximum(x_train.std(axis=0), 1e-12)
        x_train = (x_train - mu) / sd
        x_test = (x_test - mu) / sd
    svm = svm_train(
        x_train[y_train > 0], x_train[y_train < 0], gamma=config.gamma, C=config.C
    )
    predicted = np.where(svm_decision(svm, x_test) >= 0.0, 1.0, -1.0)
    accuracy = float(np.mean(predicted == y_test))
    return repeat, target, accuracy


def impostor_experiment(
    model: Model,
    dataset: Dataset,
    target_class: int | None = None,
    config: ImpostorConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> ImpostorReport:
    """Detect relabelled impostors from model features; see the module docstring."""
    config = config or ImpostorConfig()
    if target_class is not None and not 0 <= target_class < dataset.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    tasks = [
        (model, dataset, target_class, config, seed, r) for r in range(config.repeats)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_repeat, tasks))
    else:
        outcomes = [_run_repeat(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])
    accuracies = [acc for _, _, acc in outcomes if acc is not None]
    targets = [tgt for _, tgt, acc in outcomes if acc is not None]
    skipped = sum(1 for _, _, acc in outcomes if acc is None)
    mean = float(np.mean(accuracies)) if accuracies else 0.0
    return ImpostorReport(
        accuracies=tuple(accuracies),
        mean_accuracy=mean,
        target_classes=tuple(targets),
        skipped_repeats=skipped,
        repeats_requested=config.repeats,
        feature_kind=config.feature_kind,
        shuffle_origins=config.shuffle_origins,
        standardize=config.standardize,
        seed=seed,
        config=config,
    )


def impostor_config_to_dict(config: ImpostorConfig) -> dict:
    return {
        "repeats": config.repeats,
        "relabelled_per_repeat": config.relabelled_per_repeat,
        "train_per_origin": config.train_per_origin,
        "test_per_origin": config.test_per_origin,
        "feature_kind": config.feature_kind,
        "shuffle_origins": config.shuffle_origins,
        "standardize": config.standardize,
        "C": config.C,
        "gamma": config.gamma,
        "attack": config_to_dict(config.attack),
    }


def impostor_config_from_dict(payload: dict) -> ImpostorConfig:
    from .attack import config_from_dict

    fields = dict(payload)
    attack = fields.pop("attack", None)
    base = ImpostorConfig()
    if attack is not None:
        base = replace(base, attack=config_from_dict(attack))
    known = {k: v for k, v in fields.items() if k in impostor_config_to_dict(base)}
    unknown = set(fields) - set(known)
    if unknown:
        raise ValueError(f"unknown impostor config keys: {sorted(unknown)}")
    return replace(base, **known)


def impostor_to_json(report: ImpostorReport) -> str:
    payload = {
        "accuracies": list(report.accuracies),
        "mean_accuracy": report.mean_accuracy,
        "target_classes": list(report.target_classes),
        "skipped_repeats": report.skipped_repeats,
        "repeats_requested": report.repeats_requested,
        "feature_kind": report.feature_kind,
        "shuffle_origins": report.shuffle_origins,
        "standardize": report.standardize,
        "seed": report.seed,
        "config": impostor_config_to_dict(report.config),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
