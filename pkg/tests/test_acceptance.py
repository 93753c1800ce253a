"""Acceptance runs for the whole toolkit.

One test per criterion; each prints a single verdict line with the measured
numbers so the run log documents what the suite actually observed.
"""

import hashlib
import json
import time

import numpy as np
import pytest

from advrelabel.attack import AttackConfig, read_pgm, relabel, synthesize_from_noise, write_pgm
from advrelabel.autodiff import (
    Tape,
    add,
    backward,
    bias_add,
    conv2d,
    cross_entropy,
    finite_difference_gradient,
    matmul,
    maxpool2d,
    multiply,
    relu,
    reshape,
    softmax,
    tensor_sum,
)
from advrelabel.cli import main
from advrelabel.data import generate_shapes
from advrelabel.detection import ImpostorConfig, impostor_experiment
from advrelabel.metrics import distortion
from advrelabel.model import (
    Architecture,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    Model,
    Relu,
    Softmax,
    TrainingMetadata,
    init_params,
    load_checkpoint,
    loss_and_input_gradient,
    predict_probabilities,
    save_checkpoint,
)
from advrelabel.robustness import (
    build_adversarial_pool,
    nonstationarity_experiment,
    pair_sweep,
    sweep_to_json,
    transfer_check,
    transform_suite,
)
from conftest import experiment_attack_config
from test_cli import SMALL_CONFIG, tree_digest


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def sweep_report(reference_model, shapes_test):
    return pair_sweep(reference_model, shapes_test, 2, experiment_attack_config(), workers=2)


@pytest.fixture(scope="module")
def adversarial_pool(reference_model, shapes_test):
    return build_adversarial_pool(reference_model, shapes_test, 60, experiment_attack_config())


# --- 1: gradients match finite differences ---------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(analytic))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def conv_reference(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # direct windowed cross-correlation, independent of the module's im2col
    b, c, h, w = x.shape
    f, _, kh, _ = k.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b, f, h, w))
    for bi in range(b):
        for oc in range(f):
            for i in range(h):
                for j in range(w):
                    out[bi, oc, i, j] = np.sum(xp[bi, :, i : i + kh, j : j + kh] * k[oc])
    return out


def softmax_reference(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def maxpool_reference(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x[:, :, : h // 2 * 2, : w // 2 * 2].reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def primitive_cases():
    """(name, shape of the varied input, tape fn, plain-numpy fn) per primitive."""
    cases = []

    def case(name, shape, make):
        cases.append((name, shape, make))

    case("add", (3, 4), lambda s: (
        lambda t, x: tensor_sum(multiply(add(x, _const(s, (3, 4))), _w(s, (3, 4)))),
        lambda x: np.sum((x + _const(s, (3, 4))) * _w(s, (3, 4))),
    ))
    case("multiply", (3, 4), lambda s: (
        lambda t, x: tensor_sum(multiply(multiply(x, _const(s, (3, 4))), _w(s, (3, 4)))),
        lambda x: np.sum(x * _const(s, (3, 4)) * _w(s, (3, 4))),
    ))
    case("matmul_left", (4, 5), lambda s: (
        lambda t, x: tensor_sum(multiply(matmul(x, _const(s, (5, 3))), _w(s, (4, 3)))),
        lambda x: np.sum((x @ _const(s, (5, 3))) * _w(s, (4, 3))),
    ))
    case("matmul_right", (5, 3), lambda s: (
        lambda t, x: tensor_sum(multiply(matmul(_const(s, (4, 5)), x), _w(s, (4, 3)))),
        lambda x: np.sum((_const(s, (4, 5)) @ x) * _w(s, (4, 3))),
    ))
    case("bias_add_input", (6, 4), lambda s: (
        lambda t, x: tensor_sum(multiply(bias_add(x, _const(s, (4,))), _w(s, (6, 4)))),
        lambda x: np.sum((x + _const(s, (4,))) * _w(s, (6, 4))),
    ))
    case("bias_add_bias", (4,), lambda s: (
        lambda t, x: tensor_sum(multiply(bias_add(_const(s, (6, 4)), x), _w(s, (6, 4)))),
        lambda x: np.sum((_const(s, (6, 4)) + x) * _w(s, (6, 4))),
    ))
    case("relu", (5, 5), lambda s: (
        lambda t, x: tensor_sum(multiply(relu(x), _w(s, (5, 5)))),
        lambda x: np.sum(np.maximum(x, 0.0) * _w(s, (5, 5))),
    ))
    case("reshape", (3, 8), lambda s: (
        lambda t, x: tensor_sum(multiply(reshape(x, (6, 4)), _w(s, (6, 4)))),
        lambda x: np.sum(x.reshape(6, 4) * _w(s, (6, 4))),
    ))
    case("tensor_sum", (4, 7), lambda s: (
        lambda t, x: multiply(tensor_sum(x), float(_w(s, (1,))[0])),
        lambda x: np.sum(x) * float(_w(s, (1,))[0]),
    ))
    case("softmax", (3, 7), lambda s: (
        lambda t, x: tensor_sum(multiply(softmax(x), _w(s, (3, 7)))),
        lambda x: np.sum(softmax_reference(x) * _w(s, (3, 7))),
    ))
    case("cross_entropy", (4, 6), lambda s: (
        lambda t, x: tensor_sum(cross_entropy(softmax(x), np.array([1, 0, 5, 3]))),
        lambda x: -np.sum(np.log(softmax_reference(x)[np.arange(4), [1, 0, 5, 3]])),
    ))
    case("maxpool2d", (2, 2, 6, 6), lambda s: (
        lambda t, x: tensor_sum(multiply(maxpool2d(x), _w(s, (2, 2, 3, 3)))),
        lambda x: np.sum(maxpool_reference(x) * _w(s, (2, 2, 3, 3))),
    ))
    case("conv2d_input", (1, 2, 5, 5), lambda s: (
        lambda t, x: tensor_sum(multiply(conv2d(x, _const(s, (2, 2, 3, 3))), _w(s, (1, 2, 5, 5)))),
        lambda x: np.sum(conv_reference(x, _const(s, (2, 2, 3, 3))) * _w(s, (1, 2, 5, 5))),
    ))
    case("conv2d_kernel", (2, 2, 3, 3), lambda s: (
        lambda t, x: tensor_sum(multiply(conv2d(_const(s, (1, 2, 5, 5)), x), _w(s, (1, 2, 5, 5)))),
        lambda x: np.sum(conv_reference(_const(s, (1, 2, 5, 5)), x) * _w(s, (1, 2, 5, 5))),
    ))
    return cases


def _const(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(20_000 + seed).normal(size=shape)


def _w(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(30_000 + seed).normal(size=shape)


def tiny_model() -> Model:
    arch = Architecture(
        layers=(Conv(2, 3), Relu(), MaxPool(), Flatten(), Dense(8), Relu(), Dense(3), Softmax()),
        input_shape=(1, 8, 8),
        num_classes=3,
    )
    params = init_params(arch, seed=5)
    meta = TrainingMetadata(seed=5, epochs=0, learning_rate=0.0, batch_size=1)
    return Model(architecture=arch, params=params, metadata=meta)


def test_criterion_1_gradient_correctness(capsys):
    started = time.monotonic()
    worst = 0.0
    worst_name = ""
    for name, shape, make in primitive_cases():
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=shape)
            if name == "relu":
                x = x + np.where(x >= 0.0, 0.02, -0.02)  # keep clear of the kink
            if name == "maxpool2d":
                x = x + np.arange(x.size).reshape(shape) * 1e-4  # break pooling ties
            tape_fn, np_fn = make(seed)
            tape = Tape()
            leaf = tape.leaf(x)
            grads = backward(tape, tape_fn(tape, leaf))
            err = relative_error(grads[leaf.node_id], finite_difference_gradient(np_fn, x))
            if err > worst:
                worst, worst_name = err, f"{name}/seed{seed}"
    model = tiny_model()
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        image = rng.uniform(size=(1, 8, 8))
        label = seed % 3
        _, grad = loss_and_input_gradient(model, image, label)
        numeric = finite_difference_gradient(
            lambda im: -np.log(predict_probabilities(model, im)[label]), image
        )
        err = relative_error(grad, numeric)
        if err > worst:
            worst, worst_name = err, f"model_input/seed{seed}"
    elapsed = time.monotonic() - started
    ok = worst < 1e-4 and elapsed < 60.0
    verdict(
        capsys, 1, ok,
        f"worst relative error {worst:.2e} ({worst_name}) over 14 primitive cases "
        f"and full-model input gradients, 20 seeds each, {elapsed:.1f}s",
    )


# --- 2: distortion oracle ---------------------------------------------------


def test_criterion_2_distortion_oracle(capsys):
    a = np.full((1, 8, 8), 0.25)
    exact_zero = distortion(a, a.copy()).rms == 0.0
    single = a.copy()
    single[0, 3, 4] += 0.4
    exact_single = abs(distortion(single, a).rms - 0.4 / np.sqrt(64.0)) <= 1e-12
    exact_uniform = abs(distortion(a + 0.125, a).rms - 0.125) <= 1e-12
    rng = np.random.default_rng(42)
    worst_sym = worst_hom = 0.0
    for _ in range(1000):
        x = rng.uniform(size=(1, 6, 6))
        y = rng.uniform(size=(1, 6, 6))
        k = float(rng.uniform(0.1, 3.0))
        worst_sym = max(worst_sym, abs(distortion(x, y).rms - distortion(y, x).rms))
        worst_hom = max(
            worst_hom, abs(distortion(k * x, k * y).rms - k * distortion(x, y).rms)
        )
    ok = exact_zero and exact_single and exact_uniform and worst_sym == 0.0 and worst_hom <= 1e-12
    verdict(
        capsys, 2, ok,
        f"pinned cases exact, 1000 random pairs: symmetry gap {worst_sym:.1e}, "
        f"homogeneity gap {worst_hom:.1e}",
    )


# --- 3: step bound ----------------------------------------------------------


def test_criterion_3_step_bound(capsys, small_model, small_test):
    worst_excess = -np.inf
    runs = 0
    for index, alpha in [(0, 0.5), (1, 1.0), (2, 2.0), (3, 1.0), (4, 0.5), (5, 1.5)]:
        image = small_test.images[index].pixels
        target = (small_test.images[index].label + 1) % 4
        config = AttackConfig(
            alpha=alpha,
            max_iterations=30,
            distortion_cap=np.inf,
            clamp_pixels=False,
            success_confidence=0.999,
        )
        result = relabel(small_model, image, target, config)
        bound = result.iterations_used * alpha / 255.0
        linf = float(np.max(np.abs(result.perturbed - image)))
        worst_excess = max(worst_excess, linf - bound)
        runs += 1
    ok = worst_excess <= 1e-12
    verdict(
        capsys, 3, ok,
        f"max excess over N*alpha/255 bound {worst_excess:.1e} across {runs} "
        f"unclamped sign-mode runs",
    )


# --- 4: pair sweep ----------------------------------------------------------


def test_criterion_4_pair_sweep(capsys, reference_model, shapes_test, sweep_report):
    started = time.monotonic()
    again = pair_sweep(reference_model, shapes_test, 2, experiment_attack_config(), workers=2)
    rerun_seconds = time.monotonic() - started
    deterministic = sweep_to_json(again) == sweep_to_json(sweep_report)
    accuracy = reference_model.metadata.test_accuracy
    overall = sweep_report.overall_success_rate
    attempts = int(sweep_report.attempts.sum())
    cfg = sweep_report.config
    pinned = (cfg.alpha, cfg.distortion_cap, cfg.max_iterations, sweep_report.exemplars_per_class) == (1.0, 0.1, 500, 2)
    ok = accuracy >= 0.90 and overall >= 0.90 and deterministic and pinned and rerun_seconds < 1800
    verdict(
        capsys, 4, ok,
        f"model accuracy {accuracy:.3f}, overall success {overall:.3f} over {attempts} "
        f"attempts (10x10, m=2, alpha=1, cap 0.1, max 500), deterministic rerun "
        f"{deterministic}, sweep {rerun_seconds:.0f}s with 2 workers",
    )


# --- 5: confidence of successful relabellings -------------------------------


def test_criterion_5_confidence(capsys, sweep_report):
    probs = np.asarray(sweep_report.success_target_probabilities)
    frac_half = float(np.mean(probs >= 0.5)) if probs.size else 0.0
    median = float(np.median(probs)) if probs.size else 0.0
    ok = probs.size > 0 and frac_half == 1.0 and median >= 0.9
    verdict(
        capsys, 5, ok,
        f"{probs.size} successes: target probability >= 0.5 in {frac_half:.0%}, "
        f"median {median:.3f} (minimum {probs.min():.3f})",
    )


# --- 6: iterative vs single big step ----------------------------------------


def test_criterion_6_nonstationarity(capsys, reference_model, shapes_test):
    report = nonstationarity_experiment(
        reference_model, shapes_test, 60, experiment_attack_config()
    )
    ok = (
        report.paired >= 50
        and report.iterative_success_rate > report.single_step_success_rate
    )
    verdict(
        capsys, 6, ok,
        f"{report.paired} paired runs: iterative {report.iterative_success_rate:.3f} vs "
        f"single-step {report.single_step_success_rate:.3f} targeted success, "
        f"single-step untargeted misclassification {report.untargeted_misclassification_rate:.3f}",
    )


# --- 7: transformation reversion --------------------------------------------


def test_criterion_7_transformations(capsys, reference_model, adversarial_pool):
    report = transform_suite(reference_model, [r for _, r in adversarial_pool])
    n = report.sample_size
    stay = {
        name: report.counts[name]["stayed_target"] / n
        for name in ("crop", "translate", "mirror")
    }
    identity = report.counts["identity"]["stayed_target"] / n
    ok = n >= 50 and identity == 1.0 and all(v < 0.5 for v in stay.values())
    verdict(
        capsys, 7, ok,
        f"{n} adversarials: stay-target crop {stay['crop']:.3f}, translate "
        f"{stay['translate']:.3f}, mirror {stay['mirror']:.3f} (all < 0.5), identity {identity:.0%}",
    )


# --- 8: non-transfer --------------------------------------------------------


def test_criterion_8_transfer(capsys, reference_model, reference_model_b, shapes_test):
    report = transfer_check(
        reference_model, reference_model_b, shapes_test, 60, experiment_attack_config()
    )
    gap = abs(report.clean_control_accuracy - reference_model_b.metadata.test_accuracy)
    ok = report.n >= 50 and report.still_target < 0.5 and gap <= 0.05
    verdict(
        capsys, 8, ok,
        f"{report.n} adversarials from model A: still-target on B {report.still_target:.3f} "
        f"(< 0.5), clean control {report.clean_control_accuracy:.3f} within "
        f"{gap:.3f} of B's test accuracy {reference_model_b.metadata.test_accuracy:.3f}",
    )


# --- 9: synthesis from noise ------------------------------------------------


def test_criterion_9_gaussian_synthesis(capsys, reference_model, sweep_report):
    config = experiment_attack_config(distortion_cap=0.3)
    distortions = []
    reached = 0
    for target in range(10):
        result = synthesize_from_noise(reference_model, target, config)
        if result.success:
            reached += 1
            distortions.append(result.distortion)
    synth_mean = float(np.mean(distortions)) if distortions else 0.0
    natural_mean = float(np.mean(sweep_report.success_distortions))
    ok = reached >= 9 and synth_mean > natural_mean
    verdict(
        capsys, 9, ok,
        f"{reached}/10 targets reached from noise at cap 0.3; mean synthesis distortion "
        f"{synth_mean:.4f} > mean natural relabelling distortion {natural_mean:.4f}",
    )


# --- 10: impostor detection -------------------------------------------------


def test_criterion_10_impostor_detection(capsys, reference_model, shapes_test):
    attack = experiment_attack_config()
    detect = impostor_experiment(
        reference_model, shapes_test, None, ImpostorConfig(attack=attack), seed=0, workers=2
    )
    shuffled = impostor_experiment(
        reference_model, shapes_test, None,
        ImpostorConfig(attack=attack, shuffle_origins=True), seed=0, workers=2,
    )
    softmax_control = impostor_experiment(
        reference_model, shapes_test, None,
        ImpostorConfig(attack=attack, feature_kind="softmax"), seed=0, workers=2,
    )
    ok = (
        len(detect.accuracies) == 10
        and detect.mean_accuracy > 0.65
        and 0.35 <= shuffled.mean_accuracy <= 0.65
    )
    verdict(
        capsys, 10, ok,
        f"mean detection accuracy {detect.mean_accuracy:.3f} over 10 repeats "
        f"(range {min(detect.accuracies):.2f}-{max(detect.accuracies):.2f}), shuffled-label "
        f"control {shuffled.mean_accuracy:.3f} in [0.35, 0.65]; softmax-feature control "
        f"{softmax_control.mean_accuracy:.3f} for reference",
    )


# --- 11: reproducibility and formats ----------------------------------------


def test_criterion_11_reproducibility(capsys, tmp_path, small_model, small_model_b, small_test):
    # checkpoint round trip is bit-exact
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(small_model, first)
    save_checkpoint(load_checkpoint(first), second)
    checkpoint_exact = first.read_bytes() == second.read_bytes()

    # PGM round trip is bit-exact after the initial 8-bit quantization
    image = small_test.images[0].pixels
    p1, p2 = tmp_path / "one.pgm", tmp_path / "two.pgm"
    write_pgm(p1, image)
    decoded = read_pgm(p1)
    write_pgm(p2, decoded)
    pgm_exact = p1.read_bytes() == p2.read_bytes()
    quantization = float(np.max(np.abs(decoded - image)))

    # every CLI command, rerun into the same directory, byte-identical
    config = tmp_path / "config.json"
    config.write_text(json.dumps(SMALL_CONFIG))
    save_checkpoint(small_model_b, tmp_path / "other.ckpt")
    commands = {
        "train": ["train"],
        "attack": ["attack", "--checkpoint", str(tmp_path / "t/model.ckpt"), "--target", "2", "--image-index", "3"],
        "synth": ["synth", "--checkpoint", str(tmp_path / "t/model.ckpt"), "--target", "1"],
        "sweep": ["sweep", "--checkpoint", str(tmp_path / "t/model.ckpt")],
        "transforms": ["transforms", "--checkpoint", str(tmp_path / "t/model.ckpt")],
        "transfer": [
            "transfer", "--checkpoint", str(tmp_path / "t/model.ckpt"),
            "--checkpoint-b", str(tmp_path / "other.ckpt"),
        ],
        "detect": ["detect", "--checkpoint", str(tmp_path / "t/model.ckpt")],
    }
    stable = {}
    out_of = {"train": tmp_path / "t"}
    for name, argv in commands.items():
        out = out_of.get(name, tmp_path / name)
        args = argv + ["--config", str(config), "--out", str(out)]
        code_a = main(args)
        digest_a = tree_digest(out)
        code_b = main(args)
        stable[name] = code_a == code_b and code_a in (0, 3) and tree_digest(out) == digest_a
    ok = checkpoint_exact and pgm_exact and quantization <= 0.5 / 255.0 + 1e-12 and all(stable.values())
    unstable = sorted(name for name, good in stable.items() if not good)
    verdict(
        capsys, 11, ok,
        f"checkpoint round trip exact {checkpoint_exact}, PGM round trip exact {pgm_exact} "
        f"(quantization {quantization:.5f} <= 1/510), CLI reruns byte-identical for all 7 "
        f"commands{'' if not unstable else ' except ' + ', '.join(unstable)}",
    )
