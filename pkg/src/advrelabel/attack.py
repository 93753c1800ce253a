"""Targeted relabelling by iterative gradient descent on the input image.

Each step moves the image against the gradient of the classification loss
toward a chosen target class, x <- x - alpha * f(dL/dx), where f is either
the raw gradient or its elementwise sign scaled by the 8-bit pixel quantum
1/255.  A step is committed only if the running RMS distortion against the
starting image stays within the configured cap, so returned results never
exceed the budget.  The module also provides synthesis from Gaussian noise
and the single-big-step control used to probe gradient non-stationarity.

Images cross this interface as plain float64 arrays in [0, 1].  Perturbed
and difference images serialize as binary PGM (P5, 8-bit); results as JSON;
per-iteration traces as CSV.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError
from .metrics import DistortionReport, distortion
from .model import Model, _loss_grad_probs, predict_probabilities

GRADIENT_MODES = ("sign", "raw")

_QUANTUM = 1.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 1.0
    max_iterations: int = 500
    distortion_cap: float = 0.1
    gradient_mode: str = "sign"
    success_confidence: float = 0.5
    clamp_pixels: bool = True
    rng_seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.distortion_cap > 0:
            raise ValueError(f"distortion_cap must be positive, got {self.distortion_cap}")
        if not 0.0 < self.success_confidence < 1.0:
            raise ValueError(
                f"success_confidence must be in (0,1), got {self.success_confidence}"
            )
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(
                f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}"
            )
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    loss: float
    target_prob: float
    distortion: float


@dataclass
class AttackResult:
    success: bool
    perturbed: np.ndarray
    iterations_used: int
    distortion: float
    linf: float
    final_probabilities: np.ndarray
    original_label: int
    target_label: int
    degenerate: bool = False
    skipped: bool = False
    trace: tuple[TraceEntry, ...] | None = None


def scale_gradient(grad: np.ndarray, mode: str) -> np.ndarray:
    """Update direction: sign mode maps each element to {-1, 0, +1} / 255."""
    if mode == "raw":
        return grad
    if mode == "sign":
        return np.sign(grad) * _QUANTUM
    raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {mode!r}")


def update_step(x: np.ndarray, grad: np.ndarray, config: AttackConfig) -> np.ndarray:
    """One descent step on the image; optionally clamped to the valid pixel range."""
    if np.shape(x) != np.shape(grad):
        raise ShapeError(
            f"update_step: operand shapes {np.shape(x)} and {np.shape(grad)} are incompatible"
        )
    out = x - config.alpha * scale_gradient(grad, config.gradient_mode)
    if config.clamp_pixels:
        out = np.clip(out, 0.0, 1.0)
    return out


def _check_attack_inputs(model: Model, image, target: int) -> tuple[np.ndarray, int]:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(model.architecture.input_shape):
        raise ShapeError(
            f"image shape {image.shape} does not match architecture input "
            f"{tuple(model.architecture.input_shape)}"
        )
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image pixels must lie in [0, 1]")
    target = int(target)
    if not 0 <= target < model.num_classes:
        raise ValueError(f"target {target} out of range for {model.num_classes} classes")
    return image, target


def _meets_target(probs: np.ndarray, target: int, confidence: float) -> bool:
    return bool(int(np.argmax(probs)) == target and probs[target] >= confidence)


def relabel(model: Model, image, target: int, config: AttackConfig | None = None) -> AttackResult:
    """Drive the classifier's label on `image` to `target` within the distortion cap.

    Stops at the first iterate whose argmax is the target with at least
    success_confidence probability; a step that would push RMS distortion
    past the cap is discarded and the last in-budget iterate is returned
    with success=False.
    """
    config = config or AttackConfig()
    image, target = _check_attack_inputs(model, image, target)
    probs = predict_probabilities(model, image)
    original_label = int(np.argmax(probs))
    degenerate = original_label == target
    x = image
    rep = DistortionReport(rms=0.0, linf=0.0, n=image.size)
    trace: list[TraceEntry] | None = [] if config.trace else None
    iterations = 0
    success = _meets_target(probs, target, config.success_confidence)
    while not success and iterations < config.max_iterations:
        _, grad, _ = _loss_grad_probs(model, x, target)
        candidate = update_step(x, grad, config)
        cand_rep = distortion(candidate, image)
        if cand_rep.rms > config.distortion_cap:
            break  # over budget: discard the step
        x = candidate
        rep = cand_rep
        iterations += 1
        probs = predict_probabilities(model, x)
        if trace is not None:
            p = float(probs[target])
            loss = -float(np.log(p)) if p > 0.0 else float("inf")
            trace.append(TraceEntry(iterations, loss, p, rep.rms))
        success = _meets_target(probs, target, config.success_confidence)
    perturbed = np.array(x)
    perturbed.setflags(write=False)
    return AttackResult(
        success=success,
        perturbed=perturbed,
        iterations_used=iterations,
        distortion=rep.rms,
        linf=rep.linf,
        final_probabilities=probs,
        original_label=original_label,
        target_label=target,
        degenerate=degenerate,
        trace=None if trace is None else tuple(trace),
    )


def gaussian_start_image(shape: tuple[int, ...], rng_seed: int) -> np.ndarray:
    """Elementwise Gaussian noise, mean 0.5 and stddev 0.15, clamped to [0, 1]."""
    rng = np.random.default_rng(int(rng_seed))
    return np.clip(rng.normal(0.5, 0.15, size=shape), 0.0, 1.0)


def synthesize_from_noise(model: Model, target: int, config: AttackConfig | None = None) -> AttackResult:
    """Relabel a seeded noise image; distortion is measured against the noise."""
    config = config or AttackConfig()
    start = gaussian_start_image(tuple(model.architecture.input_shape), config.rng_seed)
    return relabel(model, start, target, config)


def single_step_control(
    model: Model,
    image,
    target: int,
    budget: float,
    config: AttackConfig | None = None,
) -> AttackResult:
    """One big sign-scaled step of total length `budget` along the first gradient.

    The budget is meant to equal alpha * iterations_used of a paired
    successful iterative run, so both arms travel the same L-inf distance.
    """
    base = config or AttackConfig()
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget == 0:
        image, target = _check_attack_inputs(model, image, target)
        probs = predict_probabilities(model, image)
        original_label = int(np.argmax(probs))
        frozen = np.array(image)
        frozen.setflags(write=False)
        return AttackResult(
            success=_meets_target(probs, target, base.success_confidence),
            perturbed=frozen,
            iterations_used=0,
            distortion=0.0,
            linf=0.0,
            final_probabilities=probs,
            original_label=original_label,
            target_label=target,
            degenerate=original_label == target,
        )
    one_step = dataclasses.replace(
        base,
        alpha=float(budget),
        max_iterations=1,
        distortion_cap=float("inf"),
        gradient_mode="sign",
        trace=False,
    )
    return relabel(model, image, target, one_step)


# ---------------------------------------------------------------------------
# serialization


def config_to_dict(config: AttackConfig) -> dict:
    return {
        "alpha": config.alpha,
        "max_iterations": config.max_iterations,
        "distortion_cap": config.distortion_cap,
        "gradient_mode": config.gradient_mode,
        "success_confidence": config.success_confidence,
        "clamp_pixels": config.clamp_pixels,
        "rng_seed": config.rng_seed,
        "trace": config.trace,
    }


def config_from_dict(d: dict) -> AttackConfig:
    return AttackConfig(**{k: d[k] for k in config_to_dict(AttackConfig()) if k in d})


def result_to_dict(result: AttackResult) -> dict:
    out = {
        "success": result.success,
        "perturbed": result.perturbed.tolist(),
        "iterations_used": result.iterations_used,
        "distortion": result.distortion,
        "linf": result.linf,
        "final_probabilities": [float(p) for p in result.final_probabilities],
        "original_label": result.original_label,
        "target_label": result.target_label,
        "degenerate": result.degenerate,
        "skipped": result.skipped,
    }
    if result.trace is not None:
        out["trace"] = [
            {
                "iteration": e.iteration,
                "loss": e.loss,
                "target_prob": e.target_prob,
                "distortion": e.distortion,
            }
            for e in result.trace
        ]
    return out


def result_to_json(result: AttackResult) -> str:
    return json.dumps(result_to_dict(result), sort_keys=True, indent=2) + "\n"


def trace_to_csv(result: AttackResult) -> str:
    lines = ["iteration,loss,target_prob,distortion"]
    for e in result.trace or ():
        lines.append(f"{e.iteration},{e.loss:.17g},{e.target_prob:.17g},{e.distortion:.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PGM (P5) image files: 8-bit binary grayscale, maxval 255.  A pixel value
# p in [0,1] encodes as round(p*255).


class PgmFormatError(ValueError):
    """Raised for malformed PGM files."""


def write_pgm(path, pixels) -> None:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ValueError(f"write_pgm: grayscale only, got {arr.shape[0]} channels")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2-D image, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("write_pgm: pixels must lie in [0, 1]")
    data = np.rint(arr * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def _pgm_header_tokens(buf: bytes, path: str) -> tuple[list[bytes], int]:
    # magic, width, height, maxval; '#' starts a comment running to end of line
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(buf):
            raise PgmFormatError(f"{path}: truncated header")
        c = buf[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            nl = buf.find(b"\n", i)
            i = len(buf) if nl < 0 else nl + 1
        else:
            j = i
            while j < len(buf) and buf[j : j + 1] not in b" \t\r\n#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (1, height, width) float array in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    tokens, i = _pgm_header_tokens(buf, str(path))
    if tokens[0] != b"P5":
        raise PgmFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r}, expected b'P5')")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise PgmFormatError(f"{path}: non-numeric header fields") from None
    if maxval != 255:
        raise PgmFormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    if w <= 0 or h <= 0:
        raise PgmFormatError(f"{path}: invalid dimensions {w}x{h}")
    raster = buf[i + 1 :]  # single whitespace byte separates header from raster
    if len(raster) != w * h:
        raise PgmFormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    data = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    return (data.astype(np.float64) / 255.0)[None, :, :]


def difference_image(perturbed, original) -> np.ndarray:
    """Pixel deltas amplified 10x and shifted to mid-gray, clipped to [0, 1]."""
    delta = np.asarray(perturbed, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    return np.clip(0.5 + 10.0 * delta, 0.0, 1.0)
