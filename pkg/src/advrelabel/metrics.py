"""Distortion measures and probability reports.

RMS distortion is sqrt(sum((x' - x)^2) / n) where n counts every tensor
element (all channels), so the value is self-consistent for any channel
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError


@dataclass(frozen=True)
class DistortionReport:
    rms: float
    linf: float
    n: int


def distortion(x_prime, x) -> DistortionReport:
    """Root-mean-square and max-abs pixel difference between two images."""
    a = np.asarray(x_prime, dtype=np.float64)
    b = np.asarray(x, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"distortion: operand shapes {a.shape} and {b.shape} are incompatible")
    delta = a - b
    rms = float(np.sqrt(np.sum(delta * delta) / delta.size))
    linf = float(np.max(np.abs(delta))) if delta.size else 0.0
    return DistortionReport(rms=rms, linf=linf, n=delta.size)


def probability_report(model, image, top_k: int) -> list[tuple[int, float]]:
    """Top-k (class, probability) pairs, descending; ties broken by class index."""
    from .model import predict_probabilities

    probs = predict_probabilities(model, image)
    k = probs.shape[0]
    if top_k > k:
        raise ValueError(f"probability_report: top_k={top_k} exceeds class count {k}")
    order = sorted(range(k), key=lambda c: (-probs[c], c))
    return [(c, float(probs[c])) for c in order[:top_k]]
