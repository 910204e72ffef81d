"""Self-supervised loss suite over per-ray sample records.

Per-ray integrals (skewed entropy, shadow) are discretized as
delta-weighted means normalized by (t_far - t_near) so weight settings
transfer across scenes with different depth ranges. Logarithms are
natural; binary entropy treats 0 log 0 as exactly 0 and clamps interior
log arguments to keep gradients finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

LOG_EPS = 1e-12
MASS_EPS = 1e-9  # rays with less accumulated static density are "empty"

LOG_COLUMNS = [
    "iteration", "loss_photometric", "loss_skewed_entropy", "loss_ray_reg",
    "loss_static_reg", "loss_shadow_reg", "loss_total",
    "lambda_s", "lambda_r", "lambda_sigma_s", "lambda_rho", "lr",
]


@dataclass
class Schedule:
    """Scalar ramp over normalized training progress in [0, 1]."""

    start_value: float
    end_value: float = 0.0
    mode: Literal["constant", "linear", "exponential"] = "constant"
    duration: float = 1.0

    def __post_init__(self):
        if self.start_value < 0 or self.end_value < 0:
            raise ValueError("schedule values must be nonnegative")
        if self.mode == "exponential" and self.start_value <= 0:
            raise ValueError("exponential schedule requires start_value > 0")
        if not (0 < self.duration <= 1):
            raise ValueError("duration must be in (0, 1]")
        if self.mode == "constant":
            self.end_value = self.start_value

    def value(self, progress: float) -> float:
        if not (0.0 <= progress <= 1.0):
            raise ValueError("progress must be in [0, 1]")
        if self.mode == "constant":
            return self.start_value
        s = min(progress / self.duration, 1.0)
        if self.mode == "linear":
            return self.start_value + (self.end_value - self.start_value) * s
        return self.start_value * (self.end_value / self.start_value) ** s


def schedule_value(schedule: Schedule, progress: float) -> float:
    return schedule.value(progress)


@dataclass
class LossWeights:
    """Resolved loss weights for one training step."""

    lambda_s: float = 0.0
    lambda_r: float = 0.0
    lambda_sigma_s: float = 0.0
    lambda_rho: float = 0.0
    skew: float = 1.0
    shadow_reg_mode: Literal["squared", "l1_plus_squared"] = "squared"

    def __post_init__(self):
        if min(self.lambda_s, self.lambda_r, self.lambda_sigma_s, self.lambda_rho) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.skew < 1.0:
            raise ValueError("skew must be >= 1")
        if self.shadow_reg_mode not in ("squared", "l1_plus_squared"):
            raise ValueError(f"unknown shadow_reg_mode {self.shadow_reg_mode!r}")


# ---------------------------------------------------------------------------
# individual losses (and their adjoints, used by the trainer)
# ---------------------------------------------------------------------------

def photometric_loss(rendered, target):
    """Squared L2 color error per ray (summed over channels)."""
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sum(diff * diff, axis=-1)


def photometric_grad(rendered, target):
    return 2.0 * (np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64))


def binary_entropy(x):
    """H_b(x) = -(x ln x + (1-x) ln(1-x)), with exact zeros at x in {0, 1}."""
    x = np.asarray(x, dtype=np.float64)
    xc = np.clip(x, LOG_EPS, 1.0 - LOG_EPS)
    h = -(x * np.log(xc) + (1.0 - x) * np.log1p(-xc))
    return np.where((x <= 0.0) | (x >= 1.0), 0.0, h)


def binary_entropy_grad(x):
    """dH_b/dx with the same interior clamp, so it stays finite at 0 and 1."""
    xc = np.clip(np.asarray(x, dtype=np.float64), LOG_EPS, 1.0 - LOG_EPS)
    return np.log1p(-xc) - np.log(xc)


def skewed_entropy_loss(w, delta, t_near, t_far, k: float):
    """Delta-weighted mean of H_b(w^k) along each ray."""
    w = np.asarray(w, dtype=np.float64)
    span = np.asarray(t_far, dtype=np.float64) - np.asarray(t_near, dtype=np.float64)
    return np.sum(binary_entropy(w ** k) * delta, axis=-1) / span


def skewed_entropy_grad(w, delta, t_near, t_far, k: float):
    w = np.asarray(w, dtype=np.float64)
    span = np.asarray(t_far, dtype=np.float64) - np.asarray(t_near, dtype=np.float64)
    chain = binary_entropy_grad(w ** k) * k * w ** (k - 1.0)
    return chain * delta / span[..., None]


def ray_regularization(w):
    """Maximum density ratio along the ray; 0 for empty sample lists."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] == 0:
        return np.zeros(w.shape[:-1])
    return np.max(w, axis=-1)


def ray_regularization_grad(w):
    """Subgradient: all mass on the first argmax sample."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.zeros_like(w)
    if w.shape[-1] == 0:
        return grad
    idx = np.argmax(w, axis=-1)
    np.put_along_axis(grad, idx[..., None], 1.0, axis=-1)
    return grad


def static_regularization(sigma_s, delta):
    """Entropy of the normalized static density mass along the ray."""
    mass = np.asarray(sigma_s, dtype=np.float64) * delta
    total = np.sum(mass, axis=-1, keepdims=True)
    p = mass / np.maximum(total, MASS_EPS)
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, LOG_EPS)), 0.0)
    ent = -np.sum(plogp, axis=-1)
    return np.where(total[..., 0] < MASS_EPS, 0.0, ent)


def static_regularization_grad(sigma_s, delta):
    mass = np.asarray(sigma_s, dtype=np.float64) * delta
    total = np.sum(mass, axis=-1, keepdims=True)
    occupied = total[..., 0] >= MASS_EPS
    safe_total = np.maximum(total, MASS_EPS)
    p = mass / safe_total
    logp = np.log(np.maximum(p, LOG_EPS))
    ent = -np.sum(np.where(p > 0.0, p * logp, 0.0), axis=-1, keepdims=True)
    d_mass = -(logp + ent) / safe_total
    return np.where(occupied[..., None], d_mass * delta, 0.0)


def shadow_regularization(rho, delta, t_near, t_far, mode: str = "squared"):
    """Delta-weighted mean of rho^2 (or rho + rho^2) along the ray."""
    rho = np.asarray(rho, dtype=np.float64)
    g = rho * rho if mode == "squared" else rho + rho * rho
    span = np.asarray(t_far, dtype=np.float64) - np.asarray(t_near, dtype=np.float64)
    return np.sum(g * delta, axis=-1) / span


def shadow_regularization_grad(rho, delta, t_near, t_far, mode: str = "squared"):
    rho = np.asarray(rho, dtype=np.float64)
    g = 2.0 * rho if mode == "squared" else 1.0 + 2.0 * rho
    span = np.asarray(t_far, dtype=np.float64) - np.asarray(t_near, dtype=np.float64)
    return g * delta / span[..., None]


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

@dataclass
class SampleLossGrads:
    """Upstream gradients for `composite_backward`, batch mean included."""

    d_color: np.ndarray
    d_w: np.ndarray
    d_sigma_s: np.ndarray
    d_rho: np.ndarray | None


def _breakdown(out, targets, weights: LossWeights):
    terms = {
        "photometric": np.mean(photometric_loss(out.color, targets)),
        "skewed_entropy": np.mean(
            skewed_entropy_loss(out.w, out.delta, out.t_near, out.t_far, weights.skew)
        ),
        "ray_reg": np.mean(ray_regularization(out.w)),
        "static_reg": np.mean(static_regularization(out.sigma_s, out.delta)),
        "shadow_reg": np.mean(
            shadow_regularization(out.rho, out.delta, out.t_near, out.t_far,
                                  weights.shadow_reg_mode)
        ),
    }
    terms["total"] = (
        terms["photometric"]
        + weights.lambda_s * terms["skewed_entropy"]
        + weights.lambda_r * terms["ray_reg"]
        + weights.lambda_sigma_s * terms["static_reg"]
        + weights.lambda_rho * terms["shadow_reg"]
    )
    return terms


def total_loss(out, targets, weights: LossWeights):
    """Weighted batch loss; returns (total, per-term breakdown)."""
    terms = _breakdown(out, targets, weights)
    return terms["total"], terms


def total_loss_with_grads(out, targets, weights: LossWeights,
                          batch_denominator: int | None = None):
    """Loss, breakdown, and per-sample upstream gradients in one pass.

    `batch_denominator` overrides the 1/R batch-mean factor on the
    gradients so a chunked batch can normalize by the full batch size.
    """
    terms = _breakdown(out, targets, weights)
    n_rays = out.color.size // 3
    inv = 1.0 / (batch_denominator if batch_denominator is not None else n_rays)

    d_color = photometric_grad(out.color, targets) * inv
    d_w = weights.lambda_s * inv * skewed_entropy_grad(
        out.w, out.delta, out.t_near, out.t_far, weights.skew
    )
    if weights.lambda_r > 0.0:
        d_w = d_w + weights.lambda_r * inv * ray_regularization_grad(out.w)
    d_sigma_s = weights.lambda_sigma_s * inv * static_regularization_grad(out.sigma_s, out.delta)
    d_rho = None
    if weights.lambda_rho > 0.0:
        d_rho = weights.lambda_rho * inv * shadow_regularization_grad(
            out.rho, out.delta, out.t_near, out.t_far, weights.shadow_reg_mode
        )
    return terms["total"], terms, SampleLossGrads(d_color, d_w, d_sigma_s, d_rho)
