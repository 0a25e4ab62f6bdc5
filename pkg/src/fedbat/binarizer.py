"""Learnable stochastic binarization of model updates.

Each element ``x`` of a layer update is mapped to ``+alpha`` or ``-alpha``:
values outside ``[-alpha, alpha]`` are clamped to the nearest end, values
inside are rounded up with probability ``(alpha + x) / (2 alpha)``, which makes
the operator unbiased there. Gradients use the straight-through convention,
and the step size is learned through ``alpha = alpha_prime * exp(rho * alpha_e)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import math

import numpy as np

from .tensor import NonFiniteError, SeededRng, norms

ALPHA_FLOOR = 1e-8

ABOVE, INSIDE, BELOW = 1, 0, -1


class RecordMismatchError(ValueError):
    """Backward called with a record from a different forward pass."""


@dataclass(frozen=True)
class StepSizeParam:
    alpha_prime: float
    alpha_e: float = 0.0
    rho: float = 6.0

    def __post_init__(self):
        if not self.alpha_prime > 0:
            raise ValueError(f"alpha_prime must be positive, got {self.alpha_prime}")
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")

    @property
    def alpha(self) -> float:
        return effective_alpha(self)


@dataclass(frozen=True)
class BinarizeRecord:
    """Per-element region tags and the realized floor outcome of a forward call.

    ``floor_bits`` is only meaningful where ``region == INSIDE``; it is 0
    elsewhere.
    """

    region: np.ndarray
    floor_bits: np.ndarray
    alpha: float

    def __len__(self) -> int:
        return self.region.size


@dataclass
class UpdateDelta:
    """Per-layer update vectors with their step-size parameters."""

    layers: list[np.ndarray]
    steps: list[StepSizeParam] | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an update needs at least one layer")
        if any(np.asarray(v).size == 0 for v in self.layers):
            raise ValueError("update layers must be nonempty")
        if self.steps is not None and len(self.steps) != len(self.layers):
            raise ValueError("one step size per layer required")


def effective_alpha(step: StepSizeParam) -> float:
    return step.alpha_prime * math.exp(step.rho * step.alpha_e)


def init_step_size(m_l, rho: float = 6.0) -> StepSizeParam:
    """Layer-wise initialization: mean absolute update, floored at ``ALPHA_FLOOR``."""
    m_l = np.asarray(m_l, dtype=np.float64).reshape(-1)
    l1, _, _ = norms(m_l)
    return StepSizeParam(alpha_prime=max(l1 / m_l.size, ALPHA_FLOOR), alpha_e=0.0, rho=rho)


def _binarize(m: np.ndarray, alpha: float, zeta: np.ndarray) -> tuple[np.ndarray, BinarizeRecord]:
    region = np.zeros(m.shape, dtype=np.int8)
    region[m > alpha] = ABOVE
    region[m < -alpha] = BELOW
    inside = region == INSIDE
    # (alpha + x) / (2 alpha) lies in [0, 1] inside, so floor(p + zeta) is 1
    # exactly when p + zeta >= 1. Comparing min >= 1 - max avoids rounding the
    # sum: 1 - max is exact whenever max >= 0.5, and otherwise the sum is < 1.
    prob_up = (alpha + m) / (2.0 * alpha)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=np.float64), prob_up.shape)
    up = np.minimum(prob_up, zeta) >= 1.0 - np.maximum(prob_up, zeta)
    floor_bits = (inside & up).astype(np.int8)
    signs = np.where(inside, 2 * floor_bits - 1, region).astype(np.float64)
    return alpha * signs, BinarizeRecord(region=region, floor_bits=floor_bits, alpha=alpha)


def binarize_forward(m, step: StepSizeParam, rng: SeededRng) -> tuple[np.ndarray, BinarizeRecord]:
    """Binarize ``m`` to ``{-alpha, +alpha}`` with fresh uniform noise per element."""
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("cannot binarize non-finite values")
    alpha = effective_alpha(step)
    zeta = rng.uniform(m.size)
    return _binarize(m, alpha, zeta)


def binarize_backward(upstream, m, step: StepSizeParam, record: BinarizeRecord) -> tuple[np.ndarray, float]:
    """Straight-through gradients for ``m`` and for the learnable exponent ``alpha_e``.

    ``upstream`` is dL/d(binarized m). Returns ``(grad_m, grad_alpha_e)``.
    """
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if not (upstream.size == m.size == len(record)):
        raise RecordMismatchError(
            f"shape mismatch: upstream {upstream.size}, m {m.size}, record {len(record)}"
        )
    alpha = effective_alpha(step)
    inside = record.region == INSIDE
    grad_m = np.where(inside, upstream, 0.0)
    dalpha = np.where(inside, 2.0 * record.floor_bits - (m + alpha) / alpha, record.region.astype(np.float64))
    # chain rule through alpha = alpha_prime * exp(rho * alpha_e)
    grad_alpha_e = float(np.dot(upstream, dalpha)) * step.rho * alpha
    return grad_m, grad_alpha_e


class BinarizerOps(NamedTuple):
    forward: object
    backward: object


def _identity_forward(m, step, rng):
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    return m, None


def _identity_backward(upstream, m, step, record):
    return np.asarray(upstream, dtype=np.float64).reshape(-1), 0.0


STOCHASTIC = BinarizerOps(binarize_forward, binarize_backward)
# test hook: turns binarized training into plain update training
IDENTITY = BinarizerOps(_identity_forward, _identity_backward)


def binarize_theory_variant(m, rng: SeededRng) -> np.ndarray:
    """Binarize with ``alpha = max|m_i|`` (no learning); zero input is returned as is."""
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    _, _, linf = norms(m)
    if linf == 0.0:
        return m.copy()
    zeta = rng.uniform(m.size)
    out, _ = _binarize(m, linf, zeta)
    return out


def variance_ratio_q(m, trials: int, rng: SeededRng) -> float:
    """Monte Carlo estimate of sqrt(E||S(m) - m||^2 / ||m||^2) for the max-norm variant."""
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    _, l2, _ = norms(m)
    if l2 == 0.0:
        raise ValueError("variance ratio is undefined for the zero vector")
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    total = 0.0
    for _ in range(trials):
        diff = binarize_theory_variant(m, rng) - m
        total += float(np.dot(diff, diff))
    return math.sqrt(total / trials) / l2


def with_alpha_e(step: StepSizeParam, alpha_e: float) -> StepSizeParam:
    return replace(step, alpha_e=alpha_e)
