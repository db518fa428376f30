"""Reconstruction, guidance and distortion losses plus the image importance map."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from laghash import kernels
from laghash.errors import ConfigError, ContractError
from laghash.hashfield import FieldConfig, LevelCache, ParameterStore, QueryBatch, encode_with_cache

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LossWeights:
    lambda_dist: float = 1e-3
    lambda_guide: float = 0.1
    guide_warmup_steps: int | None = None  # None: 10% of the training steps
    huber_delta: float = 0.1

    def __post_init__(self) -> None:
        vals = (self.lambda_dist, self.lambda_guide, self.huber_delta)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("loss weights must be finite")
        if self.lambda_dist < 0 or self.lambda_guide < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError("losses.huber_delta must be positive")
        if self.guide_warmup_steps is not None and self.guide_warmup_steps < 0:
            raise ConfigError("losses.guide_warmup_steps must be >= 0")

    def warmup_for(self, total_steps: int) -> int:
        if self.guide_warmup_steps is not None:
            return self.guide_warmup_steps
        return max(total_steps // 10, 0)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Huber
# ---------------------------------------------------------------------------


def _check_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} differ")
    return pred, target


def huber_loss(pred, target, delta: float) -> float:
    """Mean over components of 0.5 e^2 (|e| <= delta) or delta (|e| - delta/2)."""
    pred, target = _check_pair(pred, target)
    if pred.size == 0:
        return 0.0
    a = np.abs(pred - target)
    per = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return float(per.mean())


def huber_grad(pred, target, delta: float) -> np.ndarray:
    pred, target = _check_pair(pred, target)
    e = pred - target
    return np.clip(e, -delta, delta) / max(pred.size, 1)


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------


@dataclass
class GuidanceTerms:
    """Per (point, Lagrangian level) minimum cost and its (corner, gaussian)."""

    cost: np.ndarray  # (M, Lg)
    corner: np.ndarray  # (M, Lg)
    gaussian: np.ndarray  # (M, Lg)


def guidance_terms(caches: Sequence[LevelCache]) -> GuidanceTerms:
    """Hard assignment of every point to its cheapest Gaussian, per level.

    cost(v, k) = -log(alpha_v) + |x - mu_vk|^2 / (2 sigma^2); corners with
    alpha_v = 0 never win.  Ties go to the lowest corner, then lowest k.
    """
    lag = [c for c in caches if c.level.lagrangian]
    m = len(caches[0].alphas) if caches else 0
    cost = np.zeros((m, len(lag)))
    corner = np.zeros((m, len(lag)), dtype=np.int64)
    gauss = np.zeros((m, len(lag)), dtype=np.int64)
    for j, c in enumerate(lag):
        cost[:, j], corner[:, j], gauss[:, j] = kernels.guidance_argmin(c.alphas, c.diff, c.sigma)
    return GuidanceTerms(cost, corner, gauss)


def guidance_value(terms: GuidanceTerms, weights: np.ndarray, normalizer: float) -> float:
    if normalizer <= 0:
        return 0.0
    return float(np.sum(weights * terms.cost.sum(axis=1)) / normalizer)


def guidance_loss(
    config: FieldConfig,
    params: ParameterStore,
    batch: QueryBatch,
    sigmas: Sequence[float],
    normalizer: float | None = None,
) -> tuple[float, GuidanceTerms]:
    """Weighted one-sided Chamfer term between query points and Gaussian means.

    The default reduction is the mean over the batch; pass ``normalizer``
    (e.g. the total weight) for a weighted mean instead.
    """
    if batch.weights is None:
        raise ContractError("guidance_loss needs a batch with importance weights")
    _, caches = encode_with_cache(config, params, batch.positions, sigmas)
    terms = guidance_terms(caches)
    norm = float(len(batch)) if normalizer is None else float(normalizer)
    return guidance_value(terms, batch.weights, norm), terms


# ---------------------------------------------------------------------------
# Distortion
# ---------------------------------------------------------------------------


def _check_samples(w, s, ds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w, s, ds = np.asarray(w), np.asarray(s), np.asarray(ds)
    if not (w.shape == s.shape == ds.shape):
        raise ContractError("weights, midpoints and intervals must share a shape")
    if s.shape[-1] > 1 and np.any(np.diff(s, axis=-1) < 0):
        raise ContractError("sample midpoints must be sorted ascending")
    return w, s, ds


def distortion_per_ray(w, s, ds) -> np.ndarray:
    """sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 ds_i along the last axis, in O(S)."""
    w, s, ds = _check_samples(w, s, ds)
    ws = w * s
    w_before = np.cumsum(w, axis=-1) - w
    ws_before = np.cumsum(ws, axis=-1) - ws
    inter = 2.0 * np.sum(w * (s * w_before - ws_before), axis=-1)
    intra = np.sum(w * w * ds, axis=-1) / 3.0
    return inter + intra


def distortion_loss(w, s, ds) -> float:
    """Distortion of a single ray."""
    return float(distortion_per_ray(w, s, ds))


def distortion_grad(w, s, ds) -> np.ndarray:
    """d/dw_k of the per-ray distortion: 2 sum_j w_j |s_k - s_j| + 2/3 w_k ds_k."""
    w, s, ds = _check_samples(w, s, ds)
    ws = w * s
    cw, cws = np.cumsum(w, axis=-1), np.cumsum(ws, axis=-1)
    tw, tws = cw[..., -1:], cws[..., -1:]
    w_before, ws_before = cw - w, cws - ws
    w_after, ws_after = tw - cw, tws - cws
    spread = s * w_before - ws_before + ws_after - s * w_after
    return 2.0 * spread + (2.0 / 3.0) * w * ds


# ---------------------------------------------------------------------------
# Importance map and total
# ---------------------------------------------------------------------------


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[-1] >= 3:
        return image[..., :3] @ LUMA
    return image[..., 0]


def image_weight_map(image: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the luminance, scaled so the maximum is 1."""
    lum = luminance(image)
    gy = np.gradient(lum, axis=0) if lum.shape[0] > 1 else np.zeros_like(lum)
    gx = np.gradient(lum, axis=1) if lum.shape[1] > 1 else np.zeros_like(lum)
    mag = np.sqrt(gx**2 + gy**2)
    top = mag.max() if mag.size else 0.0
    return mag / top if top > 0 else np.zeros_like(mag)


def guide_ramp(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(max(step, 0) / warmup_steps, 1.0)


def total_loss(recon: float, dist: float, guide: float, weights: LossWeights, step: int, total_steps: int = 0) -> float:
    ramp = guide_ramp(step, weights.warmup_for(total_steps))
    return recon + weights.lambda_dist * dist + weights.lambda_guide * ramp * guide
