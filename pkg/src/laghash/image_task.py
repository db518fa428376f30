"""2D image fitting: dataset, training loop, evaluation and point export."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from laghash.errors import ContractError
from laghash.gradients import Tape, backward, t_activate, t_encode, t_guidance, t_huber, t_mlp, t_sum
from laghash.hashfield import FieldConfig, ParameterStore, build_levels, encode_with_cache, field_eval, init_params
from laghash.losses import LossWeights, guide_ramp, guidance_terms, guidance_value, huber_loss, image_weight_map
from laghash.optim import TrainState, adam_step, level_sigmas

PSNR_CAP = 100.0


@dataclass
class TrainOptions:
    steps: int = 2000
    batch: int = 2**14
    lr: float = 1e-2
    lr_gaussian: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    log_every: int = 100
    val_pixels: int = 4096
    seed: int = 0
    dtype: str = "float32"


@dataclass
class ImageDataset:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    weight_map: np.ndarray = field(default=None)  # (H, W)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.size == 0:
            raise ContractError("image must have shape (H, W, C)")
        if px.min() < 0 or px.max() > 1:
            raise ContractError("pixel values must lie in [0, 1]")
        self.pixels = px
        if self.weight_map is None:
            self.weight_map = image_weight_map(px)
        if self.weight_map.shape != px.shape[:2]:
            raise ContractError("weight map shape does not match the image")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def coords(self) -> np.ndarray:
        return pixel_coords(*self.pixels.shape[:2])

    @property
    def flat_pixels(self) -> np.ndarray:
        return self.pixels.reshape(-1, self.pixels.shape[2])

    @property
    def flat_weights(self) -> np.ndarray:
        return self.weight_map.ravel()


def pixel_coords(h: int, w: int) -> np.ndarray:
    """Row-major pixel centres; pixel (r, c) maps to ((c + 0.5) / w, (r + 0.5) / h)."""
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(c.ravel() + 0.5) / w, (r.ravel() + 0.5) / h], axis=1)


# ---------------------------------------------------------------------------
# Image sources
# ---------------------------------------------------------------------------


def synthetic_image(spec: str) -> np.ndarray:
    """Built-in fixtures: ``step_edge:N``, ``checker:N:cell``, ``constant:N:value``, ``noise:N:seed``."""
    kind, *args = spec.split(":")
    n = int(args[0]) if args else 64
    if kind == "step_edge":
        img = np.zeros((n, n))
        img[:, n // 2 :] = 1.0
    elif kind == "checker":
        cell = int(args[1]) if len(args) > 1 else 8
        r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        img = (((r // cell) + (c // cell)) % 2).astype(np.float64)
    elif kind == "constant":
        img = np.full((n, n), float(args[1]) if len(args) > 1 else 0.5)
    elif kind == "noise":
        seed = int(args[1]) if len(args) > 1 else 0
        img = np.random.default_rng(seed).uniform(size=(n, n, 3))
    else:
        raise ValueError(f"unknown synthetic image {spec!r}")
    return img[..., None] if img.ndim == 2 else img


def load_image(source: str | Path) -> np.ndarray:
    """PNG (8-bit grey or RGB) or a ``synthetic:`` fixture, as floats in [0, 1]."""
    source = str(source)
    if source.startswith("synthetic:"):
        return synthetic_image(source[len("synthetic:") :])
    from PIL import Image

    with Image.open(source) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def save_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(str(path))


# ---------------------------------------------------------------------------
# Metrics and evaluation
# ---------------------------------------------------------------------------


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def predict_colors(config: FieldConfig, params: ParameterStore, x: np.ndarray, sigmas) -> np.ndarray:
    raw = field_eval(config, params, x, sigmas)
    return 1.0 / (1.0 + np.exp(-raw.astype(np.float64)))


def render_full(
    config: FieldConfig, params: ParameterStore, sigmas, height: int, width: int, tile: int = 4096
) -> np.ndarray:
    """Evaluate every pixel centre in row-major tiles; returns (H, W, output_dim)."""
    coords = pixel_coords(height, width)
    out = np.empty((len(coords), config.output_dim))
    for start in range(0, len(coords), max(tile, 1)):
        stop = start + max(tile, 1)
        out[start:stop] = predict_colors(config, params, coords[start:stop], sigmas)
    return out.reshape(height, width, config.output_dim)


@dataclass
class GaussianPoint:
    level: int
    bucket: int
    k: int
    mean: tuple[float, ...]
    sigma: float


def export_points(config: FieldConfig, params: ParameterStore, sigmas) -> list[GaussianPoint]:
    """Every Gaussian mean of every Lagrangian level, tagged with its level and bucket."""
    pts = []
    sig = list(sigmas) if config.lagrangian_levels else []
    for lvl in build_levels(config):
        if not lvl.lagrangian:
            continue
        s = sig[lvl.index - config.first_lagrangian]
        means = params.view(f"gaussian_means/{lvl.index}").astype(np.float64)
        for b in range(means.shape[0]):
            for k in range(means.shape[1]):
                pts.append(GaussianPoint(lvl.index, b, k, tuple(means[b, k].tolist()), s))
    return pts


def level_means(params: ParameterStore, level: int) -> np.ndarray:
    m = params.view(f"gaussian_means/{level}")
    return m.reshape(-1, m.shape[-1]).astype(np.float64)


# ---------------------------------------------------------------------------
# Objective and training
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    total: float
    recon: float
    guide: float
    grad: np.ndarray | None


def image_objective(
    config: FieldConfig,
    params: ParameterStore,
    x: np.ndarray,
    target: np.ndarray,
    importance: np.ndarray,
    sigmas,
    losses: LossWeights,
    guide_scale: float,
    with_grad: bool = True,
) -> StepResult:
    """recon(sigmoid(field(x)), target) + guide_scale * lambda_guide * guidance(x, importance)."""
    tape = Tape(params)
    code, caches = t_encode(tape, config, x, sigmas)
    pred = t_activate(tape, t_mlp(tape, code), ["sigmoid"] * config.output_dim)
    recon = t_huber(tape, pred, target.astype(pred.value.dtype), losses.huber_delta)
    terms, coeffs = [recon], [1.0]
    guide_value = 0.0
    if config.lagrangian_levels:
        guide, _ = t_guidance(tape, caches, importance, float(len(x)))
        guide_value = float(guide.value)
        terms.append(guide)
        coeffs.append(losses.lambda_guide * guide_scale)
    total = t_sum(tape, terms, coeffs)
    grad = backward(tape, {total: 1.0}).copy() if with_grad else None
    return StepResult(float(total.value), float(recon.value), guide_value, grad)


@dataclass
class FitResult:
    params: ParameterStore
    state: TrainState
    metrics: list[dict]
    seconds: float


def val_metrics(config, params, dataset, val_idx, sigmas, losses) -> tuple[float, float, float]:
    x = dataset.coords[val_idx]
    target = dataset.flat_pixels[val_idx]
    pred = predict_colors(config, params, x, sigmas)
    recon = huber_loss(pred, target, losses.huber_delta)
    guide = 0.0
    if config.lagrangian_levels:
        _, caches = encode_with_cache(config, params, x, sigmas)
        guide = guidance_value(guidance_terms(caches), dataset.flat_weights[val_idx], float(len(x)))
    return recon, guide, psnr(pred, target)


def validation_indices(n_pixels: int, count: int, seed: int) -> np.ndarray:
    """Fixed validation subsample, drawn from its own stream so eval can replay it."""
    rng = np.random.default_rng((seed, 0x5A1))
    return np.sort(rng.choice(n_pixels, size=min(count, n_pixels), replace=False))


def fit_image(
    config: FieldConfig,
    dataset: ImageDataset,
    opts: TrainOptions,
    losses: LossWeights,
    params: ParameterStore | None = None,
) -> FitResult:
    """Train the field on one image; logs a metrics row every ``log_every`` steps."""
    if config.dim != 2:
        raise ContractError(f"image fitting needs a 2D field, got dim={config.dim}")
    if config.output_dim != dataset.shape[2]:
        raise ContractError(f"field.output_dim={config.output_dim} but the image has {dataset.shape[2]} channels")
    rng = np.random.default_rng(opts.seed)
    if params is None:
        params = init_params(config, rng, np.dtype(opts.dtype))
    state = TrainState.for_params(
        params, lr=opts.lr, lr_gaussian=opts.lr_gaussian, beta1=opts.beta1, beta2=opts.beta2, eps=opts.eps, seed=opts.seed
    )
    n_pix = dataset.shape[0] * dataset.shape[1]
    val_idx = validation_indices(n_pix, opts.val_pixels, opts.seed)
    coords, pixels, weights = dataset.coords, dataset.flat_pixels, dataset.flat_weights
    warmup = losses.warmup_for(opts.steps)
    dtype = params.values.dtype
    metrics: list[dict] = []

    def log(step: int) -> None:
        recon, guide, p = val_metrics(config, params, dataset, val_idx, level_sigmas(config, step), losses)
        metrics.append({"step": step, "recon": recon, "guide": guide, "dist": 0.0, "psnr": p})

    elapsed = 0.0
    for step in range(opts.steps):
        if opts.log_every > 0 and step % opts.log_every == 0:
            log(step)
        t0 = time.perf_counter()
        idx = rng.integers(0, n_pix, size=opts.batch)
        res = image_objective(
            config,
            params,
            coords[idx],
            pixels[idx].astype(dtype),
            weights[idx].astype(dtype),
            level_sigmas(config, step),
            losses,
            guide_ramp(step, warmup),
        )
        adam_step(state, params, res.grad)
        elapsed += time.perf_counter() - t0
    log(opts.steps)
    state.rng_state = rng.bit_generator.state
    return FitResult(params, state, metrics, elapsed)


def steps_for_epochs(epochs: int, n_pixels: int, batch: int) -> int:
    """One epoch is ceil(pixels / batch) batches."""
    return epochs * math.ceil(n_pixels / batch)
