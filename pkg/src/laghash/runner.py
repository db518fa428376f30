"""Task execution shared by the CLI: training runs, evaluation, gradient fixtures, sweeps."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from laghash.config import RunConfig, resolve
from laghash.errors import ConfigError
from laghash.flatland import (
    FlatlandData,
    FlatScene,
    RayBatch,
    camera_rays,
    default_cameras,
    evaluate_holdout,
    fit_flatland,
    flatland_objective,
    load_scene,
    march_ray,
    ray_bounds,
    sample_along,
    single_disk_scene,
)
from laghash.gradients import FDReport, Tape, backward, fd_check, t_encode, t_guidance
from laghash.hashfield import FieldConfig, ParameterStore, count_params, init_params
from laghash.image_task import (
    FitResult,
    ImageDataset,
    image_objective,
    load_image,
    psnr,
    render_full,
    val_metrics,
    validation_indices,
)
from laghash.losses import guide_ramp
from laghash.optim import TrainState, level_sigmas

METRIC_COLUMNS = ("step", "recon", "guide", "dist", "psnr")
SWEEP_AXES = ("field.table_size", "field.gaussians_per_bucket", "field.lagrangian_levels")


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def load_dataset(cfg: RunConfig, base: Path | None = None) -> ImageDataset:
    src = cfg.io.image
    if src is None:
        raise ConfigError("io.image is required for the image task")
    if not src.startswith("synthetic:"):
        src = str(resolve(src, base))
    try:
        return ImageDataset(load_image(src))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read io.image {cfg.io.image}: {exc}") from exc


def load_scene_for(cfg: RunConfig, base: Path | None = None) -> FlatScene:
    src = cfg.io.scene or "builtin:single_disk"
    if src == "builtin:single_disk":
        return single_disk_scene()
    if src == "builtin:empty":
        return FlatScene([], 3)
    return load_scene(resolve(src, base))


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    fit: FitResult
    psnr: float  # full image PSNR (image) or held-out PSNR (flatland)
    params: int
    extras: dict


def run_task(cfg: RunConfig, base: Path | None = None) -> RunOutcome:
    n_params = count_params(cfg.field)[0]
    if cfg.task == "image":
        from laghash.image_task import fit_image

        ds = load_dataset(cfg, base)
        opts = cfg.train_options(ds.shape[0] * ds.shape[1])
        fit = fit_image(cfg.field, ds, opts, cfg.losses)
        img = render_full(cfg.field, fit.params, level_sigmas(cfg.field, fit.state.step), *ds.shape[:2])
        return RunOutcome(fit, psnr(img, ds.pixels), n_params, {"image": img})
    scene = load_scene_for(cfg, base)
    fit, data = fit_flatland(cfg.field, scene, cfg.train_options(), cfg.flatland, cfg.losses)
    ev = evaluate_holdout(cfg.field, fit.params, data, cfg.flatland, fit.state.step, cfg.losses)
    return RunOutcome(fit, ev.psnr, n_params, {"holdout_images": ev.images, "dist": ev.dist})


def evaluate(cfg: RunConfig, params: ParameterStore, state: TrainState, base: Path | None = None) -> dict:
    """PSNR of a trained field, computed the same way the training run reported it."""
    n_params = count_params(cfg.field)[0]
    sig = level_sigmas(cfg.field, state.step)
    if cfg.task == "image":
        ds = load_dataset(cfg, base)
        h, w = ds.shape[:2]
        img = render_full(cfg.field, params, sig, h, w)
        idx = validation_indices(h * w, cfg.optim.val_pixels, cfg.seed)
        _, _, vp = val_metrics(cfg.field, params, ds, idx, sig, cfg.losses)
        return {"psnr": psnr(img, ds.pixels), "val_psnr": vp, "params": n_params}
    scene = load_scene_for(cfg, base)
    train, holdout = default_cameras(cfg.flatland)
    data = FlatlandData.build(scene, train, holdout, cfg.flatland.gt_samples)
    ev = evaluate_holdout(cfg.field, params, data, cfg.flatland, state.step, cfg.losses)
    return {"psnr": ev.psnr, "dist": ev.dist, "params": n_params}


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_COLUMNS)
        for r in rows:
            wr.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])


def write_points(path: str | Path, points) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["level", "bucket", "k", "mu_x", "mu_y", "sigma"])
        for p in points:
            mu = list(p.mean) + [0.0] * (2 - len(p.mean))
            wr.writerow([p.level, p.bucket, p.k, repr(mu[0]), repr(mu[1]), repr(float(p.sigma))])


# ---------------------------------------------------------------------------
# Gradient fixtures
# ---------------------------------------------------------------------------


def fixture_loss(cfg: RunConfig, base: Path | None = None):
    """Deterministic loss closure ``store -> (loss, grad)`` and float64 parameters for an FD fixture."""
    fd, fc = cfg.fd, cfg.field
    rng = np.random.default_rng(cfg.seed)
    params = init_params(fc, rng, np.float64)
    if fd.param_noise > 0:
        for name, view in params.items():
            if not name.startswith("gaussian_means/"):
                view += rng.normal(0.0, fd.param_noise, size=view.shape)
    sigmas = level_sigmas(fc, fd.step)
    scale = guide_ramp(fd.step, cfg.losses.warmup_for(cfg.optim.steps))

    if fd.kind == "guidance":
        if not fc.lagrangian_levels:
            raise ConfigError("a guidance fixture needs field.lagrangian_levels >= 1")
        x = rng.uniform(size=(fd.points, fc.dim))
        w = rng.uniform(size=fd.points)

        def loss(store: ParameterStore):
            tape = Tape(store)
            _, caches = t_encode(tape, fc, x, sigmas)
            g, _ = t_guidance(tape, caches, w, float(len(x)))
            return float(g.value), backward(tape, {g: 1.0}).copy()

        return loss, params

    if cfg.task == "image":
        ds = load_dataset(cfg, base)
        x, target, imp = ds.coords, ds.flat_pixels, ds.flat_weights

        def loss(store: ParameterStore):
            dt = store.values.dtype
            r = image_objective(fc, store, x, target.astype(dt), imp.astype(dt), sigmas, cfg.losses, scale)
            return r.total, r.grad

        return loss, params

    scene = load_scene_for(cfg, base)
    train, _ = default_cameras(cfg.flatland)
    o, d = camera_rays(train)
    near, far, hit = ray_bounds(o, d)
    pick = np.sort(rng.choice(np.flatnonzero(hit), size=min(fd.rays, int(hit.sum())), replace=False))
    o, d, near, far = o[pick], d[pick], near[pick], far[pick]
    target = march_ray(scene, o, d, cfg.flatland.gt_samples, near, far).rgb
    s, ds_ = sample_along(near, far, fd.samples, rng)
    batch = RayBatch(o, d, s, ds_, target)
    # guidance importances are constants of the loss, so freeze them at the base point
    frozen = flatland_objective(fc, params, batch, sigmas, cfg.losses, scale, with_grad=False).weights.ravel()

    def loss(store: ParameterStore):
        r = flatland_objective(fc, store, batch, sigmas, cfg.losses, scale, frozen_weights=frozen)
        return r.total, r.grad

    return loss, params


def run_fd(cfg: RunConfig, base: Path | None = None) -> dict[str, FDReport]:
    loss, params = fixture_loss(cfg, base)
    fd = cfg.fd
    return {
        "double": fd_check(loss, params, fd.epsilon, fd.tolerance, max_per_slice=fd.max_per_slice),
        "single": fd_check(
            loss, params, fd.epsilon, fd.tolerance_single, analytic_dtype=np.float32, max_per_slice=fd.max_per_slice
        ),
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def with_value(cfg: RunConfig, key: str, value) -> RunConfig:
    section, name = key.split(".", 1)
    sub = dataclasses.replace(getattr(cfg, section), **{name: value})
    return dataclasses.replace(cfg, **{section: sub})


def matched_eulerian(field: FieldConfig) -> FieldConfig:
    """All-Eulerian config whose table size brings its parameter count closest to ``field``'s.

    Table sizes are powers of two, so "closest" is measured as the smallest
    absolute log ratio of the two counts.
    """
    target = count_params(field)[0]
    best, best_gap = None, math.inf
    for e in range(4, 25):
        cand = dataclasses.replace(field, lagrangian_levels=0, table_size=2**e)
        gap = abs(math.log(count_params(cand)[0] / target))
        if gap < best_gap - 1e-12:
            best, best_gap = cand, gap
    return best


@dataclass
class SweepRow:
    variant: str
    params: int
    psnr: float
    seconds: float
    outcome: RunOutcome | None = None
    config: RunConfig | None = None


def sweep(
    cfg: RunConfig, axis: str, values: Sequence, baseline: str | None = None, base: Path | None = None
) -> list[SweepRow]:
    """One run per value (plus a parameter-matched Eulerian run each); rows sorted by params."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    if baseline not in (None, "eulerian"):
        raise ConfigError(f"unknown baseline {baseline!r}; only 'eulerian' is supported")
    if not values:
        raise ConfigError("sweep needs at least one value")
    name = axis.split(".", 1)[1]
    rows = []
    for value in values:
        run = with_value(cfg, axis, int(value))
        variants = [(f"hybrid[{name}={int(value)}]", run)]
        if baseline == "eulerian":
            eul = matched_eulerian(run.field)
            label = f"eulerian[{name}={int(value)};matched_table_size={eul.table_size}]"
            variants.append((label, dataclasses.replace(run, field=eul)))
        for label, rc in variants:
            out = run_task(rc, base)
            rows.append(SweepRow(label, out.params, out.psnr, out.fit.seconds, out, rc))
    rows.sort(key=lambda r: (r.params, r.variant))
    return rows


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["variant", "params", "psnr", "seconds"])
        for r in rows:
            wr.writerow([r.variant, r.params, repr(float(r.psnr)), f"{r.seconds:.3f}"])
