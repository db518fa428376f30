"""Volumetric fitting in flatland: 2D scenes observed by 1D cameras.

Ground truth comes from analytic disk scenes rendered with the same
emission-absorption quadrature used for the learned field, at a much
higher sample count.  All ray samples are restricted to the disk
inscribed in the unit square so field queries stay inside the domain.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from laghash.errors import ContractError
from laghash.gradients import (
    Tape,
    backward,
    t_activate,
    t_composite,
    t_distortion,
    t_encode,
    t_guidance,
    t_huber,
    t_mlp,
    t_reshape,
    t_sum,
    t_take,
)
from laghash.hashfield import FieldConfig, ParameterStore, encode_with_cache, field_eval, init_params
from laghash.image_task import FitResult, StepResult, TrainOptions, psnr
from laghash.losses import LossWeights, distortion_per_ray, guidance_terms, guidance_value, guide_ramp, huber_loss
from laghash.optim import TrainState, adam_step, level_sigmas
from laghash.render import composite

BOUND_CENTER = np.array([0.5, 0.5])
BOUND_RADIUS = 0.5


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class Disk:
    center: tuple[float, float]
    radius: float
    density: float
    color: tuple[float, ...]
    edge: float = 0.0  # width of a linear density ramp at the boundary; 0 is a hard edge

    def occupancy(self, x: np.ndarray) -> np.ndarray:
        dist = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        if self.edge > 0:
            return np.clip((self.radius - dist) / self.edge + 0.5, 0.0, 1.0)
        return (dist <= self.radius).astype(np.float64)

    def contains(self, p) -> bool:
        return float(np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(self.center))) < self.radius


@dataclass
class FlatScene:
    disks: list[Disk] = field(default_factory=list)
    channels: int = 3

    def __post_init__(self) -> None:
        for d in self.disks:
            if d.density < 0:
                raise ContractError("disk densities must be non-negative")
            if len(d.color) != self.channels:
                raise ContractError(f"disk colour must have {self.channels} channels")
            lo = np.asarray(d.center) - d.radius - d.edge / 2
            hi = np.asarray(d.center) + d.radius + d.edge / 2
            if np.any(lo < 0) or np.any(hi > 1):
                raise ContractError(f"disk at {d.center} r={d.radius} leaves the unit square")

    def query(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density (M,) and density-weighted colour (M, C) at positions (M, 2)."""
        x = np.asarray(x, dtype=np.float64)
        dens = np.zeros(len(x))
        col = np.zeros((len(x), self.channels))
        for d in self.disks:
            t = d.density * d.occupancy(x)
            dens += t
            col += t[:, None] * np.asarray(d.color)[None, :]
        nz = dens > 0
        col[nz] /= dens[nz, None]
        return dens, col


def load_scene(path: str | Path) -> FlatScene:
    """Read a scene file: one ``disk cx cy radius density c1 .. cC [edge=W]`` per line."""
    disks, channels = [], None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *vals = line.split()
        if kind != "disk":
            raise ContractError(f"{path}:{lineno}: unknown primitive {kind!r}")
        edge = 0.0
        if vals and vals[-1].startswith("edge="):
            edge = float(vals.pop()[5:])
        nums = [float(v) for v in vals]
        if len(nums) < 5:
            raise ContractError(f"{path}:{lineno}: expected cx cy radius density colour...")
        color = tuple(nums[4:])
        channels = channels or len(color)
        disks.append(Disk((nums[0], nums[1]), nums[2], nums[3], color, edge))
    return FlatScene(disks, channels or 3)


def save_scene(path: str | Path, scene: FlatScene) -> None:
    lines = ["# disk cx cy radius density colour... [edge=W]"]
    for d in scene.disks:
        parts = ["disk", *(repr(float(v)) for v in (*d.center, d.radius, d.density, *d.color))]
        if d.edge:
            parts.append(f"edge={d.edge!r}")
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


def single_disk_scene() -> FlatScene:
    return FlatScene([Disk((0.5, 0.5), 0.2, 30.0, (0.9, 0.4, 0.2))])


# ---------------------------------------------------------------------------
# Cameras and rays
# ---------------------------------------------------------------------------


@dataclass
class Camera1D:
    origin: tuple[float, float]
    direction: tuple[float, float]
    fov: float
    n_pixels: int

    def __post_init__(self) -> None:
        if not 0 < self.fov < math.pi:
            raise ContractError("fov must lie in (0, pi)")
        if self.n_pixels < 1:
            raise ContractError("a camera needs at least one pixel")
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ContractError("view direction must be non-zero")
        self.direction = tuple((d / n).tolist())

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel ray origins and unit directions, (P, 2) each."""
        base = math.atan2(self.direction[1], self.direction[0])
        offs = -self.fov / 2 + (np.arange(self.n_pixels) + 0.5) * self.fov / self.n_pixels
        ang = base + offs
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return np.tile(np.asarray(self.origin, dtype=np.float64), (self.n_pixels, 1)), dirs


def ring_cameras(
    n: int, radius: float = 1.0, fov: float = math.pi / 3, n_pixels: int = 64, phase: float = 0.0
) -> list[Camera1D]:
    """``n`` cameras evenly spaced on a circle around the scene centre, looking inward."""
    cams = []
    for i in range(n):
        a = phase + 2 * math.pi * i / n
        o = BOUND_CENTER + radius * np.array([math.cos(a), math.sin(a)])
        cams.append(Camera1D(tuple(o.tolist()), tuple((BOUND_CENTER - o).tolist()), fov, n_pixels))
    return cams


def check_cameras(scene: FlatScene, cameras: Sequence[Camera1D]) -> None:
    for cam in cameras:
        for d in scene.disks:
            if d.contains(cam.origin):
                raise ContractError(f"camera at {cam.origin} sits inside a primitive")


def camera_rays(cameras: Sequence[Camera1D]) -> tuple[np.ndarray, np.ndarray]:
    if not cameras:
        return np.zeros((0, 2)), np.zeros((0, 2))
    pairs = [c.rays() for c in cameras]
    return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])


def ray_bounds(origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit distances through the bounding disk and a hit mask."""
    oc = origins - BOUND_CENTER
    b = np.einsum("rd,rd->r", oc, dirs)
    c = np.einsum("rd,rd->r", oc, oc) - BOUND_RADIUS**2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def sample_along(
    near: np.ndarray, far: np.ndarray, count: int, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified distances: one sample per equal bin, jittered when ``rng`` is given."""
    if count < 1:
        raise ContractError("step_count must be >= 1")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if np.any(far <= near):
        raise ContractError("near must be < far for every ray")
    width = (far - near) / count
    u = 0.5 if rng is None else rng.uniform(size=(len(near), count))
    s = near[:, None] + (np.arange(count)[None, :] + u) * width[:, None]
    return s, np.broadcast_to(width[:, None], s.shape).copy()


# ---------------------------------------------------------------------------
# Marching
# ---------------------------------------------------------------------------


@dataclass
class RaySamples:
    s: np.ndarray  # (R, S) sample distances
    ds: np.ndarray  # (R, S) bin widths
    positions: np.ndarray  # (R, S, 2)
    density: np.ndarray  # (R, S)
    color: np.ndarray  # (R, S, C)
    weights: np.ndarray  # (R, S)
    transmittance: np.ndarray  # (R, S)
    final_transmittance: np.ndarray  # (R,)
    rgb: np.ndarray  # (R, C)

    @property
    def opacity(self) -> np.ndarray:
        return self.weights.sum(axis=-1)


@dataclass
class FieldModel:
    """Density (softplus) and colour (sigmoid) heads on a trained field."""

    config: FieldConfig
    params: ParameterStore
    sigmas: Sequence[float]

    def query(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raw = field_eval(self.config, self.params, x, self.sigmas).astype(np.float64)
        return np.logaddexp(0.0, raw[:, 0]), 1.0 / (1.0 + np.exp(-raw[:, 1:]))


def march_ray(
    source,
    origins: np.ndarray,
    dirs: np.ndarray,
    step_count: int,
    near,
    far,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Sample ``step_count`` points per ray in [near, far] and composite front to back.

    ``source`` is anything with ``query(x) -> (density, colour)``; a bare
    callable is accepted too.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (r,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (r,))
    s, ds = sample_along(near, far, step_count, rng)
    pos = origins[:, None, :] + s[..., None] * dirs[:, None, :]
    query = source.query if hasattr(source, "query") else source
    dens, col = query(pos.reshape(-1, 2))
    dens = np.asarray(dens, dtype=np.float64).reshape(r, step_count)
    col = np.asarray(col, dtype=np.float64).reshape(r, step_count, -1)
    comp = composite(dens, col, ds)
    return RaySamples(s, ds, pos, dens, col, comp.weights, comp.transmittance, comp.final_transmittance, comp.rgb)


def render_views(source, cameras: Sequence[Camera1D], step_count: int, channels: int) -> np.ndarray:
    """1D images of every camera, shape (n_cameras, n_pixels, C); rays missing the bounds are black."""
    origins, dirs = camera_rays(cameras)
    near, far, hit = ray_bounds(origins, dirs)
    out = np.zeros((len(origins), channels))
    if hit.any():
        out[hit] = march_ray(source, origins[hit], dirs[hit], step_count, near[hit], far[hit]).rgb
    n_pix = cameras[0].n_pixels if cameras else 0
    return out.reshape(len(cameras), n_pix, channels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class FlatlandOptions:
    n_cameras: int = 32
    n_pixels: int = 64
    fov: float = math.pi / 3
    ring_radius: float = 1.0
    holdout_cameras: int = 8
    samples: int = 64
    gt_samples: int = 1024
    rays_per_batch: int = 256


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    s: np.ndarray
    ds: np.ndarray
    target: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return (self.origins[:, None, :] + self.s[..., None] * self.dirs[:, None, :]).reshape(-1, 2)


@dataclass
class FlatlandStep(StepResult):
    dist: float = 0.0
    weights: np.ndarray | None = None


def flatland_objective(
    config: FieldConfig,
    params: ParameterStore,
    batch: RayBatch,
    sigmas,
    losses: LossWeights,
    guide_scale: float,
    with_grad: bool = True,
    frozen_weights: np.ndarray | None = None,
) -> FlatlandStep:
    """Huber(rendered, target) + lambda_dist * distortion + lambda_guide * guidance.

    Guidance uses the rendering weights as constant importances (their
    gradient is stopped); ``frozen_weights`` substitutes a fixed set.
    """
    r, n = batch.s.shape
    channels = config.output_dim - 1
    tape = Tape(params)
    code, caches = t_encode(tape, config, batch.positions, sigmas)
    act = t_activate(tape, t_mlp(tape, code), ["softplus"] + ["sigmoid"] * channels)
    dens = t_reshape(tape, t_take(tape, act, 0), (r, n))
    col = t_reshape(tape, t_take(tape, act, np.arange(1, channels + 1)), (r, n, channels))
    dtype = act.value.dtype
    rgb, w, _ = t_composite(tape, dens, col, batch.ds.astype(dtype))
    recon = t_huber(tape, rgb, batch.target.astype(dtype), losses.huber_delta)
    dist = t_distortion(tape, w, batch.s.astype(dtype), batch.ds.astype(dtype))
    terms, coeffs = [recon, dist], [1.0, losses.lambda_dist]
    guide_value = 0.0
    if config.lagrangian_levels:
        imp = w.value.ravel().astype(np.float64) if frozen_weights is None else frozen_weights
        guide, _ = t_guidance(tape, caches, imp, float(imp.sum()))
        guide_value = float(guide.value)
        terms.append(guide)
        coeffs.append(losses.lambda_guide * guide_scale)
    total = t_sum(tape, terms, coeffs)
    grad = backward(tape, {total: 1.0}).copy() if with_grad else None
    return FlatlandStep(float(total.value), float(recon.value), guide_value, grad, float(dist.value), w.value)


@dataclass
class FlatlandData:
    """Ground-truth renders of the training and held-out cameras."""

    train_origins: np.ndarray
    train_dirs: np.ndarray
    train_near: np.ndarray
    train_far: np.ndarray
    train_target: np.ndarray
    holdout: list[Camera1D]
    holdout_images: np.ndarray

    @classmethod
    def build(cls, scene: FlatScene, train: Sequence[Camera1D], holdout: Sequence[Camera1D], gt_samples: int):
        check_cameras(scene, list(train) + list(holdout))
        o, d = camera_rays(train)
        near, far, hit = ray_bounds(o, d)
        o, d, near, far = o[hit], d[hit], near[hit], far[hit]
        target = march_ray(scene, o, d, gt_samples, near, far).rgb
        images = render_views(scene, holdout, gt_samples, scene.channels)
        return cls(o, d, near, far, target, list(holdout), images)


def default_cameras(opts: FlatlandOptions) -> tuple[list[Camera1D], list[Camera1D]]:
    train = ring_cameras(opts.n_cameras, opts.ring_radius, opts.fov, opts.n_pixels)
    step = 2 * math.pi / max(opts.holdout_cameras, 1)
    holdout = ring_cameras(
        opts.holdout_cameras, opts.ring_radius, opts.fov, opts.n_pixels, phase=math.pi / opts.n_cameras + step / 7
    )
    return train, holdout


@dataclass
class HoldoutEval:
    psnr: float
    recon: float
    dist: float
    guide: float
    images: np.ndarray


def evaluate_holdout(
    config: FieldConfig, params: ParameterStore, data: FlatlandData, opts: FlatlandOptions, step: int, losses: LossWeights
) -> HoldoutEval:
    sig = level_sigmas(config, step)
    model = FieldModel(config, params, sig)
    o, d = camera_rays(data.holdout)
    near, far, hit = ray_bounds(o, d)
    channels = config.output_dim - 1
    pred = np.zeros((len(o), channels))
    rs = march_ray(model, o[hit], d[hit], opts.samples, near[hit], far[hit])
    pred[hit] = rs.rgb
    images = pred.reshape(data.holdout_images.shape)
    target = data.holdout_images.reshape(-1, channels)
    dist = float(distortion_per_ray(rs.weights, rs.s, rs.ds).mean())
    guide = 0.0
    if config.lagrangian_levels:
        w = rs.weights.ravel()
        _, caches = encode_with_cache(config, params, rs.positions.reshape(-1, 2), sig)
        guide = guidance_value(guidance_terms(caches), w, float(w.sum()))
    return HoldoutEval(
        psnr(images, data.holdout_images), huber_loss(pred, target, losses.huber_delta), dist, guide, images
    )


def fit_flatland(
    config: FieldConfig,
    scene: FlatScene,
    opts: TrainOptions,
    fl: FlatlandOptions,
    losses: LossWeights,
    cameras: tuple[Sequence[Camera1D], Sequence[Camera1D]] | None = None,
    params: ParameterStore | None = None,
    data: FlatlandData | None = None,
) -> tuple[FitResult, FlatlandData]:
    """Fit density and colour to ground-truth 1D renders from a ring of cameras."""
    if config.dim != 2:
        raise ContractError("flatland needs a 2D field")
    if config.output_dim != scene.channels + 1:
        raise ContractError(f"field.output_dim must be 1 + {scene.channels} (density + colour)")
    if data is None:
        train, holdout = cameras if cameras is not None else default_cameras(fl)
        data = FlatlandData.build(scene, train, holdout, fl.gt_samples)
    rng = np.random.default_rng(opts.seed)
    if params is None:
        params = init_params(config, rng, np.dtype(opts.dtype))
    state = TrainState.for_params(
        params, lr=opts.lr, lr_gaussian=opts.lr_gaussian, beta1=opts.beta1, beta2=opts.beta2, eps=opts.eps, seed=opts.seed
    )
    warmup = losses.warmup_for(opts.steps)
    n_rays = len(data.train_origins)
    metrics: list[dict] = []

    def log(step: int) -> None:
        ev = evaluate_holdout(config, params, data, fl, step, losses)
        metrics.append({"step": step, "recon": ev.recon, "guide": ev.guide, "dist": ev.dist, "psnr": ev.psnr})

    elapsed = 0.0
    for step in range(opts.steps):
        if opts.log_every > 0 and step % opts.log_every == 0:
            log(step)
        t0 = time.perf_counter()
        idx = rng.integers(0, n_rays, size=min(fl.rays_per_batch, n_rays))
        s, ds = sample_along(data.train_near[idx], data.train_far[idx], fl.samples, rng)
        batch = RayBatch(data.train_origins[idx], data.train_dirs[idx], s, ds, data.train_target[idx])
        res = flatland_objective(config, params, batch, level_sigmas(config, step), losses, guide_ramp(step, warmup))
        adam_step(state, params, res.grad)
        elapsed += time.perf_counter() - t0
    log(opts.steps)
    state.rng_state = rng.bit_generator.state
    return FitResult(params, state, metrics, elapsed), data


def export_images_csv(path: str | Path, images: np.ndarray) -> None:
    """Rendered 1D images as CSV rows ``camera,pixel,c0,c1,...``."""
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["camera", "pixel"] + [f"c{j}" for j in range(images.shape[2])])
        for ci, img in enumerate(images):
            for pi, px in enumerate(img):
                wr.writerow([ci, pi] + [f"{v:.8g}" for v in px])
