"""Field representation and forward evaluation.

A field is a stack of ``L`` regular grids of increasing resolution.  The
coarse levels store one feature vector per (possibly hashed) grid vertex;
the ``lagrangian_levels`` finest levels instead store, per hash bucket, a
small mixture of isotropic Gaussians with movable means.  Per-level
features are interpolated d-linearly, concatenated coarse to fine and
decoded by a small ReLU MLP.

All batch functions work on ``(M, D)`` position arrays and are pure: they
never mutate the parameter store, so they can be called from several
threads at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from laghash import kernels
from laghash.errors import ConfigError, DomainError, InvariantViolation

HASH_PRIMES = (1, 2654435761, 805459861)
EXPONENT_FLOOR = -60.0
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_U32 = np.uint64(0xFFFFFFFF)


@dataclass
class FieldConfig:
    dim: int = 2
    levels: int = 8
    lagrangian_levels: int = 2
    base_res: int = 8
    growth: float | None = None
    max_res: int | None = 128
    table_size: int = 2**12
    gaussians_per_bucket: int = 4
    feature_dim: int = 2
    mlp_hidden: int = 64
    mlp_layers: int = 1
    output_dim: int = 3
    sigma_start_mult: float = 50.0
    sigma_end_mult: float = 5.0
    sigma_decay_steps: int = 1000

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.dim not in (1, 2, 3):
            raise ConfigError(f"field.dim must be 1, 2 or 3, got {self.dim}")
        if self.levels < 1:
            raise ConfigError("field.levels must be >= 1")
        if not 0 <= self.lagrangian_levels <= self.levels:
            raise ConfigError(
                f"field.lagrangian_levels={self.lagrangian_levels} must lie in [0, levels={self.levels}]"
            )
        if self.base_res < 1:
            raise ConfigError("field.base_res must be >= 1")
        b = self.table_size
        if b < 1 or b & (b - 1):
            raise ConfigError(f"field.table_size must be a power of two, got {b}")
        if self.gaussians_per_bucket < 1:
            raise ConfigError("field.gaussians_per_bucket must be >= 1")
        if self.feature_dim < 1 or self.output_dim < 1:
            raise ConfigError("field.feature_dim and field.output_dim must be >= 1")
        if self.mlp_layers < 0 or (self.mlp_layers > 0 and self.mlp_hidden < 1):
            raise ConfigError("field.mlp_layers must be >= 0 with mlp_hidden >= 1")
        if self.growth is None and self.max_res is None and self.levels > 1:
            raise ConfigError("one of field.growth or field.max_res is required")
        if self.growth is not None and self.growth <= 1.0:
            raise ConfigError("field.growth must be > 1")
        if not (self.sigma_start_mult > 0 and self.sigma_end_mult > 0):
            raise ConfigError("sigma multipliers must be positive")
        if self.sigma_decay_steps < 0:
            raise ConfigError("field.sigma_decay_steps must be >= 0")
        res = self.resolutions()
        if any(a >= c for a, c in zip(res, res[1:])):
            raise ConfigError(f"level resolutions must be strictly increasing, got {res}")

    @property
    def growth_factor(self) -> float:
        if self.growth is not None:
            return float(self.growth)
        if self.levels == 1:
            return 1.0
        return (self.max_res / self.base_res) ** (1.0 / (self.levels - 1))

    def resolutions(self) -> list[int]:
        b = self.growth_factor
        return [int(math.floor(self.base_res * b**l + 0.5)) for l in range(self.levels)]

    @property
    def first_lagrangian(self) -> int:
        return self.levels - self.lagrangian_levels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LevelTable:
    """Static description of one resolution level."""

    index: int
    kind: str  # "eulerian" | "lagrangian"
    resolution: int
    rows: int
    hashed: bool
    dim: int

    @property
    def lagrangian(self) -> bool:
        return self.kind == "lagrangian"

    @property
    def vertices_per_axis(self) -> int:
        return self.resolution + 1


def build_levels(config: FieldConfig) -> list[LevelTable]:
    out = []
    for l, n in enumerate(config.resolutions()):
        dense = (n + 1) ** config.dim
        hashed = dense >= config.table_size
        lag = l >= config.first_lagrangian
        rows = config.table_size if (lag or hashed) else dense
        out.append(
            LevelTable(l, "lagrangian" if lag else "eulerian", n, rows, hashed, config.dim)
        )
    return out


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


@dataclass
class ParameterStore:
    """Flat parameter vector with named, contiguous, disjoint slices."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self.layout)

    def span(self, name: str) -> slice:
        off, shape = self.layout[name]
        return slice(off, off + int(np.prod(shape, dtype=np.int64)))

    def view(self, name: str, array: np.ndarray | None = None) -> np.ndarray:
        """Reshaped view of slice ``name`` in ``array`` (defaults to the values)."""
        arr = self.values if array is None else array
        return arr[self.span(name)].reshape(self.layout[name][1])

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.layout:
            yield name, self.view(name)

    def with_values(self, values: np.ndarray) -> "ParameterStore":
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} values, got {values.shape}")
        return ParameterStore(values, self.layout)

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(self.values.astype(dtype), self.layout)

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.values.copy(), self.layout)


def param_layout(config: FieldConfig) -> tuple[dict[str, tuple[int, tuple[int, ...]]], int]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    f, k, d = config.feature_dim, config.gaussians_per_bucket, config.dim
    for lvl in build_levels(config):
        if lvl.lagrangian:
            shapes.append((f"gaussian_means/{lvl.index}", (lvl.rows, k, d)))
            shapes.append((f"gaussian_feats/{lvl.index}", (lvl.rows, k, f)))
        else:
            shapes.append((f"eulerian/{lvl.index}", (lvl.rows, f)))
    for i, (fan_in, fan_out) in enumerate(_mlp_dims(config)):
        shapes.append((f"mlp_weights/{i}", (fan_out, fan_in)))
        shapes.append((f"mlp_biases/{i}", (fan_out,)))
    layout, off = {}, 0
    for name, shape in shapes:
        layout[name] = (off, shape)
        off += int(np.prod(shape, dtype=np.int64))
    return layout, off


def _mlp_dims(config: FieldConfig) -> list[tuple[int, int]]:
    widths = [config.levels * config.feature_dim]
    widths += [config.mlp_hidden] * config.mlp_layers
    widths.append(config.output_dim)
    return list(zip(widths[:-1], widths[1:]))


def empty_store(config: FieldConfig, dtype=np.float32) -> ParameterStore:
    layout, size = param_layout(config)
    return ParameterStore(np.zeros(size, dtype=dtype), layout)


def init_params(
    config: FieldConfig, rng: np.random.Generator | int = 0, dtype=np.float32
) -> ParameterStore:
    """Xavier-uniform decoder, N(0, 1e-3) features, means uniform in the unit box."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    store = empty_store(config, np.float64)
    for name, view in store.items():
        kind = name.split("/")[0]
        if kind in ("eulerian", "gaussian_feats"):
            view[...] = rng.normal(0.0, 1e-3, size=view.shape)
        elif kind == "gaussian_means":
            view[...] = rng.uniform(0.0, 1.0, size=view.shape)
        elif kind == "mlp_weights":
            fan_out, fan_in = view.shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            view[...] = rng.uniform(-a, a, size=view.shape)
    return store.astype(dtype)


def count_params(config: FieldConfig) -> tuple[int, dict[str, int]]:
    """Trainable scalar count and its per-slice breakdown (sigma excluded)."""
    f, k, d = config.feature_dim, config.gaussians_per_bucket, config.dim
    breakdown: dict[str, int] = {}
    for lvl in build_levels(config):
        if lvl.lagrangian:
            breakdown[f"gaussian_means/{lvl.index}"] = lvl.rows * k * d
            breakdown[f"gaussian_feats/{lvl.index}"] = lvl.rows * k * f
        else:
            breakdown[f"eulerian/{lvl.index}"] = lvl.rows * f
    for i, (fan_in, fan_out) in enumerate(_mlp_dims(config)):
        breakdown[f"mlp_weights/{i}"] = fan_in * fan_out
        breakdown[f"mlp_biases/{i}"] = fan_out
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# Indexing and interpolation
# ---------------------------------------------------------------------------


@dataclass
class QueryBatch:
    positions: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise DomainError("positions must have shape (M, D)")
        if not np.all(np.isfinite(self.positions)):
            raise DomainError("positions must be finite")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (len(self.positions),):
                raise DomainError("weights must have shape (M,)")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise DomainError("weights must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.positions)


def _hash_or_flatten(level: LevelTable, vertices: np.ndarray) -> np.ndarray:
    v = vertices.astype(np.uint64)
    if not level.hashed:
        stride = np.uint64(level.vertices_per_axis)
        idx = np.zeros(v.shape[:-1], dtype=np.uint64)
        scale = np.uint64(1)
        for i in range(level.dim):
            idx += v[..., i] * scale
            scale *= stride
        return idx.astype(np.int64)
    idx = np.zeros(v.shape[:-1], dtype=np.uint64)
    for i in range(level.dim):
        # products stay below 2**64 for any in-range vertex, so masking gives the wrapped u32
        idx ^= (v[..., i] * np.uint64(HASH_PRIMES[i])) & _U32
    return (idx & np.uint64(level.rows - 1)).astype(np.int64)


def vertex_index(level: LevelTable, vertex) -> np.ndarray | int:
    """Table row of one lattice vertex (or an ``(..., D)`` array of them)."""
    v = np.asarray(vertex, dtype=np.int64)
    if v.shape[-1] != level.dim:
        raise DomainError(f"vertex must have {level.dim} components")
    if np.any(v < 0) or np.any(v > level.resolution):
        raise DomainError(f"vertex {vertex} outside grid [0, {level.resolution}]^{level.dim}")
    idx = _hash_or_flatten(level, v)
    return int(idx) if idx.ndim == 0 else idx


def corner_offsets(dim: int) -> np.ndarray:
    """``(2**dim, dim)`` 0/1 offsets; bit ``i`` of the corner id selects axis ``i``."""
    ids = np.arange(2**dim)
    return ((ids[:, None] >> np.arange(dim)[None, :]) & 1).astype(np.int64)


def _cells(x: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    scaled = x * resolution
    cell = np.clip(np.floor(scaled), 0, resolution - 1)
    return cell.astype(np.int64), scaled - cell


def _corner_alphas(frac: np.ndarray) -> np.ndarray:
    m, dim = frac.shape
    alphas = np.ones((m, 2**dim))
    for c, offs in enumerate(corner_offsets(dim)):
        for i in range(dim):
            alphas[:, c] *= frac[:, i] if offs[i] else 1.0 - frac[:, i]
    return alphas


def interp_weights(x: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell corners and multilinear weights for positions ``x`` of shape (M, D).

    Positions are clamped to the unit box; ``x == 1`` falls in the last cell.
    Returns ``corners`` (M, 2**D, D) integer vertices and ``alphas`` (M, 2**D).
    """
    cell, frac = _cells(np.atleast_2d(x), resolution)
    corners = cell[:, None, :] + corner_offsets(cell.shape[1])[None]
    return corners, _corner_alphas(frac)


def _corner_rows(level: LevelTable, cell: np.ndarray) -> np.ndarray:
    """Table rows of all 2**D corners of each cell, shape (M, 2**D)."""
    m, dim = cell.shape
    offs = corner_offsets(dim)
    if level.hashed:
        # (base + o) * prime for o in {0, 1}, wrapped to 32 bits, per axis
        parts = []
        for i in range(dim):
            base = cell[:, i].astype(np.uint64)
            prime = np.uint64(HASH_PRIMES[i])
            parts.append(((base * prime) & _U32, ((base + np.uint64(1)) * prime) & _U32))
        rows = np.empty((m, len(offs)), dtype=np.int64)
        mask = np.uint64(level.rows - 1)
        for c, o in enumerate(offs):
            h = parts[0][o[0]].copy()
            for i in range(1, dim):
                h ^= parts[i][o[i]]
            rows[:, c] = (h & mask).astype(np.int64)
        return rows
    stride = level.vertices_per_axis
    flat = np.zeros(m, dtype=np.int64)
    for i in range(dim):
        flat += cell[:, i] * stride**i
    steps = (offs * (stride ** np.arange(dim))[None, :]).sum(axis=1)
    return flat[:, None] + steps[None, :]


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------


def gaussian_pdf(sq_dist: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic pdf with the univariate normaliser; returns (pdf, unclamped mask)."""
    if not sigma > 0:
        raise InvariantViolation(f"sigma must be positive, got {sigma}")
    sigma = np.asarray(sigma, dtype=sq_dist.dtype)
    raw = -sq_dist / (2 * sigma * sigma)
    live = raw > EXPONENT_FLOOR
    expo = np.maximum(raw, EXPONENT_FLOOR)
    return np.exp(expo) / (_SQRT_2PI * sigma), live


def gaussian_eval(mean, sigma: float, feature, x) -> tuple[float, np.ndarray]:
    """Evaluate one mixture entry at ``x``: returns (pdf, pdf * feature)."""
    mean = np.asarray(mean, dtype=np.float64)
    diff = np.asarray(x, dtype=np.float64) - mean
    pdf, _ = gaussian_pdf(np.array(diff @ diff), sigma)
    pdf = float(pdf)
    return pdf, pdf * np.asarray(feature, dtype=np.float64)


# ---------------------------------------------------------------------------
# Per-level features
# ---------------------------------------------------------------------------


@dataclass
class LevelCache:
    """Forward intermediates kept for the backward pass and the guidance loss."""

    level: LevelTable
    rows: np.ndarray  # (M, V) table rows / buckets of the cell corners
    alphas: np.ndarray  # (M, V)
    diff: np.ndarray | None = None  # (M, V, K, D) x - mu
    pdf: np.ndarray | None = None  # (M, V, K)
    live: np.ndarray | None = None  # (M, V, K) exponent above the clamp
    sigma: float | None = None


def _locate(level: LevelTable, x: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    cell, frac = _cells(x, level.resolution)
    return _corner_rows(level, cell), _corner_alphas(frac).astype(dtype)


def eulerian_level(level: LevelTable, table: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, LevelCache]:
    rows, alphas = _locate(level, x, table.dtype)
    feat = kernels.eulerian_forward(rows, alphas, np.ascontiguousarray(table))
    return feat, LevelCache(level, rows, alphas)


def lagrangian_level(
    level: LevelTable,
    means: np.ndarray,
    feats: np.ndarray,
    sigma: float,
    x: np.ndarray,
) -> tuple[np.ndarray, LevelCache]:
    if not sigma > 0:
        raise InvariantViolation(f"sigma must be positive, got {sigma}")
    dtype = feats.dtype
    rows, alphas = _locate(level, x, dtype)
    xq = np.ascontiguousarray(x, dtype=dtype)
    feat, diff, pdf, live = kernels.lagrangian_forward(
        xq, rows, alphas, np.ascontiguousarray(means), np.ascontiguousarray(feats), float(sigma), EXPONENT_FLOOR
    )
    return feat, LevelCache(level, rows, alphas, diff, pdf, live, float(sigma))


def eulerian_feature(level: LevelTable, table: np.ndarray, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return eulerian_level(level, np.asarray(table), x)[0][0]


def lagrangian_feature(level: LevelTable, means, feats, sigma: float, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return lagrangian_level(level, np.asarray(means), np.asarray(feats), sigma, x)[0][0]


# ---------------------------------------------------------------------------
# Encoding, decoder, field
# ---------------------------------------------------------------------------


def _positions(batch) -> np.ndarray:
    if isinstance(batch, QueryBatch):
        return batch.positions
    x = np.asarray(batch, dtype=np.float64)
    return x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x


def _sigma_list(config: FieldConfig, sigmas: Sequence[float] | None) -> list[float]:
    if config.lagrangian_levels == 0:
        return []
    if sigmas is None or len(sigmas) != config.lagrangian_levels:
        raise ValueError(f"expected {config.lagrangian_levels} sigma values, got {sigmas}")
    return [float(s) for s in sigmas]


def encode_with_cache(
    config: FieldConfig, params: ParameterStore, x: np.ndarray, sigmas: Sequence[float] | None
) -> tuple[np.ndarray, list[LevelCache]]:
    sig = _sigma_list(config, sigmas)
    parts, caches = [], []
    for lvl in build_levels(config):
        if lvl.lagrangian:
            feat, cache = lagrangian_level(
                lvl,
                params.view(f"gaussian_means/{lvl.index}"),
                params.view(f"gaussian_feats/{lvl.index}"),
                sig[lvl.index - config.first_lagrangian],
                x,
            )
        else:
            feat, cache = eulerian_level(lvl, params.view(f"eulerian/{lvl.index}"), x)
        parts.append(feat)
        caches.append(cache)
    code = np.concatenate(parts, axis=1) if parts else np.zeros((len(x), 0), params.values.dtype)
    return code, caches


def encode(config: FieldConfig, params: ParameterStore, x, sigmas: Sequence[float] | None = None) -> np.ndarray:
    """Concatenated per-level features, shape (M, L*F), coarse to fine."""
    return encode_with_cache(config, params, _positions(x), sigmas)[0]


def mlp_layers(params: ParameterStore) -> list[tuple[np.ndarray, np.ndarray]]:
    out, i = [], 0
    while f"mlp_weights/{i}" in params.layout:
        out.append((params.view(f"mlp_weights/{i}"), params.view(f"mlp_biases/{i}")))
        i += 1
    return out


def dense(h: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS blocking depends on the batch size, so rows would not be bit-stable
    h = np.ascontiguousarray(h)
    return kernels.dense_forward(h, np.ascontiguousarray(w.T, dtype=h.dtype), b.astype(h.dtype, copy=False))


def mlp_forward_with_cache(params: ParameterStore, code: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns the output and the input activation of every layer."""
    layers = mlp_layers(params)
    h = code.astype(params.values.dtype, copy=False)
    acts = []
    for i, (w, b) in enumerate(layers):
        acts.append(h)
        h = dense(h, w, b)
        if i < len(layers) - 1:
            h = np.maximum(h, 0)
    return h, acts


def mlp_forward(params: ParameterStore, code: np.ndarray) -> np.ndarray:
    code = np.asarray(code)
    single = code.ndim == 1
    out = mlp_forward_with_cache(params, np.atleast_2d(code))[0]
    return out[0] if single else out


def field_eval(
    config: FieldConfig, params: ParameterStore, batch, sigmas: Sequence[float] | None = None
) -> np.ndarray:
    """Raw decoder output for every query position, shape (M, output_dim)."""
    x = _positions(batch)
    if len(x) == 0:
        return np.zeros((0, config.output_dim), dtype=params.values.dtype)
    code, _ = encode_with_cache(config, params, x, sigmas)
    return mlp_forward_with_cache(params, code)[0]
