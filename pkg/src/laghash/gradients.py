"""Reverse-mode differentiation for the field, its decoder and the losses.

Forward functions here compute the same values as the plain evaluators
but also append a node to a :class:`Tape`.  Each node keeps the
intermediates its adjoint needs (gathered rows, interpolation weights,
Gaussian pdfs, activations) so the backward sweep never re-hashes or
re-evaluates the field.  Parameter gradients are accumulated straight into
a flat array aligned with the :class:`ParameterStore`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from laghash import kernels
from laghash.errors import ContractError, FixtureError
from laghash.hashfield import (
    FieldConfig,
    LevelCache,
    ParameterStore,
    encode_with_cache,
    mlp_forward_with_cache,
    mlp_layers,
)
from laghash.losses import (
    GuidanceTerms,
    distortion_grad,
    distortion_per_ray,
    guidance_terms,
    guidance_value,
    huber_grad,
    huber_loss,
)
from laghash.render import Composite, composite, composite_backward


@dataclass(frozen=True, eq=False)
class Var:
    id: int
    value: np.ndarray


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    saved: dict
    input_values: tuple[np.ndarray, ...] = ()


@dataclass
class Tape:
    store: ParameterStore
    nodes: list[Node] = field(default_factory=list)
    grad: np.ndarray | None = None
    _shapes: dict[int, tuple] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.grad = np.zeros(self.store.values.shape, dtype=np.float64)

    def new_var(self, value) -> Var:
        value = np.asarray(value)
        v = Var(len(self._shapes), value)
        self._shapes[v.id] = value.shape
        return v

    def record(self, op: str, inputs: Sequence[Var], outputs: Sequence[np.ndarray], **saved) -> tuple[Var, ...]:
        outs = tuple(self.new_var(o) for o in outputs)
        ids = tuple(v.id for v in inputs)
        self.nodes.append(Node(op, ids, tuple(v.id for v in outs), saved, tuple(v.value for v in inputs)))
        return outs

    def param_grad(self, name: str) -> np.ndarray:
        return self.store.view(name, self.grad)


# ---------------------------------------------------------------------------
# Recorded forward ops
# ---------------------------------------------------------------------------


def t_encode(tape: Tape, config: FieldConfig, x: np.ndarray, sigmas) -> tuple[Var, list[LevelCache]]:
    code, caches = encode_with_cache(config, tape.store, x, sigmas)
    (out,) = tape.record("encode", (), (code,), caches=caches, feature_dim=config.feature_dim)
    return out, caches


def t_mlp(tape: Tape, code: Var) -> Var:
    out, acts = mlp_forward_with_cache(tape.store, code.value)
    return tape.record("mlp", (code,), (out,), acts=acts)[0]


def t_activate(tape: Tape, raw: Var, kinds: Sequence[str]) -> Var:
    """Per-column output squashing: 'sigmoid', 'softplus' or 'linear'."""
    z = raw.value
    out = z.copy()
    for j, kind in enumerate(kinds):
        if kind == "sigmoid":
            out[:, j] = sigmoid(z[:, j])
        elif kind == "softplus":
            out[:, j] = np.logaddexp(0, z[:, j])
        elif kind != "linear":
            raise ValueError(f"unknown activation {kind!r}")
    return tape.record("activate", (raw,), (out,), kinds=tuple(kinds), z=z, out=out)[0]


def t_reshape(tape: Tape, v: Var, shape: tuple[int, ...]) -> Var:
    return tape.record("reshape", (v,), (v.value.reshape(shape),), shape=v.value.shape)[0]


def t_take(tape: Tape, v: Var, columns) -> Var:
    """Select columns of a 2-D variable."""
    cols = np.atleast_1d(np.asarray(columns))
    return tape.record("take", (v,), (v.value[:, cols],), cols=cols, shape=v.value.shape)[0]


def t_huber(tape: Tape, pred: Var, target: np.ndarray, delta: float) -> Var:
    value = huber_loss(pred.value, target, delta)
    return tape.record("huber", (pred,), (np.array(value),), target=target, delta=delta)[0]


def t_composite(tape: Tape, density: Var, color: Var, deltas: np.ndarray) -> tuple[Var, Var, Composite]:
    comp = composite(density.value, color.value, deltas)
    rgb, w = tape.record(
        "composite", (density, color), (comp.rgb, comp.weights), comp=comp, color=color.value, deltas=deltas
    )
    return rgb, w, comp


def t_distortion(tape: Tape, weights: Var, s: np.ndarray, ds: np.ndarray) -> Var:
    """Mean over rays of the per-ray distortion."""
    per = distortion_per_ray(weights.value, s, ds)
    value = per.mean() if per.size else 0.0
    return tape.record("distortion", (weights,), (np.array(value),), s=s, ds=ds)[0]


def t_guidance(
    tape: Tape,
    caches: Sequence[LevelCache],
    weights: np.ndarray,
    normalizer: float,
) -> tuple[Var, GuidanceTerms]:
    """Guidance loss over points already encoded into ``caches``.

    ``weights`` are constants: no gradient reaches whatever produced them.
    """
    terms = guidance_terms(caches)
    value = guidance_value(terms, weights, normalizer)
    (out,) = tape.record(
        "guidance", (), (np.array(value),), caches=caches, terms=terms, weights=weights, normalizer=normalizer
    )
    return out, terms


def t_sum(tape: Tape, scalars: Sequence[Var], coeffs: Sequence[float]) -> Var:
    value = sum(c * float(s.value) for s, c in zip(scalars, coeffs))
    return tape.record("sum", tuple(scalars), (np.array(value),), coeffs=tuple(coeffs))[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Adjoints
# ---------------------------------------------------------------------------


def _bw_encode(tape: Tape, node: Node, grads):
    (g,) = grads
    f = node.saved["feature_dim"]
    for cache in node.saved["caches"]:
        lvl = cache.level
        gl = np.ascontiguousarray(g[:, lvl.index * f : (lvl.index + 1) * f], dtype=np.float64)
        if not lvl.lagrangian:
            kernels.eulerian_backward(gl, cache.rows, cache.alphas, tape.param_grad(f"eulerian/{lvl.index}"))
            continue
        kernels.lagrangian_backward(
            gl,
            cache.rows,
            cache.alphas,
            cache.diff,
            cache.pdf,
            cache.live,
            tape.store.view(f"gaussian_feats/{lvl.index}"),
            cache.sigma,
            tape.param_grad(f"gaussian_means/{lvl.index}"),
            tape.param_grad(f"gaussian_feats/{lvl.index}"),
        )
    return ()


def _bw_mlp(tape: Tape, node: Node, grads):
    (g,) = grads
    layers = mlp_layers(tape.store)
    acts = node.saved["acts"]
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h = acts[i]
        tape.param_grad(f"mlp_weights/{i}")[...] += g.T @ h
        tape.param_grad(f"mlp_biases/{i}")[...] += g.sum(axis=0)
        g = g @ w
        if i > 0:
            g = g * (h > 0)
    return (g,)


def _bw_activate(tape: Tape, node: Node, grads):
    (g,) = grads
    z, out = node.saved["z"], node.saved["out"]
    gz = g.copy()
    for j, kind in enumerate(node.saved["kinds"]):
        if kind == "sigmoid":
            gz[:, j] *= out[:, j] * (1 - out[:, j])
        elif kind == "softplus":
            gz[:, j] *= sigmoid(z[:, j])
    return (gz,)


def _bw_reshape(tape: Tape, node: Node, grads):
    return (grads[0].reshape(node.saved["shape"]),)


def _bw_take(tape: Tape, node: Node, grads):
    full = np.zeros(node.saved["shape"], dtype=grads[0].dtype)
    full[:, node.saved["cols"]] += grads[0]
    return (full,)


def _bw_huber(tape: Tape, node: Node, grads):
    (g,) = grads
    pred = node.input_values[0]
    return (g * huber_grad(pred, node.saved["target"], node.saved["delta"]),)


def _bw_composite(tape: Tape, node: Node, grads):
    g_rgb, g_w = grads
    gd, gc = composite_backward(node.saved["comp"], node.saved["color"], node.saved["deltas"], g_rgb, g_w)
    return gd, gc


def _bw_distortion(tape: Tape, node: Node, grads):
    (g,) = grads
    w = node.input_values[0]
    rays = max(w.shape[0], 1)
    return (g * distortion_grad(w, node.saved["s"], node.saved["ds"]) / rays,)


def _bw_guidance(tape: Tape, node: Node, grads):
    (g,) = grads
    norm = node.saved["normalizer"]
    if norm <= 0:
        return ()
    terms: GuidanceTerms = node.saved["terms"]
    scale = np.ascontiguousarray(float(g) * node.saved["weights"] / norm, dtype=np.float64)
    lag = [c for c in node.saved["caches"] if c.level.lagrangian]
    for j, cache in enumerate(lag):
        kernels.guidance_backward(
            scale,
            cache.rows,
            np.ascontiguousarray(terms.corner[:, j]),
            np.ascontiguousarray(terms.gaussian[:, j]),
            cache.diff,
            cache.sigma,
            tape.param_grad(f"gaussian_means/{cache.level.index}"),
        )
    return ()


def _bw_sum(tape: Tape, node: Node, grads):
    (g,) = grads
    return tuple(g * c for c in node.saved["coeffs"])


BACKWARD: dict[str, Callable] = {
    "encode": _bw_encode,
    "mlp": _bw_mlp,
    "activate": _bw_activate,
    "reshape": _bw_reshape,
    "take": _bw_take,
    "huber": _bw_huber,
    "composite": _bw_composite,
    "distortion": _bw_distortion,
    "guidance": _bw_guidance,
    "sum": _bw_sum,
}


def backward(tape: Tape, output_grads: dict[Var, np.ndarray | float]) -> np.ndarray:
    """Propagate ``output_grads`` back through the tape; returns the parameter gradient."""
    tape.grad[...] = 0
    grads: dict[int, np.ndarray] = {}
    for var, g in output_grads.items():
        g = np.asarray(g, dtype=np.result_type(var.value.dtype, np.float32))
        if g.shape != var.value.shape:
            raise ContractError(f"gradient shape {g.shape} does not match output shape {var.value.shape}")
        grads[var.id] = grads.get(var.id, 0) + g
    for node in reversed(tape.nodes):
        outs = [grads.pop(o, None) for o in node.outputs]
        if all(o is None for o in outs):
            continue
        outs = [
            np.zeros(tape._shapes[o], dtype=tape.grad.dtype) if g is None else g
            for o, g in zip(node.outputs, outs)
        ]
        in_grads = BACKWARD[node.op](tape, node, outs)
        for vid, g in zip(node.inputs, in_grads):
            grads[vid] = grads[vid] + g if vid in grads else g
    return tape.grad


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------


@dataclass
class FDReport:
    max_error: float
    worst_slice: str | None
    worst_index: int | None
    checked: int
    tolerance: float
    per_slice: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def fd_check(
    loss_fn: Callable[[ParameterStore], tuple[float, np.ndarray]],
    params: ParameterStore,
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    *,
    analytic_dtype=None,
    max_per_slice: int | None = None,
    rng: np.random.Generator | int | None = 0,
    floor: float = 1e-6,
) -> FDReport:
    """Compare analytic gradients against central differences.

    Differences are always taken in double precision.  The analytic side
    is evaluated at ``analytic_dtype`` (default: the dtype of ``params``),
    so a float32 gradient path can be checked against a float64 oracle.
    The error of a component is relative when either gradient exceeds
    ``floor`` in magnitude and absolute otherwise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = params.astype(np.float64)
    first, second = loss_fn(base.copy()), loss_fn(base.copy())
    if first[0] != second[0] or not np.array_equal(first[1], second[1]):
        raise FixtureError("loss function is not deterministic")
    if analytic_dtype is None or np.dtype(analytic_dtype) == np.float64:
        analytic = np.asarray(first[1], dtype=np.float64)
    else:
        analytic = np.asarray(loss_fn(params.astype(analytic_dtype))[1], dtype=np.float64)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    worst, worst_slice, worst_index, checked = 0.0, None, None, 0
    per_slice: dict[str, float] = {}
    probe = base.copy()
    for name in base.names():
        span = base.span(name)
        idx = np.arange(span.start, span.stop)
        if max_per_slice is not None and len(idx) > max_per_slice:
            idx = np.sort(rng.choice(idx, size=max_per_slice, replace=False))
        slice_worst = 0.0
        for i in idx:
            orig = probe.values[i]
            probe.values[i] = orig + epsilon
            up = loss_fn(probe)[0]
            probe.values[i] = orig - epsilon
            down = loss_fn(probe)[0]
            probe.values[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = analytic[i]
            scale = max(abs(a), abs(numeric))
            err = abs(a - numeric) / scale if scale > floor else abs(a - numeric)
            if err > slice_worst:
                slice_worst = err
            if err > worst:
                worst, worst_slice, worst_index = err, name, int(i)
            checked += 1
        per_slice[name] = slice_worst
    return FDReport(worst, worst_slice, worst_index, checked, tolerance, per_slice)
