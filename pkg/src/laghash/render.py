"""Emission-absorption quadrature along rays and its adjoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Composite:
    rgb: np.ndarray  # (R, C)
    weights: np.ndarray  # (R, S)
    transmittance: np.ndarray  # (R, S), T_i before sample i
    final_transmittance: np.ndarray  # (R,)
    optical_depth: np.ndarray  # (R, S)


def composite(density: np.ndarray, color: np.ndarray, deltas: np.ndarray) -> Composite:
    """alpha_i = 1 - exp(-tau_i ds_i), T_i = prod_{j<i}(1 - alpha_j), w_i = T_i alpha_i."""
    od = density * deltas
    alpha = -np.expm1(-od)
    csum = np.cumsum(od, axis=-1)
    trans = np.exp(-(csum - od))
    weights = trans * alpha
    rgb = np.einsum("rs,rsc->rc", weights, color)
    return Composite(rgb, weights, trans, np.exp(-csum[..., -1]), od)


def composite_backward(
    comp: Composite,
    color: np.ndarray,
    deltas: np.ndarray,
    grad_rgb: np.ndarray | None,
    grad_weights: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (density, color) given gradients of (rgb, weights)."""
    w = comp.weights
    g = np.zeros_like(w) if grad_weights is None else grad_weights.astype(w.dtype, copy=True)
    if grad_rgb is not None:
        g += np.einsum("rc,rsc->rs", grad_rgb, color)
        grad_color = w[..., None] * grad_rgb[:, None, :]
    else:
        grad_color = np.zeros_like(color)
    gw = g * w
    # sum_{i>k} g_i w_i
    after = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw
    trans_next = comp.transmittance * np.exp(-comp.optical_depth)
    grad_density = deltas * (g * trans_next - after)
    return grad_density, grad_color
