"""Adam over the flat parameter store and the Gaussian width schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from laghash.errors import ContractError, NonFiniteGradient
from laghash.hashfield import FieldConfig, ParameterStore


@dataclass
class TrainState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    lr: float = 1e-2
    lr_gaussian: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    seed: int = 0
    rng_state: dict | None = None
    _lr_vec: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: ParameterStore, **kw) -> "TrainState":
        z = np.zeros_like(params.values)
        return cls(m=z, v=z.copy(), **kw)

    def lr_vector(self, params: ParameterStore) -> np.ndarray:
        if self._lr_vec is None or self._lr_vec.shape != params.values.shape:
            vec = np.full(params.values.shape, self.lr, dtype=params.values.dtype)
            for name in params.names():
                if name.startswith("gaussian_means/"):
                    vec[params.span(name)] = self.lr_gaussian
            self._lr_vec = vec
        return self._lr_vec


def adam_step(state: TrainState, params: ParameterStore, grads: np.ndarray) -> tuple[ParameterStore, TrainState]:
    """One bias-corrected Adam update, in place; Gaussian means use ``lr_gaussian``."""
    if grads.shape != params.values.shape or state.m is None or state.m.shape != grads.shape:
        raise ContractError("gradient, moments and parameters must be aligned")
    if not np.all(np.isfinite(grads)):
        for name in params.names():
            if not np.all(np.isfinite(grads[params.span(name)])):
                raise NonFiniteGradient(name)
    dtype = params.values.dtype
    b1, b2 = state.beta1, state.beta2
    state.step += 1
    t = state.step
    state.m *= dtype.type(b1)
    state.m += dtype.type(1 - b1) * grads
    state.v *= dtype.type(b2)
    state.v += dtype.type(1 - b2) * (grads * grads)
    m_hat = state.m / dtype.type(1 - b1**t)
    v_hat = state.v / dtype.type(1 - b2**t)
    params.values -= state.lr_vector(params) * m_hat / (np.sqrt(v_hat) + dtype.type(state.eps))
    return params, state


def sigma_schedule(config: FieldConfig, level: int, step: int) -> float:
    """Gaussian width for ``level``: geometric decay from start to end multiple of the cell size."""
    n = config.resolutions()[level]
    start, end = config.sigma_start_mult, config.sigma_end_mult
    horizon = config.sigma_decay_steps
    if horizon <= 0 or step >= horizon:
        return end / n
    return start * (end / start) ** (max(step, 0) / horizon) / n


def level_sigmas(config: FieldConfig, step: int) -> list[float]:
    return [sigma_schedule(config, l, step) for l in range(config.first_lagrangian, config.levels)]
