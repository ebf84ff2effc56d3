"""Parameters, deterministic RNG helpers, and the Adam optimizer.

Dense tensors are plain C-contiguous float64 numpy arrays throughout the
package; any NaN or Inf that appears in a value or gradient is an error
state, checked at the optimizer boundary and by ``assert_finite``.

Randomness everywhere comes from numpy's PCG64 generator.  Each consumer
derives its stream from a recorded integer seed via ``rng_from_seed`` /
``spawn_rngs`` so that datasets and training runs are reproducible
bit-for-bit on a single thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Parameter", "ParameterStore", "OptimState", "adam_step",
    "rng_from_seed", "spawn_rngs", "assert_finite",
]


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int):
    """n independent deterministic generators derived from one seed."""
    return [np.random.Generator(np.random.PCG64(ss))
            for ss in np.random.SeedSequence(seed).spawn(n)]


def assert_finite(x, what: str = "tensor"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class Parameter:
    """A trainable tensor with its gradient buffer and a stable id."""

    id: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"gradient shape {self.grad.shape} does not match "
                             f"value shape {self.value.shape} for {self.id!r}")


class ParameterStore:
    """Ordered collection of named parameters.

    Iteration order is insertion order, which fixes the optimizer update
    order and therefore the exact floating-point trajectory of training.
    """

    def __init__(self):
        self._params = {}

    def new(self, pid: str, value) -> Parameter:
        if pid in self._params:
            raise KeyError(f"duplicate parameter id {pid!r}")
        p = Parameter(pid, value)
        self._params[pid] = p
        return p

    def __getitem__(self, pid: str) -> Parameter:
        return self._params[pid]

    def __contains__(self, pid):
        return pid in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def ids(self):
        return list(self._params.keys())

    def num_values(self) -> int:
        return sum(p.value.size for p in self)

    def set_grads(self, grads: dict):
        for p in self:
            p.grad = np.reshape(grads[p.id], p.value.shape)

    def state_arrays(self) -> dict:
        return {p.id: p.value.copy() for p in self}

    def load_state(self, arrays: dict):
        for p in self:
            p.value = np.ascontiguousarray(arrays[p.id], dtype=np.float64)

    def save_npz(self, path):
        np.savez(path, **{p.id: p.value for p in self})

    def load_npz(self, path):
        with np.load(path) as data:
            for p in self:
                p.value = np.ascontiguousarray(data[p.id], dtype=np.float64)


@dataclass
class OptimState:
    """Adam state: first/second moments per parameter plus the step count.

    Weight decay is decoupled: it shrinks the value directly before the
    moment update instead of being folded into the gradient.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for h, name in ((self.lr, "lr"), (self.beta1, "beta1"),
                        (self.beta2, "beta2"), (self.eps, "eps")):
            if h <= 0:
                raise ValueError(f"{name} must be positive, got {h}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def adam_step(params: ParameterStore, state: OptimState):
    """One bias-corrected Adam step over every parameter in ``params``.

    Gradients must already be populated.  A NaN gradient aborts with the
    offending parameter id before anything is mutated.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.id!r}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        m = state.m.get(p.id)
        if m is None:
            m = state.m[p.id] = np.zeros_like(p.value)
            state.v[p.id] = np.zeros_like(p.value)
        v = state.v[p.id]
        if state.weight_decay != 0.0:
            p.value -= state.lr * state.weight_decay * p.value
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (p.grad * p.grad)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return params, state
