"""Dense numerics: matmul, Gumbel-softmax, parameters, optimizers, gradient checks.

Everything is float64 numpy. Randomness always comes from an explicit
``numpy.random.Generator``; nothing here touches the global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, ParameterError, TrainingError

GUMBEL_EPS = 1e-10
# Floor applied to soft probabilities so every entry stays strictly inside (0, 1).
PROB_FLOOR = 1e-15

SAMPLE = "sample"
DETERMINISTIC = "deterministic"
MODES = (SAMPLE, DETERMINISTIC)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical draw sequences."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / tau``, floored away from 0 and 1."""
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y = np.maximum(y, PROB_FLOOR)
    return y / y.sum(axis=-1, keepdims=True)


def softmax_backward(soft: np.ndarray, grad_soft: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the logits given the gradient w.r.t. ``softmax(logits / tau)``."""
    inner = (grad_soft * soft).sum(axis=-1, keepdims=True)
    return soft * (grad_soft - inner) / tau


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def _check_gumbel_args(logits, tau, mode):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if mode not in MODES:
        raise ParameterError(f"unknown sampling mode {mode!r}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ParameterError("logits must be finite")
    return logits


def gumbel_softmax(logits, tau: float = 1.0, rng: np.random.Generator | None = None,
                   mode: str = DETERMINISTIC) -> np.ndarray:
    """Relaxed categorical sample over the last axis.

    ``mode="sample"`` perturbs the logits with Gumbel noise before the
    tempered softmax; ``mode="deterministic"`` is plain ``softmax(logits/tau)``.
    """
    logits = _check_gumbel_args(logits, tau, mode)
    if mode == SAMPLE:
        if rng is None:
            raise ParameterError("sample mode needs an rng")
        logits = logits + gumbel_noise(logits.shape, rng)
    return softmax(logits, tau)


def one_hot_argmax(soft: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest index
    idx = np.argmax(soft, axis=-1)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return hard


def gumbel_softmax_hard(logits, tau: float = 1.0, rng: np.random.Generator | None = None,
                        mode: str = DETERMINISTIC) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through variant: returns ``(one_hot, soft)``.

    The forward value is the one-hot vector; callers back-propagate the
    gradient they receive for the one-hot into the soft vector with
    :func:`softmax_backward`.
    """
    soft = gumbel_softmax(logits, tau, rng, mode)
    return one_hot_argmax(soft), soft


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def _check_finite(params):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")


@dataclass
class SGD:
    learning_rate: float = 1e-3
    kind: str = field(default="sgd", init=False)
    step_count: int = field(default=0, init=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")

    def step(self, params: Iterable[Parameter]):
        params = [p for p in params if p.trainable]
        _check_finite(params)
        self.step_count += 1
        for p in params:
            p.value -= self.learning_rate * p.grad
            p.zero_grad()


@dataclass
class Adam:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    kind: str = field(default="adam", init=False)
    step_count: int = field(default=0, init=False)
    # moments keyed by parameter name, so registration order is irrelevant
    m: dict = field(default_factory=dict, init=False, repr=False)
    v: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")

    def step(self, params: Iterable[Parameter]):
        params = [p for p in params if p.trainable]
        _check_finite(params)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.zero_grad()


def make_optimizer(kind: str, learning_rate: float):
    if kind == "adam":
        return Adam(learning_rate=learning_rate)
    if kind == "sgd":
        return SGD(learning_rate=learning_rate)
    raise ParameterError(f"unknown optimizer {kind!r}")


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(loss_fn: Callable[[], float], params: list[Parameter], h: float = 1e-4,
               tol: float = 1e-3, floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn()`` must return the scalar loss and leave the analytic gradient
    in each parameter's ``.grad``. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_entries`` only a random
    subset of entries per parameter is probed.
    """
    zero_grads(params)
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    failures = []
    checked = 0
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or make_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            f_plus = loss_fn()
            flat[i] = old - h
            f_minus = loss_fn()
            flat[i] = old
            num = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            worst = max(worst, rel)
            if rel > tol:
                failures.append((p.name, int(i), float(a), float(num), float(rel)))
    zero_grads(params)
    return GradCheckReport(max_rel_error=worst, checked=checked, failures=failures)
