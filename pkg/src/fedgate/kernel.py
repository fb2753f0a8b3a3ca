"""Dense numeric primitives shared by every other module.

All arrays are float64. Functions are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
GELU_CUBIC = 0.044715


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; 0 if either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0
               ) -> tuple[float, np.ndarray]:
    """Elementwise Huber loss averaged over all elements.

    Returns (loss, gradient wrt pred). The gradient is the residual clipped
    to [-delta, delta], divided by the element count.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    r = pred - target
    absr = np.abs(r)
    quad = absr <= delta
    per_elem = np.where(quad, 0.5 * r * r, delta * (absr - 0.5 * delta))
    n = pred.size
    grad = np.clip(r, -delta, delta) / n
    return float(per_elem.sum() / n), grad


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the lower index.

    k larger than len(scores) returns all indices sorted the same way.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    # stable sort on negated scores keeps the lower index first on ties
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, scores.size)]


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Exact derivative of the tanh-approximated GELU."""
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


@dataclass
class AdamState:
    """First/second moment estimates plus step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. Pure: returns new param and state."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"state {state.m.shape}")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m=m, v=v, step=t)


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of x."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x)
        flat[i] = orig - eps
        f_minus = f(x)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
