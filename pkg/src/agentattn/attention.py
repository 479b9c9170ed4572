"""Single-head attention kernels: softmax, linear and agent attention.

All kernels take an :class:`AttentionInputs` bundle with per-head tensors
``q, k, v`` (N×d) and, for agent attention, agent tokens ``a`` (n×d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DimensionError, DTypeError, NumericDomainError
from .tensor_core import as_tensor, check_finite, matmul, row_softmax, row_softmax_backward

PHI_MAPS = ("elu_plus_one", "relu")
DENOMINATOR_FLOOR = 1e-12
# query rows per chunk in the softmax baseline; keeps the score block cache-sized
SOFTMAX_ROW_BLOCK = 256


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: Optional[np.ndarray] = None
    scale1: Optional[float] = None
    scale2: Optional[float] = None

    def __post_init__(self):
        q, k, v = (as_tensor(t) for t in (self.q, self.k, self.v))
        for name, t in (("q", q), ("k", k), ("v", v)):
            if t.ndim != 2:
                raise DimensionError(f"{name} must be N×d, got shape {t.shape}")
        if not (q.shape == k.shape == v.shape):
            raise DimensionError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
        if not (q.dtype == k.dtype == v.dtype):
            raise DTypeError("q, k, v must share a dtype")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        if self.a is not None:
            a = as_tensor(self.a)
            if a.ndim != 2 or a.shape[1] != q.shape[1]:
                raise DimensionError(f"agents must be n×{q.shape[1]}, got {a.shape}")
            if a.shape[0] > q.shape[0]:
                raise DimensionError(f"agent count {a.shape[0]} exceeds token count {q.shape[0]}")
            if a.dtype != q.dtype:
                raise DTypeError("agents must share the dtype of q")
            object.__setattr__(self, "a", a)
        default = 1.0 / math.sqrt(q.shape[1])
        for name in ("scale1", "scale2"):
            val = getattr(self, name)
            if val is None:
                object.__setattr__(self, name, default)
            elif not val > 0:
                raise ConfigError(f"{name} must be positive, got {val}")

    @property
    def N(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    @property
    def n(self) -> int:
        return 0 if self.a is None else self.a.shape[0]

    def replace(self, **changes) -> "AttentionInputs":
        fields = dict(q=self.q, k=self.k, v=self.v, a=self.a, scale1=self.scale1, scale2=self.scale2)
        fields.update(changes)
        return AttentionInputs(**fields)


def _require_agents(inputs: AttentionInputs) -> np.ndarray:
    if inputs.a is None:
        raise ConfigError("agent attention requires agent tokens `a`")
    return inputs.a


def scaled_scores(x: np.ndarray, y: np.ndarray, scale: float, bias=None) -> np.ndarray:
    s = matmul(x, y.T)
    s *= s.dtype.type(scale)
    if bias is not None:
        s = s + bias
    return s


# --------------------------------------------------------------------------
# softmax attention


def softmax_attention(inputs: AttentionInputs) -> np.ndarray:
    """O = softmax(scale1 · QKᵀ) V, the quadratic-cost baseline.

    Query rows are processed in blocks so the N×N score matrix is never
    held at once; the MAC count is unchanged.
    """
    q, k, v = inputs.q, inputs.k, inputs.v
    out = np.empty((q.shape[0], v.shape[1]), dtype=v.dtype)
    for r in range(0, q.shape[0], SOFTMAX_ROW_BLOCK):
        rows = slice(r, r + SOFTMAX_ROW_BLOCK)
        out[rows] = matmul(row_softmax(scaled_scores(q[rows], k, inputs.scale1)), v)
    return check_finite(out, "softmax_attention")


def softmax_attention_backward(inputs: AttentionInputs, grad_out):
    """Return (dQ, dK, dV) for :func:`softmax_attention`."""
    q, k, v = inputs.q, inputs.k, inputs.v
    grad_out = _check_grad(grad_out, inputs)
    p = row_softmax(scaled_scores(q, k, inputs.scale1))
    dv = matmul(p.T, grad_out)
    ds = row_softmax_backward(p, matmul(grad_out, v.T)) * inputs.scale1
    return matmul(ds, k), matmul(ds.T, q), dv


# --------------------------------------------------------------------------
# linear attention


def feature_map(x: np.ndarray, phi: str) -> np.ndarray:
    if phi == "elu_plus_one":
        return np.where(x > 0, x + 1, np.exp(np.minimum(x, 0)))
    if phi == "relu":
        return np.maximum(x, 0)
    raise ConfigError(f"unknown feature map {phi!r}; expected one of {PHI_MAPS}")


def linear_attention(
    inputs: AttentionInputs, phi: str = "elu_plus_one", normalized: bool = True, reorder: bool = True
) -> np.ndarray:
    """Kernelized attention with similarity φ(Q)φ(K)ᵀ.

    ``reorder=True`` evaluates φ(Q)(φ(K)ᵀV) in O(N·d²); ``reorder=False``
    materializes the N×N similarity matrix first. ``normalized`` divides
    each row by φ(Q)_i · Σ_j φ(K)_j.
    """
    fq = feature_map(inputs.q, phi)
    fk = feature_map(inputs.k, phi)
    if reorder:
        num = matmul(fq, matmul(fk.T, inputs.v))
    else:
        num = matmul(matmul(fq, fk.T), inputs.v)
    if not normalized:
        return check_finite(num, "linear_attention")
    if reorder:
        den = matmul(fq, fk.sum(axis=0, keepdims=True).T)
    else:
        den = matmul(fq, fk.T).sum(axis=1, keepdims=True)
    if np.any(den <= DENOMINATOR_FLOOR):
        row = int(np.argmax(den <= DENOMINATOR_FLOOR))
        raise NumericDomainError("linear attention denominator vanished", location=f"row {row}")
    return check_finite(num / den, "linear_attention")


# --------------------------------------------------------------------------
# agent attention


class AgentCache(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray
    p1: np.ndarray  # n×N aggregation weights
    p2: np.ndarray  # N×n broadcast weights
    va: np.ndarray  # n×d agent features
    scale1: float
    scale2: float


def agent_attention_core(q, k, v, a, scale1, scale2, b1=None, b2=None):
    """Two chained softmax attentions with optional additive biases.

    Returns ``(out, cache)``; the cache feeds :func:`agent_attention_core_backward`.
    """
    p1 = row_softmax(scaled_scores(a, k, scale1, b1))
    va = matmul(p1, v)
    p2 = row_softmax(scaled_scores(q, a, scale2, b2))
    out = matmul(p2, va)
    return out, AgentCache(q, k, v, a, p1, p2, va, scale1, scale2)


def agent_attention_core_backward(cache: AgentCache, grad_out):
    """Return (dq, dk, dv, da, db1, db2) given dL/dout."""
    q, k, v, a, p1, p2, va, s1, s2 = cache
    # broadcast stage
    dva = matmul(p2.T, grad_out)
    ds2 = row_softmax_backward(p2, matmul(grad_out, va.T))
    dq = matmul(ds2, a) * s2
    da = matmul(ds2.T, q) * s2
    # aggregation stage
    dv = matmul(p1.T, dva)
    ds1 = row_softmax_backward(p1, matmul(dva, v.T))
    da += matmul(ds1, k) * s1
    dk = matmul(ds1.T, a) * s1
    return dq, dk, dv, da, ds1, ds2


def agent_attention_pure(inputs: AttentionInputs) -> np.ndarray:
    """Agent aggregation V_A = σ(s1·AKᵀ)V followed by broadcast σ(s2·QAᵀ)V_A."""
    a = _require_agents(inputs)
    out, _ = agent_attention_core(inputs.q, inputs.k, inputs.v, a, inputs.scale1, inputs.scale2)
    return check_finite(out, "agent_attention_pure")


def _check_grad(grad_out, inputs):
    grad_out = as_tensor(grad_out)
    if grad_out.shape != inputs.v.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {inputs.v.shape}")
    if grad_out.dtype != inputs.v.dtype:
        raise DTypeError("grad_out dtype differs from the inputs")
    return grad_out


def agent_attention_backward(inputs: AttentionInputs, grad_out):
    """Analytic gradients (dQ, dK, dV, dA) of :func:`agent_attention_pure`."""
    a = _require_agents(inputs)
    grad_out = _check_grad(grad_out, inputs)
    _, cache = agent_attention_core(inputs.q, inputs.k, inputs.v, a, inputs.scale1, inputs.scale2)
    dq, dk, dv, da, _, _ = agent_attention_core_backward(cache, grad_out)
    return dq, dk, dv, da


def equivalent_phi(inputs: AttentionInputs):
    """Feature maps of agent attention viewed as linear attention.

    Returns ``(phi_q, phi_k)``, both N×n, with
    ``phi_q @ (phi_k.T @ v) == agent_attention_pure(inputs)`` up to rounding.
    """
    a = _require_agents(inputs)
    phi_q = row_softmax(scaled_scores(inputs.q, a, inputs.scale2))
    phi_k = np.ascontiguousarray(row_softmax(scaled_scores(a, inputs.k, inputs.scale1)).T)
    return phi_q, phi_k

