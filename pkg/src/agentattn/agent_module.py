"""Multi-head agent attention module with agent bias and depthwise convolution.

For input tokens x (N×C laid out on an h×w grid)::

    Q, K, V = x Wq, x Wk, x Wv
    A       = avgpool(Q) to a √n×√n grid           (n×C)
    O_h     = σ(s2·Q_h A_hᵀ + B2_h) σ(s1·A_h K_hᵀ + B1_h) V_h   per head
    out     = (concat_h O_h + DWC(V)) Wo + bo

Parameters live in the immutable :class:`AgentModuleParams`; ``forward`` is
a pure function of (params, x). ``forward_with_cache``/``backward`` give
exact gradients for every input and parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import agent_bias as ab
from .attention import (
    AttentionInputs,
    agent_attention_core,
    agent_attention_core_backward,
    agent_attention_pure,
)
from .errors import ConfigError, DimensionError
from .init import trunc_normal
from .serialize import load_params, save_params
from .tensor_core import (
    adaptive_avg_pool2d,
    adaptive_avg_pool2d_backward,
    as_tensor,
    check_finite,
    depthwise_conv2d,
    depthwise_conv2d_backward,
    matmul,
)

DWC_SIZE = 3
TRAINING_FREE_BROADCAST_EXPONENT = -0.15


def _agent_side(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise ConfigError(f"agent count {n} is not a perfect square")
    return g


@dataclass(frozen=True)
class AgentModuleParams:
    dim: int
    heads: int
    n: int
    h: int
    w: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    dwc_kernel: np.ndarray
    dwc_bias: np.ndarray
    bias: Optional[tuple] = None  # AgentBiasParams per head, or a single shared one
    bq: Optional[np.ndarray] = None
    bk: Optional[np.ndarray] = None
    bv: Optional[np.ndarray] = None
    scale1: Optional[float] = None
    scale2: Optional[float] = None
    shortcut_k: float = 0.0

    def __post_init__(self):
        C = self.dim
        if C % self.heads:
            raise ConfigError(f"dim {C} not divisible by heads {self.heads}")
        g = _agent_side(self.n)
        if g > min(self.h, self.w):
            raise ConfigError(f"agent grid {g}×{g} larger than token grid {self.h}×{self.w}")
        expected = {
            "wq": (C, C), "wk": (C, C), "wv": (C, C), "wo": (C, C), "bo": (C,),
            "dwc_kernel": (DWC_SIZE, DWC_SIZE, C), "dwc_bias": (C,),
            "bq": (C,), "bk": (C,), "bv": (C,),
        }
        for name, shape in expected.items():
            val = getattr(self, name)
            if val is None:
                continue
            arr = as_tensor(val)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if self.bias is not None:
            bias = tuple(self.bias)
            if len(bias) not in (1, self.heads):
                raise ConfigError(f"need 1 or {self.heads} bias tables, got {len(bias)}")
            for b in bias:
                if (b.n, b.h, b.w) != (self.n, self.h, self.w):
                    raise DimensionError("bias params do not match the module's n, h, w")
            object.__setattr__(self, "bias", bias)
        d = self.head_dim
        for name in ("scale1", "scale2"):
            val = getattr(self, name)
            if val is None:
                object.__setattr__(self, name, 1.0 / math.sqrt(d))
            elif not val > 0:
                raise ConfigError(f"{name} must be positive")
        if self.shortcut_k < 0:
            raise ConfigError("shortcut_k must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def N(self) -> int:
        return self.h * self.w

    @property
    def share_bias(self) -> bool:
        return self.bias is not None and len(self.bias) == 1 and self.heads > 1

    def head_bias(self, i: int):
        if self.bias is None:
            return None
        return self.bias[0] if len(self.bias) == 1 else self.bias[i]

    def named_params(self) -> dict:
        out = {}
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "dwc_kernel", "dwc_bias"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        for i, b in enumerate(self.bias or ()):
            for comp, arr in b.components().items():
                out[f"bias.{i}.{comp}"] = arr
        return out

    def with_params(self, updates: dict) -> "AgentModuleParams":
        """Return a copy with the named arrays replaced (names as in ``named_params``)."""
        plain = {k: v for k, v in updates.items() if not k.startswith("bias.")}
        bias = self.bias
        bias_updates = {k: v for k, v in updates.items() if k.startswith("bias.")}
        if bias_updates:
            bias = list(bias)
            for key, val in bias_updates.items():
                _, idx, comp = key.split(".")
                bias[int(idx)] = replace(bias[int(idx)], **{comp: val})
            bias = tuple(bias)
        return replace(self, bias=bias, **plain)

    def num_params(self) -> int:
        return sum(v.size for v in self.named_params().values())


@dataclass
class ModuleOutput:
    out: np.ndarray
    aux: dict = field(default_factory=dict)


def init_agent_module(
    dim, heads, n, h, w, seed=0, *, qkv_bias=False, use_bias=True, share_bias=False,
    bias_block=ab.DEFAULT_BLOCK, zero_bias=False, scale1=None, scale2=None, shortcut_k=0.0,
    dtype=np.float64,
):
    """Random module parameters; weights ~ truncated N(0, 0.02²), biases zero."""
    rng = np.random.default_rng(seed)
    C = dim

    def weight():
        return trunc_normal(rng, (C, C), dtype=dtype)

    wq, wk, wv, wo = weight(), weight(), weight(), weight()
    # DWC follows the usual conv fan-in init rather than the 0.02 linear init
    bound = 1.0 / math.sqrt(DWC_SIZE * DWC_SIZE)
    kernel = rng.uniform(-bound, bound, size=(DWC_SIZE, DWC_SIZE, C)).astype(dtype)
    bias = None
    if use_bias:
        tables = 1 if share_bias else heads
        bias = tuple(
            ab.init_bias_params(n, h, w, bias_block, bias_block, rng=None if zero_bias else rng, dtype=dtype)
            for _ in range(tables)
        )
    zeros = (lambda: np.zeros(C, dtype=dtype))
    return AgentModuleParams(
        dim=C, heads=heads, n=n, h=h, w=w, wq=wq, wk=wk, wv=wv, wo=wo, bo=zeros(),
        dwc_kernel=kernel, dwc_bias=zeros(), bias=bias,
        bq=zeros() if qkv_bias else None, bk=zeros() if qkv_bias else None,
        bv=zeros() if qkv_bias else None, scale1=scale1, scale2=scale2, shortcut_k=shortcut_k,
    )


def pool_agents(q, h: int, w: int, n: int) -> np.ndarray:
    """Average-pool query tokens on their h×w grid down to n = g² agent tokens."""
    q = as_tensor(q)
    if q.ndim != 2 or q.shape[0] != h * w:
        raise DimensionError(f"expected {h * w}×C tokens, got shape {q.shape}")
    g = _agent_side(n)
    if g > min(h, w):
        raise ConfigError(f"agent grid {g}×{g} larger than token grid {h}×{w}")
    C = q.shape[1]
    pooled = adaptive_avg_pool2d(q.reshape(h, w, C), g, g)
    return np.ascontiguousarray(pooled.reshape(n, C))


def _pool_agents_backward(da: np.ndarray, h: int, w: int) -> np.ndarray:
    n, C = da.shape
    g = math.isqrt(n)
    return adaptive_avg_pool2d_backward(da.reshape(g, g, C), h, w).reshape(h * w, C)


def _project(x, wt, b):
    y = matmul(x, wt)
    return y if b is None else y + b


def _entropy(p: np.ndarray) -> float:
    return float(-np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=-1).mean())


def forward_with_cache(p: AgentModuleParams, x):
    x = as_tensor(x)
    if x.ndim != 2 or x.shape != (p.N, p.dim):
        raise DimensionError(f"x must be {p.N}×{p.dim}, got {x.shape}")
    if x.dtype != p.wq.dtype:
        x = x.astype(p.wq.dtype)
    q = _project(x, p.wq, p.bq)
    k = _project(x, p.wk, p.bk)
    v = _project(x, p.wv, p.bv)
    a = pool_agents(q, p.h, p.w, p.n)
    d = p.head_dim
    attn = np.empty_like(q)
    head_caches = []
    for i in range(p.heads):
        sl = slice(i * d, (i + 1) * d)
        bp = p.head_bias(i)
        b1 = ab.materialize_b1(bp) if bp is not None else None
        b2 = ab.materialize_b2(bp) if bp is not None else None
        o, cache = agent_attention_core(q[:, sl], k[:, sl], v[:, sl], a[:, sl], p.scale1, p.scale2, b1, b2)
        attn[:, sl] = o
        head_caches.append(cache)
    dwc = depthwise_conv2d(v.reshape(p.h, p.w, p.dim), p.dwc_kernel).reshape(p.N, p.dim) + p.dwc_bias
    y = attn + dwc
    out = matmul(y, p.wo) + p.bo
    check_finite(out, "agent_module.forward")
    cache = dict(x=x, q=q, k=k, v=v, a=a, y=y, heads=head_caches, attn=attn, dwc=dwc)
    return out, cache


def forward(p: AgentModuleParams, x, aux: bool = False) -> ModuleOutput:
    out, cache = forward_with_cache(p, x)
    diag = {}
    if aux:
        diag = {
            "agents": cache["a"],
            "aggregation_entropy": float(np.mean([_entropy(c.p1) for c in cache["heads"]])),
            "broadcast_entropy": float(np.mean([_entropy(c.p2) for c in cache["heads"]])),
        }
    return ModuleOutput(out=out, aux=diag)


def backward(p: AgentModuleParams, cache: dict, grad_out):
    """Return ``(dx, grads)`` with ``grads`` keyed like ``p.named_params()``."""
    grad_out = as_tensor(grad_out)
    if grad_out.shape != (p.N, p.dim):
        raise DimensionError(f"grad_out must be {p.N}×{p.dim}, got {grad_out.shape}")
    x, q, k, v, a, y = (cache[key] for key in ("x", "q", "k", "v", "a", "y"))
    grads = {"wo": matmul(y.T, grad_out), "bo": grad_out.sum(axis=0)}
    dy = matmul(grad_out, p.wo.T)

    dv_map, grads["dwc_kernel"] = depthwise_conv2d_backward(
        v.reshape(p.h, p.w, p.dim), p.dwc_kernel, dy.reshape(p.h, p.w, p.dim)
    )
    grads["dwc_bias"] = dy.sum(axis=0)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = dv_map.reshape(p.N, p.dim)
    da = np.zeros_like(a)
    d = p.head_dim
    for i, hc in enumerate(cache["heads"]):
        sl = slice(i * d, (i + 1) * d)
        dqi, dki, dvi, dai, db1, db2 = agent_attention_core_backward(hc, dy[:, sl])
        dq[:, sl] += dqi
        dk[:, sl] += dki
        dv[:, sl] += dvi
        da[:, sl] += dai
        bp = p.head_bias(i)
        if bp is None:
            continue
        slot = 0 if p.share_bias else i
        for comp, g in ab.bias_backward(bp, db1, db2).items():
            key = f"bias.{slot}.{comp}"
            grads[key] = grads[key] + g if key in grads else g
    dq += _pool_agents_backward(da, p.h, p.w)

    dx = matmul(dq, p.wq.T) + matmul(dk, p.wk.T) + matmul(dv, p.wv.T)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"w{name}"] = matmul(x.T, dproj)
        if getattr(p, f"b{name}") is not None:
            grads[f"b{name}"] = dproj.sum(axis=0)
    return dx, grads


# --------------------------------------------------------------------------
# training-free variant


def training_free_inputs(q, k, v, a) -> AttentionInputs:
    """Inputs with the training-free scales: d^-0.5 aggregation, d^-0.15 broadcast."""
    d = np.asarray(q).shape[1]
    return AttentionInputs(q, k, v, a, scale1=d ** -0.5, scale2=d ** TRAINING_FREE_BROADCAST_EXPONENT)


def agent_attention_training_free(inputs: AttentionInputs, shortcut_k: float = 0.0) -> np.ndarray:
    """σ(s2·QAᵀ) σ(s1·AKᵀ) V + k·V, agent attention usable without retraining.

    Scales are taken from ``inputs``; build them with :func:`training_free_inputs`
    for the sharpened broadcast softmax.
    """
    if shortcut_k < 0:
        raise ConfigError(f"shortcut_k must be >= 0, got {shortcut_k}")
    out = agent_attention_pure(inputs)
    if shortcut_k:
        out = out + inputs.v * inputs.v.dtype.type(shortcut_k)
    return check_finite(out, "agent_attention_training_free")


def training_free(p: AgentModuleParams, q, k, v, a) -> np.ndarray:
    """Training-free variant on one head, using the module's shortcut factor."""
    return agent_attention_training_free(training_free_inputs(q, k, v, a), p.shortcut_k)


# --------------------------------------------------------------------------
# storage

_META_FIELDS = ("dim", "heads", "n", "h", "w", "scale1", "scale2", "shortcut_k")


def save_module(p: AgentModuleParams, directory):
    meta = {f: getattr(p, f) for f in _META_FIELDS}
    meta["bias_tables"] = 0 if p.bias is None else len(p.bias)
    if p.bias:
        meta["bias_block"] = [p.bias[0].h0, p.bias[0].w0]
    return save_params(directory, p.named_params(), meta)


def load_module(directory) -> AgentModuleParams:
    params, meta = load_params(directory)
    bias = None
    if meta.get("bias_tables"):
        h0, w0 = meta["bias_block"]
        bias = tuple(
            ab.AgentBiasParams(
                n=meta["n"], h=meta["h"], w=meta["w"], h0=h0, w0=w0,
                **{c: params[f"bias.{i}.{c}"] for c in ab.COMPONENTS},
            )
            for i in range(meta["bias_tables"])
        )
    plain = {k: v for k, v in params.items() if not k.startswith("bias.")}
    fields = {f: meta[f] for f in _META_FIELDS}
    return AgentModuleParams(bias=bias, **fields, **plain)
