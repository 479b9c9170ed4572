"""Toy Agent-DeiT backbone: presets, assembly, parameter accounting.

The backbone is patch embedding, a stack of pre-norm transformer blocks
(agent attention or plain softmax attention, then a 4× GELU MLP), a final
LayerNorm, token mean-pooling and a linear classifier. There is no class
token: agent pooling needs the tokens to form an intact h×w grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import erf

from . import agent_module as am
from .agent_bias import DEFAULT_BLOCK
from .attention import scaled_scores
from .errors import ConfigError, DimensionError
from .init import trunc_normal
from .tensor_core import as_tensor, check_finite, matmul, resolve_dtype, row_softmax, row_softmax_backward

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelPreset:
    name: str
    img_size: int
    patch_size: int
    depth: int
    dim: int
    heads: int
    agent_n: Union[int, list, None] = 49
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    num_classes: int = 1000
    in_chans: int = 3
    bias_block: int = DEFAULT_BLOCK
    pos_embed: bool = False
    assembled: bool = True
    notes: str = ""
    stages: Optional[list] = None

    def __post_init__(self):
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if isinstance(self.agent_n, list) and len(self.agent_n) != self.depth:
            raise ConfigError(f"agent_n lists {len(self.agent_n)} blocks but depth is {self.depth}")
        g = self.grid
        for n in self.block_agents():
            if n is None:
                continue
            side = math.isqrt(n)
            if side * side != n or side > g:
                raise ConfigError(f"agent count {n} must be a square no larger than {g}²")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def block_agents(self) -> list:
        """Agent count per block; ``None`` marks a plain softmax-attention block."""
        if isinstance(self.agent_n, list):
            return list(self.agent_n)
        return [self.agent_n] * self.depth

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelPreset":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown preset fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelPreset":
        data = asdict(self)
        data.update(changes)
        return ModelPreset.from_dict(data)


def shipped_presets() -> list:
    return sorted(
        p.name[: -len(".json")] for p in resources.files("agentattn.presets").iterdir() if p.name.endswith(".json")
    )


def load_preset(name_or_path) -> ModelPreset:
    """Load a preset from a JSON path, or by name from the shipped presets."""
    path = Path(name_or_path)
    if path.is_file():
        text = path.read_text()
    else:
        stem = path.name[: -len(".json")] if path.name.endswith(".json") else path.name
        ref = resources.files("agentattn.presets") / f"{stem}.json"
        if str(path) != path.name or not ref.is_file():
            raise FileNotFoundError(f"no preset file or shipped preset named {name_or_path!r}")
        text = ref.read_text()
    return ModelPreset.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# layers


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(cache, dy):
    xhat, rstd, g = cache
    dg = np.sum(dy * xhat, axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_backward(x, dy):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (cdf + x * pdf)


# --------------------------------------------------------------------------
# plain multi-head softmax attention (non-agent blocks)


@dataclass(frozen=True)
class SoftmaxAttentionParams:
    dim: int
    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    bq: Optional[np.ndarray] = None
    bk: Optional[np.ndarray] = None
    bv: Optional[np.ndarray] = None

    def named_params(self) -> dict:
        names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def with_params(self, updates: dict) -> "SoftmaxAttentionParams":
        return replace(self, **updates)


def _mhsa_forward(p: SoftmaxAttentionParams, x):
    q = am._project(x, p.wq, p.bq)
    k = am._project(x, p.wk, p.bk)
    v = am._project(x, p.wv, p.bv)
    d = p.dim // p.heads
    scale = 1.0 / math.sqrt(d)
    y = np.empty_like(q)
    probs = []
    for i in range(p.heads):
        sl = slice(i * d, (i + 1) * d)
        pr = row_softmax(scaled_scores(q[:, sl], k[:, sl], scale))
        y[:, sl] = matmul(pr, v[:, sl])
        probs.append(pr)
    out = matmul(y, p.wo) + p.bo
    return out, dict(x=x, q=q, k=k, v=v, y=y, probs=probs, scale=scale)


def _mhsa_backward(p: SoftmaxAttentionParams, cache, grad_out):
    x, q, k, v, y = (cache[key] for key in ("x", "q", "k", "v", "y"))
    grads = {"wo": matmul(y.T, grad_out), "bo": grad_out.sum(axis=0)}
    dy = matmul(grad_out, p.wo.T)
    d = p.dim // p.heads
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for i, pr in enumerate(cache["probs"]):
        sl = slice(i * d, (i + 1) * d)
        dv[:, sl] = matmul(pr.T, dy[:, sl])
        ds = row_softmax_backward(pr, matmul(dy[:, sl], v[:, sl].T)) * cache["scale"]
        dq[:, sl] = matmul(ds, k[:, sl])
        dk[:, sl] = matmul(ds.T, q[:, sl])
    dx = matmul(dq, p.wq.T) + matmul(dk, p.wk.T) + matmul(dv, p.wv.T)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"w{name}"] = matmul(x.T, dproj)
        if getattr(p, f"b{name}") is not None:
            grads[f"b{name}"] = dproj.sum(axis=0)
    return dx, grads


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Block:
    norm1_g: np.ndarray
    norm1_b: np.ndarray
    attn: Union[am.AgentModuleParams, SoftmaxAttentionParams]
    norm2_g: np.ndarray
    norm2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    @property
    def is_agent(self) -> bool:
        return isinstance(self.attn, am.AgentModuleParams)


@dataclass(frozen=True)
class Model:
    preset: ModelPreset
    seed: int
    patch_w: np.ndarray
    patch_b: np.ndarray
    blocks: tuple
    norm_g: np.ndarray
    norm_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    pos: Optional[np.ndarray] = None

    def named_params(self) -> dict:
        out = {"patch_embed.w": self.patch_w, "patch_embed.b": self.patch_b}
        if self.pos is not None:
            out["pos_embed"] = self.pos
        for i, blk in enumerate(self.blocks):
            pre = f"blocks.{i}."
            out[pre + "norm1.g"] = blk.norm1_g
            out[pre + "norm1.b"] = blk.norm1_b
            for k, v in blk.attn.named_params().items():
                out[pre + "attn." + k] = v
            out[pre + "norm2.g"] = blk.norm2_g
            out[pre + "norm2.b"] = blk.norm2_b
            out[pre + "mlp.fc1.w"] = blk.fc1_w
            out[pre + "mlp.fc1.b"] = blk.fc1_b
            out[pre + "mlp.fc2.w"] = blk.fc2_w
            out[pre + "mlp.fc2.b"] = blk.fc2_b
        out["norm.g"] = self.norm_g
        out["norm.b"] = self.norm_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


@dataclass
class ParamReport:
    components: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def to_dict(self) -> dict:
        return {"components": dict(self.components), "total": self.total}


def build(preset: ModelPreset, seed: int = 0, dtype=np.float64) -> Model:
    """Assemble a model with weights drawn deterministically from ``seed``."""
    if not preset.assembled:
        raise ConfigError(f"preset {preset.name!r} is documentation-only and cannot be assembled")
    dtype = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    C, g = preset.dim, preset.grid
    patch_in = preset.patch_size * preset.patch_size * preset.in_chans

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    patch_w = trunc_normal(rng, (patch_in, C), dtype=dtype)
    pos = trunc_normal(rng, (preset.tokens, C), dtype=dtype) if preset.pos_embed else None
    blocks = []
    for n in preset.block_agents():
        if n is None:
            w = [trunc_normal(rng, (C, C), dtype=dtype) for _ in range(4)]
            qb = preset.qkv_bias
            attn = SoftmaxAttentionParams(
                dim=C, heads=preset.heads, wq=w[0], wk=w[1], wv=w[2], wo=w[3], bo=zeros(C),
                bq=zeros(C) if qb else None, bk=zeros(C) if qb else None, bv=zeros(C) if qb else None,
            )
        else:
            attn = am.init_agent_module(
                C, preset.heads, n, g, g, seed=int(rng.integers(2**63)), qkv_bias=preset.qkv_bias,
                bias_block=preset.bias_block, dtype=dtype,
            )
        blocks.append(
            Block(
                norm1_g=ones(C), norm1_b=zeros(C), attn=attn, norm2_g=ones(C), norm2_b=zeros(C),
                fc1_w=trunc_normal(rng, (C, preset.hidden), dtype=dtype), fc1_b=zeros(preset.hidden),
                fc2_w=trunc_normal(rng, (preset.hidden, C), dtype=dtype), fc2_b=zeros(C),
            )
        )
    head_w = trunc_normal(rng, (C, preset.num_classes), dtype=dtype)
    return Model(
        preset=preset, seed=seed, patch_w=patch_w, patch_b=zeros(C), blocks=tuple(blocks),
        norm_g=ones(C), norm_b=zeros(C), head_w=head_w, head_b=zeros(preset.num_classes), pos=pos,
    )


def count_params(m: Model) -> ParamReport:
    """Itemized count of learnable scalars."""
    comp = {"patch_embed": m.patch_w.size + m.patch_b.size, "pos_embed": 0 if m.pos is None else m.pos.size}
    attn = bias = dwc = mlp = norms = 0
    for blk in m.blocks:
        for name, arr in blk.attn.named_params().items():
            if name.startswith("bias."):
                bias += arr.size
            elif name.startswith("dwc"):
                dwc += arr.size
            else:
                attn += arr.size
        mlp += blk.fc1_w.size + blk.fc1_b.size + blk.fc2_w.size + blk.fc2_b.size
        norms += 2 * (blk.norm1_g.size + blk.norm2_g.size)
    comp.update(
        {
            "blocks.attn_proj": attn,
            "blocks.agent_bias": bias,
            "blocks.dwc": dwc,
            "blocks.mlp": mlp,
            "blocks.norm": norms,
            "norm": m.norm_g.size + m.norm_b.size,
            "head": m.head_w.size + m.head_b.size,
        }
    )
    return ParamReport(comp)


def patchify(image, patch_size: int) -> np.ndarray:
    """(H, W, c) image -> (tokens, P·P·c) rows, patches in row-major grid order."""
    H, W, c = image.shape
    P = patch_size
    x = image.reshape(H // P, P, W // P, P, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape((H // P) * (W // P), P * P * c))


def _check_image(m: Model, image):
    pr = m.preset
    image = as_tensor(image)
    if image.shape != (pr.img_size, pr.img_size, pr.in_chans):
        raise DimensionError(
            f"image must be {pr.img_size}×{pr.img_size}×{pr.in_chans}, got {image.shape}"
        )
    return image.astype(m.patch_w.dtype, copy=False)


def forward_with_cache(m: Model, image):
    image = _check_image(m, image)
    patches = patchify(image, m.preset.patch_size)
    x = matmul(patches, m.patch_w) + m.patch_b
    if m.pos is not None:
        x = x + m.pos
    caches = []
    for blk in m.blocks:
        h1, ln1 = layer_norm(x, blk.norm1_g, blk.norm1_b)
        if blk.is_agent:
            a_out, a_cache = am.forward_with_cache(blk.attn, h1)
        else:
            a_out, a_cache = _mhsa_forward(blk.attn, h1)
        x = x + a_out
        h2, ln2 = layer_norm(x, blk.norm2_g, blk.norm2_b)
        pre = matmul(h2, blk.fc1_w) + blk.fc1_b
        act = gelu(pre)
        x = x + matmul(act, blk.fc2_w) + blk.fc2_b
        caches.append(dict(ln1=ln1, attn=a_cache, ln2=ln2, h2=h2, pre=pre, act=act))
    xf, lnf = layer_norm(x, m.norm_g, m.norm_b)
    pooled = xf.mean(axis=0, keepdims=True)
    logits = (matmul(pooled, m.head_w) + m.head_b)[0]
    check_finite(logits, "forward_logits")
    return logits, dict(patches=patches, blocks=caches, lnf=lnf, pooled=pooled)


def forward_logits(m: Model, image) -> np.ndarray:
    logits, _ = forward_with_cache(m, image)
    return logits


def backward(m: Model, cache, grad_logits) -> dict:
    """Gradients of <grad_logits, logits> w.r.t. every parameter (``named_params`` keys)."""
    grad_logits = np.asarray(grad_logits, dtype=m.head_w.dtype).reshape(1, -1)
    grads = {"head.w": matmul(cache["pooled"].T, grad_logits), "head.b": grad_logits[0].copy()}
    dpooled = matmul(grad_logits, m.head_w.T)
    N = cache["patches"].shape[0]
    dxf = np.repeat(dpooled / N, N, axis=0)
    dx, grads["norm.g"], grads["norm.b"] = layer_norm_backward(cache["lnf"], dxf)
    for i in reversed(range(len(m.blocks))):
        blk, c = m.blocks[i], cache["blocks"][i]
        pre = f"blocks.{i}."
        grads[pre + "mlp.fc2.w"] = matmul(c["act"].T, dx)
        grads[pre + "mlp.fc2.b"] = dx.sum(axis=0)
        dpre = gelu_backward(c["pre"], matmul(dx, blk.fc2_w.T))
        grads[pre + "mlp.fc1.w"] = matmul(c["h2"].T, dpre)
        grads[pre + "mlp.fc1.b"] = dpre.sum(axis=0)
        dh2 = matmul(dpre, blk.fc1_w.T)
        dln, grads[pre + "norm2.g"], grads[pre + "norm2.b"] = layer_norm_backward(c["ln2"], dh2)
        dx = dx + dln
        if blk.is_agent:
            dh1, agrads = am.backward(blk.attn, c["attn"], dx)
        else:
            dh1, agrads = _mhsa_backward(blk.attn, c["attn"], dx)
        for k, v in agrads.items():
            grads[pre + "attn." + k] = v
        dln, grads[pre + "norm1.g"], grads[pre + "norm1.b"] = layer_norm_backward(c["ln1"], dh1)
        dx = dx + dln
    if m.pos is not None:
        grads["pos_embed"] = dx.copy()
    grads["patch_embed.w"] = matmul(cache["patches"].T, dx)
    grads["patch_embed.b"] = dx.sum(axis=0)
    return grads
