"""Agent biases assembled from column, row and block components.

The aggregation bias B1 (n×N) and broadcast bias B2 (N×n) are never stored
densely. Each is the sum of a column component repeated down the rows, a row
component repeated across the columns, and a small h0×w0 block component
bilinearly upsampled to the h×w token grid.

Component layouts (agent axis first for B1, last for B2)::

    b1_col (n, 1, w)   b1_row (n, h, 1)   b1_block (n, h0, w0)
    b2_col (1, w, n)   b2_row (h, 1, n)   b2_block (h0, w0, n)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .init import trunc_normal
from .tensor_core import as_tensor, bilinear_resize, bilinear_resize_backward, interp_matrix

DEFAULT_BLOCK = 7
COMPONENTS = ("b1_col", "b1_row", "b1_block", "b2_col", "b2_row", "b2_block")


@dataclass(frozen=True)
class AgentBiasParams:
    n: int
    h: int
    w: int
    h0: int
    w0: int
    b1_col: np.ndarray
    b1_row: np.ndarray
    b1_block: np.ndarray
    b2_col: np.ndarray
    b2_row: np.ndarray
    b2_block: np.ndarray

    def __post_init__(self):
        if not (1 <= self.h0 <= self.h and 1 <= self.w0 <= self.w):
            raise ConfigError(
                f"block size {self.h0}×{self.w0} must fit inside the {self.h}×{self.w} grid"
            )
        for name, shape in self.component_shapes().items():
            arr = as_tensor(getattr(self, name))
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.h * self.w

    @property
    def dtype(self):
        return self.b1_col.dtype

    def component_shapes(self) -> dict:
        n, h, w, h0, w0 = self.n, self.h, self.w, self.h0, self.w0
        return {
            "b1_col": (n, 1, w),
            "b1_row": (n, h, 1),
            "b1_block": (n, h0, w0),
            "b2_col": (1, w, n),
            "b2_row": (h, 1, n),
            "b2_block": (h0, w0, n),
        }

    def components(self) -> dict:
        return {name: getattr(self, name) for name in COMPONENTS}

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.component_shapes().values())


def init_bias_params(n, h, w, h0=DEFAULT_BLOCK, w0=DEFAULT_BLOCK, rng=None, std=0.02, dtype=np.float64):
    """Build bias params; ``rng=None`` gives all-zero components.

    ``h0``/``w0`` are clipped to the grid so small desk-scale grids still work.
    """
    h0, w0 = min(h0, h), min(w0, w)
    shapes = {
        "b1_col": (n, 1, w),
        "b1_row": (n, h, 1),
        "b1_block": (n, h0, w0),
        "b2_col": (1, w, n),
        "b2_row": (h, 1, n),
        "b2_block": (h0, w0, n),
    }
    if rng is None:
        comps = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
    else:
        comps = {k: trunc_normal(rng, s, std=std, dtype=dtype) for k, s in shapes.items()}
    return AgentBiasParams(n=n, h=h, w=w, h0=h0, w0=w0, **comps)


def materialize_b1(p: AgentBiasParams) -> np.ndarray:
    """Dense aggregation bias, n×N with token index i·w + j."""
    block = bilinear_resize(p.b1_block.transpose(1, 2, 0), p.h, p.w).transpose(2, 0, 1)
    full = (p.b1_col + p.b1_row) + block
    return np.ascontiguousarray(full.reshape(p.n, p.N))


def materialize_b2(p: AgentBiasParams) -> np.ndarray:
    """Dense broadcast bias, N×n with token index i·w + j."""
    block = bilinear_resize(p.b2_block, p.h, p.w)
    full = (p.b2_col + p.b2_row) + block
    return np.ascontiguousarray(full.reshape(p.N, p.n))


def bias_backward(p: AgentBiasParams, db1=None, db2=None) -> dict:
    """Map gradients w.r.t. dense B1/B2 back onto the six components."""
    grads = {}
    if db1 is not None:
        g = np.asarray(db1).reshape(p.n, p.h, p.w)
        grads["b1_col"] = g.sum(axis=1, keepdims=True)
        grads["b1_row"] = g.sum(axis=2, keepdims=True)
        grads["b1_block"] = bilinear_resize_backward(
            np.ascontiguousarray(g.transpose(1, 2, 0)), p.h0, p.w0
        ).transpose(2, 0, 1)
    if db2 is not None:
        g = np.ascontiguousarray(np.asarray(db2).reshape(p.h, p.w, p.n))
        grads["b2_col"] = g.sum(axis=0, keepdims=True)
        grads["b2_row"] = g.sum(axis=1, keepdims=True)
        grads["b2_block"] = bilinear_resize_backward(g, p.h0, p.w0)
    return {k: np.ascontiguousarray(v) for k, v in grads.items()}


def _resize_axis(x: np.ndarray, axis: int, size: int) -> np.ndarray:
    if x.shape[axis] == size:
        return x
    m = interp_matrix(x.shape[axis], size, x.dtype)
    return np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)


def _square_side(n: int):
    r = math.isqrt(n)
    return r if r * r == n else None


def _resize_agents(x: np.ndarray, axis: int, old_n: int, new_n: int) -> np.ndarray:
    if old_n == new_n:
        return x
    g_old, g_new = _square_side(old_n), _square_side(new_n)
    if g_old is None or g_new is None:
        return _resize_axis(x, axis, new_n)
    moved = np.moveaxis(x, axis, 0)
    rest = moved.shape[1:]
    grid = moved.reshape((g_old, g_old) + rest)
    grid = _resize_axis(_resize_axis(grid, 0, g_new), 1, g_new)
    return np.moveaxis(grid.reshape((new_n,) + rest), 0, axis)


def resize_bias_for(p: AgentBiasParams, new_n: int, new_h: int, new_w: int) -> AgentBiasParams:
    """Interpolate the components to a new agent count and token grid.

    Column/row components follow the grid width/height; block components
    keep their base size. The agent axis is resized as a √n×√n grid when
    both counts are perfect squares, otherwise as a 1-D axis.
    """
    if min(new_n, new_h, new_w) < 1:
        raise ConfigError("new sizes must be >= 1")
    if (new_n, new_h, new_w) == (p.n, p.h, p.w):
        return p
    n = p.n
    comps = {
        "b1_col": _resize_axis(_resize_agents(p.b1_col, 0, n, new_n), 2, new_w),
        "b1_row": _resize_axis(_resize_agents(p.b1_row, 0, n, new_n), 1, new_h),
        "b1_block": _resize_agents(p.b1_block, 0, n, new_n),
        "b2_col": _resize_axis(_resize_agents(p.b2_col, 2, n, new_n), 1, new_w),
        "b2_row": _resize_axis(_resize_agents(p.b2_row, 2, n, new_n), 0, new_h),
        "b2_block": _resize_agents(p.b2_block, 2, n, new_n),
    }
    comps = {k: np.ascontiguousarray(v) for k, v in comps.items()}
    h0, w0 = min(p.h0, new_h), min(p.w0, new_w)
    if (h0, w0) != (p.h0, p.w0):
        comps["b1_block"] = bilinear_resize(comps["b1_block"].transpose(1, 2, 0), h0, w0).transpose(2, 0, 1)
        comps["b2_block"] = bilinear_resize(comps["b2_block"], h0, w0)
    return replace(p, n=new_n, h=new_h, w=new_w, h0=h0, w0=w0, **comps)
