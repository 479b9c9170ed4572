"""Dense tensor primitives.

Tensors are C-contiguous numpy arrays of dtype float32 or float64. Every
public op validates its operands, returns a fresh array and refuses to let
NaN/Inf escape. Spatial maps use channels-last layout (h, w, c).

``matmul`` is the single funnel for matrix products in the package, which
lets :func:`count_macs` instrument any kernel built on top of it.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, DTypeError, NumericDomainError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

MAGIC = b"ATNS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBB6x")


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    try:
        dt = np.dtype(dtype)
    except TypeError as exc:
        raise DTypeError(f"unsupported dtype {dtype!r}") from exc
    if dt not in _DTYPE_CODES:
        raise DTypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a tensor and return it as a contiguous array.

    Without ``dtype``, float32/float64 inputs keep their dtype and anything
    else (ints, Python lists) is promoted to float64.
    """
    arr = np.asarray(x)
    if dtype is None:
        dt = arr.dtype if arr.dtype in _DTYPE_CODES else np.dtype(np.float64)
    else:
        dt = resolve_dtype(dtype)
    if arr.ndim < 1:
        raise DimensionError("tensors must have rank >= 1")
    arr = np.ascontiguousarray(arr, dtype=dt)
    if any(s < 1 for s in arr.shape):
        raise DimensionError(f"tensor dims must be >= 1, got {arr.shape}")
    return arr


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(x))[0])
        raise NumericDomainError("non-finite value produced", location=f"{where}{list(bad)}")
    return x


def _same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise DTypeError(f"dtype mismatch: {dt} vs {a.dtype}")
    return dt


# --------------------------------------------------------------------------
# MAC instrumentation

_counter = threading.local()


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates issued through :func:`matmul`.

    Yields a one-element list whose entry is updated in place::

        with count_macs() as macs:
            agent_attention_pure(inputs)
        print(macs[0])
    """
    prev = getattr(_counter, "box", None)
    box = [0]
    _counter.box = box
    try:
        yield box
    finally:
        _counter.box = prev
        if prev is not None:
            prev[0] += box[0]


def matmul(a, b) -> np.ndarray:
    """Matrix product of ``a`` (m×k) and ``b`` (k×p), accumulated in their dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    _same_dtype(a, b)
    box = getattr(_counter, "box", None)
    if box is not None:
        box[0] += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


# --------------------------------------------------------------------------
# softmax


def row_softmax(a, scale: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``scale * a`` with max subtraction."""
    a = np.asarray(a)
    if not scale > 0:
        raise ConfigError(f"softmax scale must be positive, got {scale}")
    check_finite(a, "row_softmax input")
    z = a * a.dtype.type(scale) if scale != 1.0 else a.copy()
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def row_softmax_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row softmax w.r.t. its (already scaled) logits."""
    return p * (grad - np.sum(grad * p, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# resampling operators, written as separable linear maps


def pool_matrix(inp: int, out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages the adaptive bin [floor(i*inp/out), ceil((i+1)*inp/out))."""
    if not 1 <= out <= inp:
        raise DimensionError(f"pooled size {out} must lie in [1, {inp}]")
    m = np.zeros((out, inp), dtype=dtype)
    for i in range(out):
        start = (i * inp) // out
        end = -((-(i + 1) * inp) // out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def interp_matrix(inp: int, out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights, align_corners=False, source index clamped."""
    if inp < 1 or out < 1:
        raise DimensionError("interpolation sizes must be >= 1")
    m = np.zeros((out, inp), dtype=dtype)
    for i in range(out):
        s = (i + 0.5) * inp / out - 0.5
        s = min(max(s, 0.0), inp - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, inp - 1)
        frac = s - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _apply_separable(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # out[i, j, c] = sum_{a, b} rows[i, a] * x[a, b, c] * cols[j, b]
    return np.ascontiguousarray(np.einsum("ia,abc,jb->ijc", rows, x, cols, optimize=True))


def _check_map(x, name):
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"{name} expects an h×w×c map, got shape {x.shape}")
    return x


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> np.ndarray:
    x = _check_map(x, "adaptive_avg_pool2d")
    h, w, _ = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError(f"cannot pool {h}×{w} to {out_h}×{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    return _apply_separable(x, pool_matrix(h, out_h, x.dtype), pool_matrix(w, out_w, x.dtype))


def adaptive_avg_pool2d_backward(grad, in_h: int, in_w: int) -> np.ndarray:
    grad = _check_map(grad, "adaptive_avg_pool2d_backward")
    out_h, out_w, _ = grad.shape
    if (out_h, out_w) == (in_h, in_w):
        return grad.copy()
    return _apply_separable(
        grad, pool_matrix(in_h, out_h, grad.dtype).T, pool_matrix(in_w, out_w, grad.dtype).T
    )


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = _check_map(x, "bilinear_resize")
    h0, w0, _ = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be >= 1")
    if (out_h, out_w) == (h0, w0):
        return x.copy()
    return _apply_separable(x, interp_matrix(h0, out_h, x.dtype), interp_matrix(w0, out_w, x.dtype))


def bilinear_resize_backward(grad, in_h: int, in_w: int) -> np.ndarray:
    grad = _check_map(grad, "bilinear_resize_backward")
    out_h, out_w, _ = grad.shape
    if (out_h, out_w) == (in_h, in_w):
        return grad.copy()
    return _apply_separable(
        grad, interp_matrix(in_h, out_h, grad.dtype).T, interp_matrix(in_w, out_w, grad.dtype).T
    )


# --------------------------------------------------------------------------
# depthwise convolution


def _check_dwc(x, kernel):
    x = _check_map(x, "depthwise_conv2d")
    kernel = as_tensor(kernel)
    if kernel.ndim != 3 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"kernel shape {kernel.shape} does not match input {x.shape}")
    _same_dtype(x, kernel)
    kh, kw, _ = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise kernel dims must be odd, got {kh}×{kw}")
    return x, kernel


def depthwise_conv2d(x, kernel) -> np.ndarray:
    """Per-channel 2-D cross-correlation, stride 1, zero 'same' padding."""
    x, kernel = _check_dwc(x, kernel)
    h, w, _ = x.shape
    kh, kw, _ = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += padded[i : i + h, j : j + w, :] * kernel[i, j, :]
    return out


def depthwise_conv2d_backward(x, kernel, grad):
    """Return (d_input, d_kernel) for :func:`depthwise_conv2d`."""
    x, kernel = _check_dwc(x, kernel)
    h, w, _ = x.shape
    kh, kw, _ = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    dpadded = np.zeros_like(padded)
    dkernel = np.zeros_like(kernel)
    for i in range(kh):
        for j in range(kw):
            window = padded[i : i + h, j : j + w, :]
            dkernel[i, j, :] = np.sum(window * grad, axis=(0, 1))
            dpadded[i : i + h, j : j + w, :] += grad * kernel[i, j, :]
    return dpadded[ph : ph + h, pw : pw + w, :].copy(), dkernel


# --------------------------------------------------------------------------
# binary file format


def tensor_to_bytes(x) -> bytes:
    x = as_tensor(x)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _DTYPE_CODES[x.dtype], x.ndim)
    dims = struct.pack(f"<{x.ndim}Q", *x.shape)
    payload = x.astype(x.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + dims + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise DTypeError(f"unknown dtype code {code}")
    if rank < 1:
        raise DimensionError("stored tensor has rank 0")
    off = _HEADER.size
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _CODE_DTYPES[code]
    count = math.prod(dims)
    if len(buf) - off != count * dt.itemsize:
        raise ValueError(
            f"payload has {len(buf) - off} bytes, expected {count * dt.itemsize} for shape {dims}"
        )
    arr = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=count, offset=off)
    return as_tensor(arr.astype(dt).reshape(dims))


def save_tensor(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
