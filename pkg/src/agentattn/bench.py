"""MAC accounting and wall-clock scaling sweeps for the attention kernels.

Counting convention: one multiply-accumulate (MAC) per inner-product term
of every matrix product. Softmax exponentials and normalizations are not
MACs; :func:`exp_count` reports them on the side.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionInputs, agent_attention_pure, linear_attention, softmax_attention
from .errors import ConfigError, ResourceError
from .model_zoo import ModelPreset
from .tensor_core import resolve_dtype

KERNELS = ("softmax", "agent", "linear")
CSV_HEADER = ("kernel", "N", "n", "d", "dtype", "wall_ns", "mac_count")
MIN_REPEATS = 5
MIN_WARMUP = 2
THREADS_ENV = "AGENTATTN_THREADS"


def _check_sizes(**sizes):
    for k, v in sizes.items():
        if v is None or int(v) != v or v < 1:
            raise ConfigError(f"{k} must be a positive integer, got {v!r}")


def flop_count(kernel: str, N: int, n: int = 1, d: int = 64, heads: int = 1) -> int:
    """Closed-form MAC count of one forward call of ``kernel``.

    softmax: 2·N²·d (scores, aggregation); agent: 4·N·n·d (two score
    products, two aggregations); linear (normalized, reordered):
    2·N·d² + N·d. All multiplied by ``heads``.
    """
    _check_sizes(N=N, n=n, d=d, heads=heads)
    if kernel == "softmax":
        per_head = 2 * N * N * d
    elif kernel == "agent":
        per_head = 4 * N * n * d
    elif kernel == "linear":
        per_head = 2 * N * d * d + N * d
    else:
        raise ConfigError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    return per_head * heads


def exp_count(kernel: str, N: int, n: int = 1, heads: int = 1) -> int:
    """Number of exponentials evaluated by the kernel's softmaxes."""
    if kernel == "softmax":
        return N * N * heads
    if kernel == "agent":
        return 2 * N * n * heads
    if kernel == "linear":
        return 0
    raise ConfigError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True)
class FlopModel:
    kernel: str
    N: int
    n: int
    d: int
    heads: int
    mac_count: int

    @classmethod
    def of(cls, kernel, N, n, d, heads=1) -> "FlopModel":
        return cls(kernel, N, n, d, heads, flop_count(kernel, N, n, d, heads))


def model_macs(preset: ModelPreset) -> dict:
    """Itemized MACs of one forward pass of the assembled backbone."""
    N, C, hid = preset.tokens, preset.dim, preset.hidden
    P = preset.patch_size
    items = {"patch_embed": N * P * P * preset.in_chans * C, "qkv_proj": 0, "attention": 0, "dwc": 0, "mlp": 0}
    for n in preset.block_agents():
        items["qkv_proj"] += 4 * N * C * C
        items["mlp"] += 2 * N * C * hid
        if n is None:
            items["attention"] += flop_count("softmax", N, 1, C // preset.heads, preset.heads)
        else:
            items["attention"] += flop_count("agent", N, n, C // preset.heads, preset.heads)
            items["dwc"] += 9 * N * C
    items["head"] = C * preset.num_classes
    return items


def flops_model_forward(preset: ModelPreset, convention: str = "multiply-add") -> int:
    """Forward FLOPs of a preset at its configured resolution.

    ``convention="multiply-add"`` counts one FLOP per MAC, the convention of
    published vision-backbone FLOP tables; ``"2mac"`` counts the multiply and
    the add separately.
    """
    macs = sum(model_macs(preset).values())
    if convention == "multiply-add":
        return macs
    if convention == "2mac":
        return 2 * macs
    raise ConfigError(f"unknown FLOP convention {convention!r}")


# --------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class BenchRow:
    kernel: str
    N: int
    n: int
    d: int
    dtype: str
    wall_ns: int
    mac_count: int


_RUNNERS = {
    "softmax": softmax_attention,
    "agent": agent_attention_pure,
    "linear": linear_attention,
}


def _thread_cap(threads):
    cap = os.environ.get(THREADS_ENV)
    if cap:
        threads = min(threads, int(cap))
    return max(1, threads)


def make_inputs(kernel, N, n, d, dtype="f32", seed=0) -> AttentionInputs:
    rng = np.random.default_rng(seed)
    dt = resolve_dtype(dtype)
    q, k, v = (rng.standard_normal((N, d)).astype(dt) for _ in range(3))
    a = rng.standard_normal((n, d)).astype(dt) if kernel == "agent" else None
    return AttentionInputs(q, k, v, a)


def time_kernel(kernel, inputs, repeats=MIN_REPEATS, warmup=MIN_WARMUP) -> int:
    """Median wall time in ns over ``repeats`` timed calls after ``warmup`` discarded ones.

    ``inputs`` may be a single :class:`AttentionInputs` or a list of them
    (one per head), all evaluated inside each timed call.
    """
    if repeats < MIN_REPEATS:
        raise ConfigError(f"repeats must be >= {MIN_REPEATS}")
    if warmup < MIN_WARMUP:
        raise ConfigError(f"warmup must be >= {MIN_WARMUP}")
    fn = _RUNNERS[kernel]
    batch = inputs if isinstance(inputs, list) else [inputs]
    for _ in range(warmup):
        for inp in batch:
            fn(inp)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for inp in batch:
            fn(inp)
        samples.append(time.perf_counter_ns() - t0)
    return max(1, int(statistics.median(samples)))


def run_scaling(
    kernel, Ns, n=49, d=64, dtype="f32", repeats=MIN_REPEATS, warmup=MIN_WARMUP, seed=0, threads=1, heads=1
):
    """Time ``kernel`` at each N in ascending order; one :class:`BenchRow` per N.

    With ``heads`` > 1 each timed call evaluates that many independent heads.

    Timing is single-threaded unless ``threads`` > 1 (capped by the
    AGENTATTN_THREADS environment variable). On allocation failure a
    :class:`ResourceError` carries the rows completed so far.
    """
    if kernel not in _RUNNERS:
        raise ConfigError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    Ns = [int(x) for x in Ns]
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ConfigError(f"Ns must be a non-empty strictly ascending list, got {Ns}")
    _check_sizes(n=n, d=d, repeats=repeats, heads=heads)
    dt_name = "f32" if resolve_dtype(dtype) == np.float32 else "f64"
    rows = []
    with threadpool_limits(limits=_thread_cap(threads)):
        for N in Ns:
            if kernel == "agent" and n > N:
                raise ConfigError(f"agent count {n} exceeds N={N}")
            try:
                inputs = [make_inputs(kernel, N, n, d, dt_name, seed + h) for h in range(heads)]
                wall = time_kernel(kernel, inputs, repeats, warmup)
            except MemoryError as exc:
                raise ResourceError(f"allocation failed at N={N}", partial=rows) from exc
            macs = flop_count(kernel, N, n, d, heads)
            rows.append(BenchRow(kernel, N, n if kernel == "agent" else 0, d, dt_name, wall, macs))
    return rows


def fit_loglog_slope(Ns, walls) -> float:
    """Least-squares slope of log(wall) against log(N)."""
    x = np.log(np.asarray(Ns, dtype=np.float64))
    y = np.log(np.asarray(walls, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def rows_to_csv(rows, fh=None) -> str:
    buf = io.StringIO() if fh is None else fh
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([getattr(r, f) for f in CSV_HEADER])
    return buf.getvalue() if fh is None else ""


def read_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    out = []
    for rec in reader:
        out.append(
            BenchRow(
                rec["kernel"], int(rec["N"]), int(rec["n"]), int(rec["d"]), rec["dtype"],
                int(rec["wall_ns"]), int(rec["mac_count"]),
            )
        )
    return out


def summarize(rows) -> dict:
    """Per-kernel fitted log-log slope of wall time vs N."""
    out = {}
    for kernel in sorted({r.kernel for r in rows}):
        sel = [r for r in rows if r.kernel == kernel]
        entry = {"Ns": [r.N for r in sel], "wall_ns": [r.wall_ns for r in sel]}
        entry["slope"] = fit_loglog_slope(entry["Ns"], entry["wall_ns"]) if len(sel) >= 2 else math.nan
        out[kernel] = entry
    return out


def summary_json(rows) -> str:
    return json.dumps({"kernels": summarize(rows), "rows": [asdict(r) for r in rows]})
