import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentattn.agent_bias import (
    AgentBiasParams,
    bias_backward,
    init_bias_params,
    materialize_b1,
    materialize_b2,
    resize_bias_for,
)
from agentattn.attention import AttentionInputs, agent_attention_core, agent_attention_pure
from agentattn.errors import ConfigError
from agentattn.tensor_core import bilinear_resize


def with_components(p, **comps):
    base = p.components()
    base.update(comps)
    return AgentBiasParams(n=p.n, h=p.h, w=p.w, h0=p.h0, w0=p.w0, **base)


def loop_resize(img, oh, ow):
    ih, iw = img.shape

    def taps(i, inp, out):
        s = (i + 0.5) * inp / out - 0.5
        s = min(max(s, 0.0), inp - 1.0)
        lo = int(math.floor(s))
        return lo, min(lo + 1, inp - 1), s - lo

    out = np.zeros((oh, ow))
    for i in range(oh):
        y0, y1, fy = taps(i, ih, oh)
        for j in range(ow):
            x0, x1, fx = taps(j, iw, ow)
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def random_params(seed, n, h, w, h0, w0):
    rng = np.random.default_rng(seed)
    p = init_bias_params(n, h, w, h0, w0)
    return with_components(p, **{k: rng.standard_normal(v.shape) for k, v in p.components().items()})


def test_zero_components_give_zero_matrices():
    p = init_bias_params(4, 3, 5, 2, 2)
    assert not np.any(materialize_b1(p))
    assert not np.any(materialize_b2(p))
    assert materialize_b1(p).shape == (4, 15)
    assert materialize_b2(p).shape == (15, 4)


def test_constant_column_component_fills_b1():
    p = init_bias_params(3, 4, 2, 2, 2)
    p = with_components(p, b1_col=np.full((3, 1, 2), 0.75))
    np.testing.assert_array_equal(materialize_b1(p), np.full((3, 8), 0.75))


def test_single_cell_block_spreads_everywhere():
    p = init_bias_params(2, 2, 2, 1, 1)
    p = with_components(p, b1_block=np.array([1.25, -3.0]).reshape(2, 1, 1))
    np.testing.assert_array_equal(materialize_b1(p), [[1.25] * 4, [-3.0] * 4])


def test_b2_row_component_constant_along_width():
    p = init_bias_params(3, 3, 4, 2, 2)
    rows = np.random.default_rng(0).standard_normal((3, 1, 3))
    b2 = materialize_b2(with_components(p, b2_row=rows)).reshape(3, 4, 3)
    for j in range(4):
        np.testing.assert_array_equal(b2[:, j, :], rows[:, 0, :])


def test_b2_matches_loop_materialization():
    p = random_params(1, 4, 3, 2, 2, 2)
    want = np.zeros((6, 4))
    for a in range(4):
        block = loop_resize(p.b2_block[:, :, a], 3, 2)
        for i in range(3):
            for j in range(2):
                want[i * 2 + j, a] = p.b2_col[0, j, a] + p.b2_row[i, 0, a] + block[i, j]
    np.testing.assert_allclose(materialize_b2(p), want, rtol=0, atol=1e-15)


def test_b1_matches_loop_materialization():
    p = random_params(2, 3, 5, 4, 3, 2)
    want = np.zeros((3, 20))
    for a in range(3):
        block = loop_resize(p.b1_block[a], 5, 4)
        for i in range(5):
            for j in range(4):
                want[a, i * 4 + j] = p.b1_col[a, 0, j] + p.b1_row[a, i, 0] + block[i, j]
    np.testing.assert_allclose(materialize_b1(p), want, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.data())
def test_b1_exact_sum_with_integer_components(n, h, w, data):
    h0, w0 = data.draw(st.integers(1, h)), data.draw(st.integers(1, w))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    p = init_bias_params(n, h, w, h0, w0)
    p = with_components(p, **{k: rng.integers(-5, 6, size=v.shape).astype(float) for k, v in p.components().items()})
    block = bilinear_resize(p.b1_block.transpose(1, 2, 0), h, w).transpose(2, 0, 1)
    b1 = materialize_b1(p)
    for a in range(n):
        for i in range(h):
            for j in range(w):
                assert b1[a, i * w + j] == p.b1_col[a, 0, j] + p.b1_row[a, i, 0] + block[a, i, j]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_bilinear_resize_matches_loop_formula(ih, iw, oh, ow, seed):
    img = np.random.default_rng(seed).standard_normal((ih, iw))
    got = bilinear_resize(img[:, :, None], oh, ow)[:, :, 0]
    np.testing.assert_allclose(got, loop_resize(img, oh, ow), rtol=0, atol=1e-14)


def test_block_larger_than_grid_rejected():
    p = init_bias_params(1, 2, 2, 2, 2)
    with pytest.raises(ConfigError):
        AgentBiasParams(n=1, h=2, w=2, h0=3, w0=2, **{**p.components(), "b1_block": np.zeros((1, 3, 2)),
                                                     "b2_block": np.zeros((3, 2, 1))})


def test_init_clips_block_to_grid_and_counts_params():
    p = init_bias_params(4, 3, 5)
    assert (p.h0, p.w0) == (3, 5)
    assert p.num_params() == 4 * (5 + 3 + 15) * 2


def test_resize_identity_at_same_sizes():
    p = random_params(3, 4, 4, 4, 2, 2)
    assert resize_bias_for(p, 4, 4, 4) is p


def test_resize_constant_stays_constant():
    p = init_bias_params(4, 3, 3, 2, 2)
    p = with_components(p, **{k: np.full(v.shape, 0.5) for k, v in p.components().items()})
    q = resize_bias_for(p, 9, 6, 5)
    for name, arr in q.components().items():
        np.testing.assert_allclose(arr, 0.5, atol=1e-15, err_msg=name)
    assert q.component_shapes()["b1_col"] == (9, 1, 5)


def test_resize_agent_grid_hand_values():
    p = init_bias_params(4, 1, 1, 1, 1)
    corners = np.array([0.0, 1.0, 1.0, 2.0])
    p = with_components(p, b1_block=corners.reshape(4, 1, 1))
    q = resize_bias_for(p, 9, 1, 1)
    want = [[0, 0.5, 1], [0.5, 1, 1.5], [1, 1.5, 2]]
    np.testing.assert_allclose(q.b1_block.reshape(3, 3), want, rtol=0, atol=1e-15)


def test_resize_non_square_agents_uses_line():
    p = init_bias_params(2, 2, 2, 1, 1)
    p = with_components(p, b2_col=np.array([0.0, 1.0] * 2).reshape(1, 2, 2))
    q = resize_bias_for(p, 3, 2, 2)
    np.testing.assert_allclose(q.b2_col[0, 0], loop_resize(np.array([[0.0, 1.0]]), 1, 3)[0])


def test_zero_bias_reduces_to_pure_kernel_bitwise():
    rng = np.random.default_rng(4)
    q, k, v = (rng.standard_normal((9, 3)) for _ in range(3))
    a = rng.standard_normal((4, 3))
    p = init_bias_params(4, 3, 3, 2, 2)
    inp = AttentionInputs(q, k, v, a)
    out, _ = agent_attention_core(q, k, v, a, inp.scale1, inp.scale2, materialize_b1(p), materialize_b2(p))
    np.testing.assert_array_equal(out, agent_attention_pure(inp))


def test_bias_backward_is_adjoint_of_materialization():
    p = random_params(5, 3, 4, 5, 2, 3)
    rng = np.random.default_rng(6)
    g1, g2 = rng.standard_normal((3, 20)), rng.standard_normal((20, 3))
    grads = bias_backward(p, g1, g2)
    t = random_params(7, 3, 4, 5, 2, 3)
    lhs = np.sum(materialize_b1(t) * g1) + np.sum(materialize_b2(t) * g2)
    rhs = sum(np.sum(t.components()[k] * grads[k]) for k in grads)
    assert abs(lhs - rhs) < 1e-12
