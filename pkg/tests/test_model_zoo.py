import json
from dataclasses import replace

import numpy as np
import pytest

from agentattn import model_zoo as mz
from agentattn.bench import flops_model_forward
from agentattn.errors import ConfigError, DimensionError


def desk(**kw):
    base = dict(name="desk", img_size=16, patch_size=4, depth=2, dim=16, heads=2, agent_n=4,
                num_classes=10, bias_block=2)
    base.update(kw)
    return mz.ModelPreset(**base)


# presets -------------------------------------------------------------------------


def test_shipped_presets_listed():
    names = mz.shipped_presets()
    for n in ("agent-deit-t", "agent-deit-s", "agent-deit-b", "agent-deit-s-448"):
        assert n in names


def test_load_preset_by_name_file_and_missing(tmp_path):
    t = mz.load_preset("agent-deit-t")
    assert mz.load_preset("agent-deit-t.json") == t
    path = tmp_path / "p.json"
    path.write_text(t.to_json())
    assert mz.load_preset(path) == t
    with pytest.raises(FileNotFoundError):
        mz.load_preset(tmp_path / "nope.json")


def test_deit_t_architecture():
    t = mz.load_preset("agent-deit-t")
    assert (t.depth, t.dim, t.heads, t.grid) == (12, 192, 3, 14)
    assert t.block_agents() == [49] * 12


def test_deit_b_mixes_agent_and_plain_blocks():
    b = mz.load_preset("agent-deit-b")
    assert b.block_agents() == [81] * 4 + [None] * 8


def test_preset_validation():
    with pytest.raises(ConfigError):
        desk(img_size=15)
    with pytest.raises(ConfigError):
        desk(heads=3)
    with pytest.raises(ConfigError):
        desk(agent_n=5)
    with pytest.raises(ConfigError):
        desk(agent_n=25)
    with pytest.raises(ConfigError):
        mz.ModelPreset.from_dict({**json.loads(desk().to_json()), "window": 7})


def test_documentation_presets_are_not_assembled():
    for name in ("agent-pvt-t", "agent-swin-t", "agent-cswin-t"):
        p = mz.load_preset(name)
        assert p.stages
        with pytest.raises(ConfigError):
            mz.build(p)


# build and counting ----------------------------------------------------------------


def test_depth_zero_counts_by_hand():
    p = mz.ModelPreset(name="bare", img_size=16, patch_size=16, depth=0, dim=8, heads=1)
    rep = mz.count_params(mz.build(p))
    embed = 16 * 16 * 3 * 8 + 8
    head = 8 * 1000 + 1000
    assert rep.components["patch_embed"] == embed
    assert rep.components["head"] == head
    assert rep.total == embed + head + 2 * 8
    assert flops_model_forward(p) == 16 * 16 * 3 * 8 + 8 * 1000


def test_doubling_depth_adds_one_block_per_layer():
    one, two, four = (mz.count_params(mz.build(desk(depth=d))).total for d in (1, 2, 4))
    assert four - two == 2 * (two - one)
    f1, f2, f4 = (flops_model_forward(desk(depth=d)) for d in (1, 2, 4))
    assert f4 - f2 == 2 * (f2 - f1)


def test_report_total_is_sum():
    rep = mz.count_params(mz.build(desk()))
    assert rep.total == sum(rep.components.values())
    assert rep.to_dict()["total"] == rep.total


def test_count_matches_named_params():
    m = mz.build(desk(agent_n=[4, None]))
    assert mz.count_params(m).total == sum(v.size for v in m.named_params().values())


def test_count_invariant_to_seed_and_build_deterministic():
    a, b = mz.build(desk(), seed=3), mz.build(desk(), seed=3)
    for k, v in a.named_params().items():
        np.testing.assert_array_equal(v, b.named_params()[k])
    assert mz.count_params(a).total == mz.count_params(mz.build(desk(), seed=4)).total


def test_pos_embed_flag_adds_parameters():
    base = mz.count_params(mz.build(desk())).total
    assert mz.count_params(mz.build(desk(pos_embed=True))).total == base + 16 * 16


@pytest.mark.parametrize("name,reference", [("agent-deit-t", 6.0e6), ("agent-deit-b", 87.2e6)])
def test_reference_param_counts(name, reference):
    total = mz.count_params(mz.build(mz.load_preset(name), dtype="f32")).total
    assert abs(total - reference) / reference < 0.03


# forward ---------------------------------------------------------------------------------


def test_patchify_row_major_order():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    rows = mz.patchify(img, 2)
    np.testing.assert_array_equal(rows[1], [2, 3, 6, 7])


def test_forward_zero_image_finite_and_shape():
    m = mz.build(desk(num_classes=1000))
    logits = mz.forward_logits(m, np.zeros((16, 16, 3)))
    assert logits.shape == (1000,)
    assert np.all(np.isfinite(logits))


def test_forward_deterministic_and_seed_sensitive():
    img = np.random.default_rng(0).standard_normal((16, 16, 3))
    a = mz.forward_logits(mz.build(desk(), seed=1), img)
    np.testing.assert_array_equal(a, mz.forward_logits(mz.build(desk(), seed=1), img))
    assert not np.allclose(a, mz.forward_logits(mz.build(desk(), seed=2), img))


def test_forward_rejects_wrong_image():
    with pytest.raises(DimensionError):
        mz.forward_logits(mz.build(desk()), np.zeros((8, 8, 3)))


def test_layer_norm_and_gelu_values():
    y, _ = mz.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-5)
    np.testing.assert_allclose(mz.gelu(np.array([0.0, 1.0])), [0.0, 0.8413447460685429], atol=1e-15)


def _fd_model_check(m, img, names, h=1e-6):
    G = np.random.default_rng(5).standard_normal(m.preset.num_classes)
    logits, cache = mz.forward_with_cache(m, img)
    grads = mz.backward(m, cache, G)
    assert set(grads) == set(m.named_params())
    params = m.named_params()
    worst, scale = 0.0, 1.0
    for name in names:
        arr = params[name]
        for idx in np.ndindex(arr.shape):
            vals = []
            for sgn in (1, -1):
                pert = arr.copy()
                pert[idx] += sgn * h
                vals.append(float(G @ mz.forward_logits(_with(m, name, pert), img)))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(fd - grads[name][idx]))
        scale = max(scale, float(np.max(np.abs(grads[name]))))
    return worst / scale


def _with(m, name, arr):
    """Rebuild ``m`` with one named parameter replaced."""
    if name.startswith("blocks."):
        _, i, rest = name.split(".", 2)
        blocks = list(m.blocks)
        blk = blocks[int(i)]
        if rest.startswith("attn."):
            blk = replace(blk, attn=blk.attn.with_params({rest[5:]: arr}))
        else:
            field = {"norm1.g": "norm1_g", "norm1.b": "norm1_b", "norm2.g": "norm2_g", "norm2.b": "norm2_b",
                     "mlp.fc1.w": "fc1_w", "mlp.fc1.b": "fc1_b", "mlp.fc2.w": "fc2_w", "mlp.fc2.b": "fc2_b"}[rest]
            blk = replace(blk, **{field: arr})
        blocks[int(i)] = blk
        return replace(m, blocks=tuple(blocks))
    field = {"patch_embed.w": "patch_w", "patch_embed.b": "patch_b", "pos_embed": "pos", "norm.g": "norm_g",
             "norm.b": "norm_b", "head.w": "head_w", "head.b": "head_b"}[name]
    return replace(m, **{field: arr})


def test_model_gradient_patch_embed_vs_finite_differences():
    m = mz.build(desk(), seed=0)
    img = np.random.default_rng(1).standard_normal((16, 16, 3))
    assert _fd_model_check(m, img, ["patch_embed.w"]) < 1e-4


def test_model_gradient_all_kinds_of_parameters():
    p = desk(img_size=8, patch_size=4, dim=4, depth=2, agent_n=[1, None], num_classes=3, pos_embed=True)
    m = mz.build(p, seed=2)
    img = np.random.default_rng(3).standard_normal((8, 8, 3))
    names = list(m.named_params())
    assert _fd_model_check(m, img, names) < 1e-6
