import json

import numpy as np
import pytest

from agentattn import agent_module as am
from agentattn import verify
from agentattn.attention import AttentionInputs, agent_attention_pure
from agentattn.errors import ConfigError


def test_report_passed_iff_metric_within_tolerance():
    r = verify.CheckReport.make("x", 1e-3, 1e-4, 5e-4)
    assert not r.passed
    assert verify.CheckReport.make("x", 1e-3, 1e-4, 5e-4, metric="rel_err").passed
    assert not verify.CheckReport.make("x", float("nan"), 0.0, 1.0).passed


def test_report_json_keys():
    r = verify.CheckReport.make("x", 0.0, 0.0, 1.0)
    assert set(json.loads(r.to_json())) == {"name", "max_abs_err", "rel_err", "tolerance", "passed"}


def test_composed_oracle_agrees_with_kernel():
    inp = verify.random_inputs(np.random.default_rng(0), 16, 4, 5)
    np.testing.assert_allclose(verify.composed_matrix_oracle(inp), agent_attention_pure(inp), rtol=0, atol=1e-12)


def test_composed_matrix_row_stochastic_when_agents_are_keys():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((6, 3)) for _ in range(3))
    M = verify.composed_matrix(AttentionInputs(q, k, v, k))
    assert np.all(M >= 0)
    np.testing.assert_allclose(M.sum(axis=1), 1, atol=1e-15)


def test_identity_values_return_the_map():
    rng = np.random.default_rng(2)
    N = 7
    q, k = rng.standard_normal((N, N)), rng.standard_normal((N, N))
    inp = AttentionInputs(q, k, np.eye(N), rng.standard_normal((3, N)))
    np.testing.assert_allclose(verify.composed_matrix_oracle(inp), verify.composed_matrix(inp), atol=1e-15)


def test_oracle_sweep_cells():
    reps = verify.oracle_sweep(seed=0, seeds=3)
    names = [r.name for r in reps]
    assert "oracle_agreement[f64,N=4,n=16]" not in names
    assert len(reps) == 2 * 8
    assert all(r.passed for r in reps)


def test_oracle_sweep_f32_tolerance():
    reps = verify.oracle_sweep(seed=0, seeds=3, dtype="f32")
    assert all(r.tolerance == 1e-4 and r.passed for r in reps)


def test_gradient_check_linear_map_is_exact():
    rng = np.random.default_rng(3)
    # no truncation error for a linear map, so the widest allowed step keeps
    # the eps·|L|/h rounding term well below the bound
    rep = verify.gradient_check("linear_map", (rng.standard_normal((3, 4)), rng.standard_normal(4)), h=1e-4)
    assert rep.rel_err < 1e-10


def test_gradient_check_agent_kernel():
    inp = verify.random_inputs(np.random.default_rng(4), 4, 2, 2)
    rep = verify.gradient_check("agent_attention_pure", inp, h=1e-6)
    assert rep.passed and rep.rel_err < 1e-6


def test_gradient_check_softmax_and_module():
    inp = verify.random_inputs(np.random.default_rng(5), 5, 0, 3, agents=False)
    assert verify.gradient_check("softmax_attention", inp).passed
    p = am.init_agent_module(4, 2, 4, 3, 3, seed=6, bias_block=2)
    x = np.random.default_rng(7).standard_normal((9, 4))
    assert verify.gradient_check("agent_module_forward", (p, x), tolerance=1e-4).passed


def test_gradient_check_large_step_fails_informatively():
    inp = verify.random_inputs(np.random.default_rng(8), 4, 2, 2)
    rep = verify.gradient_check("agent_attention_pure", inp, h=1e-1)
    assert not rep.passed
    assert rep.rel_err > rep.tolerance


def test_gradient_check_errors():
    with pytest.raises(ConfigError):
        verify.gradient_check("unknown_op", None)
    with pytest.raises(ConfigError):
        verify.gradient_check("linear_map", (np.eye(2), np.ones(2)), h=0.0)


def test_property_suite_registry_and_determinism():
    a = verify.property_suite(seed=3, trials=1)
    assert len(a) >= 10
    assert len({r.name for r in a}) == len(a)
    assert all(r.passed for r in a)
    b = verify.property_suite(seed=3, trials=1)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


@pytest.mark.parametrize("target", sorted(verify.PROPERTIES))
def test_injection_breaks_exactly_one_property(target):
    reps = verify.property_suite(seed=0, trials=2, inject=target)
    failed = [r.name for r in reps if not r.passed]
    assert failed == [target]


def test_rowsum_alias_and_unknown_target():
    failed = [r.name for r in verify.property_suite(0, 1, inject="rowsum") if not r.passed]
    assert failed == ["row_stochastic"]
    with pytest.raises(ConfigError):
        verify.property_suite(0, 1, inject="nothing")
    with pytest.raises(ConfigError):
        verify.property_suite(0, 0)


def test_jsonl_lines():
    reps = verify.property_suite(1, 1)
    lines = verify.to_jsonl(reps).splitlines()
    assert len(lines) == len(reps)
    assert json.loads(lines[0])["name"] == reps[0].name
