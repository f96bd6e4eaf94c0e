import numpy as np
import pytest

from src.errors import TrimError
from src.importance import WidthImportance, estimate_width_importance, rank
from src.model import UnitMasks, count_params, forward, init_params, params_equal
from src.trim import (apply_keep_plan, check_arch, depth_trim_report, iso_param_width_target,
                      plan_width_trim, random_prune, trim_depth, trim_report, trim_width)
from tests.helpers import random_params, restrict_importance


@pytest.fixture
def dense_params(small_config):
    return random_params(small_config, seed=8, std=0.3)


@pytest.fixture
def importance(dense_params, corpus_b):
    calibration = corpus_b.tokens[:8 * 20].reshape(8, 20).astype(np.int64)
    return estimate_width_importance(dense_params, calibration)


@pytest.fixture
def tokens():
    return np.random.default_rng(2).integers(0, 256, size=(2, 12))


def test_identity_trim_is_bit_exact(dense_params, importance, small_config):
    trimmed = trim_width(dense_params, small_config, importance)
    assert params_equal(trimmed, dense_params)
    assert trimmed.meta["trimmed_from"] == small_config.to_dict()


def test_identity_depth_keeps_tensors(noisy_params):
    dropped = trim_depth(noisy_params, [3])
    np.testing.assert_array_equal(dropped["layer.2.mlp.up"], noisy_params["layer.2.mlp.up"])
    np.testing.assert_array_equal(dropped["head.out"], noisy_params["head.out"])


def test_neuron_trim_matches_masked_forward(dense_params, importance, small_config, tokens):
    target = small_config.replace(mlp_hidden=20)
    plan = plan_width_trim(small_config, target, importance)
    trimmed = apply_keep_plan(dense_params, plan, target)
    masks = UnitMasks(neurons={i: np.isin(np.arange(32), plan.neurons[i]).astype(float)
                               for i in range(small_config.depth)})
    expected, _ = forward(dense_params, tokens, unit_masks=masks, norm_identity=True)
    actual, _ = forward(trimmed, tokens, norm_identity=True)
    np.testing.assert_allclose(actual, expected, atol=1e-5)


@pytest.mark.parametrize("heads,groups", [(2, 2), (2, 1)])
def test_head_trim_matches_masked_forward(dense_params, importance, small_config, tokens,
                                          heads, groups):
    target = small_config.replace(query_heads=heads, attention_groups=groups)
    plan = plan_width_trim(small_config, target, importance)
    trimmed = apply_keep_plan(dense_params, plan, target)
    masks = UnitMasks(heads={i: np.isin(np.arange(4), plan.heads[i]).astype(float)
                             for i in range(small_config.depth)})
    expected, _ = forward(dense_params, tokens, unit_masks=masks, norm_identity=True)
    actual, _ = forward(trimmed, tokens, norm_identity=True)
    np.testing.assert_allclose(actual, expected, atol=1e-5)


def test_head_trim_keeps_equal_heads_per_group(importance, small_config):
    target = small_config.replace(query_heads=2, attention_groups=2)
    plan = plan_width_trim(small_config, target, importance)
    for i in range(small_config.depth):
        assert sorted(h // 2 for h in plan.heads[i]) == [0, 1]
        assert plan.kv_heads[i].tolist() == [0, 1]


def test_trim_composition_commutes(dense_params, importance, small_config):
    middle = small_config.replace(hidden=12, mlp_hidden=24)
    final = small_config.replace(hidden=8, mlp_hidden=16)
    plan = plan_width_trim(small_config, middle, importance)
    step = apply_keep_plan(dense_params, plan, middle)
    twice = trim_width(step, final, restrict_importance(importance, plan))
    once = trim_width(dense_params, final, importance)
    assert params_equal(twice, once)


@pytest.mark.parametrize("first,second", [
    ({"hidden": 10}, {"mlp_hidden": 20}),
    ({"mlp_hidden": 20}, {"hidden": 10}),
    ({"hidden": 10}, {"query_heads": 2}),
    ({"query_heads": 2}, {"mlp_hidden": 20}),
])
def test_trims_on_different_axes_commute(dense_params, importance, small_config, first, second):
    def chained(a, b):
        middle = small_config.replace(**a)
        plan = plan_width_trim(small_config, middle, importance)
        step = apply_keep_plan(dense_params, plan, middle)
        return trim_width(step, middle.replace(**b), restrict_importance(importance, plan))

    assert params_equal(chained(first, second), chained(second, first))


def test_report_keep_sets_are_top_k(importance, small_config):
    target = small_config.replace(hidden=10, mlp_hidden=12)
    plan = plan_width_trim(small_config, target, importance)
    report = trim_report(small_config, target, plan, method="activation",
                         importance_digest=importance.digest())
    assert report["channels"]["global"] == sorted(rank(importance.channels)[:10].tolist())
    for i in range(small_config.depth):
        assert report["neurons"][str(i)] == sorted(rank(importance.neurons[i])[:12].tolist())
    assert report["target_cfg"]["hidden"] == 10
    assert report["importance_digest"] == importance.digest()


def test_width_trim_rejects_bad_targets(dense_params, importance, small_config):
    with pytest.raises(TrimError, match="axis mismatch"):
        trim_width(dense_params, small_config.replace(depth=3), importance)
    with pytest.raises(TrimError, match="larger"):
        trim_width(dense_params, small_config.replace(mlp_hidden=40), importance)
    with pytest.raises(TrimError, match="invalid target"):
        trim_width(dense_params, small_config.replace(query_heads=3), importance)
    with pytest.raises(TrimError, match="importance"):
        trim_width(dense_params, small_config.replace(hidden=8),
                   WidthImportance(np.ones((4, 8)), np.ones((4, 4)), np.ones(16)))


def test_trim_depth_renumbers_layers(noisy_params):
    dropped = trim_depth(noisy_params, [0, 2])
    assert dropped.config.depth == 2
    assert dropped.meta["dropped_layers"] == [0, 2]
    np.testing.assert_array_equal(dropped["layer.0.attn.q"], noisy_params["layer.1.attn.q"])
    np.testing.assert_array_equal(dropped["layer.1.attn.q"], noisy_params["layer.3.attn.q"])
    assert check_arch(dropped, dropped.config) == []


@pytest.mark.parametrize("drop", [[], [1, 1], [4], [-1], [0, 1, 2, 3]])
def test_trim_depth_rejects_invalid_sets(noisy_params, drop):
    with pytest.raises(TrimError):
        trim_depth(noisy_params, drop)


def test_depth_trim_report(small_config):
    report = depth_trim_report(small_config, [2, 1], method="contiguous")
    assert report["layers"] == {"kept": [0, 3], "dropped": [1, 2]}
    assert report["target_cfg"]["depth"] == 2


def test_check_arch_lists_violations(noisy_params, small_config):
    broken = noisy_params.copy()
    del broken.tensors["layer.1.mlp.up"]
    broken.tensors["layer.0.attn.o"] = np.zeros((3, 3), dtype=np.float32)
    broken.tensors["extra"] = np.zeros(1, dtype=np.float32)
    broken.tensors["final.norm"] = np.full(16, np.inf, dtype=np.float32)
    violations = check_arch(broken, small_config)
    assert "missing tensor layer.1.mlp.up" in violations
    assert "unexpected tensor extra" in violations
    assert any("layer.0.attn.o" in v for v in violations)
    assert any("non-finite" in v for v in violations)
    assert check_arch(noisy_params, small_config) == []


def test_random_prune_is_deterministic(small_config):
    params = init_params(small_config, seed=0)
    target = small_config.replace(hidden=12, mlp_hidden=16, query_heads=2)
    assert params_equal(random_prune(params, target, 5), random_prune(params, target, 5))
    assert not params_equal(random_prune(params, target, 5), random_prune(params, target, 6))


def test_random_prune_to_same_shape_is_identity(dense_params, small_config):
    assert params_equal(random_prune(dense_params, small_config, 7), dense_params)


def test_iso_param_target_matches_depth_budget(small_config):
    reference = count_params(small_config.replace(depth=3))[1]
    target = iso_param_width_target(small_config, hidden=12, reference_non_embedding=reference)
    assert target.hidden == 12
    assert abs(count_params(target)[1] - reference) / reference <= 0.02
