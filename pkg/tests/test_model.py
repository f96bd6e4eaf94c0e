import math

import numpy as np
import pytest
from scipy import special

from src.errors import ConfigError, DivergenceError, SequenceTooLongError, ShapeError, TokenRangeError
from src.model import (LossSpec, ModelConfig, TapSpec, backward, count_params, forward, forward_kl,
                       init_params, lm_loss, params_equal, score_continuation, validate_config,
                       zeros_params)
from tests.helpers import identity_layers, random_params


def _numeric_grad(params, loss_fn, h=1e-4):
    """Fourth-order central differences over every coordinate."""
    grads = {}
    for name, arr in params.tensors.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            values = []
            for step in (2 * h, h, -h, -2 * h):
                arr[idx] = orig + step
                values.append(loss_fn(params))
            arr[idx] = orig
            g[idx] = (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * h)
        grads[name] = g
    return grads


def _assert_grads_close(analytic, numeric, tol=1e-4):
    for name, num in numeric.items():
        ana = analytic[name]
        excess = np.abs(ana - num) - tol * (np.abs(ana) + np.abs(num)) - 1e-9
        worst = np.unravel_index(excess.argmax(), excess.shape)
        assert excess.max() <= 0, f"{name}: gradient mismatch at {worst}"


def test_count_params_toy(toy_config):
    total, non_embedding = count_params(toy_config)
    assert total == 1352
    assert non_embedding == 1192
    assert total <= 10_000


def test_count_params_tied_embeddings(toy_config):
    tied = toy_config.replace(tie_embeddings=True)
    assert count_params(tied) == (1352 - 80, 1192)


def test_validate_config_reports_group_mismatch():
    cfg = ModelConfig(depth=2, hidden=8, mlp_hidden=16, query_heads=6, attention_groups=4, head_dim=2)
    violations = validate_config(cfg)
    assert any("query_heads mod groups must be 0" in v for v in violations)
    with pytest.raises(ConfigError):
        init_params(cfg, seed=0)


def test_config_rejects_unknown_keys(toy_config):
    data = toy_config.to_dict()
    assert ModelConfig.from_dict(data) == toy_config
    data["dropout"] = 0.1
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(data)


def test_init_is_deterministic(small_config):
    assert params_equal(init_params(small_config, 7), init_params(small_config, 7))
    assert not params_equal(init_params(small_config, 7), init_params(small_config, 8))


def test_uniform_model_loss_is_log_vocab(small_config):
    params = zeros_params(small_config)
    tokens = np.random.default_rng(0).integers(0, 258, size=(2, 12))
    logits, _ = forward(params, tokens[:, :-1])
    assert abs(lm_loss(logits, tokens[:, 1:]) - math.log(258)) <= 1e-6


def test_forward_rejects_bad_tokens(small_params):
    with pytest.raises(TokenRangeError):
        forward(small_params, np.array([[1, 258]]))
    with pytest.raises(SequenceTooLongError):
        forward(small_params, np.zeros((1, 65), dtype=np.int64))
    with pytest.raises(ShapeError):
        forward(small_params, np.zeros((1, 4), dtype=np.float32))


def test_forward_is_causal(noisy_params):
    tokens = np.array([[5, 17, 99, 3, 42, 8]])
    changed = tokens.copy()
    changed[0, 4] = 200
    a, _ = forward(noisy_params, tokens)
    b, _ = forward(noisy_params, changed)
    np.testing.assert_allclose(a[:, :4], b[:, :4], rtol=1e-5, atol=1e-5)
    assert not np.allclose(a[:, 4:], b[:, 4:])


def test_gqa_matches_expanded_multi_head(small_config):
    gqa = random_params(small_config, seed=5, std=0.3)
    mha_cfg = small_config.replace(attention_groups=small_config.query_heads)
    mha = gqa.copy()
    mha.config = mha_cfg
    D, H = small_config.head_dim, small_config.hidden
    for i in range(small_config.depth):
        for kind in ("k", "v"):
            w = gqa[f"layer.{i}.attn.{kind}"].reshape(small_config.attention_groups, D, H)
            mha.tensors[f"layer.{i}.attn.{kind}"] = np.repeat(
                w, small_config.group_size, axis=0).reshape(-1, H)
    tokens = np.array([[1, 2, 3, 4, 5, 6, 7, 8]])
    np.testing.assert_allclose(forward(gqa, tokens)[0], forward(mha, tokens)[0], atol=1e-10)


def test_skipping_identity_layer_is_exact(noisy_params):
    params = identity_layers(noisy_params, [1])
    tokens = np.array([[10, 20, 30, 40, 50]])
    full, _ = forward(params, tokens)
    skipped, _ = forward(params, tokens, skip_layers=[1])
    np.testing.assert_array_equal(full, skipped)


def test_aggregate_taps_shapes(small_params, small_config):
    tokens = np.random.default_rng(1).integers(0, 256, size=(3, 10))
    _, trace = forward(small_params, tokens, TapSpec(mlp=True, heads=True, norms=True, aggregate=True))
    assert trace.mlp[0].shape == (3, small_config.mlp_hidden)
    assert trace.heads[0].shape == (3, small_config.query_heads)
    assert len(trace.norms) == 2 * small_config.depth + 1
    assert trace.norms["final.norm"].shape == (3, small_config.hidden)
    assert all(np.all(v >= 0) for v in trace.mlp.values())


def test_forward_kl_examples():
    teacher = np.log(np.array([[[0.75, 0.25]]]))
    student = np.zeros((1, 1, 2))
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert abs(forward_kl(teacher, student) - expected) < 1e-5
    assert abs(forward_kl(teacher, teacher)) <= 1e-9
    assert abs(forward_kl(teacher, student + 3.7) - forward_kl(teacher, student)) < 1e-12
    with pytest.raises(ShapeError):
        forward_kl(teacher, np.zeros((1, 2, 2)))


def test_forward_kl_nonnegative_on_random_logits():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t, s = rng.normal(size=(2, 3, 7)) * 3, rng.normal(size=(2, 3, 7)) * 3
        assert forward_kl(t, s) >= 0.0


def test_forward_kl_rejects_negative_beyond_rounding(monkeypatch):
    # unnormalized "log-probabilities" let the per-token sum go negative
    monkeypatch.setattr(special, "log_softmax", lambda x, axis=-1: np.asarray(x))
    with pytest.raises(DivergenceError, match="negative"):
        forward_kl(np.zeros((1, 1, 2)), np.full((1, 1, 2), 5.0))
    assert forward_kl(np.zeros((1, 1, 2)), np.full((1, 1, 2), 1e-7)) == 0.0


def test_gradient_oracle_ce(toy_config):
    params = random_params(toy_config, seed=11)
    rng = np.random.default_rng(12)
    tokens = rng.integers(0, toy_config.vocab, size=(2, 5))
    targets = rng.integers(0, toy_config.vocab, size=(2, 5))
    _, grads = backward(params, tokens, LossSpec.ce(targets))
    numeric = _numeric_grad(params, lambda p: lm_loss(forward(p, tokens)[0], targets))
    _assert_grads_close(grads.tensors, numeric)


def test_gradient_oracle_kl(toy_config):
    params = random_params(toy_config, seed=21)
    rng = np.random.default_rng(22)
    tokens = rng.integers(0, toy_config.vocab, size=(2, 5))
    teacher_logits = rng.normal(size=(2, 5, toy_config.vocab)) * 2.0
    _, grads = backward(params, tokens, LossSpec.kl(teacher_logits))
    numeric = _numeric_grad(params, lambda p: forward_kl(teacher_logits, forward(p, tokens)[0]))
    _assert_grads_close(grads.tensors, numeric)


def test_gradient_oracle_tied_embeddings(toy_config):
    cfg = toy_config.replace(tie_embeddings=True)
    params = random_params(cfg, seed=31)
    rng = np.random.default_rng(32)
    tokens = rng.integers(0, cfg.vocab, size=(1, 6))
    targets = rng.integers(0, cfg.vocab, size=(1, 6))
    _, grads = backward(params, tokens, LossSpec.ce(targets))
    numeric = _numeric_grad(params, lambda p: lm_loss(forward(p, tokens)[0], targets))
    _assert_grads_close(grads.tensors, numeric)


def test_kl_to_uniform_teacher_matches_soft_ce_gradient(toy_config):
    params = random_params(toy_config, seed=41)
    tokens = np.random.default_rng(42).integers(0, toy_config.vocab, size=(2, 4))
    uniform = np.zeros((2, 4, toy_config.vocab))
    _, grads = backward(params, tokens, LossSpec.kl(uniform))

    def soft_ce(p):
        logp = special.log_softmax(forward(p, tokens)[0], axis=-1)
        return float(-logp.mean(axis=-1).mean())

    numeric = _numeric_grad(params, soft_ce)
    _assert_grads_close(grads.tensors, numeric)


def test_backward_reports_divergence(toy_config):
    params = random_params(toy_config, seed=1)
    params.tensors["head.out"][0, 0] = np.nan
    tokens = np.array([[1, 2, 3]])
    with pytest.raises(DivergenceError) as exc:
        backward(params, tokens, LossSpec.ce(np.array([[2, 3, 4]])), step=17)
    assert exc.value.step == 17


def test_score_continuation(noisy_params):
    prefix = np.array([256, 104, 105])
    continuation = np.array([32, 116])
    assert score_continuation(noisy_params, prefix, np.array([], dtype=np.int64)) == 0.0
    logits, _ = forward(noisy_params, np.concatenate([prefix, continuation])[None, :])
    logp = special.log_softmax(logits[0].astype(np.float64), axis=-1)
    expected = logp[2, 32] + logp[3, 116]
    assert score_continuation(noisy_params, prefix, continuation) == pytest.approx(expected, abs=1e-9)
    with pytest.raises(SequenceTooLongError):
        score_continuation(noisy_params, np.ones(60, dtype=np.int64), np.ones(10, dtype=np.int64))


def test_empty_prefix_scores_from_bos(noisy_params, small_config):
    continuation = np.array([65, 66])
    from_bos = score_continuation(noisy_params, np.array([256]), continuation)
    assert score_continuation(noisy_params, [], continuation) == from_bos
    uniform = score_continuation(zeros_params(small_config), [], continuation)
    assert uniform == pytest.approx(-2 * math.log(258), abs=1e-9)


def test_lm_loss_two_token_example():
    logits = np.array([[[0.0, math.log(3.0)]]])
    assert lm_loss(logits, np.array([[1]])) == pytest.approx(-math.log(0.75), abs=1e-9)


def test_taps_do_not_change_logits(noisy_params):
    tokens = np.array([[4, 8, 15, 16, 23, 42]])
    plain, _ = forward(noisy_params, tokens)
    tapped, _ = forward(noisy_params, tokens, TapSpec(mlp=True, heads=True, norms=True, residual=True))
    np.testing.assert_array_equal(plain, tapped)


def test_batch_rows_are_independent(noisy_params):
    tokens = np.random.default_rng(4).integers(0, 256, size=(3, 7))
    logits, _ = forward(noisy_params, tokens)
    swapped, _ = forward(noisy_params, tokens[[2, 0, 1]])
    np.testing.assert_allclose(swapped, logits[[2, 0, 1]], rtol=1e-5, atol=1e-5)


def test_score_continuation_chain_rule(noisy_params):
    prefix, a, b = np.array([256, 65, 66]), np.array([67, 68]), np.array([69])
    joint = score_continuation(noisy_params, prefix, np.concatenate([a, b]))
    split = (score_continuation(noisy_params, prefix, a)
             + score_continuation(noisy_params, np.concatenate([prefix, a]), b))
    assert joint == pytest.approx(split, abs=1e-4)
