import numpy as np
import pytest

from src.data import synth_cloze_set
from src.errors import ConfigError, ShapeError
from src.importance import (DepthAnalyzer, DepthScan, WidthImportance, block_importance,
                            calibration_loss, cosine_distance, default_block_sizes, depth_scan_loss,
                            estimate_width_importance, rank, rank_correlation, select_contiguous,
                            select_noncontiguous)
from src.model import TapSpec, forward, params_equal
from tests.helpers import identity_layers


@pytest.fixture
def calibration(corpus_b):
    rng = np.random.default_rng(0)
    starts = rng.choice(len(corpus_b) - 17, size=6, replace=False)
    return np.stack([corpus_b.tokens[s:s + 17] for s in starts]).astype(np.int64)


def test_width_importance_matches_manual_aggregation(noisy_params, calibration):
    imp = estimate_width_importance(noisy_params, calibration, batch_size=4)
    _, trace = forward(noisy_params, calibration, TapSpec(mlp=True, heads=True, norms=True))
    for i in range(noisy_params.config.depth):
        neuron = np.abs(trace.mlp[i].astype(np.float64)).mean(axis=1)
        np.testing.assert_allclose(imp.neurons[i], np.sqrt((neuron ** 2).sum(axis=0)), rtol=1e-5)
        head = np.linalg.norm(trace.heads[i].astype(np.float64), axis=-1).mean(axis=1)
        np.testing.assert_allclose(imp.heads[i], np.sqrt((head ** 2).sum(axis=0)), rtol=1e-5)
    channels = sum(np.sqrt((np.abs(v.astype(np.float64)).mean(axis=1) ** 2).sum(axis=0))
                   for v in trace.norms.values())
    np.testing.assert_allclose(imp.channels, channels, rtol=1e-5)
    assert imp.metadata["calibration_samples"] == 6
    assert imp.metadata["norm_sites"] == 2 * noisy_params.config.depth + 1


def test_zero_gate_row_scores_zero(noisy_params, calibration):
    params = noisy_params.copy()
    params.tensors["layer.1.mlp.gate"][5] = 0.0
    imp = estimate_width_importance(params, calibration)
    assert imp.neurons[1, 5] == 0.0
    assert np.all(imp.neurons[1, :5] > 0)


def test_duplicated_calibration_scales_by_sqrt2(noisy_params, calibration):
    once = estimate_width_importance(noisy_params, calibration)
    twice = estimate_width_importance(noisy_params, np.concatenate([calibration, calibration]))
    np.testing.assert_allclose(twice.neurons, np.sqrt(2) * once.neurons, rtol=1e-6)
    np.testing.assert_allclose(twice.heads, np.sqrt(2) * once.heads, rtol=1e-6)
    np.testing.assert_allclose(twice.channels, np.sqrt(2) * once.channels, rtol=1e-6)


def test_width_importance_is_deterministic_and_saves(noisy_params, calibration, tmp_path):
    a = estimate_width_importance(noisy_params, calibration)
    b = estimate_width_importance(noisy_params, calibration)
    assert a.digest() == b.digest()
    a.save(tmp_path / "importance.json")
    loaded = WidthImportance.load(tmp_path / "importance.json")
    assert loaded.digest() == a.digest()
    loaded.check_against(noisy_params.config)


def test_importance_shape_mismatch(noisy_params, calibration, toy_config):
    imp = estimate_width_importance(noisy_params, calibration)
    with pytest.raises(ShapeError):
        imp.check_against(toy_config)


def test_kv_head_scores_average_group(noisy_params, calibration):
    imp = estimate_width_importance(noisy_params, calibration)
    kv = imp.kv_head_scores(noisy_params.config.group_size)
    assert kv.shape == (4, 2)
    assert kv[0, 1] == pytest.approx(imp.heads[0, 2:4].mean())


def test_rank_examples():
    assert rank([0.5, 2.0, 1.0]).tolist() == [1, 2, 0]
    assert rank([1.0, 3.0, 3.0, 0.0]).tolist() == [1, 2, 0, 3]


def test_cosine_distance_examples():
    d, valid = cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert d == pytest.approx(1.0)
    d, _ = cosine_distance(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert d == pytest.approx(0.2929, abs=1e-4)
    d, _ = cosine_distance(np.array([0.3, -2.0, 7.0]), np.array([0.3, -2.0, 7.0]))
    assert d == 0.0
    _, valid = cosine_distance(np.zeros(3), np.ones(3))
    assert not valid


def test_cosine_distance_range_on_random_vectors():
    rng = np.random.default_rng(0)
    d, valid = cosine_distance(rng.normal(size=(10_000, 5)), rng.normal(size=(10_000, 5)))
    assert valid.all()
    assert d.min() >= 0.0 and d.max() <= 2.0


def test_block_importance_of_identity_layer_is_zero(noisy_params, calibration):
    params = identity_layers(noisy_params, [2])
    scan = block_importance(params, calibration, 1)
    assert scan.values[2] == 0.0
    assert np.all(np.delete(scan.values, 2) > 0)
    assert scan.per_layer is not None


def test_loss_scan_shape_and_base(noisy_params, calibration):
    scan = depth_scan_loss(noisy_params, calibration, 2)
    assert scan.values.shape == (3,)
    assert scan.metadata["base_loss"] == pytest.approx(calibration_loss(noisy_params, calibration))
    assert scan.values[1] == pytest.approx(
        calibration_loss(noisy_params, calibration, skip_layers=[1, 2]))


def test_scans_leave_params_unchanged(noisy_params, calibration):
    before = noisy_params.copy()
    depth_scan_loss(noisy_params, calibration, 1)
    block_importance(noisy_params, calibration, 3)
    estimate_width_importance(noisy_params, calibration)
    assert params_equal(before, noisy_params)


def test_invalid_block_size(noisy_params, calibration):
    with pytest.raises(ConfigError):
        depth_scan_loss(noisy_params, calibration, 4)
    with pytest.raises(ConfigError):
        block_importance(noisy_params, calibration, 0)


def test_select_contiguous_uses_zero_based_starts():
    task = DepthScan("task_accuracy", 2, np.array([0.50, 0.59, 0.52]))
    assert select_contiguous(task) == [1, 2]
    loss = DepthScan("lm_loss", 2, np.array([3.1, 2.9, 2.9]))
    assert select_contiguous(loss) == [1, 2]


def test_select_noncontiguous():
    scan = DepthScan("lm_loss", 1, np.array([3.0, 1.0, 2.0, 4.0]))
    assert select_noncontiguous(scan, 2) == [1, 2]
    with pytest.raises(ConfigError):
        select_noncontiguous(DepthScan("lm_loss", 2, np.array([1.0, 2.0])), 1)


def test_rank_correlation():
    a = DepthScan("lm_loss", 1, np.array([1.0, 2.0, 3.0, 4.0]))
    b = DepthScan("block_importance", 1, np.array([0.1, 0.2, 0.4, 0.3]))
    assert rank_correlation(a, a) == pytest.approx(1.0)
    assert rank_correlation(a, b) == pytest.approx(0.8)


def test_depth_scan_file_roundtrip(tmp_path):
    scan = DepthScan("block_importance", 1, np.array([0.2, 0.1]), per_layer=np.array([0.2, 0.1]))
    scan.save(tmp_path / "scan.json")
    loaded = DepthScan.load(tmp_path / "scan.json")
    assert loaded.metric == "block_importance"
    np.testing.assert_array_equal(loaded.values, scan.values)


def test_depth_analyzer_covers_every_metric_and_size(noisy_params, calibration):
    items = synth_cloze_set(20, seed=1, style="B", prefix_len=8)
    analyzer = DepthAnalyzer(noisy_params, calibration, items)
    results = analyzer.analyze()
    assert results["block_sizes"] == [1, 2]
    assert set(analyzer.scans) == {(m, n) for m in ("lm_loss", "block_importance", "task_accuracy")
                                   for n in (1, 2)}
    single = depth_scan_loss(noisy_params, calibration, 1)
    np.testing.assert_array_equal(analyzer.scans[("lm_loss", 1)].values, single.values)
    assert results["bi_loss_spearman"] == rank_correlation(
        block_importance(noisy_params, calibration, 1), single)
    pair = analyzer.scans[("lm_loss", 2)].metadata
    assert pair["noncontiguous_layers"] == select_noncontiguous(single, 2)
    assert pair["noncontiguous_loss"] == calibration_loss(noisy_params, calibration,
                                                          skip_layers=pair["noncontiguous_layers"])


def test_default_block_sizes():
    assert default_block_sizes(8) == [1, 2, 4]
    assert default_block_sizes(4) == [1, 2]
    assert default_block_sizes(2) == [1]
