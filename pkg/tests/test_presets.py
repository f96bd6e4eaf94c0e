import pytest

from src.errors import ConfigError, MissingDependencyError
from src.model import count_params
from src.presets import (CHECKPOINT, PRESETS, PresetRunner, Workspace, claim, load_scale,
                         parse_seeds)
from src.reporter import load_json
from src.train import MetricsLog


@pytest.fixture(scope="module")
def smoke_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("workspace")
    runner = PresetRunner(root, load_scale("smoke"), [1], build_dependencies=True)
    summary = runner.run("width_vs_depth")
    return root, runner, summary


def test_smoke_scale(smoke_scale):
    assert smoke_scale.teacher.depth == 4
    assert smoke_scale.correction.total_tokens == 1024
    assert smoke_scale.correction.loss_mode == "ce"
    assert smoke_scale.distill.loss_mode == "kl"
    width = smoke_scale.width_target
    assert (width.hidden, width.mlp_hidden) == (24, 32)
    depth_params = count_params(smoke_scale.depth_target)[1]
    assert abs(count_params(width)[1] / depth_params - 1.0) <= 0.02


def test_bench_scale_is_smaller_than_desk():
    bench, desk = load_scale("bench"), load_scale("desk")
    assert count_params(bench.teacher)[1] * 6 < count_params(desk.teacher)[1]
    assert bench.correction.total_tokens == bench.distill.total_tokens // 3
    depth_params = count_params(bench.depth_target)[1]
    assert abs(count_params(bench.width_target)[1] / depth_params - 1.0) <= 0.02


def test_unknown_scale(tmp_path):
    with pytest.raises(ConfigError):
        load_scale("huge")
    with pytest.raises(FileNotFoundError):
        load_scale("smoke", tmp_path / "missing.yaml")


def test_parse_seeds():
    assert parse_seeds("1, 2;3") == [1, 2, 3]
    for raw in ("", "1,1", "1,x"):
        with pytest.raises(ConfigError):
            parse_seeds(raw)


def test_claim_verdicts():
    assert claim("c", "a", 1.0, "b", 2.0, "<")["verdict"] == "pass"
    assert claim("c", "a", 3.0, "b", 2.0, "<")["verdict"] == "fail"
    assert claim("c", "a", None, "b", 2.0, "<")["verdict"] == "incomplete"
    assert claim("c", "a", 1.0, "b", 2.0, ">=", asserted=False)["verdict"] == "reported"


def test_missing_teacher_is_reported(tmp_path, smoke_scale):
    runner = PresetRunner(tmp_path, smoke_scale, [1])
    with pytest.raises(MissingDependencyError):
        runner.run("fourway_ablation")
    with pytest.raises(ConfigError):
        runner.run("no_such_preset")


def test_presets_cover_every_experiment():
    assert set(PRESETS) == {"teacher_correction", "width_vs_depth", "fourway_ablation",
                            "correction_variants", "depth_metrics"}


def test_width_vs_depth_bundles(smoke_workspace):
    root, _, summary = smoke_workspace
    ws = Workspace(root)
    assert (ws.pretrain_dir(1) / CHECKPOINT).exists()
    assert (ws.corrected_dir(1) / CHECKPOINT).exists()
    for arm in ("width", "depth"):
        bundle = ws.arm_dir("width_vs_depth", arm, 1)
        for name in (CHECKPOINT, "metrics.jsonl", "trim_report.json", "result.json"):
            assert (bundle / name).exists()
        assert summary["arms"][arm]["1"]["status"] == "ok"
    assert load_json(ws.summary_path("width_vs_depth"))["seeds"] == [1]
    verdicts = {c["id"]: c["verdict"] for c in summary["claims"]}
    assert verdicts["iso_parameter_match"] == "pass"
    assert verdicts["width_lower_final_loss"] in ("pass", "fail")


def test_preset_runs_are_reproducible(smoke_workspace, tmp_path):
    root, _, first = smoke_workspace
    again = PresetRunner(tmp_path, load_scale("smoke"), [1], build_dependencies=True)
    second = again.run("width_vs_depth")
    assert second["arms"] == first["arms"]
    assert second["claims"] == first["claims"]
    first_bytes = Workspace(root).summary_path("width_vs_depth").read_bytes()
    assert Workspace(tmp_path).summary_path("width_vs_depth").read_bytes() == first_bytes


def test_pretraining_improves_at_every_early_eval(smoke_workspace):
    root, _, _ = smoke_workspace
    log = MetricsLog.load(Workspace(root).pretrain_dir(1) / "metrics.jsonl")
    val = [r["val_loss"] for r in log.records if r["val_loss"] is not None][:3]
    assert len(val) == 3
    assert val[0] > val[1] > val[2]


def test_depth_metrics_preset(smoke_workspace):
    root, runner, _ = smoke_workspace
    summary = runner.run("depth_metrics")
    scans = summary["arms"]["scans"]["1"]
    assert scans["block_sizes"] == [1, 2]
    assert -1.0 <= scans["bi_loss_spearman"] <= 1.0
    bundle = Workspace(root).arm_dir("depth_metrics", "scans", 1)
    assert (bundle / "scan_block_importance_n1.csv").exists()
    assert (bundle / "scan_task_accuracy_n2.json").exists()
    contiguous = summary["arms"]["contiguous"]["1"]
    assert len(contiguous["dropped_layers"]) == 2
    assert 0.0 <= contiguous["cloze_after"] <= 1.0
    verdicts = {c["id"]: c["verdict"] for c in summary["claims"]}
    assert verdicts["contiguous_cloze_at_least_noncontiguous"] == "reported"


def test_correction_variants_runs_upstream_preset(smoke_workspace):
    root, runner, _ = smoke_workspace
    summary = runner.run("correction_variants")
    assert Workspace(root).summary_path("teacher_correction").exists()
    result = summary["claims"][0]
    assert result["id"] == "pruning_insensitive_to_correction"
    assert result["verdict"] in ("pass", "fail")
    original = load_json(Workspace(root).summary_path("teacher_correction"))
    assert "style_shift" in original["arms"]["original_teacher"]["1"]
    assert original["arms"]["original_teacher"]["1"]["style_shift"]["relative_gap"] >= 0.10
    premise = {c["id"]: c for c in original["claims"]}["style_shift_premise"]
    assert premise["verdict"] == "pass"
