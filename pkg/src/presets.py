# src/presets.py
"""
Experiment presets: scripted ablations over the compression pipeline.

Every preset runs a fixed set of arms for each seed, writes one bundle per
(arm, seed) and a summary with the directional claims it checks. Presets share
two dependency stages per seed, the pretrained teacher and the corrected
teacher, stored at fixed workspace paths so the CLI stages and the presets
compose.
"""

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.checkpoint import load_checkpoint, save_checkpoint
from src.data import Corpus, sample_calibration, synth_cloze_set, synth_corpus
from src.errors import ConfigError, DivergenceError, MissingDependencyError
from src.evalx import eval_cloze, eval_val_loss, style_shift_gap
from src.importance import (DepthAnalyzer, depth_scan_loss, depth_scan_task,
                            estimate_width_importance, select_contiguous, select_noncontiguous)
from src.model import ModelConfig, ParamSet, count_params, init_params
from src.reporter import ReportGenerator, load_json
from src.train import (TrainConfig, correct_teacher, correction_budget, distill,
                       interleaved_distill, train_ce)
from src.trim import (depth_trim_report, iso_param_width_target, plan_random_trim,
                      plan_width_trim, apply_keep_plan, trim_depth, trim_report)

logger = logging.getLogger(__name__)

DEFAULT_PRESETS_PATH = Path(__file__).resolve().parent.parent / "config" / "presets.yaml"

CORPUS_SEEDS = {"train_a": 101, "train_b": 202, "val_a": 303, "val_b": 404, "cloze": 505}
CHECKPOINT = "checkpoint.mshr"


# ---------------------------------------------------------------------------
# scale

@dataclass(frozen=True)
class PresetScale:
    name: str
    teacher: ModelConfig
    width_hidden: int
    depth_student_depth: int
    train_a_tokens: int
    train_b_tokens: int
    val_tokens: int
    pretrain: TrainConfig
    distill: TrainConfig
    correction_tokens: Optional[int] = None
    calibration_samples: int = 1024
    calibration_seq_len: int = 256
    cloze_items: int = 1000
    interleave_segments: int = 4

    @property
    def correction(self) -> TrainConfig:
        tokens = self.correction_tokens
        if tokens is None:
            tokens = correction_budget(self.distill.total_tokens)
        return self.distill.replace(loss_mode="ce", total_tokens=tokens)

    @property
    def retrain_ce(self) -> TrainConfig:
        return self.distill.replace(loss_mode="ce")

    @property
    def depth_target(self) -> ModelConfig:
        return self.teacher.replace(depth=self.depth_student_depth)

    @property
    def width_target(self) -> ModelConfig:
        reference = count_params(self.depth_target)[1]
        return iso_param_width_target(self.teacher, self.width_hidden, reference)

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "PresetScale":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)} - {"name"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown keys in scale {name!r}: {', '.join(unknown)}")
        try:
            data["teacher"] = ModelConfig.from_dict(data["teacher"])
            data["pretrain"] = TrainConfig.from_dict({**data["pretrain"], "loss_mode": "ce"})
            data["distill"] = TrainConfig.from_dict({**data["distill"], "loss_mode": "kl"})
            return cls(name=name, **data)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"incomplete scale {name!r}: {exc}") from exc


def load_scale(name: str, path=DEFAULT_PRESETS_PATH) -> PresetScale:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"preset scales file not found: {path}")
    with open(path, "r") as f:
        scales = yaml.safe_load(f) or {}
    if name not in scales:
        raise ConfigError(f"unknown scale {name!r}; available: {', '.join(sorted(scales))}")
    return PresetScale.from_dict(name, scales[name])


def parse_seeds(raw: str) -> List[int]:
    seeds = []
    for part in str(raw or "").replace(";", ",").split(","):
        part = part.strip()
        if part:
            try:
                seeds.append(int(part))
            except ValueError as exc:
                raise ConfigError(f"seed {part!r} is not an integer") from exc
    if not seeds:
        raise ConfigError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {raw!r}")
    return seeds


# ---------------------------------------------------------------------------
# workspace layout and shared data

@dataclass(frozen=True)
class Workspace:
    root: Path

    def pretrain_dir(self, seed: int) -> Path:
        return self.root / "pretrain" / f"seed_{seed}"

    def corrected_dir(self, seed: int) -> Path:
        return self.root / "correct-teacher" / f"seed_{seed}"

    def arm_dir(self, preset: str, arm: str, seed: int) -> Path:
        return self.root / preset / arm / f"seed_{seed}"

    def summary_path(self, preset: str) -> Path:
        return self.root / preset / "summary.json"


@lru_cache(maxsize=16)
def _corpus(style: str, n_tokens: int, seed: int) -> Corpus:
    return synth_corpus(style, n_tokens, seed)


def corpora(scale: PresetScale) -> Dict[str, Corpus]:
    return {
        "train_a": _corpus("A", scale.train_a_tokens, CORPUS_SEEDS["train_a"]),
        "train_b": _corpus("B", scale.train_b_tokens, CORPUS_SEEDS["train_b"]),
        "val_a": _corpus("A", scale.val_tokens, CORPUS_SEEDS["val_a"]),
        "val_b": _corpus("B", scale.val_tokens, CORPUS_SEEDS["val_b"]),
    }


def cloze_items(scale: PresetScale):
    return synth_cloze_set(scale.cloze_items, CORPUS_SEEDS["cloze"], style="B")


def val_loss(params: ParamSet, scale: PresetScale, split: str = "val_b") -> float:
    tc = scale.distill
    return eval_val_loss(params, corpora(scale)[split], tc.eval_batches,
                         batch_size=tc.batch_size, seq_len=tc.seq_len)


# ---------------------------------------------------------------------------
# dependency stages

def build_pretrained(workspace: Workspace, scale: PresetScale, seed: int, *,
                     train_corpus: Corpus = None, progress: bool = False):
    """Pretrain a fresh teacher on style A; returns (teacher, metrics log)."""
    data = corpora(scale)
    teacher = init_params(scale.teacher, seed)
    teacher, log = train_ce(teacher, data["train_a"] if train_corpus is None else train_corpus,
                            scale.pretrain.replace(seed=seed), val_corpus=data["val_a"],
                            progress=progress)
    teacher.meta["stage"] = "pretrain"
    out = ReportGenerator(workspace.pretrain_dir(seed))
    save_checkpoint(teacher, out.path(CHECKPOINT))
    out.generate_metrics_jsonl(log)
    return teacher, log


def build_corrected(workspace: Workspace, scale: PresetScale, seed: int, *,
                    teacher: ParamSet = None, train_corpus: Corpus = None,
                    tc: TrainConfig = None, progress: bool = False):
    """CE-correct the pretrained teacher on style B; returns (teacher, metrics log)."""
    data = corpora(scale)
    if teacher is None:
        teacher = load_checkpoint(_require(workspace.pretrain_dir(seed) / CHECKPOINT,
                                           "run pretrain"))
    corrected, log = correct_teacher(teacher, data["train_b"] if train_corpus is None else train_corpus,
                                     (tc or scale.correction).replace(seed=seed),
                                     val_corpus=data["val_b"], progress=progress)
    corrected.meta["stage"] = "correct-teacher"
    out = ReportGenerator(workspace.corrected_dir(seed))
    save_checkpoint(corrected, out.path(CHECKPOINT))
    out.generate_metrics_jsonl(log)
    return corrected, log


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingDependencyError(f"missing dependency {path} ({hint})")
    return path


def _original(ws: Workspace, seed: int) -> ParamSet:
    return load_checkpoint(_require(ws.pretrain_dir(seed) / CHECKPOINT, "run pretrain"))


def _corrected(ws: Workspace, seed: int) -> ParamSet:
    return load_checkpoint(_require(ws.corrected_dir(seed) / CHECKPOINT, "run correct-teacher"))


# ---------------------------------------------------------------------------
# arms

@dataclass
class ArmContext:
    workspace: Workspace
    scale: PresetScale
    preset: str
    arm: str
    seed: int

    @property
    def out(self) -> ReportGenerator:
        return ReportGenerator(self.workspace.arm_dir(self.preset, self.arm, self.seed))

    @property
    def data(self) -> Dict[str, Corpus]:
        return corpora(self.scale)

    def tc(self, which: str) -> TrainConfig:
        return getattr(self.scale, which).replace(seed=self.seed)

    def calibration(self) -> np.ndarray:
        return sample_calibration(self.data["train_b"], self.scale.calibration_samples,
                                  self.scale.calibration_seq_len, seed=self.seed)

    def finish(self, params: ParamSet, log, **result) -> dict:
        out = self.out
        save_checkpoint(params, out.path(CHECKPOINT))
        out.generate_metrics_jsonl(log)
        result.update(status="ok", final_val_loss=log.final_val_loss(),
                      non_embedding_params=count_params(params.config)[1])
        out.generate_json_report(result, "result.json")
        return result


def _importance_student(ctx: ArmContext, teacher: ParamSet, method: str = "importance"):
    target = ctx.scale.width_target
    if method == "random":
        plan = plan_random_trim(teacher.config, target, ctx.seed)
        digest = None
    else:
        imp = estimate_width_importance(teacher, ctx.calibration(), seed=ctx.seed)
        imp.save(ctx.out.path("importance.json"))
        plan = plan_width_trim(teacher.config, target, imp)
        digest = imp.digest()
    student = apply_keep_plan(teacher, plan, target)
    ctx.out.generate_json_report(
        trim_report(teacher.config, target, plan, method=method, importance_digest=digest),
        "trim_report.json")
    return student


def arm_distill_from(teacher_kind: str):
    def run(ctx: ArmContext) -> dict:
        corrected = _corrected(ctx.workspace, ctx.seed)
        supervisor = corrected if teacher_kind == "corrected" else _original(ctx.workspace, ctx.seed)
        student = _importance_student(ctx, corrected)
        trained, log = distill(student, supervisor, ctx.data["train_b"], ctx.tc("distill"),
                               val_corpus=ctx.data["val_b"])
        extra = {"teacher_val_loss_b": val_loss(supervisor, ctx.scale)}
        if teacher_kind == "original":
            extra["style_shift"] = style_shift_gap(
                supervisor, ctx.data["val_a"], ctx.data["val_b"], ctx.scale.distill.eval_batches,
                batch_size=ctx.scale.distill.batch_size, seq_len=ctx.scale.distill.seq_len)
        return ctx.finish(trained, log, **extra)
    return run


def arm_width(ctx: ArmContext) -> dict:
    teacher = _corrected(ctx.workspace, ctx.seed)
    student = _importance_student(ctx, teacher)
    initial = val_loss(student, ctx.scale)
    trained, log = distill(student, teacher, ctx.data["train_b"], ctx.tc("distill"),
                           val_corpus=ctx.data["val_b"])
    return ctx.finish(trained, log, initial_val_loss=initial)


def arm_depth(ctx: ArmContext) -> dict:
    teacher = _corrected(ctx.workspace, ctx.seed)
    n_drop = teacher.config.depth - ctx.scale.depth_student_depth
    scan = depth_scan_loss(teacher, ctx.calibration(), n_drop)
    dropped = select_contiguous(scan)
    student = trim_depth(teacher, dropped)
    ctx.out.generate_json_report(depth_trim_report(teacher.config, dropped, method="lm_loss"),
                                 "trim_report.json")
    initial = val_loss(student, ctx.scale)
    trained, log = distill(student, teacher, ctx.data["train_b"], ctx.tc("distill"),
                           val_corpus=ctx.data["val_b"])
    return ctx.finish(trained, log, initial_val_loss=initial, dropped_layers=dropped)


def arm_random_init(ctx: ArmContext) -> dict:
    teacher = _corrected(ctx.workspace, ctx.seed)
    student = init_params(ctx.scale.width_target, ctx.seed)
    trained, log = distill(student, teacher, ctx.data["train_b"], ctx.tc("distill"),
                           val_corpus=ctx.data["val_b"])
    return ctx.finish(trained, log)


def arm_pruned(method: str, loss_mode: str):
    def run(ctx: ArmContext) -> dict:
        teacher = _corrected(ctx.workspace, ctx.seed)
        student = _importance_student(ctx, teacher, method)
        if loss_mode == "kl":
            trained, log = distill(student, teacher, ctx.data["train_b"], ctx.tc("distill"),
                                   val_corpus=ctx.data["val_b"])
        else:
            trained, log = train_ce(student, ctx.data["train_b"], ctx.tc("retrain_ce"),
                                    val_corpus=ctx.data["val_b"])
        return ctx.finish(trained, log)
    return run


def arm_prune_original_interleaved(ctx: ArmContext) -> dict:
    original = _original(ctx.workspace, ctx.seed)
    student = _importance_student(ctx, original)
    trained, log, _ = interleaved_distill(student, original, ctx.data["train_b"], ctx.tc("distill"),
                                          ctx.tc("correction"), segments=ctx.scale.interleave_segments,
                                          val_corpus=ctx.data["val_b"])
    return ctx.finish(trained, log)


def arm_scans(ctx: ArmContext) -> dict:
    teacher = _corrected(ctx.workspace, ctx.seed)
    analyzer = DepthAnalyzer(teacher, ctx.calibration(), cloze_items(ctx.scale))
    result = {"status": "ok", **analyzer.analyze()}
    out = ctx.out
    for (metric, n), scan in analyzer.scans.items():
        scan.save(out.path(f"scan_{metric}_n{n}.json"))
        out.generate_scan_csv(scan)
    out.generate_json_report(result, "result.json")
    return result


def arm_depth_selection(contiguous: bool):
    def run(ctx: ArmContext) -> dict:
        teacher = _corrected(ctx.workspace, ctx.seed)
        items = cloze_items(ctx.scale)
        n_drop = teacher.config.depth // 2
        if contiguous:
            dropped = select_contiguous(depth_scan_task(teacher, items, n_drop))
        else:
            dropped = select_noncontiguous(depth_scan_loss(teacher, ctx.calibration(), 1), n_drop)
        student = trim_depth(teacher, dropped)
        method = "task_accuracy_contiguous" if contiguous else "lm_loss_noncontiguous"
        ctx.out.generate_json_report(depth_trim_report(teacher.config, dropped, method=method),
                                     "trim_report.json")
        before = eval_cloze(student, items)
        trained, log = distill(student, teacher, ctx.data["train_b"], ctx.tc("distill"),
                               val_corpus=ctx.data["val_b"])
        return ctx.finish(trained, log, dropped_layers=dropped, cloze_before=before,
                          cloze_after=eval_cloze(trained, items))
    return run


# ---------------------------------------------------------------------------
# claims

def _median(summary_arms: dict, arm: str, key: str) -> Optional[float]:
    values = [run[key] for run in summary_arms.get(arm, {}).values()
              if run.get("status") == "ok" and run.get(key) is not None]
    return float(np.median(values)) if values else None


def claim(claim_id: str, a_label: str, a, b_label: str, b, relation: str,
          asserted: bool = True) -> dict:
    """Directional comparison; no verdict unless both values are present."""
    if a is None or b is None:
        verdict = "incomplete"
    elif not asserted:
        verdict = "reported"
    else:
        holds = {"<": a < b, ">": a > b, "<=": a <= b, ">=": a >= b}[relation]
        verdict = "pass" if holds else "fail"
    return {"id": claim_id, "a_label": a_label, "a": a, "b_label": b_label, "b": b,
            "relation": relation, "verdict": verdict}


def claims_teacher_correction(arms: dict, ws: Workspace) -> List[dict]:
    corrected = _median(arms, "corrected_teacher", "final_val_loss")
    original = _median(arms, "original_teacher", "final_val_loss")
    out = [claim("distill_from_corrected_lower_loss", "corrected_teacher", corrected,
                 "original_teacher", original, "<")]
    if corrected is not None and original is not None:
        out[0]["relative_gap"] = (original - corrected) / original
        out[0]["absolute_gap"] = original - corrected
    gaps = [run["style_shift"]["relative_gap"] for run in arms.get("original_teacher", {}).values()
            if run.get("status") == "ok"]
    out.append(claim("style_shift_premise", "teacher_relative_gap_b_over_a",
                     float(np.median(gaps)) if gaps else None, "threshold", 0.10, ">="))
    out.append(claim("corrected_teacher_lower_loss_on_b", "corrected_teacher",
                     _median(arms, "corrected_teacher", "teacher_val_loss_b"), "original_teacher",
                     _median(arms, "original_teacher", "teacher_val_loss_b"), "<"))
    return out


def claims_width_vs_depth(arms: dict, ws: Workspace) -> List[dict]:
    out = [claim("width_lower_initial_loss", "width", _median(arms, "width", "initial_val_loss"),
                 "depth", _median(arms, "depth", "initial_val_loss"), "<"),
           claim("width_lower_final_loss", "width", _median(arms, "width", "final_val_loss"),
                 "depth", _median(arms, "depth", "final_val_loss"), "<")]
    width_params = _median(arms, "width", "non_embedding_params")
    depth_params = _median(arms, "depth", "non_embedding_params")
    ratio = None if not width_params or not depth_params else abs(width_params / depth_params - 1.0)
    out.append(claim("iso_parameter_match", "relative_param_difference", ratio,
                     "tolerance", 0.02, "<="))
    return out


def claims_fourway(arms: dict, ws: Workspace) -> List[dict]:
    best = _median(arms, "importance_prune_kl", "final_val_loss")
    return [claim(f"importance_prune_kl_beats_{other}", "importance_prune_kl", best, other,
                  _median(arms, other, "final_val_loss"), "<")
            for other in ("random_init_kl", "random_prune_kl", "importance_prune_ce")]


def claims_correction_variants(arms: dict, ws: Workspace) -> List[dict]:
    reference = _require(ws.summary_path("teacher_correction"), "run preset teacher_correction")
    gap = None
    for item in load_json(reference).get("claims", []):
        if item["id"] == "distill_from_corrected_lower_loss":
            gap = item.get("absolute_gap")
    a = _median(arms, "prune_corrected", "final_val_loss")
    b = _median(arms, "prune_original_interleaved", "final_val_loss")
    difference = None if a is None or b is None else abs(a - b)
    threshold = None if gap is None else 0.10 * abs(gap)
    result = claim("pruning_insensitive_to_correction", "loss_difference", difference,
                   "tenth_of_correction_gap", threshold, "<=")
    result.update(prune_corrected=a, prune_original_interleaved=b)
    return [result]


def claims_depth_metrics(arms: dict, ws: Workspace) -> List[dict]:
    return [claim("bi_loss_rank_correlation_positive", "spearman",
                  _median(arms, "scans", "bi_loss_spearman"), "zero", 0.0, ">"),
            claim("contiguous_cloze_at_least_noncontiguous", "contiguous",
                  _median(arms, "contiguous", "cloze_after"), "noncontiguous",
                  _median(arms, "noncontiguous", "cloze_after"), ">=", asserted=False)]


@dataclass(frozen=True)
class Preset:
    arms: Dict[str, Callable[[ArmContext], dict]]
    claims: Callable[[dict, Workspace], List[dict]]
    needs_original: bool = False
    after: Tuple[str, ...] = ()


PRESETS: Dict[str, Preset] = {
    "teacher_correction": Preset(
        arms={"original_teacher": arm_distill_from("original"),
              "corrected_teacher": arm_distill_from("corrected")},
        claims=claims_teacher_correction, needs_original=True),
    "width_vs_depth": Preset(
        arms={"width": arm_width, "depth": arm_depth},
        claims=claims_width_vs_depth),
    "fourway_ablation": Preset(
        arms={"random_init_kl": arm_random_init,
              "random_prune_kl": arm_pruned("random", "kl"),
              "importance_prune_ce": arm_pruned("importance", "ce"),
              "importance_prune_kl": arm_pruned("importance", "kl")},
        claims=claims_fourway),
    "correction_variants": Preset(
        arms={"prune_corrected": arm_pruned("importance", "kl"),
              "prune_original_interleaved": arm_prune_original_interleaved},
        claims=claims_correction_variants, needs_original=True, after=("teacher_correction",)),
    "depth_metrics": Preset(
        arms={"scans": arm_scans,
              "contiguous": arm_depth_selection(contiguous=True),
              "noncontiguous": arm_depth_selection(contiguous=False)},
        claims=claims_depth_metrics),
}


def run_arm(preset: str, arm: str, root: str, scale: PresetScale, seed: int) -> dict:
    """One (arm, seed) run; divergence is recorded instead of raised."""
    ctx = ArmContext(Workspace(Path(root)), scale, preset, arm, seed)
    logger.info("Running %s/%s seed %d", preset, arm, seed)
    try:
        return PRESETS[preset].arms[arm](ctx)
    except DivergenceError as exc:
        logger.warning("%s/%s seed %d diverged: %s", preset, arm, seed, exc)
        result = {"status": "diverged", "step": exc.step, "message": str(exc)}
        ctx.out.generate_json_report(result, "result.json")
        return result


class PresetRunner:
    def __init__(self, workspace, scale: PresetScale, seeds: Sequence[int], *,
                 build_dependencies: bool = False, workers: int = 1, progress: bool = False):
        if not seeds:
            raise ConfigError("a preset needs at least one seed")
        self.workspace = Workspace(Path(workspace))
        self.scale = scale
        self.seeds = list(seeds)
        self.build_dependencies = build_dependencies
        self.workers = max(1, int(workers))
        self.progress = progress

    def ensure_dependencies(self, name: str) -> None:
        preset = PRESETS[name]
        for seed in self.seeds:
            pretrained = self.workspace.pretrain_dir(seed) / CHECKPOINT
            corrected = self.workspace.corrected_dir(seed) / CHECKPOINT
            if not pretrained.exists() and self.build_dependencies:
                logger.info("Building pretrained teacher for seed %d", seed)
                build_pretrained(self.workspace, self.scale, seed, progress=self.progress)
            if not corrected.exists() and self.build_dependencies:
                logger.info("Building corrected teacher for seed %d", seed)
                build_corrected(self.workspace, self.scale, seed, progress=self.progress)
            if preset.needs_original:
                _require(pretrained, "run pretrain or pass --build-deps")
            _require(corrected, "run correct-teacher or pass --build-deps")
        for upstream in preset.after:
            if not self.workspace.summary_path(upstream).exists():
                if not self.build_dependencies:
                    _require(self.workspace.summary_path(upstream),
                             f"run preset {upstream} or pass --build-deps")
                self.run(upstream)

    def run(self, name: str) -> dict:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
        self.ensure_dependencies(name)
        preset = PRESETS[name]
        jobs = [(arm, seed) for arm in preset.arms for seed in self.seeds]
        root = str(self.workspace.root)
        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(run_arm, name, arm, root, self.scale, seed)
                           for arm, seed in jobs]
                results = [f.result() for f in futures]
        else:
            results = [run_arm(name, arm, root, self.scale, seed) for arm, seed in jobs]

        arms: Dict[str, Dict[str, dict]] = {arm: {} for arm in preset.arms}
        for (arm, seed), result in zip(jobs, results):
            arms[arm][str(seed)] = result
        summary = {"preset": name, "scale": self.scale.name, "seeds": self.seeds, "arms": arms,
                   "claims": preset.claims(arms, self.workspace)}
        path = self.workspace.summary_path(name)
        ReportGenerator(path.parent).generate_json_report(summary, path.name)
        return summary


def run_preset(name: str, workspace, seeds: Sequence[int], *, scale: str = "bench",
               scales_path=DEFAULT_PRESETS_PATH, build_dependencies: bool = False,
               workers: int = 1) -> dict:
    runner = PresetRunner(workspace, load_scale(scale, scales_path), seeds,
                          build_dependencies=build_dependencies, workers=workers)
    return runner.run(name)
