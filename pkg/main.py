#!/usr/bin/env python3

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import yaml

from src.checkpoint import load_checkpoint, save_checkpoint
from src.data import load_cloze_set, load_corpus, sample_calibration, synth_cloze_set
from src.errors import ConfigError, ToolkitError
from src.evalx import eval_cloze, eval_val_loss
from src.importance import (WidthImportance, block_importance, depth_scan_loss, depth_scan_task,
                            estimate_width_importance, select_contiguous, select_noncontiguous,
                            DepthScan)
from src.model import ModelConfig, count_params
from src.presets import (CHECKPOINT, CORPUS_SEEDS, PRESETS, PresetRunner, Workspace,
                         build_corrected, build_pretrained, corpora, load_scale, parse_seeds)
from src.reporter import (ReportGenerator, print_banner, print_eval_summary,
                          print_importance_summary, print_model_summary, print_preset_summary,
                          print_scan_summary, print_training_summary)
from src.train import TrainConfig, distill, train_ce
from src.trim import (apply_keep_plan, depth_trim_report, plan_random_trim, plan_width_trim,
                      trim_depth, trim_report)

USAGE_EXIT = 2
MISSING_FILE_EXIT = 3
REPO_ROOT = Path(__file__).resolve().parent
SCAN_METRICS = {"loss": "lm_loss", "bi": "block_importance", "task": "task_accuracy"}

DEFAULT_CONFIG = {
    'workspace': 'workspace',
    'scale': 'bench',
    'presets_file': 'config/presets.yaml',
    'calibration': {'batch_size': 8, 'norm_gain': 'post'},
    'evaluation': {'cloze_items': 1000},
    'logging': {'level': 'INFO', 'progress': True},
}


class UsageError(Exception):
    pass


class ToolkitArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class CompressionToolkit:

    def __init__(self, config_path: str = None, workspace: str = None, scale: str = None):
        self.config = self._load_config(config_path)
        self.workspace = Workspace(Path(workspace or self.config['workspace']))
        presets_file = Path(self.config['presets_file'])
        if not presets_file.is_absolute():
            presets_file = REPO_ROOT / presets_file
        self.scale = load_scale(scale or self.config['scale'], presets_file)
        self.progress = bool(self.config['logging'].get('progress', False))

    def _load_config(self, config_path: str) -> dict:
        config = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
        if config_path and os.path.exists(config_path):
            with open(config_path, 'r') as f:
                loaded = yaml.safe_load(f) or {}
            unknown = sorted(set(loaded) - set(DEFAULT_CONFIG))
            if unknown:
                raise ConfigError(f"unknown keys in {config_path}: {', '.join(unknown)}")
            for key, value in loaded.items():
                if isinstance(config[key], dict) and isinstance(value, dict):
                    config[key].update(value)
                else:
                    config[key] = value
        return config

    def _scale_with(self, model_config: str = None, **train_configs):
        scale = self.scale
        changes = {}
        if model_config:
            changes['teacher'] = ModelConfig.from_dict(_read_mapping(model_config))
        for field_name, path in train_configs.items():
            if path:
                changes[field_name] = TrainConfig.from_file(_require_file(path))
        return dataclasses.replace(scale, **changes) if changes else scale

    def _train_corpus(self, path: str, default: str):
        return load_corpus(_require_file(path)) if path else corpora(self.scale)[default]

    # -- stages -----------------------------------------------------------

    def pretrain(self, args) -> bool:
        print_banner(f"PRETRAIN TEACHER (seed {args.seed})")
        scale = self._scale_with(args.model_config, pretrain=args.train_config)
        teacher, log = build_pretrained(self.workspace, scale, args.seed,
                                        train_corpus=self._train_corpus(args.corpus, 'train_a'),
                                        progress=self.progress)
        print_model_summary("Teacher", teacher.config, count_params(teacher.config))
        print_training_summary("Pretraining", log)
        print(f"\n✅ Checkpoint written: {self.workspace.pretrain_dir(args.seed) / CHECKPOINT}")
        return True

    def correct_teacher(self, args) -> bool:
        print_banner(f"TEACHER CORRECTION (seed {args.seed})")
        tc = TrainConfig.from_file(_require_file(args.train_config)) if args.train_config else None
        teacher = load_checkpoint(_require_file(args.teacher)) if args.teacher else None
        corrected, log = build_corrected(self.workspace, self.scale, args.seed, teacher=teacher,
                                         train_corpus=self._train_corpus(args.corpus, 'train_b'),
                                         tc=tc, progress=self.progress)
        print_training_summary("Correction", log)
        print(f"\n✅ Checkpoint written: {self.workspace.corrected_dir(args.seed) / CHECKPOINT}")
        return True

    def importance(self, args) -> bool:
        print_banner("WIDTH IMPORTANCE")
        params = load_checkpoint(_require_file(args.checkpoint))
        corpus = self._train_corpus(args.corpus, 'train_b')
        calibration = sample_calibration(corpus, args.samples or self.scale.calibration_samples,
                                         args.seq_len or self.scale.calibration_seq_len,
                                         seed=args.seed)
        cal = self.config['calibration']
        imp = estimate_width_importance(params, calibration, batch_size=cal['batch_size'],
                                        norm_gain=cal['norm_gain'], seed=args.seed,
                                        progress=self.progress)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        imp.save(args.out)
        print_importance_summary(imp)
        print(f"\n✅ Importance written: {args.out}")
        return True

    def depth_scan(self, args) -> bool:
        metric = SCAN_METRICS[args.metric]
        print_banner(f"DEPTH SCAN ({metric}, block size {args.block_size})")
        params = load_checkpoint(_require_file(args.checkpoint))
        if metric == 'task_accuracy':
            items = self._cloze(args.cloze)
            scan = depth_scan_task(params, items, args.block_size, progress=self.progress)
        else:
            calibration = sample_calibration(corpora(self.scale)['train_b'],
                                             self.scale.calibration_samples,
                                             self.scale.calibration_seq_len, seed=args.seed)
            batch_size = self.config['calibration']['batch_size']
            if metric == 'lm_loss':
                scan = depth_scan_loss(params, calibration, args.block_size,
                                       batch_size=batch_size, progress=self.progress)
            else:
                scan = block_importance(params, calibration, args.block_size,
                                        batch_size=batch_size)
        out = ReportGenerator(args.out)
        scan.save(out.path(f"scan_{metric}_n{args.block_size}.json"))
        out.generate_scan_csv(scan)
        print_scan_summary([scan])
        print(f"\n✅ Scan written to: {args.out}")
        return True

    def prune(self, args) -> bool:
        print_banner("PRUNE")
        params = load_checkpoint(_require_file(args.checkpoint))
        out = ReportGenerator(args.out)
        if args.drop_layers or args.depth_scan:
            if args.drop_layers:
                dropped = [int(x) for x in args.drop_layers.split(',') if x.strip()]
                method = 'explicit'
            else:
                scan = DepthScan.load(_require_file(args.depth_scan))
                dropped = (select_contiguous(scan) if not args.noncontiguous
                           else select_noncontiguous(scan, args.n_drop))
                method = f"{scan.metric}_{'noncontiguous' if args.noncontiguous else 'contiguous'}"
            pruned = trim_depth(params, dropped)
            report = depth_trim_report(params.config, dropped, method=method)
        else:
            target = self._target_config(params.config, args)
            if args.random:
                if args.seed is None:
                    raise UsageError("--random requires --seed")
                plan = plan_random_trim(params.config, target, args.seed)
                digest, method = None, 'random'
            elif args.importance:
                imp = WidthImportance.load(_require_file(args.importance))
                plan = plan_width_trim(params.config, target, imp)
                digest, method = imp.digest(), 'importance'
            else:
                raise UsageError("prune requires --importance unless --random --seed N is given")
            pruned = apply_keep_plan(params, plan, target)
            report = trim_report(params.config, target, plan, method=method,
                                 importance_digest=digest)
        save_checkpoint(pruned, out.path(CHECKPOINT))
        out.generate_json_report(report, 'trim_report.json')
        print_model_summary("Source", params.config, count_params(params.config))
        print_model_summary("Pruned", pruned.config, count_params(pruned.config))
        print(f"\n✅ Pruned checkpoint written: {out.path(CHECKPOINT)}")
        return True

    def _target_config(self, source: ModelConfig, args) -> ModelConfig:
        if args.target_config:
            return ModelConfig.from_dict(_read_mapping(args.target_config))
        changes = {name: getattr(args, name) for name in
                   ('hidden', 'mlp_hidden', 'query_heads', 'attention_groups')
                   if getattr(args, name) is not None}
        if not changes:
            raise UsageError("width prune needs --target-config or at least one axis flag")
        return source.replace(**changes)

    def _retrain(self, args, mode: str) -> bool:
        student = load_checkpoint(_require_file(args.checkpoint))
        corpus = self._train_corpus(args.corpus, 'train_b')
        default = self.scale.distill if mode == 'kl' else self.scale.retrain_ce
        tc = TrainConfig.from_file(_require_file(args.train_config)) if args.train_config else default
        tc = tc.replace(seed=args.seed, loss_mode=mode)
        val = corpora(self.scale)['val_b']
        if mode == 'kl':
            teacher = load_checkpoint(_require_file(args.teacher))
            trained, log = distill(student, teacher, corpus, tc, val_corpus=val,
                                   progress=self.progress)
        else:
            trained, log = train_ce(student, corpus, tc, val_corpus=val, progress=self.progress)
        out = ReportGenerator(args.out)
        save_checkpoint(trained, out.path(CHECKPOINT))
        out.generate_metrics_jsonl(log)
        print_training_summary("Distillation" if mode == 'kl' else "CE retraining", log)
        print(f"\n✅ Checkpoint written: {out.path(CHECKPOINT)}")
        return True

    def distill(self, args) -> bool:
        print_banner(f"DISTILL (seed {args.seed})")
        return self._retrain(args, 'kl')

    def train_ce(self, args) -> bool:
        print_banner(f"CE RETRAINING (seed {args.seed})")
        return self._retrain(args, 'ce')

    def _cloze(self, path: str = None):
        if path:
            return load_cloze_set(_require_file(path))
        return synth_cloze_set(self.config['evaluation']['cloze_items'], CORPUS_SEEDS['cloze'],
                               style='B')

    def evaluate(self, args) -> bool:
        print_banner("EVALUATION")
        params = load_checkpoint(_require_file(args.checkpoint))
        tc = self.scale.distill
        if args.corpus:
            held_out = {'val_file': load_corpus(_require_file(args.corpus))}
        else:
            data = corpora(self.scale)
            held_out = {'val_a': data['val_a'], 'val_b': data['val_b']}
        results = {f"loss_{name}": eval_val_loss(params, corpus, args.batches or tc.eval_batches,
                                                 batch_size=tc.batch_size, seq_len=tc.seq_len)
                   for name, corpus in held_out.items()}
        results['cloze_accuracy'] = eval_cloze(params, self._cloze(args.cloze))
        print_eval_summary(results)
        if args.out:
            ReportGenerator(Path(args.out).parent).generate_json_report(results, Path(args.out).name)
        return True

    def preset(self, args) -> bool:
        runner = PresetRunner(self.workspace.root, self.scale, parse_seeds(args.seeds),
                              build_dependencies=args.build_deps, workers=args.workers,
                              progress=self.progress)
        summary = runner.run(args.name)
        print_preset_summary(summary)
        print(f"\n✅ Summary written: {self.workspace.summary_path(args.name)}")
        return True


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _read_mapping(path: str) -> dict:
    with open(_require_file(path), 'r') as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not hold a mapping")
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = ToolkitArgumentParser(
        prog='main.py',
        description='Structured pruning and distillation toolkit for small decoder-only transformers',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--config', '-c', type=str, default='config/toolkit.yaml')
    parser.add_argument('--workspace', '-w', type=str, default=None)
    parser.add_argument('--scale', type=str, default=None, help='Scale name in presets.yaml')
    parser.add_argument('--log-level', type=str, default=None)
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ToolkitArgumentParser)

    p = sub.add_parser('pretrain', help='Pretrain a teacher with CE on corpus A')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--model-config', type=str)
    p.add_argument('--train-config', type=str)
    p.add_argument('--corpus', type=str, help='Byte file used instead of synthetic corpus A')

    p = sub.add_parser('correct-teacher', help='CE fine-tune the teacher on corpus B')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--teacher', type=str, help='Teacher checkpoint (default: workspace pretrain)')
    p.add_argument('--train-config', type=str)
    p.add_argument('--corpus', type=str)

    p = sub.add_parser('importance', help='Estimate width importance on a calibration set')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--samples', type=int)
    p.add_argument('--seq-len', type=int)
    p.add_argument('--corpus', type=str)

    p = sub.add_parser('depth-scan', help='Score layer blocks for depth pruning')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--metric', choices=sorted(SCAN_METRICS), required=True)
    p.add_argument('--block-size', type=int, required=True)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--cloze', type=str, help='Cloze items JSONL (task metric)')
    p.add_argument('--out', type=str, required=True)

    p = sub.add_parser('prune', help='Trim a checkpoint along width or depth')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--importance', type=str)
    p.add_argument('--random', action='store_true', help='Random keep-sets (requires --seed)')
    p.add_argument('--seed', type=int)
    p.add_argument('--target-config', type=str)
    p.add_argument('--hidden', type=int)
    p.add_argument('--mlp-hidden', type=int)
    p.add_argument('--query-heads', type=int)
    p.add_argument('--attention-groups', type=int)
    p.add_argument('--drop-layers', type=str, help='Comma-separated 0-based layer indices')
    p.add_argument('--depth-scan', type=str, help='Scan JSON to select layers from')
    p.add_argument('--noncontiguous', action='store_true')
    p.add_argument('--n-drop', type=int, default=1)

    for name, helptext in (('distill', 'Forward-KL distillation from a teacher'),
                           ('train-ce', 'Conventional CE retraining')):
        p = sub.add_parser(name, help=helptext)
        p.add_argument('--checkpoint', type=str, required=True)
        p.add_argument('--seed', type=int, required=True)
        p.add_argument('--out', type=str, required=True)
        p.add_argument('--train-config', type=str)
        p.add_argument('--corpus', type=str)
        if name == 'distill':
            p.add_argument('--teacher', type=str, required=True)

    p = sub.add_parser('eval', help='Validation loss and cloze accuracy')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--corpus', type=str)
    p.add_argument('--cloze', type=str)
    p.add_argument('--batches', type=int)
    p.add_argument('--out', type=str)

    p = sub.add_parser('preset', help='Run an experiment preset')
    p.add_argument('name', choices=sorted(PRESETS))
    p.add_argument('--seeds', type=str, required=True)
    p.add_argument('--build-deps', action='store_true')
    p.add_argument('--workers', type=int, default=1)
    return parser


COMMANDS = {
    'pretrain': CompressionToolkit.pretrain,
    'correct-teacher': CompressionToolkit.correct_teacher,
    'importance': CompressionToolkit.importance,
    'depth-scan': CompressionToolkit.depth_scan,
    'prune': CompressionToolkit.prune,
    'distill': CompressionToolkit.distill,
    'train-ce': CompressionToolkit.train_ce,
    'eval': CompressionToolkit.evaluate,
    'preset': CompressionToolkit.preset,
}


def _fail(kind: str, code: int, message) -> int:
    text = " ".join(str(message).split())
    print(f"error kind={kind} code={code} message={text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        toolkit = CompressionToolkit(args.config, args.workspace, args.scale)
        level = args.log_level or toolkit.config['logging'].get('level', 'INFO')
        logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                            format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        success = COMMANDS[args.command](toolkit, args)
    except UsageError as exc:
        return _fail('usage', USAGE_EXIT, exc)
    except FileNotFoundError as exc:
        return _fail('missing_file', MISSING_FILE_EXIT, exc)
    except ToolkitError as exc:
        return _fail(exc.kind, exc.exit_code, exc)
    except ValueError as exc:
        return _fail('invalid_value', 1, exc)
    return 0 if success else 1


if __name__ == "__main__":
    sys.exit(main())
