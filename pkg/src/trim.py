# src/trim.py
"""
Single-shot trimming of a ParamSet to a smaller architecture.

Width trims go through a KeepPlan: the sorted indices kept on each axis
(embedding channels globally, MLP neurons and query heads per layer, KV heads
per layer). Kept units retain their original relative order.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from src.errors import ShapeError, TrimError
from src.importance import WidthImportance, rank
from src.model import (ModelConfig, ParamSet, count_params, param_shapes, validate_config)

logger = logging.getLogger(__name__)

WIDTH_AXES = ("hidden", "mlp_hidden", "query_heads", "attention_groups")


@dataclass
class KeepPlan:
    channels: np.ndarray
    neurons: Dict[int, np.ndarray] = field(default_factory=dict)
    heads: Dict[int, np.ndarray] = field(default_factory=dict)
    kv_heads: Dict[int, np.ndarray] = field(default_factory=dict)


def _top_k(scores, k: int) -> np.ndarray:
    return np.sort(rank(scores)[:k])


def _check_target(source: ModelConfig, target: ModelConfig) -> None:
    problems = validate_config(target)
    if problems:
        raise TrimError("invalid target config: " + "; ".join(problems))
    for name, value in target.to_dict().items():
        if name not in WIDTH_AXES and value != getattr(source, name):
            raise TrimError(f"axis mismatch: {name} cannot change in a width trim "
                            f"({getattr(source, name)} -> {value})")
    for name in WIDTH_AXES:
        if getattr(target, name) > getattr(source, name):
            raise TrimError(f"target {name}={getattr(target, name)} is larger than "
                            f"source {name}={getattr(source, name)}")
    if target.group_size > source.group_size:
        raise TrimError(f"target keeps {target.group_size} heads per group, "
                        f"source groups hold only {source.group_size}")


def _plan_heads(scores: np.ndarray, group_scores: np.ndarray, source: ModelConfig,
                target: ModelConfig):
    """Equal query-head counts per group; a KV head goes only with its whole group."""
    by_group = scores.reshape(source.attention_groups, source.group_size)
    groups = _top_k(group_scores, target.attention_groups)
    kept = [g * source.group_size + _top_k(by_group[g], target.group_size) for g in groups]
    return np.concatenate(kept), groups


def plan_width_trim(source_cfg: ModelConfig, target_cfg: ModelConfig,
                    imp: WidthImportance) -> KeepPlan:
    _check_target(source_cfg, target_cfg)
    try:
        imp.check_against(source_cfg)
    except ShapeError as exc:
        raise TrimError(f"importance does not match source config: {exc}") from exc
    plan = KeepPlan(channels=_top_k(imp.channels, target_cfg.hidden))
    kv_scores = imp.kv_head_scores(source_cfg.group_size)
    for i in range(source_cfg.depth):
        plan.neurons[i] = _top_k(imp.neurons[i], target_cfg.mlp_hidden)
        plan.heads[i], plan.kv_heads[i] = _plan_heads(imp.heads[i], kv_scores[i], source_cfg,
                                                      target_cfg)
    return plan


def plan_random_trim(source_cfg: ModelConfig, target_cfg: ModelConfig, seed: int) -> KeepPlan:
    """Keep-sets drawn uniformly at random, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    scores = WidthImportance(
        neurons=rng.random((source_cfg.depth, source_cfg.mlp_hidden)),
        heads=rng.random((source_cfg.depth, source_cfg.query_heads)),
        channels=rng.random(source_cfg.hidden),
        metadata={"random_seed": int(seed)})
    return plan_width_trim(source_cfg, target_cfg, scores)


def _rows(units: np.ndarray, width: int) -> np.ndarray:
    return (np.asarray(units)[:, None] * width + np.arange(width)[None, :]).reshape(-1)


def apply_keep_plan(params: ParamSet, plan: KeepPlan, target_cfg: ModelConfig) -> ParamSet:
    cfg = params.config
    ch = plan.channels
    D = cfg.head_dim
    tensors = {}
    for name, weight in params.tensors.items():
        if name in ("embed.tok", "head.out"):
            out = weight[:, ch]
        elif name == "final.norm":
            out = weight[ch]
        else:
            _, index, kind = name.split(".", 2)
            i = int(index)
            if kind.startswith("norm."):
                out = weight[ch]
            elif kind == "attn.q":
                out = weight[np.ix_(_rows(plan.heads[i], D), ch)]
            elif kind in ("attn.k", "attn.v"):
                out = weight[np.ix_(_rows(plan.kv_heads[i], D), ch)]
            elif kind == "attn.o":
                out = weight[np.ix_(ch, _rows(plan.heads[i], D))]
            elif kind in ("mlp.gate", "mlp.up"):
                out = weight[np.ix_(plan.neurons[i], ch)]
            elif kind == "mlp.down":
                out = weight[np.ix_(ch, plan.neurons[i])]
            else:
                raise TrimError(f"no trimming rule for tensor {name}")
        tensors[name] = np.ascontiguousarray(out)
    meta = dict(params.meta)
    meta["trimmed_from"] = cfg.to_dict()
    trimmed = ParamSet(target_cfg, tensors, meta)
    violations = check_arch(trimmed, target_cfg)
    if violations:
        raise TrimError("trimmed model fails the shape audit: " + "; ".join(violations))
    return trimmed


def trim_width(params: ParamSet, target_cfg: ModelConfig, imp: WidthImportance) -> ParamSet:
    plan = plan_width_trim(params.config, target_cfg, imp)
    logger.info("Width trim %s -> hidden %d, mlp %d, heads %d/%d", params.config.hidden,
                target_cfg.hidden, target_cfg.mlp_hidden, target_cfg.query_heads,
                target_cfg.attention_groups)
    return apply_keep_plan(params, plan, target_cfg)


def random_prune(params: ParamSet, target_cfg: ModelConfig, seed: int) -> ParamSet:
    plan = plan_random_trim(params.config, target_cfg, seed)
    return apply_keep_plan(params, plan, target_cfg)


def trim_depth(params: ParamSet, drop_set: Iterable[int]) -> ParamSet:
    """Remove whole layers; survivors are renumbered contiguously in order."""
    cfg = params.config
    drop_list = [int(i) for i in drop_set]
    drop = set(drop_list)
    if not drop:
        raise TrimError("drop set is empty")
    if len(drop) != len(drop_list):
        raise TrimError(f"drop set has duplicate layers: {sorted(drop_list)}")
    outside = sorted(i for i in drop if i < 0 or i >= cfg.depth)
    if outside:
        raise TrimError(f"layers {outside} are outside 0..{cfg.depth - 1}")
    if len(drop) >= cfg.depth:
        raise TrimError(f"cannot drop all {cfg.depth} layers")

    kept = [i for i in range(cfg.depth) if i not in drop]
    target = cfg.replace(depth=len(kept))
    renamed = {f"layer.{old}.": f"layer.{new}." for new, old in enumerate(kept)}
    source_tensors = {}
    for name, weight in params.tensors.items():
        if name.startswith("layer."):
            prefix = ".".join(name.split(".", 2)[:2]) + "."
            if prefix not in renamed:
                continue
            name = renamed[prefix] + name[len(prefix):]
        source_tensors[name] = weight.copy()
    tensors = {name: source_tensors[name] for name in param_shapes(target)}
    meta = dict(params.meta)
    meta["dropped_layers"] = sorted(drop)
    trimmed = ParamSet(target, tensors, meta)
    violations = check_arch(trimmed, target)
    if violations:
        raise TrimError("depth-trimmed model fails the shape audit: " + "; ".join(violations))
    logger.info("Dropped layers %s, depth %d -> %d", sorted(drop), cfg.depth, target.depth)
    return trimmed


def check_arch(params: ParamSet, cfg: ModelConfig) -> List[str]:
    """Audit a ParamSet against a config; an empty list means ok."""
    violations = list(validate_config(cfg))
    if violations:
        return violations
    if params.config != cfg:
        for name, value in cfg.to_dict().items():
            if getattr(params.config, name) != value:
                violations.append(f"config field {name}: params carry "
                                  f"{getattr(params.config, name)}, expected {value}")
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params.tensors:
            violations.append(f"missing tensor {name}")
        elif params.tensors[name].shape != shape:
            violations.append(f"tensor {name} has shape {params.tensors[name].shape}, "
                              f"expected {shape}")
        elif not np.all(np.isfinite(params.tensors[name])):
            violations.append(f"tensor {name} has non-finite values")
    for name in params.tensors:
        if name not in expected:
            violations.append(f"unexpected tensor {name}")
    return violations


def trim_report(source_cfg: ModelConfig, target_cfg: ModelConfig, plan: KeepPlan, *,
                method: str, importance_digest: str = None) -> dict:
    """Audit record of a width trim: configs plus kept indices per axis."""
    per_layer = lambda table: {str(i): [int(x) for x in table[i]] for i in sorted(table)}
    return {
        "source_cfg": source_cfg.to_dict(),
        "target_cfg": target_cfg.to_dict(),
        "method": method,
        "importance_digest": importance_digest,
        "channels": {"global": [int(x) for x in plan.channels]},
        "neurons": per_layer(plan.neurons),
        "heads": per_layer(plan.heads),
        "kv_heads": per_layer(plan.kv_heads),
    }


def depth_trim_report(source_cfg: ModelConfig, dropped: Iterable[int], *, method: str) -> dict:
    dropped = sorted(int(i) for i in dropped)
    kept = [i for i in range(source_cfg.depth) if i not in dropped]
    return {
        "source_cfg": source_cfg.to_dict(),
        "target_cfg": source_cfg.replace(depth=len(kept)).to_dict(),
        "method": method,
        "layers": {"kept": kept, "dropped": dropped},
    }


def iso_param_width_target(source_cfg: ModelConfig, hidden: int, reference_non_embedding: int,
                           multiple: int = 8) -> ModelConfig:
    """Width target at ``hidden`` whose MLP width best matches a non-embedding budget."""
    best, best_gap = None, None
    for mlp in range(multiple, source_cfg.mlp_hidden + 1, multiple):
        candidate = source_cfg.replace(hidden=hidden, mlp_hidden=mlp)
        gap = abs(count_params(candidate)[1] - reference_non_embedding)
        if best_gap is None or gap < best_gap:
            best, best_gap = candidate, gap
    if best is None:
        raise TrimError(f"no MLP width that is a multiple of {multiple} fits "
                        f"source mlp_hidden={source_cfg.mlp_hidden}")
    return best
