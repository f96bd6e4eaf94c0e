# src/importance.py
"""
Activation-based importance estimation (forward passes only).

Width axes: MLP neurons, attention heads and embedding channels are scored by
the magnitude of their activations on a calibration set, aggregated with a
mean over sequence positions followed by an l2-norm over samples.

Depth axis: three layer-block metrics (LM loss with the block skipped, Block
Importance as the cosine distance across the block, and cloze accuracy with
the block skipped) plus contiguous and non-contiguous layer selection.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import stats
from tqdm import tqdm

from src.errors import ConfigError, ShapeError
from src.evalx import eval_cloze
from src.model import ParamSet, TapSpec, forward, lm_loss

logger = logging.getLogger(__name__)

DEPTH_METRICS = ("lm_loss", "block_importance", "task_accuracy")


@dataclass(eq=False)
class WidthImportance:
    neurons: np.ndarray
    heads: np.ndarray
    channels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def check_against(self, cfg) -> None:
        expected = {"neurons": (cfg.depth, cfg.mlp_hidden), "heads": (cfg.depth, cfg.query_heads),
                    "channels": (cfg.hidden,)}
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"importance {name} has shape {actual}, config implies {shape}")

    def kv_head_scores(self, group_size: int) -> np.ndarray:
        """Each KV head inherits the mean score of its query-head group."""
        depth, heads = self.heads.shape
        return self.heads.reshape(depth, heads // group_size, group_size).mean(axis=-1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.neurons, self.heads, self.channels):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"neurons": self.neurons.tolist(), "heads": self.heads.tolist(),
                "channels": self.channels.tolist(), "metadata": self.metadata,
                "digest": self.digest()}

    @classmethod
    def from_dict(cls, data: dict) -> "WidthImportance":
        return cls(np.asarray(data["neurons"], dtype=np.float64),
                   np.asarray(data["heads"], dtype=np.float64),
                   np.asarray(data["channels"], dtype=np.float64),
                   dict(data.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "WidthImportance":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(eq=False)
class DepthScan:
    metric: str
    block_size: int
    values: np.ndarray
    per_layer: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in DEPTH_METRICS:
            raise ConfigError(f"unknown depth metric {self.metric!r}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.values.size)

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "task_accuracy"

    def to_dict(self) -> dict:
        return {"metric": self.metric, "block_size": self.block_size,
                "values": self.values.tolist(),
                "per_layer": None if self.per_layer is None else self.per_layer.tolist(),
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "DepthScan":
        per_layer = data.get("per_layer")
        return cls(data["metric"], int(data["block_size"]), np.asarray(data["values"]),
                   None if per_layer is None else np.asarray(per_layer, dtype=np.float64),
                   dict(data.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DepthScan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _batches(windows: np.ndarray, batch_size: int):
    for begin in range(0, len(windows), batch_size):
        yield windows[begin:begin + batch_size]


def estimate_width_importance(params: ParamSet, calibration: np.ndarray, *, batch_size: int = 8,
                              norm_gain: str = "post", seed: int = None,
                              progress: bool = False) -> WidthImportance:
    calibration = np.asarray(calibration)
    if calibration.ndim != 2 or len(calibration) == 0:
        raise ShapeError(f"calibration must be a non-empty (samples, seq) array, "
                         f"got shape {calibration.shape}")
    if norm_gain not in ("post", "pre"):
        raise ConfigError(f"norm_gain must be 'post' or 'pre', got {norm_gain!r}")
    cfg = params.config
    taps = TapSpec(mlp=True, heads=True, norms=True, aggregate=True, norm_gain=norm_gain)

    neuron_sq = np.zeros((cfg.depth, cfg.mlp_hidden))
    head_sq = np.zeros((cfg.depth, cfg.query_heads))
    norm_sq = {}
    for batch in tqdm(list(_batches(calibration, batch_size)), desc="importance", disable=not progress):
        _, trace = forward(params, batch, taps)
        for i in range(cfg.depth):
            neuron_sq[i] += np.sum(np.square(trace.mlp[i]), axis=0)
            head_sq[i] += np.sum(np.square(trace.heads[i]), axis=0)
        for site, seq_mean in trace.norms.items():
            if seq_mean.shape[-1] != cfg.hidden:
                raise ShapeError(f"norm tap {site} has width {seq_mean.shape[-1]}, "
                                 f"config hidden is {cfg.hidden}")
            norm_sq[site] = norm_sq.get(site, 0.0) + np.sum(np.square(seq_mean), axis=0)

    channels = np.zeros(cfg.hidden)
    for site in sorted(norm_sq):
        channels += np.sqrt(norm_sq[site])
    metadata = {
        "calibration_samples": int(len(calibration)),
        "sequence_length": int(calibration.shape[1]),
        "aggregation": {"unit": "abs", "head": "l2", "sequence": "mean", "batch": "l2",
                        "norm_sites": "sum"},
        "norm_gain": norm_gain,
        "norm_sites": len(norm_sq),
        "seed": seed,
    }
    logger.info("Width importance from %d calibration windows", len(calibration))
    return WidthImportance(np.sqrt(neuron_sq), np.sqrt(head_sq), channels, metadata)


def rank(scores) -> np.ndarray:
    """Stable descending order; ties keep the lower original index first."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def _check_block(params: ParamSet, block_size: int) -> None:
    depth = params.config.depth
    if block_size < 1 or block_size >= depth:
        raise ConfigError(f"block size must satisfy 1 <= n < depth={depth}, got {block_size}")


def _blocks(depth: int, n: int):
    return [list(range(start, start + n)) for start in range(depth - n + 1)]


def calibration_loss(params: ParamSet, calibration: np.ndarray, *, skip_layers=(),
                     batch_size: int = 8) -> float:
    total, count = 0.0, 0
    for batch in _batches(np.asarray(calibration), batch_size):
        logits, _ = forward(params, batch[:, :-1], skip_layers=skip_layers)
        total += lm_loss(logits, batch[:, 1:]) * batch[:, 1:].size
        count += batch[:, 1:].size
    return total / count


def depth_scan_loss(params: ParamSet, calibration: np.ndarray, block_size: int, *,
                    batch_size: int = 8, progress: bool = False) -> DepthScan:
    _check_block(params, block_size)
    base = calibration_loss(params, calibration, batch_size=batch_size)
    values = [calibration_loss(params, calibration, skip_layers=block, batch_size=batch_size)
              for block in tqdm(_blocks(params.config.depth, block_size), desc=f"loss scan n={block_size}",
                                disable=not progress)]
    scan = DepthScan("lm_loss", block_size, np.array(values), metadata={"base_loss": base})
    if block_size == 1:
        scan.per_layer = scan.values.copy()
    return scan


def cosine_distance(x_in: np.ndarray, x_out: np.ndarray):
    """1 - cos(x_in, x_out) over the last axis, clipped to [0, 2].

    Returns (distances, valid) where ``valid`` is False for zero-norm vectors.
    Exactly equal vectors give exactly 0.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    norms = np.linalg.norm(x_in, axis=-1) * np.linalg.norm(x_out, axis=-1)
    valid = norms > 0
    cos = np.sum(x_in * x_out, axis=-1) / np.where(valid, norms, 1.0)
    distance = 1.0 - np.clip(cos, -1.0, 1.0)
    distance = np.where(np.all(x_in == x_out, axis=-1), 0.0, distance)
    return np.clip(distance, 0.0, 2.0), valid


def block_importance(params: ParamSet, calibration: np.ndarray, block_size: int, *,
                     batch_size: int = 8) -> DepthScan:
    _check_block(params, block_size)
    blocks = _blocks(params.config.depth, block_size)
    sums = np.zeros(len(blocks))
    counts = np.zeros(len(blocks), dtype=np.int64)
    excluded = 0
    for batch in _batches(np.asarray(calibration), batch_size):
        _, trace = forward(params, batch, TapSpec(residual=True))
        for b, block in enumerate(blocks):
            distance, valid = cosine_distance(trace.residual_in[block[0]], trace.residual_out[block[-1]])
            sums[b] += distance[valid].sum()
            counts[b] += int(valid.sum())
            excluded += int((~valid).sum())
    if excluded:
        logger.warning("Block importance excluded %d zero-norm residual vectors", excluded)
    values = sums / np.maximum(counts, 1)
    scan = DepthScan("block_importance", block_size, values, metadata={"excluded_zero_norm": excluded})
    if block_size == 1:
        scan.per_layer = scan.values.copy()
    return scan


def depth_scan_task(params: ParamSet, items, block_size: int, *, progress: bool = False) -> DepthScan:
    _check_block(params, block_size)
    base = eval_cloze(params, items)
    values = [eval_cloze(params, items, skip_layers=block)
              for block in tqdm(_blocks(params.config.depth, block_size), desc=f"task scan n={block_size}",
                                disable=not progress)]
    scan = DepthScan("task_accuracy", block_size, np.array(values),
                     metadata={"base_accuracy": base, "items": len(items)})
    if block_size == 1:
        scan.per_layer = scan.values.copy()
    return scan


def select_contiguous(scan: DepthScan) -> List[int]:
    """Layers of the best block: argmax for accuracy, argmin for loss/BI; ties -> lowest start."""
    if scan.values.size == 0:
        raise ConfigError("depth scan is empty")
    start = int(np.argmax(scan.values) if scan.higher_is_better else np.argmin(scan.values))
    return list(range(start, start + scan.block_size))


def select_noncontiguous(single_layer_scan: DepthScan, n_drop: int) -> List[int]:
    """The ``n_drop`` layers whose individual removal degrades the metric least."""
    if single_layer_scan.block_size != 1:
        raise ConfigError("non-contiguous selection needs a single-layer scan (block size 1)")
    depth = single_layer_scan.values.size
    if n_drop < 1 or n_drop >= depth:
        raise ConfigError(f"n_drop must satisfy 1 <= n_drop < depth={depth}, got {n_drop}")
    values = single_layer_scan.values
    order = rank(values) if single_layer_scan.higher_is_better else rank(-values)
    return sorted(int(i) for i in order[:n_drop])


def rank_correlation(scan_a: DepthScan, scan_b: DepthScan) -> float:
    """Spearman correlation between two scans of equal length."""
    if scan_a.values.size != scan_b.values.size:
        raise ShapeError("scans differ in length")
    rho, _ = stats.spearmanr(scan_a.values, scan_b.values)
    return float(rho) if np.isfinite(rho) else 0.0


def default_block_sizes(depth: int) -> List[int]:
    sizes = {1, 2, depth // 4, depth // 2}
    return sorted(n for n in sizes if 1 <= n < depth)


class DepthAnalyzer:
    """Runs all three depth metrics over several block sizes on one model."""

    def __init__(self, params: ParamSet, calibration: np.ndarray, items, *,
                 progress: bool = False):
        self.params = params
        self.calibration = calibration
        self.items = items
        self.progress = progress
        self.scans = {}
        self.results = {}

    def analyze(self, block_sizes: Optional[List[int]] = None) -> dict:
        depth = self.params.config.depth
        sizes = sorted(block_sizes) if block_sizes else default_block_sizes(depth)
        single = depth_scan_loss(self.params, self.calibration, 1, progress=self.progress)
        self.scans = {}
        for n in sizes:
            loss_scan = single if n == 1 else depth_scan_loss(
                self.params, self.calibration, n, progress=self.progress)
            reference = select_noncontiguous(single, n)
            loss_scan.metadata["noncontiguous_layers"] = reference
            loss_scan.metadata["noncontiguous_loss"] = calibration_loss(
                self.params, self.calibration, skip_layers=reference)
            bi_scan = block_importance(self.params, self.calibration, n)
            task_scan = depth_scan_task(self.params, self.items, n, progress=self.progress)
            for scan in (loss_scan, bi_scan, task_scan):
                self.scans[(scan.metric, n)] = scan

        single_bi = self.scans.get(("block_importance", 1))
        if single_bi is None:
            single_bi = block_importance(self.params, self.calibration, 1)
        rho = rank_correlation(single_bi, single)
        self.results = {"block_sizes": sizes, "bi_loss_spearman": rho}
        logger.info("Depth analysis over block sizes %s, BI/loss Spearman %.3f", sizes, rho)
        return self.results
