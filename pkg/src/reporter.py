# src/reporter.py
"""
Report Generator - writes machine-readable artifacts (JSON, CSV, JSONL) and
prints the console summaries shown by the command-line front end.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def _plain(value):
    """JSON fallback for numpy scalars and arrays."""
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


class ReportGenerator:
    """Writes stage outputs into one directory of a workspace."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def generate_json_report(self, payload: dict, name: str = "report.json") -> Path:
        """Deterministic JSON: sorted keys, fixed indentation, no timestamps."""
        output_path = self.path(name)
        output_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_plain) + "\n")
        logger.info("JSON report generated: %s", output_path)
        return output_path

    def generate_scan_csv(self, scan, name: str = None) -> Path:
        """Depth scan curve as ``start_index,value`` rows."""
        name = name or f"scan_{scan.metric}_n{scan.block_size}.csv"
        output_path = self.path(name)
        frame = pd.DataFrame({"start_index": scan.starts, "value": scan.values})
        frame.to_csv(output_path, index=False)
        logger.info("Scan CSV generated: %s", output_path)
        return output_path

    def generate_metrics_jsonl(self, log, name: str = "metrics.jsonl") -> Path:
        output_path = self.path(name)
        log.save(output_path)
        logger.info("Metrics log generated: %s (%d records)", output_path, len(log))
        return output_path


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# console summaries

def print_banner(title: str) -> None:
    print(f"\n{'='*70}")
    print(title)
    print(f"{'='*70}")


def print_model_summary(label: str, cfg, counts) -> None:
    total, non_embedding = counts
    print(f"\n🧱 {label}")
    print(f"   • depth {cfg.depth}, hidden {cfg.hidden}, mlp {cfg.mlp_hidden}, "
          f"heads {cfg.query_heads}/{cfg.attention_groups} x {cfg.head_dim}")
    print(f"   • parameters: {total:,} total, {non_embedding:,} non-embedding")


def print_training_summary(label: str, log) -> None:
    print(f"\n📉 {label}")
    if not len(log):
        print("   • no steps run (zero token budget)")
        return
    last = log.records[-1]
    print(f"   • steps: {last['step']:,}   tokens: {last['tokens_seen']:,}")
    print(f"   • final train loss: {last['train_loss']:.4f}")
    final_val = log.final_val_loss()
    if final_val is not None:
        print(f"   • final val loss: {final_val:.4f}")


def print_importance_summary(imp) -> None:
    print("\n📊 Width importance")
    print(f"   • calibration samples: {imp.metadata.get('calibration_samples')}")
    print(f"   • neurons {imp.neurons.shape}, heads {imp.heads.shape}, channels {imp.channels.shape}")
    print(f"   • digest: {imp.digest()[:16]}")


def print_scan_summary(scans: Iterable) -> None:
    print("\n📊 Depth scans")
    for scan in scans:
        best = int(np.argmax(scan.values) if scan.higher_is_better else np.argmin(scan.values))
        print(f"   • {scan.metric:<17} n={scan.block_size:<3} best start {best}: "
              f"{scan.values[best]:.4f}")


def print_eval_summary(results: Dict[str, float]) -> None:
    print("\n🔍 Evaluation")
    for key, value in results.items():
        print(f"   • {key}: {value:.4f}")


def print_preset_summary(summary: dict) -> None:
    print_banner(f"PRESET {summary['preset']}")
    for claim in summary.get("claims", []):
        verdict = claim["verdict"]
        emoji = {"pass": "🟢", "fail": "🔴", "reported": "🟡"}.get(verdict, "⚪")
        print(f"   {emoji} {claim['id']}: {verdict}  ({claim['a_label']}={claim['a']}, "
              f"{claim['b_label']}={claim['b']})")
    for arm, runs in summary.get("arms", {}).items():
        failed = [seed for seed, run in runs.items() if run.get("status") != "ok"]
        if failed:
            print(f"   ⚠️  {arm}: seeds {', '.join(failed)} did not complete")
