# src/evalx.py
"""
Evaluation: held-out language-model loss, cloze accuracy and the style-shift gap.
"""

import logging
from typing import Callable, Iterable, List, Optional

import numpy as np

from src.data import ClozeItem, Corpus, eval_windows
from src.errors import CorpusTooShortError
from src.model import ParamSet, forward, lm_loss, score_continuation

logger = logging.getLogger(__name__)


def eval_val_loss(params: ParamSet, corpus: Corpus, n_batches: int, *, batch_size: int = 8,
                  seq_len: int = 128, skip_layers: Iterable[int] = ()) -> float:
    """Mean CE over the first ``n_batches * batch_size`` windows of ``corpus``, in order."""
    if corpus is None or len(corpus) < 2:
        raise CorpusTooShortError("evaluation corpus is empty")
    windows = eval_windows(corpus, seq_len, n_batches * batch_size)
    total, count = 0.0, 0
    for begin in range(0, len(windows), batch_size):
        batch = windows[begin:begin + batch_size]
        logits, _ = forward(params, batch[:, :-1], skip_layers=skip_layers)
        total += lm_loss(logits, batch[:, 1:]) * batch[:, 1:].size
        count += batch[:, 1:].size
    return total / count


def eval_cloze(params: Optional[ParamSet], items: List[ClozeItem], *,
               skip_layers: Iterable[int] = (),
               scorer: Callable[[np.ndarray, np.ndarray], float] = None) -> float:
    """Fraction of items whose labeled candidate scores strictly higher; ties are wrong."""
    if not items:
        raise ValueError("eval_cloze needs at least one item")
    skip_layers = tuple(skip_layers)
    if scorer is None:
        scorer = lambda prefix, cont: score_continuation(params, prefix, cont, skip_layers=skip_layers)
    correct = 0
    for item in items:
        scores = [scorer(item.prefix, cand) for cand in item.candidates]
        if scores[item.label] > scores[1 - item.label]:
            correct += 1
    return correct / len(items)


def style_shift_gap(params: ParamSet, held_out_a: Corpus, held_out_b: Corpus, n_batches: int, *,
                    batch_size: int = 8, seq_len: int = 128) -> dict:
    loss_a = eval_val_loss(params, held_out_a, n_batches, batch_size=batch_size, seq_len=seq_len)
    loss_b = eval_val_loss(params, held_out_b, n_batches, batch_size=batch_size, seq_len=seq_len)
    gap = (loss_b - loss_a) / loss_a
    logger.info("Style shift: loss A %.4f, loss B %.4f, relative gap %.3f", loss_a, loss_b, gap)
    return {"loss_a": loss_a, "loss_b": loss_b, "relative_gap": gap}
