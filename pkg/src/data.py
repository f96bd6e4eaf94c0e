# src/data.py
"""
Corpus ingestion, byte-level tokenization, synthetic corpora and cloze items.

Vocabulary: byte values 0..255, BOS = 256, EOS = 257.

The two synthetic styles share one latent order-2 Markov chain over 30 symbols
(26 letters + 4 shared punctuation symbols). Style A renders letters in
lowercase, style B in uppercase and additionally mixes a second transition
table into the chain, so B differs from A both in byte range and in sequence
statistics while remaining learnable from A-trained weights.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np
import pandas as pd

from src.errors import CorpusTooShortError, ShapeError

logger = logging.getLogger(__name__)

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258

LANGUAGE_SEED = 1729
STYLE_B_SEED = 4242
STYLE_B_MIX = 0.35
DIRICHLET_ALPHA = 0.15
NUM_LETTERS = 26
SHARED_BYTES = np.frombuffer(b" .,\n", dtype=np.uint8).astype(np.int64)
DOC_LENGTH = 254


@dataclass(eq=False)
class Corpus:
    tokens: np.ndarray
    provenance: str
    style: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        if self.tokens.size == 0:
            raise CorpusTooShortError(f"corpus {self.provenance} is empty")
        if self.tokens.min() < 0 or self.tokens.max() >= VOCAB_SIZE:
            raise ShapeError(f"corpus {self.provenance} has ids outside [0, {VOCAB_SIZE})")

    def __len__(self) -> int:
        return int(self.tokens.size)


@dataclass
class TokenBatch:
    inputs: np.ndarray
    targets: np.ndarray
    offsets: np.ndarray


@dataclass
class ClozeItem:
    prefix: np.ndarray
    candidates: tuple
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ShapeError(f"cloze label must be 0 or 1, got {self.label}")
        if np.array_equal(self.candidates[0], self.candidates[1]):
            raise ShapeError("cloze candidates must differ")


# ---------------------------------------------------------------------------
# tokenization

def tokenize_bytes(data: bytes) -> np.ndarray:
    payload = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int32)
    return np.concatenate([np.array([BOS_ID], dtype=np.int32), payload])


def detokenize(ids) -> bytes:
    ids = np.asarray(ids).reshape(-1)
    payload = ids[ids < 256]
    return payload.astype(np.uint8).tobytes()


def load_corpus(path) -> Corpus:
    path = Path(path)
    tokens = tokenize_bytes(path.read_bytes())
    tokens = np.concatenate([tokens, np.array([EOS_ID], dtype=np.int32)])
    logger.info("Loaded corpus %s (%d tokens)", path, tokens.size)
    return Corpus(tokens, provenance=str(path), style="file")


# ---------------------------------------------------------------------------
# synthetic languages

@dataclass(frozen=True)
class MarkovLanguage:
    style: str
    alphabet: np.ndarray
    cdf: np.ndarray

    @property
    def num_symbols(self) -> int:
        return self.alphabet.size

    def sample(self, n_docs: int, length: int, rng: np.random.Generator) -> np.ndarray:
        """Symbol indices of shape (n_docs, length), all chains advanced together."""
        S = self.num_symbols
        out = np.empty((n_docs, length), dtype=np.int64)
        prev2 = rng.integers(S, size=n_docs)
        prev1 = rng.integers(S, size=n_docs)
        for t in range(length):
            u = rng.random(n_docs)
            nxt = np.minimum((u[:, None] > self.cdf[prev2, prev1]).sum(axis=1), S - 1)
            out[:, t] = nxt
            prev2, prev1 = prev1, nxt
        return out

    def render(self, symbols: np.ndarray) -> np.ndarray:
        return self.alphabet[symbols]


def _transition_table(seed: int, num_symbols: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    alpha = np.full(num_symbols, DIRICHLET_ALPHA)
    return rng.dirichlet(alpha, size=(num_symbols, num_symbols))


@lru_cache(maxsize=None)
def language(style: str) -> MarkovLanguage:
    num_symbols = NUM_LETTERS + SHARED_BYTES.size
    table = _transition_table(LANGUAGE_SEED, num_symbols)
    if style == "A":
        letters = np.arange(ord("a"), ord("a") + NUM_LETTERS)
    elif style == "B":
        letters = np.arange(ord("A"), ord("A") + NUM_LETTERS)
        table = (1.0 - STYLE_B_MIX) * table + STYLE_B_MIX * _transition_table(STYLE_B_SEED, num_symbols)
    else:
        raise ValueError(f"unknown corpus style {style!r}, expected 'A' or 'B'")
    cdf = np.cumsum(table, axis=-1)
    cdf[..., -1] = 1.0
    return MarkovLanguage(style, np.concatenate([letters, SHARED_BYTES]), cdf)


def synth_corpus(style: str, n_tokens: int, seed: int) -> Corpus:
    """Exactly ``n_tokens`` ids: documents of BOS + rendered chain + EOS."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    lang = language(style)
    rng = np.random.default_rng(seed)
    n_docs = -(-n_tokens // (DOC_LENGTH + 2))
    body = lang.render(lang.sample(n_docs, DOC_LENGTH, rng))
    docs = np.concatenate([np.full((n_docs, 1), BOS_ID), body, np.full((n_docs, 1), EOS_ID)], axis=1)
    tokens = docs.reshape(-1)[:n_tokens]
    return Corpus(tokens, provenance=f"synth:{style}:n={n_tokens}:seed={seed}", style=style)


def unigram_tv_distance(a: Corpus, b: Corpus) -> float:
    pa = np.bincount(a.tokens, minlength=VOCAB_SIZE) / len(a)
    pb = np.bincount(b.tokens, minlength=VOCAB_SIZE) / len(b)
    return float(0.5 * np.abs(pa - pb).sum())


# ---------------------------------------------------------------------------
# windows and batches

def sample_calibration(corpus: Corpus, n_samples: int = 1024, seq_len: int = 256,
                       seed: int = 0) -> np.ndarray:
    """``n_samples`` non-overlapping windows of ``seq_len`` tokens, shape (n, seq_len)."""
    n_windows = len(corpus) // seq_len
    if n_windows == 0 or n_samples < 1:
        raise CorpusTooShortError(
            f"corpus of {len(corpus)} tokens holds no window of {seq_len} tokens")
    rng = np.random.default_rng(seed)
    if n_samples <= n_windows:
        starts = rng.choice(n_windows, size=n_samples, replace=False)
    else:
        logger.warning("Only %d distinct windows for %d calibration samples; "
                       "drawing the rest with replacement", n_windows, n_samples)
        extra = rng.integers(n_windows, size=n_samples - n_windows)
        starts = np.concatenate([rng.permutation(n_windows), extra])
    index = starts[:, None] * seq_len + np.arange(seq_len)[None, :]
    return corpus.tokens[index].astype(np.int64)


def build_batches(corpus: Corpus, seq_len: int, batch_size: int, seed: int, *,
                  epochs: Optional[int] = 1, drop_last: bool = False) -> Iterator[TokenBatch]:
    """Deterministic stream of shuffled windows; ``epochs=None`` cycles forever."""
    n_windows = (len(corpus) - 1) // seq_len
    if n_windows < 1:
        raise CorpusTooShortError(
            f"corpus of {len(corpus)} tokens holds no window of {seq_len + 1} tokens")
    if drop_last and n_windows < batch_size:
        raise CorpusTooShortError(
            f"corpus holds {n_windows} windows, fewer than one batch of {batch_size}")
    rng = np.random.default_rng(seed)
    offsets_in_window = np.arange(seq_len + 1)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(n_windows)
        stop = n_windows - (n_windows % batch_size if drop_last else 0)
        for begin in range(0, stop, batch_size):
            starts = order[begin:begin + batch_size] * seq_len
            windows = corpus.tokens[starts[:, None] + offsets_in_window[None, :]].astype(np.int64)
            yield TokenBatch(inputs=windows[:, :-1], targets=windows[:, 1:], offsets=starts)
        epoch += 1


def eval_windows(corpus: Corpus, seq_len: int, count: int) -> np.ndarray:
    """The first ``count`` consecutive windows of ``seq_len + 1`` tokens, in corpus order."""
    n_windows = min((len(corpus) - 1) // seq_len, count)
    if n_windows < 1:
        raise CorpusTooShortError(
            f"corpus of {len(corpus)} tokens holds no window of {seq_len + 1} tokens")
    starts = np.arange(n_windows) * seq_len
    return corpus.tokens[starts[:, None] + np.arange(seq_len + 1)[None, :]].astype(np.int64)


# ---------------------------------------------------------------------------
# cloze task

def synth_cloze_set(n_items: int, seed: int, *, style: str = "A", prefix_len: int = 24,
                    continuation_len: int = 6) -> List[ClozeItem]:
    """Two-choice items: a true chain continuation against a shuffled one.

    One candidate is ``continuation_len`` tokens and the other one token longer;
    a balanced coin decides whether the correct candidate is the short or the
    long one, so a model that ignores content lands on exactly half. The wrong
    candidate shuffles the true continuation of its own length. Labels are
    balanced independently of the coin.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    if continuation_len < 2:
        raise ValueError("continuation_len must be >= 2")
    lang = language(style)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_items) % 2)
    correct_is_short = rng.permutation(np.arange(n_items) % 2).astype(bool)
    symbols = lang.sample(n_items, prefix_len + continuation_len + 1, rng)
    items = []
    for row, label, short in zip(symbols, labels, correct_is_short):
        full = row[prefix_len:]
        while np.unique(full[:continuation_len]).size < 2:
            full = lang.sample(1, continuation_len + 1, rng)[0]
        correct, source = (full[:continuation_len], full) if short else (full, full[:continuation_len])
        wrong = rng.permutation(source)
        while np.array_equal(wrong, source):
            wrong = rng.permutation(source)
        prefix = np.concatenate([[BOS_ID], lang.render(row[:prefix_len])]).astype(np.int64)
        pair = (lang.render(correct), lang.render(wrong))
        if label == 1:
            pair = pair[::-1]
        items.append(ClozeItem(prefix, (pair[0].astype(np.int64), pair[1].astype(np.int64)),
                               int(label)))
    return items


def save_cloze_set(items: List[ClozeItem], path) -> None:
    frame = pd.DataFrame({
        "prefix": [item.prefix.tolist() for item in items],
        "cand0": [item.candidates[0].tolist() for item in items],
        "cand1": [item.candidates[1].tolist() for item in items],
        "label": [item.label for item in items],
    })
    frame.to_json(path, orient="records", lines=True)


def load_cloze_set(path) -> List[ClozeItem]:
    frame = pd.read_json(path, orient="records", lines=True)
    return [ClozeItem(np.asarray(row.prefix, dtype=np.int64),
                      (np.asarray(row.cand0, dtype=np.int64), np.asarray(row.cand1, dtype=np.int64)),
                      int(row.label))
            for row in frame.itertuples(index=False)]
