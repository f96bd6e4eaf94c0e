#!/usr/bin/env python3
# generate_sample_data.py - Write the synthetic corpora and cloze items to disk

import argparse
import os

from src.data import detokenize, save_cloze_set, synth_cloze_set, synth_corpus, unigram_tv_distance


def generate_sample_corpora(n_tokens=200000, n_items=1000, seed=0, output_dir='data'):
    """
    Write both corpus styles as raw byte files plus a cloze set.

    Files:
    - corpus_a.txt   lowercase style, the pretraining distribution
    - corpus_b.txt   uppercase style with a shifted chain, the distillation distribution
    - cloze_b.jsonl  two-choice items in style B
    """
    os.makedirs(output_dir, exist_ok=True)
    print(f"Generating {n_tokens:,} tokens per style (seed {seed})...")

    corpus_a = synth_corpus('A', n_tokens, seed)
    corpus_b = synth_corpus('B', n_tokens, seed + 1)
    paths = {}
    for name, corpus in (('corpus_a.txt', corpus_a), ('corpus_b.txt', corpus_b)):
        paths[name] = os.path.join(output_dir, name)
        with open(paths[name], 'wb') as f:
            f.write(detokenize(corpus.tokens))

    items = synth_cloze_set(n_items, seed + 2, style='B')
    cloze_path = os.path.join(output_dir, 'cloze_b.jsonl')
    save_cloze_set(items, cloze_path)

    print(f"\n✅ Sample corpora generated in: {output_dir}")
    print(f"\nCorpus statistics:")
    print(f"  • Tokens per style: {n_tokens:,}")
    print(f"  • Unigram TV distance A vs B: {unigram_tv_distance(corpus_a, corpus_b):.3f}")
    print(f"  • Cloze items: {len(items)} ({sum(i.label for i in items)} with label 1)")
    print(f"  • Sample (A): {detokenize(corpus_a.tokens[:60])!r}")
    print(f"  • Sample (B): {detokenize(corpus_b.tokens[:60])!r}")
    print(f"\n🔍 Now pretrain on a file corpus:")
    print(f"  python main.py pretrain --seed 1 --corpus {paths['corpus_a.txt']}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description='Generate sample corpora and cloze items')
    parser.add_argument('--tokens', type=int, default=200000)
    parser.add_argument('--items', type=int, default=1000)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--output', '-o', type=str, default='data')
    args = parser.parse_args()
    generate_sample_corpora(args.tokens, args.items, args.seed, args.output)
