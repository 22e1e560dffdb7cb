"""Synthetic interaction generators for overfit oracles and null checks.

The cycle corpus has a deterministic successor item (every sequence is a
rotation of one global cycle), so a working model must reach HR@1 ~ 1 and a
greedy rollout must reproduce the cycle. The Markov corpus gives a
non-degenerate null for untrained-model sanity checks.
"""

from __future__ import annotations

import numpy as np

from seqrec.data import InteractionLog, SequenceCorpus, build_sequences, parse_interactions


def cycle_lines(n_items: int = 20, n_users: int = 200,
                length: int = 15) -> list[str]:
    """User u walks the item cycle starting at offset u mod n_items."""
    lines = []
    for u in range(n_users):
        offset = u % n_items
        for t in range(length):
            lines.append(f"u{u} i{(offset + t) % n_items} {t}")
    return lines


def rotation_lines(n: int = 30, length: int = 12) -> list[str]:
    """n users and n items, user j starting at item j: every item is visited
    by users in a fixed rotation, so the next user of an item is
    deterministic too (the duality overfit oracle)."""
    return cycle_lines(n_items=n, n_users=n, length=length)


def markov_lines(n_items: int = 50, n_users: int = 250, length: int = 10,
                 seed: int = 0) -> list[str]:
    """Sequences from one random first-order Markov chain over the items."""
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.ones(n_items), size=n_items)
    lines = []
    for u in range(n_users):
        state = int(rng.integers(0, n_items))
        for t in range(length):
            lines.append(f"u{u} i{state} {t}")
            state = int(rng.choice(n_items, p=trans[state]))
    return lines


def corpus_from_lines(lines: list[str]) -> tuple[InteractionLog, SequenceCorpus]:
    log = parse_interactions(lines)
    return log, build_sequences(log)


def uniform_symbol_sequences(vocab: int, total_symbols: int, seq_len: int = 100,
                             seed: int = 0) -> list[list[int]]:
    """I.i.d. uniform symbols split into sequences; unigram entropy must be
    log2(vocab) in the limit."""
    rng = np.random.default_rng(seed)
    symbols = rng.integers(0, vocab, size=total_symbols)
    return [symbols[i:i + seq_len].tolist()
            for i in range(0, total_symbols, seq_len)]


def cycle_symbol_sequences(vocab: int, total_symbols: int,
                           seq_len: int = 100) -> list[list[int]]:
    """Deterministic cycle a->b->c->...->a: bigram conditional entropy 0."""
    out = []
    pos = 0
    while pos < total_symbols:
        n = min(seq_len, total_symbols - pos)
        out.append([(pos + j) % vocab for j in range(n)])
        pos += n
    return out
