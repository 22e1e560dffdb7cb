"""Corpus statistics for comparing item-id sequences against token
sequences: entropies, Zipf slope, bigram sparsity, repetition and coverage.

Sequences are any iterables of hashable symbols; bigrams never cross
sequence boundaries. Token corpora arrive pre-tokenized (one symbol per
whitespace split).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


class StatsError(Exception):
    pass


@dataclass
class StatsReport:
    vocab_size: int
    total_symbols: int
    unigram_entropy: float
    bigram_conditional_entropy: float
    zipf_exponent: float
    singleton_bigram_fraction: float
    repetition_rate: float
    coverage_50: int
    coverage_90: int
    coverage_99: int

    def lines(self) -> list[str]:
        return [
            f"vocab_size = {self.vocab_size}",
            f"total_symbols = {self.total_symbols}",
            f"unigram_entropy = {self.unigram_entropy:.6f}",
            f"bigram_conditional_entropy = "
            f"{self.bigram_conditional_entropy:.6f}",
            f"zipf_exponent = {self.zipf_exponent:.6f}",
            f"singleton_bigram_fraction = "
            f"{self.singleton_bigram_fraction:.6f}",
            f"repetition_rate = {self.repetition_rate:.6f}",
            f"coverage_50 = {self.coverage_50}",
            f"coverage_90 = {self.coverage_90}",
            f"coverage_99 = {self.coverage_99}",
        ]


def _entropy_bits(counts, total) -> float:
    out = 0.0
    for c in counts:
        p = c / total
        if 0.0 < p < 1.0:
            out -= p * math.log2(p)
    return out


def _zipf_exponent(counts: Counter) -> float:
    """Least-squares slope of log frequency vs log rank over the symbols
    carrying the top 80% of mass (the noisy tail is excluded); returned as
    the positive exponent s in freq ~ rank^-s."""
    freqs = sorted(counts.values(), reverse=True)
    total = sum(freqs)
    kept = []
    mass = 0
    for f in freqs:
        kept.append(f)
        mass += f
        if mass >= 0.8 * total:
            break
    if len(kept) < 2:
        return 0.0
    xs = [math.log(r) for r in range(1, len(kept) + 1)]
    ys = [math.log(f) for f in kept]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    denom = sum((x - mx) ** 2 for x in xs)
    if denom == 0.0:
        return 0.0
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / denom
    return -slope


def _coverage(counts: Counter, total: int, quantile: float) -> int:
    need = quantile * total
    got = 0
    for rank, (_, c) in enumerate(counts.most_common(), start=1):
        got += c
        if got >= need:
            return rank
    return len(counts)


def corpus_statistics(sequences) -> StatsReport:
    """Single pass over a sequence collection; see StatsReport fields."""
    unigrams: Counter = Counter()
    bigrams: Counter = Counter()
    repeats = 0
    adjacent = 0
    for seq in sequences:
        seq = list(seq)
        unigrams.update(seq)
        for a, b in zip(seq, seq[1:]):
            bigrams[(a, b)] += 1
            adjacent += 1
            if a == b:
                repeats += 1
    total = sum(unigrams.values())
    if total == 0:
        raise StatsError("empty corpus")
    h_unigram = _entropy_bits(unigrams.values(), total)

    # H(next | current) = H(bigram) - H(context marginal), computed directly
    # over observed bigrams so deterministic successors give exactly 0
    h_cond = 0.0
    if adjacent:
        context_totals: Counter = Counter()
        for (a, _), c in bigrams.items():
            context_totals[a] += c
        for (a, _), c in bigrams.items():
            p_pair = c / adjacent
            p_next = c / context_totals[a]
            if p_next < 1.0:
                h_cond -= p_pair * math.log2(p_next)

    singleton = (sum(1 for c in bigrams.values() if c == 1) / len(bigrams)
                 if bigrams else 0.0)
    return StatsReport(
        vocab_size=len(unigrams),
        total_symbols=total,
        unigram_entropy=h_unigram,
        bigram_conditional_entropy=h_cond,
        zipf_exponent=_zipf_exponent(unigrams),
        singleton_bigram_fraction=singleton,
        repetition_rate=repeats / adjacent if adjacent else 0.0,
        coverage_50=_coverage(unigrams, total, 0.50),
        coverage_90=_coverage(unigrams, total, 0.90),
        coverage_99=_coverage(unigrams, total, 0.99),
    )


def token_sequences_from_text(text: str) -> list[list[str]]:
    """One sequence per line, one symbol per whitespace split."""
    return [line.split() for line in text.splitlines() if line.split()]


def _ratio(a: float, b: float) -> str:
    if b == 0.0:
        return "undefined" if a == 0.0 else "infinite"
    return f"{a / b:.6f}"


@dataclass
class ComparisonReport:
    entropy_ratio: str
    conditional_entropy_ratio: str
    vocab_ratio: str
    singleton_bigram_ratio: str
    sparsity_verdict: str
    side_by_side: list[str]

    def lines(self) -> list[str]:
        out = [f"entropy_ratio = {self.entropy_ratio}",
               f"conditional_entropy_ratio = {self.conditional_entropy_ratio}",
               f"vocab_ratio = {self.vocab_ratio}",
               f"singleton_bigram_ratio = {self.singleton_bigram_ratio}",
               f"sparsity_verdict = {self.sparsity_verdict}"]
        out.extend(self.side_by_side)
        return out


def compare_corpora(report_a: StatsReport,
                    report_b: StatsReport) -> ComparisonReport:
    """Side-by-side table, ratios (a over b) and a one-line sparsity verdict:
    the corpus with the higher singleton-bigram fraction is sparser."""
    fa, fb = report_a.singleton_bigram_fraction, report_b.singleton_bigram_fraction
    if fa > fb:
        verdict = "a_sparser"
    elif fb > fa:
        verdict = "b_sparser"
    else:
        verdict = "equal"
    table = []
    for key, x, y in zip(
            ("vocab_size", "total_symbols", "unigram_entropy",
             "bigram_conditional_entropy", "zipf_exponent",
             "singleton_bigram_fraction", "repetition_rate"),
            (report_a.vocab_size, report_a.total_symbols,
             report_a.unigram_entropy, report_a.bigram_conditional_entropy,
             report_a.zipf_exponent, report_a.singleton_bigram_fraction,
             report_a.repetition_rate),
            (report_b.vocab_size, report_b.total_symbols,
             report_b.unigram_entropy, report_b.bigram_conditional_entropy,
             report_b.zipf_exponent, report_b.singleton_bigram_fraction,
             report_b.repetition_rate)):
        table.append(f"{key} = {x} | {y}")
    return ComparisonReport(
        entropy_ratio=_ratio(report_a.unigram_entropy,
                             report_b.unigram_entropy),
        conditional_entropy_ratio=_ratio(
            report_a.bigram_conditional_entropy,
            report_b.bigram_conditional_entropy),
        vocab_ratio=_ratio(report_a.vocab_size, report_b.vocab_size),
        singleton_bigram_ratio=_ratio(fa, fb),
        sparsity_verdict=verdict,
        side_by_side=table)
