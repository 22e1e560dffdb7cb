"""Negative-sampling strategies, evaluation candidate pools and bias audits.

Three closed strategies: `uniform_excluding` (the classic protocol: the
user's interacted items leave the pool), `uniform_all` (the de-biased
variant: every real item stays in), and `popularity` (P(i) proportional to
training-split frequency raised to alpha). Item id 0 (padding) is never
drawn. Sampling within a call is i.i.d. with replacement; evaluation pools
additionally dedup by redrawing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from seqrec.data import SequenceCorpus

STRATEGIES = ("uniform_excluding", "uniform_all", "popularity")


class SamplingError(Exception):
    pass


@dataclass
class SamplerSpec:
    strategy: str
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplingError(f"unknown strategy {self.strategy!r}")
        if self.alpha < 0:
            raise SamplingError("alpha must be >= 0")


def spec_rng(spec: SamplerSpec) -> np.random.Generator:
    return np.random.default_rng(spec.seed)


def user_rng(global_seed: int, user: int) -> np.random.Generator:
    """Stable per-user stream: seed derives from (global_seed, user)."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, user]))


def _popularity_weights(corpus: SequenceCorpus, alpha: float) -> np.ndarray:
    counts = corpus.train_item_counts()[1:].astype(np.float64)
    with np.errstate(divide="ignore"):
        w = counts ** alpha  # 0**0 == 1, so alpha=0 is uniform over all items
    total = w.sum()
    if total <= 0:
        raise SamplingError("popularity sampler needs a non-empty training "
                            "split")
    return w / total


def sample_negatives(user: int, count: int, spec: SamplerSpec,
                     corpus: SequenceCorpus, rng) -> np.ndarray:
    """`count` i.i.d. draws (with replacement) of real item ids."""
    if count < 1:
        raise SamplingError("count must be >= 1")
    n = corpus.n_items
    if spec.strategy == "uniform_all":
        return rng.integers(1, n + 1, size=count, dtype=np.int64)
    if spec.strategy == "popularity":
        w = _popularity_weights(corpus, spec.alpha)
        return rng.choice(np.arange(1, n + 1, dtype=np.int64), size=count,
                          replace=True, p=w)
    interacted = corpus.interacted(user)
    allowed = np.asarray([i for i in range(1, n + 1) if i not in interacted],
                         dtype=np.int64)
    if allowed.size == 0:
        raise SamplingError(f"user {user} interacted with every item; "
                            f"uniform_excluding has an empty pool")
    return allowed[rng.integers(0, allowed.size, size=count)]


def build_eval_candidates(user: int, ground_truth: int, count, spec: SamplerSpec,
                          corpus: SequenceCorpus, rng
                          ) -> tuple[np.ndarray, int]:
    """Candidate pool for ranking one held-out item. count="all" ranks every
    real item (no sampling artifact); an integer count draws that many
    negatives, deduplicated against each other and the truth by redrawing.
    Returns (candidates, index of the truth)."""
    n = corpus.n_items
    if not 1 <= ground_truth <= n:
        raise SamplingError("ground truth must be a real item id")
    if count == "all":
        cands = np.arange(1, n + 1, dtype=np.int64)
        return cands, ground_truth - 1
    count = int(count)
    if spec.strategy == "uniform_excluding":
        pool = set(range(1, n + 1)) - set(corpus.interacted(user))
    else:
        pool = set(range(1, n + 1))
    pool.discard(ground_truth)
    if len(pool) < count:
        raise SamplingError(f"cannot draw {count} distinct negatives from a "
                            f"pool of {len(pool)} items")
    seen: set[int] = set()
    negatives: list[int] = []
    while len(negatives) < count:
        draw = sample_negatives(user, count - len(negatives), spec, corpus,
                                rng)
        for item in draw:
            item = int(item)
            if item == ground_truth or item in seen:
                continue
            seen.add(item)
            negatives.append(item)
            if len(negatives) == count:
                break
    cands = np.asarray([ground_truth] + negatives, dtype=np.int64)
    return cands, 0


def target_distribution(spec: SamplerSpec, corpus: SequenceCorpus) -> np.ndarray:
    """The distribution a correct sampler should match, over item ids 1..n.
    For uniform_excluding this is the per-user exclusion distribution
    averaged over users (the audit draws users uniformly)."""
    n = corpus.n_items
    if spec.strategy == "uniform_all":
        return np.full(n, 1.0 / n)
    if spec.strategy == "popularity":
        return _popularity_weights(corpus, spec.alpha)
    users = corpus.users()
    marginal = np.zeros(n, dtype=np.float64)
    for u in users:
        interacted = corpus.interacted(u)
        allowed = n - len(interacted)
        if allowed == 0:
            raise SamplingError(f"user {u} interacted with every item")
        per = 1.0 / (allowed * len(users))
        for i in range(1, n + 1):
            if i not in interacted:
                marginal[i - 1] += per
    return marginal


def exclusion_skew(corpus: SequenceCorpus) -> float:
    """Total-variation distance between uniform_excluding's user-averaged
    marginal and the global uniform distribution: the bias the classic
    protocol bakes in."""
    spec = SamplerSpec("uniform_excluding")
    marginal = target_distribution(spec, corpus)
    uniform = np.full(corpus.n_items, 1.0 / corpus.n_items)
    return 0.5 * float(np.abs(marginal - uniform).sum())


@dataclass
class AuditReport:
    strategy: str
    alpha: float
    trials: int
    chi_square: float
    p_value: float
    tv_empirical: float
    exclusion_tv: float
    support_violations: int
    counts: np.ndarray = field(repr=False)

    def lines(self) -> list[str]:
        return [
            f"strategy = {self.strategy}",
            f"alpha = {self.alpha}",
            f"trials = {self.trials}",
            f"chi_square = {self.chi_square:.6f}",
            f"p_value = {self.p_value:.6g}",
            f"tv_empirical = {self.tv_empirical:.6f}",
            f"exclusion_tv = {self.exclusion_tv:.6f}",
            f"support_violations = {self.support_violations}",
        ]


def audit_sampler(spec: SamplerSpec, corpus: SequenceCorpus,
                  trials: int) -> AuditReport:
    """Draw `trials` negatives (each for a uniformly chosen user), compare
    the empirical item distribution against the strategy's target with a
    chi-square test, and report the exclusion-induced skew."""
    if trials < 10_000:
        raise SamplingError("audit needs at least 10^4 trials")
    rng = spec_rng(spec)
    n = corpus.n_items
    users = corpus.users()
    counts = np.zeros(n, dtype=np.int64)
    if spec.strategy == "uniform_excluding":
        picks = rng.integers(0, len(users), size=trials)
        for uidx in picks:
            item = sample_negatives(users[int(uidx)], 1, spec, corpus, rng)[0]
            counts[item - 1] += 1
    else:
        # user-independent strategies: one vectorized draw
        draws = sample_negatives(users[0], trials, spec, corpus, rng)
        np.add.at(counts, draws - 1, 1)

    target = target_distribution(spec, corpus)
    support = target > 0
    violations = int(counts[~support].sum())
    if violations:
        chi2, p = float("inf"), 0.0
    else:
        chi2, p = stats.chisquare(counts[support],
                                  f_exp=target[support] * trials)
        chi2, p = float(chi2), float(p)
    tv = 0.5 * float(np.abs(counts / trials - target).sum())
    return AuditReport(strategy=spec.strategy, alpha=spec.alpha,
                       trials=trials, chi_square=chi2, p_value=p,
                       tv_empirical=tv, exclusion_tv=exclusion_skew(corpus),
                       support_violations=violations, counts=counts)
