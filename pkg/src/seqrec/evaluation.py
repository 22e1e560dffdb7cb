"""Leave-one-out ranking metrics, autoregressive rollout and the
exposure-capped serving simulation.

Ranking ties break by ascending item id everywhere, so reports are
deterministic even for untrained models. Per-user randomness derives from
(seed, user), making evaluation order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from seqrec import model as mod
from seqrec import sampling
from seqrec.data import SequenceCorpus, pad_truncate


class EvalError(Exception):
    pass


@dataclass
class EvalProtocol:
    candidate_mode: str | int = "full"  # "full" or a sampled negative count
    ks: tuple[int, ...] = (1, 5, 10)
    split: str = "validation"

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if list(self.ks) != sorted(set(self.ks)):
            raise EvalError("Ks must be ascending and unique")
        if self.split not in ("validation", "test"):
            raise EvalError(f"unknown split {self.split!r}")
        if self.candidate_mode != "full":
            self.candidate_mode = int(self.candidate_mode)
            if self.candidate_mode < max(self.ks):
                raise EvalError("max K exceeds the candidate count")


def rank_of_truth(scores, candidate_ids, truth_index: int) -> int:
    """1-based rank of the truth among the candidates; ties broken by
    ascending candidate id."""
    scores = np.asarray(scores)
    ids = np.asarray(candidate_ids)
    if not 0 <= truth_index < len(scores):
        raise EvalError("truth_index out of range")
    s, i = scores[truth_index], ids[truth_index]
    better = (scores > s) | ((scores == s) & (ids < i))
    return int(better.sum()) + 1


def rank_metrics(scores, truth_index: int, ks, candidate_ids=None) -> dict:
    """HR@K (truth in the top K) and NDCG@K (1/log2(rank+1) inside the top
    K, single-relevant-item form) per cutoff."""
    scores = np.asarray(scores)
    if candidate_ids is None:
        candidate_ids = np.arange(1, len(scores) + 1)
    rank = rank_of_truth(scores, candidate_ids, truth_index)
    out = {}
    for k in ks:
        hit = 1.0 if rank <= k else 0.0
        out[int(k)] = (hit, hit / math.log2(rank + 1) if hit else 0.0)
    return out


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    split: str
    candidate_mode: str
    seed: int

    def lines(self) -> list[str]:
        out = [f"split = {self.split}",
               f"candidate_mode = {self.candidate_mode}",
               f"users_evaluated = {self.users_evaluated}"]
        for k in sorted(self.hr):
            out.append(f"hr@{k} = {self.hr[k]:.6f}")
            out.append(f"ndcg@{k} = {self.ndcg[k]:.6f}")
        return out


def eval_prefix(corpus: SequenceCorpus, user: int, split: str) -> list[int]:
    """Input sequence for ranking a user's held-out item. At test time the
    validation item joins the prefix (standard chained leave-one-out)."""
    prefix = list(corpus.train_sequence(user))
    if split == "test":
        prefix.append(corpus.valid_item(user))
    return prefix


def _grouped_final_hidden(prefixes: dict[int, list[int]], params,
                          config: mod.ModelConfig) -> dict[int, np.ndarray]:
    """Final-position hidden state per keyed prefix, batched by length.
    Prefixes longer than the positional table keep their most recent items."""
    by_len: dict[int, list[int]] = {}
    clipped = {}
    for key, prefix in prefixes.items():
        clip = prefix[-config.max_len:]
        clipped[key] = clip
        by_len.setdefault(len(clip), []).append(key)
    out: dict[int, np.ndarray] = {}
    for length in sorted(by_len):
        keys = by_len[length]
        if config.position_mode == "absolute-trick":
            rows = [pad_truncate(clipped[k], config.max_len) for k in keys]
        else:
            rows = [clipped[k] for k in keys]
        hidden = mod.final_hidden(np.asarray(rows, dtype=np.int64), params,
                                  config)
        for key, h in zip(keys, hidden):
            out[key] = h
    return out


def evaluate(params, config: mod.ModelConfig, corpus: SequenceCorpus,
             protocol: EvalProtocol, sampler_spec: sampling.SamplerSpec,
             seed: int) -> EvalReport:
    """Leave-one-out ranking over all eligible users; metrics are means."""
    users = corpus.eligible_users()
    if not users:
        raise EvalError("no users are eligible for evaluation")
    prefixes = {u: eval_prefix(corpus, u, protocol.split) for u in users}
    hidden = _grouped_final_hidden(prefixes, params, config)
    count = "all" if protocol.candidate_mode == "full" \
        else protocol.candidate_mode
    hr_sum = {k: 0.0 for k in protocol.ks}
    ndcg_sum = {k: 0.0 for k in protocol.ks}
    for u in users:
        truth = (corpus.valid_item(u) if protocol.split == "validation"
                 else corpus.test_item(u))
        cands, truth_idx = sampling.build_eval_candidates(
            u, truth, count, sampler_spec, corpus,
            sampling.user_rng(seed, u))
        scores = mod.score_items(hidden[u], cands, params)
        per_k = rank_metrics(scores, truth_idx, protocol.ks,
                             candidate_ids=cands)
        for k, (hit, gain) in per_k.items():
            hr_sum[k] += hit
            ndcg_sum[k] += gain
    n = len(users)
    return EvalReport(hr={k: v / n for k, v in hr_sum.items()},
                      ndcg={k: v / n for k, v in ndcg_sum.items()},
                      users_evaluated=n, split=protocol.split,
                      candidate_mode=str(protocol.candidate_mode), seed=seed)


# --- autoregressive rollout -------------------------------------------------

@dataclass
class DecodeSpec:
    kind: str = "greedy"  # greedy | top_k
    top_k: int = 1
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "top_k"):
            raise EvalError(f"unknown decode kind {self.kind!r}")
        if self.top_k < 1 or self.temperature <= 0:
            raise EvalError("top_k must be >= 1 and temperature positive")


def autoregressive_rollout(params, config: mod.ModelConfig, prefix,
                           horizon: int, decode: DecodeSpec) -> list[int]:
    """Feed the model its own predictions `horizon` times, scoring all real
    items each step. Already-generated items stay candidates (repeat
    consumption is legal)."""
    prefix = list(prefix)
    if horizon < 1 or not prefix:
        raise EvalError("need a non-empty prefix and horizon >= 1")
    if len(prefix) + horizon > config.max_len:
        raise EvalError(f"prefix {len(prefix)} + horizon {horizon} exceeds "
                        f"the positional table max_len={config.max_len}")
    n = params["item_table"].shape[0] - 1
    all_items = np.arange(1, n + 1, dtype=np.int64)
    rng = np.random.default_rng(decode.seed)
    current = prefix
    generated: list[int] = []
    for _ in range(horizon):
        if config.position_mode == "absolute-trick":
            rows = [pad_truncate(current, config.max_len)]
        else:
            rows = [current]
        hidden = mod.final_hidden(np.asarray(rows, dtype=np.int64), params,
                                  config)[0]
        scores = mod.score_items(hidden, all_items, params)
        if decode.kind == "greedy" or decode.top_k == 1:
            pick = int(all_items[np.argmax(scores)])  # argmax: lowest id wins ties
        else:
            order = np.lexsort((all_items, -scores))[:decode.top_k]
            top_scores = scores[order] / decode.temperature
            top_scores -= top_scores.max()
            probs = np.exp(top_scores)
            probs /= probs.sum()
            pick = int(all_items[order][rng.choice(decode.top_k, p=probs)])
        generated.append(pick)
        current = current + [pick]
    return generated


@dataclass
class RolloutReport:
    horizon: int
    per_step_recall: list[float]
    set_recall: float
    exact_prefix: int

    def lines(self) -> list[str]:
        steps = " ".join(f"{r:.0f}" for r in self.per_step_recall)
        return [f"horizon = {self.horizon}",
                f"per_step_recall = {steps}",
                f"set_recall = {self.set_recall:.6f}",
                f"exact_prefix = {self.exact_prefix}"]


def rollout_metrics(generated, hidden_suffix) -> RolloutReport:
    """Compare a generated trajectory against the hidden suffix: per-step
    exact matches, set overlap, and the longest fully-correct prefix."""
    generated = list(generated)
    suffix = list(hidden_suffix)
    if len(generated) != len(suffix):
        raise EvalError("generated and hidden suffix lengths differ")
    h = len(suffix)
    per_step = [1.0 if g == s else 0.0 for g, s in zip(generated, suffix)]
    set_recall = len(set(generated) & set(suffix)) / h
    exact = 0
    for hit in per_step:
        if hit != 1.0:
            break
        exact += 1
    return RolloutReport(horizon=h, per_step_recall=per_step,
                         set_recall=set_recall, exact_prefix=exact)


# --- exposure-capped serving ------------------------------------------------

def gini_coefficient(x) -> float:
    """Inequality of exposure counts; 0 for perfectly equal exposure."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.sum() == 0:
        return 0.0
    diff = np.abs(x[:, None] - x[None, :]).sum()
    return float(diff / (2.0 * x.size * x.sum()))


@dataclass
class ExposureReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    users_served: int
    users_empty: int
    exposure_gini: float
    exhausted_fraction: float
    budget_factor: float
    provenance: str
    exposures: np.ndarray = field(repr=False)

    def lines(self) -> list[str]:
        out = [f"budget_factor = {self.budget_factor}",
               f"provenance = {self.provenance}",
               f"users_served = {self.users_served}",
               f"users_empty = {self.users_empty}",
               f"exposure_gini = {self.exposure_gini:.6f}",
               f"exhausted_fraction = {self.exhausted_fraction:.6f}"]
        for k in sorted(self.hr):
            out.append(f"hr@{k} = {self.hr[k]:.6f}")
            out.append(f"ndcg@{k} = {self.ndcg[k]:.6f}")
        return out


def provenance_counts(corpus: SequenceCorpus, mode: str) -> np.ndarray:
    """Per-item provenance proxy (ids 1..n). `first_user`: the interaction
    count of the item's first-ever user; `popularity`: the item's own
    training count. Floored at 1 so unbounded budgets never bind."""
    n = corpus.n_items
    counts = np.ones(n, dtype=np.int64)
    if mode == "popularity":
        counts = np.maximum(corpus.train_item_counts()[1:], 1)
    elif mode == "first_user":
        for item, user in corpus.first_user.items():
            counts[item - 1] = max(1, len(corpus.train_sequence(user)))
    else:
        raise EvalError(f"unknown provenance mode {mode!r}")
    return counts


def exposure_capped_recommend(params, config: mod.ModelConfig,
                              corpus: SequenceCorpus, budget_factor: float,
                              ks, seed: int, split: str = "test",
                              provenance: str = "first_user"
                              ) -> ExposureReport:
    """Serve eligible users in seeded random order; each sees the top
    max(K) items among those with remaining budget. budget(i) is
    ceil(budget_factor * provenance_count(i)); every placement decrements.
    Reports capped HR/NDCG, the exposure Gini and the exhausted fraction."""
    if budget_factor <= 0:
        raise EvalError("budget_factor must be positive")
    ks = tuple(sorted(int(k) for k in ks))
    users = corpus.eligible_users()
    if not users:
        raise EvalError("no users are eligible for serving")
    n = corpus.n_items
    prov = provenance_counts(corpus, provenance)
    budgets = np.ceil(budget_factor * prov).astype(np.int64)
    exposures = np.zeros(n, dtype=np.int64)
    list_len = max(ks)

    prefixes = {u: eval_prefix(corpus, u, split) for u in users}
    hidden = _grouped_final_hidden(prefixes, params, config)
    order = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    served_users = [users[i] for i in order.permutation(len(users))]

    all_items = np.arange(1, n + 1, dtype=np.int64)
    per_user_rank: dict[int, int] = {}
    users_empty = 0
    for u in served_users:
        scores = mod.score_items(hidden[u], all_items, params)
        ranked = np.lexsort((all_items, -scores))
        available = ranked[budgets[ranked] > 0]
        top = available[:list_len]
        if top.size == 0:
            users_empty += 1
            per_user_rank[u] = list_len + 1
            continue
        budgets[top] -= 1
        exposures[top] += 1
        truth = (corpus.valid_item(u) if split == "validation"
                 else corpus.test_item(u))
        served_ids = all_items[top]
        where = np.nonzero(served_ids == truth)[0]
        per_user_rank[u] = int(where[0]) + 1 if where.size else list_len + 1
    # aggregate in canonical user order so serve order never moves the mean
    hr_sum = {k: 0.0 for k in ks}
    ndcg_sum = {k: 0.0 for k in ks}
    for u in sorted(per_user_rank):
        rank = per_user_rank[u]
        for k in ks:
            if rank <= k:
                hr_sum[k] += 1.0
                ndcg_sum[k] += 1.0 / math.log2(rank + 1)
    n_users = len(served_users)
    return ExposureReport(
        hr={k: v / n_users for k, v in hr_sum.items()},
        ndcg={k: v / n_users for k, v in ndcg_sum.items()},
        users_served=n_users, users_empty=users_empty,
        exposure_gini=gini_coefficient(exposures),
        exhausted_fraction=float((budgets == 0).mean()),
        budget_factor=budget_factor, provenance=provenance,
        exposures=exposures)
