"""Training loop: weighted binary cross-entropy on sampled negatives, Adam,
optional history-confidence loss weighting, over either batching regime.

relative-exact: every prefix is one example in a length bucket and trains a
single prediction carrying the right positional indices. absolute-trick: one
causally-packed pass per sequence trains all internal predictions at the
positions fixed by the full-sequence layout (the baseline behaviour).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from seqrec import model as mod
from seqrec import numcore as nc
from seqrec import sampling
from seqrec.data import (
    PAD_ID,
    SequenceCorpus,
    bucket_batches,
    make_prefix_examples,
    pad_truncate,
)
from seqrec.evaluation import EvalProtocol, EvalReport, evaluate, rank_of_truth

WEIGHTING_MODES = ("off", "history_confidence")


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 128
    weighting_mode: str = "off"
    duality_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise TrainingError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise TrainingError(f"unknown weighting_mode "
                                f"{self.weighting_mode!r}")
        if self.duality_lambda < 0:
            raise TrainingError("duality_lambda must be >= 0")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "weighting_mode": self.weighting_mode,
                "duality_lambda": self.duality_lambda, "seed": self.seed}


def _rowdot(a: nc.Tensor, b: nc.Tensor) -> nc.Tensor:
    """Row-wise dot product of two (N, d) tensors -> (N,)."""
    n, d = a.shape
    ones = nc.Tensor(np.ones((d, 1), dtype=a.dtype))
    return nc.reshape(nc.matmul(nc.multiply(a, b), ones), (n,))


def bce_loss(pos_logits: nc.Tensor, neg_logits: nc.Tensor,
             weights=None) -> nc.Tensor:
    """Per prediction: w * (-log sigmoid(pos) - log(1 - sigmoid(neg))),
    normalized by the weight sum. Stable for |logit| up to 80."""
    n = pos_logits.shape[0]
    if neg_logits.shape[0] != n:
        raise TrainingError("positive and negative counts differ")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    both = nc.concat_rows([pos_logits, neg_logits])
    labels = np.concatenate([np.ones(n), np.zeros(n)]).astype(
        pos_logits.dtype)
    w2 = np.concatenate([w, w]).astype(pos_logits.dtype)
    return nc.scale(nc.logistic_bce(both, labels, w2), 2.0)


class AdamState:
    """Per-parameter first/second moments and step counters. Counters are
    per parameter so phases that touch a parameter subset (duality) keep
    correct bias correction."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adam_step(params: dict[str, nc.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig,
              rezero_padding: bool = True) -> None:
    """In-place bias-corrected Adam over the parameters named in `grads`.
    Non-finite gradients abort the step. In corrected padding mode the item
    table's padding row is forced back to zero afterwards."""
    from seqrec.backend import kernels

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name!r}; "
                                f"step aborted")
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        kernels.adam_update(p.data.reshape(-1),
                            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                            state.m[name].reshape(-1),
                            state.v[name].reshape(-1),
                            config.learning_rate, config.beta1, config.beta2,
                            config.epsilon, state.t[name])
        if not np.isfinite(p.data).all():
            raise TrainingError(f"non-finite parameter {name!r} after step")
    if rezero_padding and "item_table" in grads:
        params["item_table"].data[PAD_ID] = 0.0


def named_grads(params: dict[str, nc.Tensor],
                grads_by_tensor: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, t in params.items():
        if t in grads_by_tensor:
            out[name] = grads_by_tensor[t]
    return out


def _epoch_rng(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def _epoch_seed(seed: int, tag: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, tag, epoch]).generate_state(1)[0])


def confidence_weights(params, config: mod.ModelConfig,
                       corpus: SequenceCorpus, user: int, prefix,
                       global_seed: int) -> float:
    """Weight for predicting the item after `prefix`: mean reciprocal rank
    of each known next item among truth + 100 uniform_all negatives, scored
    with frozen params. Length-1 prefixes get weight 1."""
    k = len(prefix)
    if k < 2:
        return 1.0
    spec = sampling.SamplerSpec("uniform_all")
    rng = sampling.user_rng(global_seed, user)
    rr = []
    for j in range(1, k):
        sub = np.asarray([prefix[:j]], dtype=np.int64)
        if config.position_mode == "absolute-trick":
            sub = np.asarray([pad_truncate(list(prefix[:j]), config.max_len)],
                             dtype=np.int64)
        hidden = mod.final_hidden(sub, params, config)[0]
        cands, truth_idx = sampling.build_eval_candidates(
            user, prefix[j], min(100, corpus.n_items - 1), spec, corpus, rng)
        scores = mod.score_items(hidden, cands, params)
        rr.append(1.0 / rank_of_truth(scores, cands, truth_idx))
    return float(np.mean(rr))


def rescale_to_mean_one(weights: np.ndarray) -> np.ndarray:
    """Batch weights keep mean 1 so weighting never changes the effective
    learning rate."""
    mean = weights.mean()
    if mean <= 0:
        raise TrainingError("weights must have positive mean")
    return weights / mean


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    examples: int
    predictions: int
    wall_clock: float
    validation: EvalReport | None = None

    def log_line(self) -> str:
        parts = [f"epoch = {self.epoch}", f"mean_loss = {self.mean_loss:.6f}",
                 f"examples = {self.examples}",
                 f"predictions = {self.predictions}",
                 f"wall_clock = {self.wall_clock:.3f}"]
        if self.validation is not None:
            for k in sorted(self.validation.hr):
                parts.append(f"valid_hr@{k} = {self.validation.hr[k]:.6f}")
        return " | ".join(parts)


def _batch_loss_bucketed(batch, params, config, train_config, sampler_spec,
                         corpus, neg_rng, drop_rng, global_seed):
    items = batch.item_matrix()
    targets = batch.targets()
    n_ex = len(batch.examples)
    negatives = np.asarray([
        sampling.sample_negatives(ex.user, 1, sampler_spec, corpus,
                                  neg_rng)[0]
        for ex in batch.examples], dtype=np.int64)
    if train_config.weighting_mode == "history_confidence":
        raw = np.asarray([
            confidence_weights(params, config, corpus, ex.user, ex.prefix,
                               global_seed)
            for ex in batch.examples])
        weights = rescale_to_mean_one(raw)
    else:
        weights = None
    with nc.Tape() as tape:
        hidden = mod.encode(items, params, config,
                            train=config.dropout_keep < 1.0, rng=drop_rng)
        final = mod.select_positions(hidden,
                                     np.full(n_ex, batch.prefix_length - 1))
        pos_e = nc.embedding_gather(params["item_table"], targets)
        neg_e = nc.embedding_gather(params["item_table"], negatives)
        loss = bce_loss(_rowdot(final, pos_e), _rowdot(final, neg_e), weights)
    grads = nc.backward(tape, loss)
    return float(loss.data), n_ex, named_grads(params, grads)


def _batch_loss_packed(batch, params, config, train_config, sampler_spec,
                       corpus, neg_rng, drop_rng, global_seed):
    """Whole-sequence batch: the causal pack trains every internal
    prediction with one positional assignment (the baseline trick)."""
    window = config.max_len
    rows, target_rows, weight_rows = [], [], []
    for ex in batch.examples:
        inputs = list(ex.prefix)
        targets = list(ex.prefix[1:]) + [ex.target]
        inputs, targets = inputs[-window:], targets[-window:]
        pad = window - len(inputs)
        rows.append([PAD_ID] * pad + inputs)
        target_rows.append([PAD_ID] * pad + targets)
        w = [0.0] * pad + [1.0] * len(inputs)
        if train_config.weighting_mode == "history_confidence":
            for slot in range(len(inputs)):
                w[pad + slot] = confidence_weights(
                    params, config, corpus, ex.user,
                    tuple(inputs[:slot + 1]), global_seed)
        weight_rows.append(w)
    items = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(target_rows, dtype=np.int64)
    weights = np.asarray(weight_rows, dtype=np.float64)
    valid = targets.reshape(-1) != PAD_ID
    if train_config.weighting_mode == "history_confidence":
        flat = weights.reshape(-1)
        flat[valid] = rescale_to_mean_one(flat[valid])
        weights = flat.reshape(weights.shape)
    negatives = np.zeros_like(targets)
    flat_neg = negatives.reshape(-1)
    users = np.repeat([ex.user for ex in batch.examples], window)
    for i in np.nonzero(valid)[0]:
        flat_neg[i] = sampling.sample_negatives(int(users[i]), 1,
                                                sampler_spec, corpus,
                                                neg_rng)[0]
    # gathering id 0 at padded slots is harmless: their weight is zero
    n_pred = int(valid.sum())
    b = items.shape[0]
    with nc.Tape() as tape:
        hidden = mod.encode(items, params, config,
                            train=config.dropout_keep < 1.0, rng=drop_rng)
        flat_h = nc.reshape(hidden, (b * window, config.d))
        pos_e = nc.embedding_gather(params["item_table"], targets.reshape(-1))
        neg_e = nc.embedding_gather(params["item_table"],
                                    negatives.reshape(-1))
        loss = bce_loss(_rowdot(flat_h, pos_e), _rowdot(flat_h, neg_e),
                        weights.reshape(-1))
    grads = nc.backward(tape, loss)
    return float(loss.data), n_pred, named_grads(params, grads)


def train_epoch(corpus: SequenceCorpus, params, config: mod.ModelConfig,
                train_config: TrainConfig, sampler_spec: sampling.SamplerSpec,
                opt_state: AdamState, epoch: int) -> EpochReport:
    """One pass over all training examples of the configured regime."""
    start = time.perf_counter()
    seed = train_config.seed
    examples = list(make_prefix_examples(corpus, config.position_mode))
    if config.position_mode == "relative-exact":
        longest = max((len(e.prefix) for e in examples), default=0)
        if longest > config.max_len:
            raise TrainingError(f"longest training prefix {longest} exceeds "
                                f"max_len={config.max_len}")
    batches = bucket_batches(examples, train_config.batch_size,
                             seed=_epoch_seed(seed, 11, epoch))
    neg_rng = _epoch_rng(seed, 22, epoch)
    drop_rng = _epoch_rng(seed, 33, epoch)
    loss_fn = (_batch_loss_bucketed if config.position_mode == "relative-exact"
               else _batch_loss_packed)
    total_loss = 0.0
    total_preds = 0
    total_examples = 0
    rezero = config.padding_mode == "corrected"
    for batch in batches:
        loss, n_pred, grads = loss_fn(batch, params, config, train_config,
                                      sampler_spec, corpus, neg_rng, drop_rng,
                                      seed)
        adam_step(params, grads, opt_state, train_config,
                  rezero_padding=rezero)
        total_loss += loss * n_pred
        total_preds += n_pred
        total_examples += len(batch.examples)
    wall = time.perf_counter() - start
    mean = total_loss / total_preds if total_preds else float("nan")
    return EpochReport(epoch=epoch, mean_loss=mean, examples=total_examples,
                       predictions=total_preds, wall_clock=wall)


@dataclass
class TrainReport:
    epochs: list[EpochReport] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None


def train(corpus: SequenceCorpus, params, config: mod.ModelConfig,
          train_config: TrainConfig, sampler_spec: sampling.SamplerSpec,
          validate_with: EvalProtocol | None = None,
          on_epoch=None) -> TrainReport:
    """Full training run. With a validation protocol, each epoch gets a
    metric snapshot and the best epoch is tracked (largest HR at the
    smallest cutoff). on_epoch(report, params) fires after every epoch."""
    state = AdamState()
    report = TrainReport()
    for epoch in range(train_config.epochs):
        ep = train_epoch(corpus, params, config, train_config, sampler_spec,
                         state, epoch)
        if validate_with is not None and corpus.eligible_users():
            ep.validation = evaluate(params, config, corpus, validate_with,
                                     sampler_spec,
                                     seed=_epoch_seed(train_config.seed, 44,
                                                      epoch))
            key = min(ep.validation.hr)
            metric = ep.validation.hr[key]
            if report.best_metric is None or metric > report.best_metric:
                report.best_metric = metric
                report.best_epoch = epoch
        report.epochs.append(ep)
        if on_epoch is not None:
            on_epoch(ep, params)
    return report
