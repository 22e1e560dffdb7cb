"""User/item duality: represent each item by the time-ordered sequence of
users who interacted with it, encode a high-order item embedding from frozen
user embeddings, tie it to the item's own embedding with a cosine
consistency term, and optionally train next-user prediction on the inverted
corpus.

Phases alternate: one primary epoch, freeze, refresh user embeddings, one
duality pass (consistency on a sampled item subset), repeat. Freezing the
user embeddings keeps the objective well defined; gradients reach the dual
encoder and the item table only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from seqrec import model as mod
from seqrec import numcore as nc
from seqrec import sampling, training
from seqrec.data import InteractionLog, SequenceCorpus
from seqrec.evaluation import rank_of_truth


class DualityError(Exception):
    pass


def training_records(log: InteractionLog) -> list[tuple[int, int, int, int]]:
    """(user, item, ts, file_index) for training-split interactions only:
    each user's records in stable time order minus the held-out last two
    (when the user is eligible)."""
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for idx, (user, item, ts) in enumerate(log.records):
        per_user.setdefault(user, []).append((ts, idx, item))
    out = []
    for user in sorted(per_user):
        recs = sorted(per_user[user], key=lambda r: (r[0], r[1]))
        keep = recs[:-2] if len(recs) >= 3 else recs
        out.extend((user, item, ts, idx) for ts, idx, item in keep)
    return out


def invert_records(records) -> list[tuple[int, int, int, int]]:
    """Swap the roles of user and item, keeping time and file order."""
    return [(item, user, ts, idx) for (user, item, ts, idx) in records]


def sequences_from_records(records, n_keys: int,
                           n_values: int) -> SequenceCorpus:
    """Per-key value sequences in (ts, file order); reuses SequenceCorpus so
    leave-one-out machinery applies to inverted data unchanged (n_items is
    the target vocabulary: users, for an inverted corpus)."""
    per_key: dict[int, list[tuple[int, int, int]]] = {}
    for key, value, ts, idx in records:
        per_key.setdefault(key, []).append((ts, idx, value))
    sequences = {}
    for key, entries in per_key.items():
        entries.sort(key=lambda r: (r[0], r[1]))
        sequences[key] = [value for _, _, value in entries]
    return SequenceCorpus(sequences, n_users=n_keys, n_items=n_values)


def invert_corpus(log: InteractionLog) -> SequenceCorpus:
    """Per-item time-ordered user sequences T_i over training interactions
    (held-out validation/test interactions excluded)."""
    recs = invert_records(training_records(log))
    return sequences_from_records(recs, n_keys=log.n_items,
                                  n_values=log.n_users)


def user_embedding(user: int, params, config: mod.ModelConfig,
                   corpus: SequenceCorpus) -> np.ndarray:
    """Final-position hidden state of the user's training prefix under the
    frozen primary encoder, relative-exact positions, dropout off."""
    prefix = corpus.train_sequence(user)
    if not prefix:
        raise DualityError(f"user {user} has an empty training sequence")
    rel = mod.ModelConfig(**{**config.to_dict(),
                             "position_mode": "relative-exact",
                             "dropout_keep": 1.0})
    clip = prefix[-config.max_len:]
    return mod.final_hidden(np.asarray([clip], dtype=np.int64), params,
                            rel)[0]


def refresh_user_embeddings(corpus: SequenceCorpus, params,
                            config: mod.ModelConfig) -> np.ndarray:
    """(m+1, d) matrix of frozen user embeddings, batched by prefix length;
    row 0 stays zero (no user 0)."""
    rel = mod.ModelConfig(**{**config.to_dict(),
                             "position_mode": "relative-exact",
                             "dropout_keep": 1.0})
    m = corpus.n_users
    out = np.zeros((m + 1, config.d), dtype=params["item_table"].dtype)
    by_len: dict[int, list[int]] = {}
    for u in corpus.users():
        prefix = corpus.train_sequence(u)
        if prefix:
            by_len.setdefault(len(prefix[-config.max_len:]), []).append(u)
    for length in sorted(by_len):
        users = by_len[length]
        rows = [corpus.train_sequence(u)[-config.max_len:] for u in users]
        hidden = mod.final_hidden(np.asarray(rows, dtype=np.int64), params,
                                  rel)
        for u, h in zip(users, hidden):
            out[u] = h
    return out


def init_dual_params(config: mod.ModelConfig, n_users: int, rng,
                     dtype=np.float32) -> dict[str, nc.Tensor]:
    """Dual encoder: same block structure, no input item table; plus the
    user table used only as the next-user prediction head."""
    template = mod.init_params(config, n_items=0, rng=rng, dtype=dtype)
    del template["item_table"]
    user_table = rng.uniform(-0.02, 0.02, size=(n_users + 1, config.d))
    template["user_table"] = nc.Tensor(user_table.astype(dtype),
                                       requires_grad=True, name="user_table")
    return template


def encode_user_sequences(user_rows: np.ndarray, user_embs: np.ndarray,
                          dual_params, dual_config: mod.ModelConfig,
                          train: bool = False, rng=None) -> nc.Tensor:
    """Dual encoder over (B, k) user-id rows; input vectors are frozen user
    embeddings plus the dual positional table (most recent user = index 1)."""
    user_rows = np.asarray(user_rows, dtype=np.int64)
    batch, k = user_rows.shape
    positions = mod.assign_positions(k, "relative-exact", dual_config.max_len)
    frozen = nc.Tensor(user_embs)  # requires_grad False: no gradient flows
    x = nc.embedding_gather(frozen, user_rows)
    pos = nc.embedding_gather(dual_params["pos_table"],
                              np.broadcast_to(positions - 1, user_rows.shape))
    return mod.run_blocks(nc.add(x, pos), dual_params, dual_config,
                          train=train, rng=rng)


def high_order_item_embedding(item: int, inverted: SequenceCorpus,
                              user_embs: np.ndarray, dual_params,
                              dual_config: mod.ModelConfig) -> np.ndarray:
    """Encode the item's user sequence (most recent max_len users) and take
    the final-position hidden state."""
    seq = inverted.sequences.get(item)
    if not seq:
        raise DualityError(f"item {item} was never interacted with")
    clip = seq[-dual_config.max_len:]
    hidden = encode_user_sequences(np.asarray([clip]), user_embs, dual_params,
                                   dual_config)
    return hidden.data[0, -1, :]


def consistency_loss(i_hat: nc.Tensor, e_items: nc.Tensor) -> nc.Tensor:
    """Mean over rows of 1 - cosine(i_hat, e_i); in [0, 2]."""
    cos = nc.cosine_rows(i_hat, e_items)
    ones = nc.Tensor(np.ones(cos.shape, dtype=cos.dtype))
    return nc.reduce_mean(nc.add(nc.scale(cos, -1.0), ones))


def duality_pass(inverted: SequenceCorpus, user_embs: np.ndarray, params,
                 dual_params, dual_config: mod.ModelConfig,
                 train_config: training.TrainConfig,
                 primary_state: training.AdamState,
                 dual_state: training.AdamState, epoch: int,
                 rezero_padding: bool, max_items: int = 1024) -> float:
    """One consistency pass over a seeded item subset. Returns the mean
    consistency value (before the duality_lambda factor)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([train_config.seed, 55, epoch]))
    items = [i for i in inverted.users() if inverted.sequences[i]]
    if len(items) > max_items:
        items = [items[j] for j in rng.choice(len(items), size=max_items,
                                              replace=False)]
    by_len: dict[int, list[int]] = {}
    for i in items:
        clip_len = len(inverted.sequences[i][-dual_config.max_len:])
        by_len.setdefault(clip_len, []).append(i)
    total, count = 0.0, 0
    lam = train_config.duality_lambda
    for length in sorted(by_len):
        group = by_len[length]
        rows = np.asarray([inverted.sequences[i][-dual_config.max_len:]
                           for i in group], dtype=np.int64)
        with nc.Tape() as tape:
            hidden = encode_user_sequences(rows, user_embs, dual_params,
                                           dual_config)
            i_hat = mod.select_positions(hidden, [length - 1] * len(group))
            e_items = nc.embedding_gather(params["item_table"],
                                          np.asarray(group, dtype=np.int64))
            cons = consistency_loss(i_hat, e_items)
            loss = nc.scale(cons, lam)
        grads = nc.backward(tape, loss)
        named_primary = training.named_grads(params, grads)
        named_dual = training.named_grads(dual_params, grads)
        if named_primary:
            training.adam_step(params, named_primary, primary_state,
                               train_config, rezero_padding=rezero_padding)
        if named_dual:
            training.adam_step(dual_params, named_dual, dual_state,
                               train_config, rezero_padding=False)
        total += float(cons.data) * len(group)
        count += len(group)
    return total / count if count else float("nan")


@dataclass
class CoTrainReport:
    primary: training.TrainReport
    consistency: list[float] = field(default_factory=list)
    cosine_final: float | None = None


def co_train(log: InteractionLog, corpus: SequenceCorpus, params,
             config: mod.ModelConfig, dual_params,
             dual_config: mod.ModelConfig, train_config: training.TrainConfig,
             sampler_spec: sampling.SamplerSpec,
             validate_with=None) -> CoTrainReport:
    """Alternate primary epochs with duality passes. With duality_lambda=0
    the duality phase is skipped entirely, so trajectories match plain
    training bit for bit."""
    inverted = invert_corpus(log)
    primary_state = training.AdamState()
    dual_state = training.AdamState()
    report = CoTrainReport(primary=training.TrainReport())
    rezero = config.padding_mode == "corrected"
    for epoch in range(train_config.epochs):
        ep = training.train_epoch(corpus, params, config, train_config,
                                  sampler_spec, primary_state, epoch)
        if validate_with is not None:
            ep.validation = training.evaluate(
                params, config, corpus, validate_with, sampler_spec,
                seed=training._epoch_seed(train_config.seed, 44, epoch))
        report.primary.epochs.append(ep)
        if train_config.duality_lambda > 0:
            user_embs = refresh_user_embeddings(corpus, params, config)
            value = duality_pass(inverted, user_embs, params, dual_params,
                                 dual_config, train_config, primary_state,
                                 dual_state, epoch, rezero_padding=rezero)
            report.consistency.append(value)
    if train_config.duality_lambda > 0:
        user_embs = refresh_user_embeddings(corpus, params, config)
        report.cosine_final = mean_consistency_cosine(
            inverted, user_embs, params, dual_params, dual_config)
    return report


def mean_consistency_cosine(inverted: SequenceCorpus, user_embs, params,
                            dual_params, dual_config) -> float:
    """Mean cosine(i_hat, e_i) over all interacted items."""
    cosines = []
    for item in inverted.users():
        if not inverted.sequences[item]:
            continue
        i_hat = high_order_item_embedding(item, inverted, user_embs,
                                          dual_params, dual_config)
        e = params["item_table"].data[item]
        denom = np.linalg.norm(i_hat) * np.linalg.norm(e)
        if denom > 0:
            cosines.append(float(i_hat @ e / denom))
    return float(np.mean(cosines)) if cosines else float("nan")


def train_dual_next_user(inverted: SequenceCorpus, user_embs: np.ndarray,
                         dual_params, dual_config: mod.ModelConfig,
                         train_config: training.TrainConfig,
                         sampler_spec: sampling.SamplerSpec
                         ) -> list[training.EpochReport]:
    """Next-user prediction on the inverted corpus: same machinery as
    primary training, but inputs are frozen user embeddings and targets are
    scored against the user table. Leave-one-out applies to each T_i."""
    from seqrec.data import bucket_batches, make_prefix_examples

    state = training.AdamState()
    reports = []
    for epoch in range(train_config.epochs):
        examples = list(make_prefix_examples(inverted, "relative-exact"))
        examples = [e for e in examples
                    if len(e.prefix) <= dual_config.max_len]
        batches = bucket_batches(examples, train_config.batch_size,
                                 seed=training._epoch_seed(train_config.seed,
                                                           66, epoch))
        neg_rng = training._epoch_rng(train_config.seed, 77, epoch)
        total, preds = 0.0, 0
        for batch in batches:
            rows = batch.item_matrix()
            targets = batch.targets()
            negs = np.asarray([
                sampling.sample_negatives(ex.user, 1, sampler_spec, inverted,
                                          neg_rng)[0]
                for ex in batch.examples], dtype=np.int64)
            n_ex = len(batch.examples)
            with nc.Tape() as tape:
                hidden = encode_user_sequences(rows, user_embs, dual_params,
                                               dual_config)
                final = mod.select_positions(
                    hidden, [batch.prefix_length - 1] * n_ex)
                pos_e = nc.embedding_gather(dual_params["user_table"], targets)
                neg_e = nc.embedding_gather(dual_params["user_table"], negs)
                loss = training.bce_loss(training._rowdot(final, pos_e),
                                         training._rowdot(final, neg_e))
            grads = nc.backward(tape, loss)
            training.adam_step(dual_params,
                               training.named_grads(dual_params, grads),
                               state, train_config, rezero_padding=False)
            total += float(loss.data) * n_ex
            preds += n_ex
        reports.append(training.EpochReport(
            epoch=epoch, mean_loss=total / preds if preds else float("nan"),
            examples=preds, predictions=preds, wall_clock=0.0))
    return reports


def evaluate_dual_next_user(inverted: SequenceCorpus, user_embs: np.ndarray,
                            dual_params, dual_config: mod.ModelConfig,
                            ks=(1, 5, 10), split: str = "validation"
                            ) -> dict[int, float]:
    """Full-ranking next-user HR@K over items with |T_i| >= 3."""
    items = inverted.eligible_users()
    if not items:
        raise DualityError("no item has enough users for dual evaluation")
    m = inverted.n_items  # target vocabulary size: users
    all_users = np.arange(1, m + 1, dtype=np.int64)
    table = dual_params["user_table"].data
    hits = {k: 0.0 for k in ks}
    for item in items:
        prefix = inverted.train_sequence(item)[-dual_config.max_len:]
        truth = (inverted.valid_item(item) if split == "validation"
                 else inverted.test_item(item))
        if split == "test":
            prefix = (inverted.train_sequence(item)
                      + [inverted.valid_item(item)])[-dual_config.max_len:]
        hidden = encode_user_sequences(np.asarray([prefix]), user_embs,
                                       dual_params, dual_config)
        scores = table[all_users] @ hidden.data[0, -1, :]
        rank = rank_of_truth(scores, all_users, truth - 1)
        for k in ks:
            if rank <= k:
                hits[k] += 1.0
    return {k: v / len(items) for k, v in hits.items()}
