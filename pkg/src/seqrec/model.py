"""Self-attentive encoder over item sequences.

Two positional regimes share one stack:

* relative-exact: every training prefix is its own example; the item at
  1-based sequence index j of a length-k prefix gets position index k-j+1,
  so the most recent item always sits at position 1.
* absolute-trick: the whole sequence is packed into one causally-masked
  pass; slot j of the padded window gets the reversed-absolute index T-j+1,
  one assignment shared by every internal prediction. Correct only for the
  final position, which is what makes the two regimes comparable.

Padding semantics are a second switch: `corrected` makes padding contribute
exactly nothing (zero item row, no positional term, invisible to attention);
`buggy` reproduces the flawed baseline where the padding id owns a learnable
embedding and receives positional terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqrec import numcore as nc
from seqrec.data import PAD_ID

PADDING_MODES = ("corrected", "buggy")
POSITION_MODES = ("relative-exact", "absolute-trick")

MASK_NEG = -1e9  # finite stand-in for -inf; exp underflows to exactly 0


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    d: int
    blocks: int
    heads: int
    max_len: int
    dropout_keep: float = 1.0
    position_mode: str = "relative-exact"
    padding_mode: str = "corrected"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ModelError(f"d={self.d} not divisible by heads={self.heads}")
        if self.position_mode not in POSITION_MODES:
            raise ModelError(f"unknown position_mode {self.position_mode!r}")
        if self.padding_mode not in PADDING_MODES:
            raise ModelError(f"unknown padding_mode {self.padding_mode!r}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ModelError("dropout_keep must be in (0, 1]")
        if self.max_len < 1 or self.blocks < 0 or self.d < 1:
            raise ModelError("d, blocks, max_len must be positive")

    def to_dict(self) -> dict:
        return {
            "d": self.d, "blocks": self.blocks, "heads": self.heads,
            "max_len": self.max_len, "dropout_keep": self.dropout_keep,
            "position_mode": self.position_mode,
            "padding_mode": self.padding_mode,
        }

    @classmethod
    def from_dict(cls, fields: dict) -> "ModelConfig":
        return cls(d=int(fields["d"]), blocks=int(fields["blocks"]),
                   heads=int(fields["heads"]), max_len=int(fields["max_len"]),
                   dropout_keep=float(fields["dropout_keep"]),
                   position_mode=fields["position_mode"],
                   padding_mode=fields["padding_mode"])


def _uniform(rng, shape, dtype):
    return rng.uniform(-0.02, 0.02, size=shape).astype(dtype)


def init_params(config: ModelConfig, n_items: int, rng,
                dtype=np.float32) -> dict[str, nc.Tensor]:
    """Fresh parameter set. In corrected padding mode the padding row of the
    item table starts at zero and is kept there by the optimizer."""
    p: dict[str, np.ndarray] = {}
    p["item_table"] = _uniform(rng, (n_items + 1, config.d), dtype)
    if config.padding_mode == "corrected":
        p["item_table"][PAD_ID] = 0.0
    p["pos_table"] = _uniform(rng, (config.max_len, config.d), dtype)
    for b in range(config.blocks):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"block{b}.attn.{w}"] = _uniform(rng, (config.d, config.d), dtype)
        p[f"block{b}.ffn.w1"] = _uniform(rng, (config.d, config.d), dtype)
        p[f"block{b}.ffn.b1"] = np.zeros(config.d, dtype=dtype)
        p[f"block{b}.ffn.w2"] = _uniform(rng, (config.d, config.d), dtype)
        p[f"block{b}.ffn.b2"] = np.zeros(config.d, dtype=dtype)
        for ln in ("ln1", "ln2"):
            p[f"block{b}.{ln}.gain"] = np.ones(config.d, dtype=dtype)
            p[f"block{b}.{ln}.bias"] = np.zeros(config.d, dtype=dtype)
    p["final_ln.gain"] = np.ones(config.d, dtype=dtype)
    p["final_ln.bias"] = np.zeros(config.d, dtype=dtype)
    return {name: nc.Tensor(arr, requires_grad=True, name=name)
            for name, arr in p.items()}


def assign_positions(length: int, position_mode: str, max_len: int) -> np.ndarray:
    """1-based position indices for a sequence of `length` slots: index 1 is
    always the most recent slot. In relative-exact mode `length` is a prefix
    length and must fit the positional table; in absolute-trick mode it is
    the padded window length."""
    if position_mode not in POSITION_MODES:
        raise ModelError(f"unknown position_mode {position_mode!r}")
    if length < 1:
        raise ModelError("length must be >= 1")
    if length > max_len:
        raise ModelError(f"length {length} exceeds positional table "
                         f"max_len={max_len}")
    return np.arange(length, 0, -1, dtype=np.int64)


def embed_sequence(items, positions, params, padding_mode: str) -> nc.Tensor:
    """Row j = item_table[items_j] + pos_table[positions_j]. In corrected
    mode padding slots come out exactly zero (no item row, no positional
    term); in buggy mode they get the learnable padding row plus the
    positional embedding."""
    items = np.asarray(items, dtype=np.int64)
    positions = np.broadcast_to(np.asarray(positions, dtype=np.int64),
                                items.shape)
    if padding_mode not in PADDING_MODES:
        raise ModelError(f"unknown padding_mode {padding_mode!r}")
    table = params["item_table"]
    if items.min() < 0 or items.max() >= table.shape[0]:
        raise ModelError("item id out of range")
    item_emb = nc.embedding_gather(table, items)
    pos_emb = nc.embedding_gather(params["pos_table"], positions - 1)
    if padding_mode == "corrected" and (items == PAD_ID).any():
        keep = (items != PAD_ID).astype(table.dtype)
        mask = nc.Tensor(np.repeat(keep[..., None], table.shape[1], axis=-1))
        item_emb = nc.multiply(item_emb, mask)
        pos_emb = nc.multiply(pos_emb, mask)
    return nc.add(item_emb, pos_emb)


def causal_mask(k: int, dtype) -> np.ndarray:
    """Additive mask: 0 where key <= query, MASK_NEG above the diagonal."""
    return np.triu(np.full((k, k), MASK_NEG, dtype=dtype), k=1)


def run_blocks(x: nc.Tensor, params, config: ModelConfig, train: bool = False,
               rng=None) -> nc.Tensor:
    """Causally-masked decoder blocks over already-embedded input
    (B, k, d) -> (B, k, d). Shared by the item encoder and the dual encoder
    (whose input is a sequence of continuous vectors, not item ids)."""
    batch, k, d = x.shape
    heads = config.heads
    dh = d // heads
    dtype = x.dtype
    keep = config.dropout_keep
    x = nc.dropout(x, keep, rng, train=train and keep < 1.0)
    mask = causal_mask(k, dtype)
    for b in range(config.blocks):
        q = nc.matmul(x, params[f"block{b}.attn.wq"])
        kk = nc.matmul(x, params[f"block{b}.attn.wk"])
        v = nc.matmul(x, params[f"block{b}.attn.wv"])
        # (B, k, d) -> (B, heads, k, dh)
        q = nc.transpose(nc.reshape(q, (batch, k, heads, dh)), (0, 2, 1, 3))
        kk = nc.transpose(nc.reshape(kk, (batch, k, heads, dh)), (0, 2, 1, 3))
        v = nc.transpose(nc.reshape(v, (batch, k, heads, dh)), (0, 2, 1, 3))
        scores = nc.scale(nc.matmul(q, nc.transpose(kk, (0, 1, 3, 2))),
                          1.0 / np.sqrt(dh))
        probs = nc.softmax_rows(scores, mask_add=mask)
        probs = nc.dropout(probs, keep, rng, train=train and keep < 1.0)
        ctx = nc.matmul(probs, v)
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (batch, k, d))
        attn_out = nc.matmul(merged, params[f"block{b}.attn.wo"])
        x = nc.layernorm_rows(nc.add(x, attn_out),
                              params[f"block{b}.ln1.gain"],
                              params[f"block{b}.ln1.bias"])
        f = nc.relu(nc.add(nc.matmul(x, params[f"block{b}.ffn.w1"]),
                           params[f"block{b}.ffn.b1"]))
        f = nc.dropout(f, keep, rng, train=train and keep < 1.0)
        f = nc.add(nc.matmul(f, params[f"block{b}.ffn.w2"]),
                   params[f"block{b}.ffn.b2"])
        x = nc.layernorm_rows(nc.add(x, f),
                              params[f"block{b}.ln2.gain"],
                              params[f"block{b}.ln2.bias"])
    return nc.layernorm_rows(x, params["final_ln.gain"],
                             params["final_ln.bias"])


def _encode_stack(items: np.ndarray, positions: np.ndarray, params,
                  config: ModelConfig, train: bool, rng) -> nc.Tensor:
    """Embed a padding-free batch (B, k) and run the decoder blocks."""
    x = embed_sequence(items, np.broadcast_to(positions, items.shape),
                       params, config.padding_mode)
    return run_blocks(x, params, config, train=train, rng=rng)


def encode(items, params, config: ModelConfig, train: bool = False,
           rng=None) -> nc.Tensor:
    """Per-position hidden states (B, T, d) for a batch of sequences.

    relative-exact batches must be padding-free (BucketBatch rows).
    absolute-trick batches are left-padded windows; rows in one batch must
    share the same real length. In corrected mode padding is stripped before
    the stack (it contributes exactly nothing, including to attention keys)
    and the padding slots come back as zero rows; in buggy mode the window is
    encoded as-is, padding participating.
    """
    items = np.asarray(items, dtype=np.int64)
    if items.ndim != 2:
        raise ModelError("encode expects a (batch, length) item matrix")
    batch, length = items.shape
    pad_counts = (np.cumsum(items != PAD_ID, axis=1) == 0).sum(axis=1)
    if ((items == PAD_ID).sum(axis=1) != pad_counts).any():
        raise ModelError("padding is only allowed as a left pad")

    if config.position_mode == "relative-exact":
        if pad_counts.any():
            raise ModelError("relative-exact batches must be padding-free")
        positions = assign_positions(length, config.position_mode,
                                     config.max_len)
        return _encode_stack(items, positions, params, config, train, rng)

    positions = assign_positions(length, config.position_mode, config.max_len)
    if config.padding_mode == "buggy" or not pad_counts.any():
        return _encode_stack(items, positions, params, config, train, rng)

    if len(set(pad_counts.tolist())) != 1:
        raise ModelError("corrected-mode batches must share one real length")
    pads = int(pad_counts[0])
    real = items[:, pads:]
    hidden = _encode_stack(real, positions[pads:], params, config, train, rng)
    d = config.d
    dtype = params["item_table"].dtype
    zeros = nc.Tensor(np.zeros((pads, batch, d), dtype=dtype))
    stacked = nc.concat_rows([zeros, nc.transpose(hidden, (1, 0, 2))])
    return nc.transpose(stacked, (1, 0, 2))


def select_positions(hidden: nc.Tensor, row_positions) -> nc.Tensor:
    """Pick one hidden state per example: hidden (B, T, d) -> (B, d),
    differentiable."""
    batch, length, d = hidden.shape
    row_positions = np.asarray(row_positions, dtype=np.int64)
    flat = nc.reshape(hidden, (batch * length, d))
    idx = np.arange(batch, dtype=np.int64) * length + row_positions
    return nc.embedding_gather(flat, idx)


def final_hidden(items, params, config: ModelConfig) -> np.ndarray:
    """Eval-time helper: hidden state at the last slot of each row."""
    hidden = encode(items, params, config, train=False)
    return hidden.data[:, -1, :]


def score_items(hidden: np.ndarray, candidate_items, params) -> np.ndarray:
    """logit_c = dot(hidden, item_table[c]) for real item candidates."""
    cands = np.asarray(candidate_items, dtype=np.int64)
    table = params["item_table"].data
    if cands.size == 0:
        raise ModelError("empty candidate list")
    if cands.min() <= PAD_ID or cands.max() >= table.shape[0]:
        raise ModelError("candidates must be real item ids")
    return table[cands] @ np.asarray(hidden)
