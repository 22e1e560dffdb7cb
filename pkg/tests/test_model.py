import numpy as np
import pytest

from seqrec import model
from seqrec import numcore as nc
from seqrec.data import PAD_ID, pad_truncate


def small_config(**overrides):
    base = dict(d=8, blocks=1, heads=2, max_len=8, dropout_keep=1.0,
                position_mode="relative-exact", padding_mode="corrected")
    base.update(overrides)
    return model.ModelConfig(**base)


@pytest.fixture
def params64():
    cfg = small_config()
    return model.init_params(cfg, n_items=10, rng=np.random.default_rng(0),
                             dtype=np.float64), cfg


def test_config_validation():
    with pytest.raises(model.ModelError):
        small_config(d=7, heads=2)
    with pytest.raises(model.ModelError):
        small_config(position_mode="absolute")
    with pytest.raises(model.ModelError):
        small_config(dropout_keep=0.0)


def test_assign_positions_relative():
    np.testing.assert_array_equal(
        model.assign_positions(2, "relative-exact", 8), [2, 1])
    np.testing.assert_array_equal(
        model.assign_positions(1, "relative-exact", 8), [1])


def test_assign_positions_window_reversal():
    # L=4 window [0,0,a,b]: slots get [4,3,2,1], so real slots carry [2,1]
    pos = model.assign_positions(4, "absolute-trick", 8)
    np.testing.assert_array_equal(pos, [4, 3, 2, 1])
    np.testing.assert_array_equal(pos[2:], [2, 1])


def test_assign_positions_overflow():
    with pytest.raises(model.ModelError, match="exceeds"):
        model.assign_positions(9, "relative-exact", 8)


def test_embed_corrected_padding_rows_zero(params64):
    params, _ = params64
    out = model.embed_sequence([0, 0, 3], [3, 2, 1], params, "corrected")
    assert np.all(out.data[:2] == 0.0)
    assert np.any(out.data[2] != 0.0)


def test_embed_buggy_padding_contributes(params64):
    params, _ = params64
    # force a visibly nonzero padding row: buggy mode uses it as-is
    params["item_table"].data[PAD_ID] = 0.5
    out = model.embed_sequence([0], [1], params, "buggy")
    assert np.any(out.data[0] != 0.0)
    params["item_table"].data[PAD_ID] = 0.0


def test_embed_modes_agree_without_padding(params64):
    params, _ = params64
    a = model.embed_sequence([3, 4], [2, 1], params, "corrected")
    b = model.embed_sequence([3, 4], [2, 1], params, "buggy")
    np.testing.assert_array_equal(a.data, b.data)


def test_embed_matches_table_rows(params64):
    params, _ = params64
    out = model.embed_sequence([5, 2], [2, 1], params, "corrected")
    expected = (params["item_table"].data[[5, 2]]
                + params["pos_table"].data[[1, 0]])
    np.testing.assert_allclose(out.data, expected)


def test_encode_single_item_depends_only_on_it(params64):
    params, cfg = params64
    h1 = model.encode([[4]], params, cfg).data
    # changing other table rows must not matter
    params["item_table"].data[7] += 3.0
    h2 = model.encode([[4]], params, cfg).data
    np.testing.assert_array_equal(h1, h2)


def test_encode_causality(params64):
    params, cfg = params64
    base = model.encode([[1, 2, 3, 4]], params, cfg).data
    perturbed = model.encode([[1, 2, 9, 4]], params, cfg).data
    np.testing.assert_array_equal(base[0, :2], perturbed[0, :2])
    assert np.max(np.abs(base[0, 2] - perturbed[0, 2])) > 0


def test_final_position_equivalence(params64):
    # the absolute-trick window, corrected padding, agrees with the
    # relative-exact encoding at the final position
    params, _ = params64
    prefix = [3, 1, 4, 1, 5]
    rel_cfg = small_config(position_mode="relative-exact")
    abs_cfg = small_config(position_mode="absolute-trick")
    h_rel = model.encode([prefix], params, rel_cfg).data[0, -1]
    window = pad_truncate(prefix, abs_cfg.max_len)
    h_abs = model.encode([window], params, abs_cfg).data[0, -1]
    np.testing.assert_allclose(h_abs, h_rel, atol=1e-5)


def test_internal_position_inequivalence(params64):
    # the bug fingerprint: an internal prediction packed at full-sequence
    # positions differs from its own relative-exact encoding
    params, _ = params64
    seq = [3, 1, 4, 1, 5, 9, 2, 6]
    rel_cfg = small_config(position_mode="relative-exact")
    abs_cfg = small_config(position_mode="absolute-trick")
    packed = model.encode([seq], params, abs_cfg).data[0]
    found = False
    for k in range(1, len(seq)):
        own = model.encode([seq[:k]], params, rel_cfg).data[0, -1]
        if np.max(np.abs(packed[k - 1] - own)) > 1e-3:
            found = True
    assert found


def test_corrected_padding_neutrality_exact(params64):
    params, _ = params64
    abs_cfg = small_config(position_mode="absolute-trick",
                           padding_mode="corrected")
    prefix = [2, 7, 1]
    bare = model.encode([prefix], params, abs_cfg).data[0]
    for pads in range(1, abs_cfg.max_len - len(prefix) + 1):
        padded = model.encode([[PAD_ID] * pads + prefix], params,
                              abs_cfg).data[0]
        np.testing.assert_array_equal(padded[pads:], bare)
        assert np.all(padded[:pads] == 0.0)


def test_buggy_padding_changes_hidden_states(params64):
    params, _ = params64
    buggy_cfg = small_config(position_mode="absolute-trick",
                             padding_mode="buggy")
    params_buggy = model.init_params(buggy_cfg, n_items=10,
                                     rng=np.random.default_rng(1),
                                     dtype=np.float64)
    prefix = [2, 7, 1]
    bare = model.encode([prefix], params_buggy, buggy_cfg).data[0]
    padded = model.encode([[PAD_ID, PAD_ID] + prefix], params_buggy,
                          buggy_cfg).data[0]
    assert np.max(np.abs(padded[2:] - bare)) > 1e-6


def test_encode_rejects_interior_padding(params64):
    params, cfg = params64
    abs_cfg = small_config(position_mode="absolute-trick")
    with pytest.raises(model.ModelError, match="left pad"):
        model.encode([[1, PAD_ID, 2]], params, abs_cfg)
    with pytest.raises(model.ModelError, match="padding-free"):
        model.encode([[PAD_ID, 1]], params, cfg)


def test_select_positions_gradient_flow(params64):
    params, cfg = params64
    with nc.Tape() as tape:
        hidden = model.encode([[1, 2], [3, 4]], params, cfg)
        final = model.select_positions(hidden, [1, 1])
        loss = nc.reduce_mean(nc.multiply(final, final))
    grads = nc.backward(tape, loss)
    assert np.any(grads[params["item_table"]] != 0)
    np.testing.assert_array_equal(final.data, hidden.data[:, -1, :])


def test_score_items_brute_force(params64):
    params, cfg = params64
    hidden = model.final_hidden([[1, 2, 3]], params, cfg)[0]
    cands = [5, 1, 3, 2, 4]
    scores = model.score_items(hidden, cands, params)
    expected = [float(params["item_table"].data[c] @ hidden) for c in cands]
    np.testing.assert_allclose(scores, expected, rtol=1e-12)
    # order invariance (set semantics)
    flipped = model.score_items(hidden, cands[::-1], params)
    np.testing.assert_array_equal(flipped, scores[::-1])


def test_score_items_argmax_on_orthogonal_table(params64):
    params, cfg = params64
    table = np.zeros_like(params["item_table"].data)
    for i in range(1, 9):
        table[i, i - 1] = 1.0
    params["item_table"].data[:] = table
    hidden = params["item_table"].data[4]
    scores = model.score_items(hidden, list(range(1, 9)), params)
    assert int(np.argmax(scores)) == 3  # candidate index of item 4


def test_score_items_rejects_padding(params64):
    params, _ = params64
    with pytest.raises(model.ModelError):
        model.score_items(np.zeros(8), [0, 1], params)


def test_dropout_changes_train_encode_only(params64):
    params, _ = params64
    cfg = small_config(dropout_keep=0.5)
    items = [[1, 2, 3]]
    eval_a = model.encode(items, params, cfg, train=False).data
    eval_b = model.encode(items, params, cfg, train=False).data
    np.testing.assert_array_equal(eval_a, eval_b)
    rng = np.random.default_rng(3)
    train_out = model.encode(items, params, cfg, train=True, rng=rng).data
    assert np.max(np.abs(train_out - eval_a)) > 1e-9
