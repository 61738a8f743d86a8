import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stamp import kernel as K
from stamp import sap as S
from stamp.backbone import CheckpointError, Decoder, ModelConfig, causal_mask, logits_to_nll
from stamp.kernel import ContractError, Tensor


def tiny(n_layers=2, d=8, H=2, V=20, N=16, dropout=0.0, seed=0):
    return Decoder(ModelConfig(vocab_size=V, n_layers=n_layers, d_model=d, n_heads=H, d_ff=16, dropout_rate=dropout, max_positions=N), seed=seed)


def ids_batch(rng, B, N, V, pad_left=None):
    ids = rng.integers(2, V, size=(B, N))
    if pad_left is not None:
        for b, p in enumerate(pad_left):
            ids[b, :p] = 0
    return ids


class KeepIndices:
    """Hook keeping the positions chosen by ``keep_fn(valid_row)``."""

    def __init__(self, layer, keep_fn):
        self.layer = layer
        self.keep_fn = keep_fn
        self.seen = None

    def __call__(self, hidden, probs, valid):
        self.seen = probs.values.shape
        keep = [self.keep_fn(v) for v in valid]
        return S.compress(hidden, valid, keep)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, dropout_rate=1.0)


def test_causal_mask():
    m = causal_mask(np.array([[False, True, True]]))
    assert m[0].tolist() == [[False, False, False], [False, True, False], [False, True, True]]


def test_identity_hook_bitwise_equal():
    model = tiny()
    ids = ids_batch(np.random.default_rng(0), 3, 10, 20, pad_left=[0, 2, 5])
    with K.deterministic():
        ref = model.forward(ids)
        hooked = model.forward(ids, prune_hook=KeepIndices(1, np.flatnonzero))
    assert hooked.logits.data.tobytes() == ref.logits.data.tobytes()
    assert np.array_equal(hooked.kept_map, ref.kept_map)


def test_alpha_one_hook_is_noop():
    model = tiny()
    ids = ids_batch(np.random.default_rng(1), 2, 10, 20, pad_left=[0, 3])
    hook = S.SapHook(S.PruneConfig(alpha=1.0, l_prune=1, window_W=3))
    with K.deterministic():
        a = model.forward(ids).logits.data
        b = model.forward(ids, prune_hook=hook).logits.data
    assert a.tobytes() == b.tobytes()


def test_last_window_hook_shapes():
    model = tiny(n_layers=3)
    W = 3
    ids = ids_batch(np.random.default_rng(2), 2, 12, 20)
    hook = KeepIndices(1, lambda v: np.flatnonzero(v)[-W:])
    tr = model.forward(ids, prune_hook=hook, retain=(1, 2, 3))
    assert tr.probs[1].shape == (2, 2, 12, 12)
    assert tr.probs[2].shape == (2, 2, W, W)
    assert tr.probs[3].shape == (2, 2, W, W)
    assert tr.logits.shape == (2, W, 20)
    assert tr.kept_map.tolist() == [[9, 10, 11]] * 2


def test_kept_map_composes_with_padding():
    model = tiny()
    ids = ids_batch(np.random.default_rng(3), 2, 8, 20, pad_left=[0, 4])
    hook = KeepIndices(1, lambda v: np.flatnonzero(v)[::2])
    tr = model.forward(ids, prune_hook=hook)
    assert tr.kept_map.tolist() == [[0, 2, 4, 6], [-1, -1, 4, 6]]
    for row in tr.kept_map:
        r = row[row >= 0]
        assert (np.diff(r) > 0).all()


def test_hook_unsorted_indices_rejected():
    model = tiny()
    ids = ids_batch(np.random.default_rng(0), 1, 6, 20)

    def bad(hidden, probs, valid):
        idx = np.array([[3, 1]])
        return hidden[:, [3, 1], :], np.ones((1, 2), bool), idx

    bad.layer = 1
    with pytest.raises(ContractError):
        model.forward(ids, prune_hook=bad)


def test_forward_preconditions():
    model = tiny(N=8)
    with pytest.raises(ContractError):
        model.forward(np.array([[1, 25]]))
    with pytest.raises(ContractError):
        model.forward(np.ones((1, 9), dtype=int))
    with pytest.raises(ContractError):
        model.forward(np.ones((1, 4), dtype=int), prune_hook=KeepIndices(2, np.flatnonzero))


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def _lin(x, W, b=None):
    out = [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]
    return out if b is None else [o + bj for o, bj in zip(out, b)]


def _gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def manual_forward(P, ids, H):
    """Scalar-loop forward of a 1-layer pre-norm decoder with a tied head."""
    get = lambda k: P[k].data.tolist()
    E, pos = get("tok_emb"), get("pos_emb")
    xs = [[E[t][c] + pos[i][c] for c in range(len(E[0]))] for i, t in enumerate(ids)]
    d = len(xs[0])
    dh = d // H
    p = "layers.0."
    hs = [_ln(x, get(p + "ln1.g"), get(p + "ln1.b")) for x in xs]
    q = [_lin(h, get(p + "wq"), get(p + "bq")) for h in hs]
    k = [_lin(h, get(p + "wk"), get(p + "bk")) for h in hs]
    v = [_lin(h, get(p + "wv"), get(p + "bv")) for h in hs]
    att = [[0.0] * d for _ in xs]
    for hd in range(H):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(len(xs)):
            scores = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in range(i + 1)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for c in range(dh):
                att[i][hd * dh + c] = sum(w[j] / z * v[j][sl][c] for j in range(i + 1))
    xs = [[a + b for a, b in zip(x, _lin(a_, get(p + "wo"), get(p + "bo")))] for x, a_ in zip(xs, att)]
    out = []
    for x in xs:
        h = _ln(x, get(p + "ln2.g"), get(p + "ln2.b"))
        f = [_gelu(u) for u in _lin(h, get(p + "w1"), get(p + "b1"))]
        x = [a + b for a, b in zip(x, _lin(f, get(p + "w2"), get(p + "b2")))]
        h = _ln(x, get("lnf.g"), get("lnf.b"))
        out.append([sum(hc * ec for hc, ec in zip(h, row)) for row in E])
    return np.array(out)


def test_manual_one_layer_two_tokens():
    model = Decoder(ModelConfig(vocab_size=5, n_layers=1, d_model=4, n_heads=2, d_ff=6, dropout_rate=0.0, max_positions=2), seed=3)
    rng = np.random.default_rng(11)
    for t in model.parameters():
        t.data[...] = rng.normal(0, 0.5, size=t.shape)
    ids = [2, 4]
    got = model.forward(np.array([ids])).logits.data[0]
    np.testing.assert_allclose(got, manual_forward(model.params, ids, 2), atol=1e-10, rtol=0)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.booleans())
def test_causality_under_pruning(seed, pruned):
    rng = np.random.default_rng(seed)
    model = tiny(n_layers=2, seed=seed % 7)
    N = 12
    ids = ids_batch(rng, 1, N, 20)
    p = int(rng.integers(1, N))
    ids2 = ids.copy()
    ids2[0, p] = 2 + (ids[0, p] - 1) % 18
    hook = S.SapHook(S.PruneConfig(alpha=0.5, l_prune=1, window_W=3)) if pruned else None
    a = model.forward(ids, prune_hook=hook)
    b = model.forward(ids2, prune_hook=hook)
    # SAP scores depend on every query row, so the kept set may differ after p;
    # positions before p that survive in both runs must agree exactly
    for slot_a, orig in enumerate(a.kept_map[0]):
        if 0 <= orig < p:
            slot_b = int(np.flatnonzero(b.kept_map[0] == orig)[0]) if orig in b.kept_map[0] else None
            if slot_b is None:
                continue
            if not pruned:
                np.testing.assert_array_equal(a.logits.data[0, slot_a], b.logits.data[0, slot_b])
            elif np.array_equal(a.kept_map[0][a.kept_map[0] < p], b.kept_map[0][b.kept_map[0] < p]):
                np.testing.assert_allclose(a.logits.data[0, slot_a], b.logits.data[0, slot_b], atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(0.1, 1.0), st.integers(1, 4))
def test_targets_survive_protected_window(seed, alpha, W):
    rng = np.random.default_rng(seed)
    model = tiny(n_layers=2)
    ids = ids_batch(rng, 2, 14, 20, pad_left=[0, int(rng.integers(0, 14 - W))])
    tr = model.forward(ids, prune_hook=S.SapHook(S.PruneConfig(alpha=alpha, l_prune=1, window_W=W)))
    for row in tr.kept_map:
        assert list(row[-W:]) == list(range(14 - W, 14))
    assert tr.logits.shape[1] == tr.valid.shape[1]


def test_logits_last_matches_full():
    model = tiny()
    ids = ids_batch(np.random.default_rng(5), 2, 9, 20)
    full = model.forward(ids).logits.data
    last = model.forward(ids, logits_last=3).logits.data
    np.testing.assert_array_equal(last, full[:, -3:])


def test_dropout_only_in_training():
    model = tiny(dropout=0.5)
    ids = ids_batch(np.random.default_rng(6), 1, 6, 20)
    a = model.forward(ids).logits.data
    assert np.array_equal(a, model.forward(ids).logits.data)
    b = model.forward(ids, training=True, rng=np.random.default_rng(0)).logits.data
    assert not np.array_equal(a, b)


def test_tied_head():
    model = tiny()
    assert model.head is model.params["tok_emb"]
    ids = ids_batch(np.random.default_rng(7), 1, 5, 20)
    logits_to_nll(model.forward(ids).logits, ids[:, -2:]).backward()
    g = model.head.grad
    # every vocab row receives unembedding gradient even if never used as input
    assert np.abs(g[~np.isin(np.arange(20), ids)]).sum() > 0


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = tiny()
    path = tmp_path / "m.npz"
    model.save(path, extra={"best": 0.5})
    back, extra = Decoder.load(path)
    assert extra == {"best": 0.5}
    ids = ids_batch(np.random.default_rng(0), 2, 7, 20)
    assert np.array_equal(back.forward(ids).logits.data, model.forward(ids).logits.data)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    model = tiny()
    state = model.state_dict()
    state["layers.0.wq"] = np.zeros((3, 3))
    with pytest.raises(CheckpointError):
        model.load_state_dict(state)
    state = model.state_dict()
    del state["lnf.g"]
    with pytest.raises(CheckpointError):
        model.load_state_dict(state)
    path = tmp_path / "m.npz"
    model.save(path)
    with pytest.raises(CheckpointError):
        Decoder.load(path, cfg=ModelConfig(vocab_size=21, n_layers=2, d_model=8, n_heads=2, d_ff=16, dropout_rate=0.0, max_positions=16))


# -- NLL ---------------------------------------------------------------------------


def test_nll_uniform():
    logits = Tensor(np.zeros((4, 3, 256)))
    assert logits_to_nll(logits, np.ones((4, 3), dtype=int)).item() == pytest.approx(3 * math.log(256), abs=1e-12)


def test_nll_one_hot_correct():
    targets = np.array([[3, 5, 7]])
    logits = np.zeros((1, 3, 10))
    logits[0, np.arange(3), targets[0]] = 1e3
    assert logits_to_nll(Tensor(logits), targets).item() < 1e-12


def test_nll_random_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6, 11)) * 3
    targets = rng.integers(0, 11, size=(5, 3))
    total = 0.0
    for b in range(5):
        for j in range(3):
            row = logits[b, 3 + j]
            total -= row[targets[b, j]] - math.log(sum(math.exp(v) for v in row))
    assert logits_to_nll(Tensor(logits), targets).item() == pytest.approx(total / 5, abs=1e-12)


def test_nll_masking():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(2, 3, 5)))
    t = rng.integers(0, 5, size=(2, 3))
    m = np.array([[True, True, False], [True, True, False]])
    full = logits_to_nll(Tensor(logits.data[:, :2]), t[:, :2]).item()
    assert logits_to_nll(logits, t, m).item() == pytest.approx(full, abs=1e-12)
    with pytest.raises(ContractError):
        logits_to_nll(logits, t, np.zeros((2, 3), bool))
