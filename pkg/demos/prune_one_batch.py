"""Prune one batch by hand and show which history tokens survive."""

import numpy as np

from stamp import corpus as C
from stamp.backbone import Decoder, ModelConfig
from stamp.quantizer import encode_many, fit
from stamp.sap import PruneConfig, SapHook

L, V_c, window = 3, 8, 6
emb, ds = C.generate_synthetic(50, 80, 8, 3, seed=0)
catalog = C.build_catalog(range(80), encode_many(emb, fit(emb, L=L, V_c=V_c, seed=0)))
split = C.split_leave_one_out(C.InteractionDataset(ds.users, ds.histories, catalog))
batch = C.make_batch(split.test[:4], catalog, window, V_c)

cfg = ModelConfig(vocab_size=C.vocab_size(L, V_c), n_layers=3, d_model=32, n_heads=4, d_ff=64, dropout_rate=0.0, max_positions=batch.input_ids.shape[1])
model = Decoder(cfg, seed=0)
hook = SapHook(PruneConfig(alpha=1 / 3, l_prune=1, window_W=L))
# untrained, so causal attention simply favours the earliest tokens
trace = model.forward(batch.input_ids, batch.valid, prune_hook=hook)

for b in range(len(batch)):
    kept = trace.kept_map[b][trace.kept_map[b] >= 0]
    print(f"user {b}: {int(batch.valid[b].sum())} tokens -> {kept.size} kept at positions {kept.tolist()}")
print("hidden after pruning:", trace.hidden.shape)
np.set_printoptions(precision=3, suppress=True)
print("importance of user 0 (padding is -inf):", hook.last_scores[0])
