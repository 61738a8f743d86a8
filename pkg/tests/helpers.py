"""Small synthetic world shared by trainer, evaluator and map-head tests."""

from dataclasses import dataclass

from stamp import corpus as C
from stamp.backbone import Decoder, ModelConfig
from stamp.quantizer import encode_many, fit


@dataclass
class World:
    split: C.Split
    catalog: dict
    trie: C.SidTrie
    L: int
    V_c: int
    window: int

    def batch(self, examples):
        return C.make_batch(examples, self.catalog, self.window, self.V_c)

    def model(self, seed=0, n_layers=2, d=16, H=2, d_ff=32, dropout=0.0):
        cfg = ModelConfig(
            vocab_size=C.vocab_size(self.L, self.V_c),
            n_layers=n_layers,
            d_model=d,
            n_heads=H,
            d_ff=d_ff,
            dropout_rate=dropout,
            max_positions=1 + self.L * self.window + self.L - 1,
        )
        return Decoder(cfg, seed=seed)


def make_world(n_users=60, n_items=40, L=2, V_c=8, window=6, seed=0) -> World:
    emb, ds = C.generate_synthetic(n_users, n_items, 8, 3, seed=seed)
    codes = encode_many(emb, fit(emb, L=L, V_c=V_c, seed=seed))
    catalog = C.build_catalog(range(n_items), codes)
    ds = C.InteractionDataset(ds.users, ds.histories, catalog)
    return World(C.split_leave_one_out(ds), catalog, C.SidTrie(catalog), L, V_c, window)

