"""Decoder-only causal transformer over the SID vocabulary with a pruning hook."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import kernel as K
from .kernel import AttentionProbs, ContractError, Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 8
    d_ff: int = 1024
    dropout_rate: float = 0.15
    max_positions: int = 128

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class PruneHook(Protocol):
    layer: int

    def __call__(
        self, hidden: Tensor, probs: AttentionProbs, valid: np.ndarray
    ) -> tuple[Tensor, np.ndarray, np.ndarray]: ...


@dataclass
class ForwardTrace:
    hidden: Tensor  # final (post-norm) hidden states, what the LM head reads
    logits: Tensor
    valid: np.ndarray  # validity of the compressed positions
    kept_map: np.ndarray  # [B, T] original position of each slot, -1 for padding
    probs: dict[int, AttentionProbs] = field(default_factory=dict)
    layer_hidden: dict[int, Tensor] = field(default_factory=dict)


def causal_mask(valid: np.ndarray) -> np.ndarray:
    """``[B, N, N]``: query i may see key j iff j <= i and j is not padding."""
    n = valid.shape[-1]
    tri = np.tri(n, dtype=bool)
    return tri[None] & valid[:, None, :]


class Decoder:
    """Pre-norm transformer; token embedding doubles as the LM head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, init_std: float = 0.02) -> None:
        self.cfg = cfg
        rng = K.make_rng(seed, 1)
        d, f = cfg.d_model, cfg.d_ff

        def w(*shape, std=init_std):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=True)

        self.params: dict[str, Tensor] = {"tok_emb": w(cfg.vocab_size, d), "pos_emb": w(cfg.max_positions, d)}
        out_std = init_std / np.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self.params.update(
                {
                    p + "ln1.g": const(1.0, d),
                    p + "ln1.b": const(0.0, d),
                    p + "wq": w(d, d),
                    p + "bq": const(0.0, d),
                    p + "wk": w(d, d),
                    p + "bk": const(0.0, d),
                    p + "wv": w(d, d),
                    p + "bv": const(0.0, d),
                    p + "wo": w(d, d, std=out_std),
                    p + "bo": const(0.0, d),
                    p + "ln2.g": const(1.0, d),
                    p + "ln2.b": const(0.0, d),
                    p + "w1": w(d, f),
                    p + "b1": const(0.0, f),
                    p + "w2": w(f, d, std=out_std),
                    p + "b2": const(0.0, d),
                }
            )
        self.params["lnf.g"] = const(1.0, d)
        self.params["lnf.b"] = const(0.0, d)
        for name, t in self.params.items():
            t.name = name

    @property
    def head(self) -> Tensor:
        """The shared unembedding matrix (same storage as the input embedding)."""
        return self.params["tok_emb"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward ------------------------------------------------------------

    def _block(self, i: int, x: Tensor, mask: np.ndarray, training: bool, rng, tag: str):
        P = self.params
        p = f"layers.{i}."
        B, N, d = x.shape
        H = self.cfg.n_heads
        dh = d // H
        rate = self.cfg.dropout_rate

        h = K.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

        q = heads(K.linear(h, P[p + "wq"], P[p + "bq"]))
        k = heads(K.linear(h, P[p + "wk"], P[p + "bk"]))
        v = heads(K.linear(h, P[p + "wv"], P[p + "bv"]))
        a, probs = K.attention(q, k, v, mask, tag=tag)
        a = a.transpose(0, 2, 1, 3).reshape(B, N, d)
        x = x + K.dropout(K.linear(a, P[p + "wo"], P[p + "bo"]), rate, rng, training)
        h = K.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = K.linear(K.gelu(K.linear(h, P[p + "w1"], P[p + "b1"])), P[p + "w2"], P[p + "b2"])
        x = x + K.dropout(h, rate, rng, training)
        return x, probs

    def forward(
        self,
        input_ids: np.ndarray,
        valid: np.ndarray | None = None,
        prune_hook: PruneHook | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        retain: tuple[int, ...] = (),
        retain_hidden: bool = False,
        logits_last: int | None = None,
    ) -> ForwardTrace:
        """Run the decoder. ``retain`` lists 1-based layers whose attention is kept.

        ``logits_last=k`` projects only the final ``k`` positions through the
        LM head (training needs just the target positions).
        """
        cfg = self.cfg
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, N = ids.shape
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")
        if N > cfg.max_positions:
            raise ContractError(f"sequence length {N} exceeds max_positions {cfg.max_positions}")
        valid = (ids != 0) if valid is None else np.asarray(valid, dtype=bool).reshape(B, N)
        if prune_hook is not None and not 1 <= prune_hook.layer < cfg.n_layers:
            raise ContractError(f"prune layer {prune_hook.layer} must lie in [1, {cfg.n_layers})")

        P = self.params
        x = K.embedding(P["tok_emb"], ids) + K.embedding(P["pos_emb"], np.arange(N))
        x = K.dropout(x, cfg.dropout_rate, rng, training)
        kept_map = np.where(valid, np.arange(N)[None, :], -1)
        mask = causal_mask(valid)
        kept_probs: dict[int, AttentionProbs] = {}
        hiddens: dict[int, Tensor] = {}
        for i in range(cfg.n_layers):
            layer = i + 1
            pruned = prune_hook is not None and layer > prune_hook.layer
            x, probs = self._block(i, x, mask, training, rng, tag="post" if pruned else "pre")
            if layer in retain:
                kept_probs[layer] = probs
            if retain_hidden:
                hiddens[layer] = x
            if prune_hook is not None and layer == prune_hook.layer:
                x, new_valid, idx = prune_hook(x, probs, valid)
                idx = np.asarray(idx, dtype=np.int64)
                _check_kept(idx, new_valid)
                kept_map = np.where(idx >= 0, np.take_along_axis(kept_map, np.maximum(idx, 0), axis=1), -1)
                valid = np.asarray(new_valid, dtype=bool)
                if valid is not None and not np.array_equal(valid, idx >= 0):
                    raise ContractError("hook validity mask disagrees with its kept indices")
                mask = causal_mask(valid)
            del probs
        h = K.layer_norm(x, P["lnf.g"], P["lnf.b"])
        head_in = h if logits_last is None else h[:, -logits_last:, :]
        logits = K.linear(head_in, P["tok_emb"], transpose_w=True)
        return ForwardTrace(hidden=h, logits=logits, valid=valid, kept_map=kept_map, probs=kept_probs, layer_hidden=hiddens)

    __call__ = forward

    # -- checkpoints ----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {t.shape}")
        for k, t in self.params.items():
            t.data[...] = state[k]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {"version": CHECKPOINT_VERSION, "model": asdict(self.cfg), "extra": extra or {}}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path, cfg: ModelConfig | None = None) -> tuple["Decoder", dict]:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            stored = ModelConfig(**header["model"])
            if cfg is not None and cfg != stored:
                raise CheckpointError(f"{path}: checkpoint config {stored} != requested {cfg}")
            model = cls(stored)
            model.load_state_dict({k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")})
        return model, header.get("extra", {})


def _check_kept(idx: np.ndarray, valid: np.ndarray) -> None:
    for row in idx:
        r = row[row >= 0]
        if r.size > 1 and not (np.diff(r) > 0).all():
            raise ContractError("prune hook returned unsorted or duplicate indices")


def logits_to_nll(logits: Tensor, targets: np.ndarray, target_mask: np.ndarray | None = None) -> Tensor:
    """Sum of target-token NLL over the final L positions, averaged over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    B, L = targets.shape
    if target_mask is None:
        target_mask = np.ones((B, L), dtype=bool)
    target_mask = np.asarray(target_mask, dtype=bool)
    if not target_mask.any():
        raise ContractError("no valid target positions")
    per_pos = K.nll(logits[:, -L:, :], targets)
    if not target_mask.all():
        per_pos = per_pos * target_mask.astype(np.float64)
    return per_pos.sum() * (1.0 / B)
