"""Training-only auxiliary head predicting one step further ahead.

The head fuses the backbone state at a target position with the ground-truth
embedding of the token emitted there, and scores the following token through
the backbone's own unembedding matrix. Generation never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import ContractError, DimensionError, Tensor


@dataclass(frozen=True)
class MapConfig:
    lam: float = 0.3
    fusion_hidden: int | None = None  # defaults to d_model
    enabled: bool = True
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ForesightState:
    h_mtp: Tensor


class MapHead:
    def __init__(self, d_model: int, shared_head: Tensor, cfg: MapConfig = MapConfig(), seed: int = 0, init_std: float = 0.02) -> None:
        if shared_head.shape[1] != d_model:
            raise DimensionError(f"shared head width {shared_head.shape[1]} != d_model {d_model}")
        self.cfg = cfg
        self.d_model = d_model
        self.shared_head = shared_head
        hidden = cfg.fusion_hidden or d_model
        # own stream: building the head must not perturb backbone init or dropout
        rng = K.make_rng(seed, 2)
        self.params = {
            "map.w1": Tensor(rng.normal(0.0, init_std, size=(2 * d_model, hidden)), requires_grad=True),
            "map.b1": Tensor(np.zeros(hidden), requires_grad=True),
            "map.w2": Tensor(rng.normal(0.0, init_std, size=(hidden, d_model)), requires_grad=True),
            "map.b2": Tensor(np.zeros(d_model), requires_grad=True),
        }
        for name, t in self.params.items():
            t.name = name

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def foresight(self, h: Tensor, next_token_emb: Tensor) -> ForesightState:
        if h.shape != next_token_emb.shape:
            raise DimensionError(f"hidden {h.shape} and next-token embedding {next_token_emb.shape} differ")
        if h.shape[-1] != self.d_model:
            raise DimensionError(f"width {h.shape[-1]} != d_model {self.d_model}")
        P = self.params
        z = K.linear(K.concat([h, next_token_emb], axis=-1), P["map.w1"], P["map.b1"])
        if self.cfg.activation == "gelu":
            z = K.gelu(z)
        return ForesightState(K.linear(z, P["map.w2"], P["map.b2"]))

    def map_logits(self, fs: ForesightState, shared_head: Tensor) -> Tensor:
        if shared_head is not self.shared_head:
            raise ContractError("auxiliary logits must use the backbone's own unembedding tensor, not a copy")
        return K.linear(fs.h_mtp, shared_head, transpose_w=True)

    def loss(self, hidden: Tensor, targets: np.ndarray) -> Tensor:
        """Sum over j < L of -log P(y_{j+1} | h_j, y_j), averaged over the batch.

        ``hidden`` is the backbone's final hidden sequence; its last L positions
        are the ones that predict y_1 .. y_L.
        """
        targets = np.asarray(targets, dtype=np.int64)
        B, L = targets.shape
        if L < 2:
            return Tensor(0.0)
        h = hidden[:, -L:-1, :]
        emb = K.embedding(self.shared_head, targets[:, :-1])
        logits = self.map_logits(self.foresight(h, emb), self.shared_head)
        return K.nll(logits, targets[:, 1:]).sum() * (1.0 / B)


def loss_map(head: MapHead, hidden: Tensor, targets: np.ndarray) -> Tensor:
    return head.loss(hidden, targets)


def loss_total(l_ntp: Tensor, l_map: Tensor, lam: float) -> Tensor:
    return l_ntp + l_map * float(lam)
