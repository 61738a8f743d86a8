"""Semantic adaptive pruning and the baseline token-reduction strategies.

Importance of a token is its normalized L1 hidden-state magnitude times the
attention mass it receives. A budget of ``max(W, floor(alpha * N_valid))``
tokens survives; the last ``W`` valid positions always do. Survivors keep
their original relative order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import AttentionProbs, ContractError, Tensor

STRATEGIES = ("sap", "l2", "attention_only", "max_pool", "avg_pool", "none")
SCORE_STRATEGIES = ("sap", "l2", "attention_only")
POOL_STRATEGIES = ("max_pool", "avg_pool")


class PruneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    alpha: float = 1.0 / 3.0
    l_prune: int = 1
    window_W: int = 3
    strategy: str = "sap"

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise PruneConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.strategy not in STRATEGIES:
            raise PruneConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.window_W < 1:
            raise PruneConfigError("window_W must be >= 1")
        if self.l_prune < 1:
            raise PruneConfigError("l_prune must be >= 1")

    def validate_for(self, L: int) -> None:
        if self.window_W < L:
            raise PruneConfigError(f"window_W={self.window_W} must cover the L={L} target positions")


@dataclass
class ImportanceVector:
    s_sem: np.ndarray
    s_attn: np.ndarray
    importance: np.ndarray
    valid: np.ndarray


# ---------------------------------------------------------------------------
# scoring


def _max_normalize(raw: np.ndarray, valid: np.ndarray) -> np.ndarray:
    raw = np.where(valid, raw, 0.0)
    top = raw.max(axis=-1, keepdims=True) if raw.size else raw
    return np.divide(raw, top, out=np.zeros_like(raw), where=top > 0)


def semantic_saliency(hidden: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row L1 norm divided by the per-sequence maximum over valid rows."""
    h = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
    return _max_normalize(np.abs(h).sum(axis=-1), np.asarray(valid, dtype=bool))


def l2_saliency(hidden: np.ndarray, valid: np.ndarray) -> np.ndarray:
    h = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden)
    return _max_normalize(np.sqrt((h * h).sum(axis=-1)), np.asarray(valid, dtype=bool))


def attention_centrality(probs: AttentionProbs | np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Attention mass each key receives, summed over heads and valid queries.

    ``probs`` is ``[..., H, Nq, Nk]``; the self-attention term ``j == i`` is
    included.
    """
    A = probs.values if isinstance(probs, AttentionProbs) else np.asarray(probs)
    valid = np.asarray(valid, dtype=bool)
    received = np.einsum("...hjk,...j->...k", A, valid.astype(A.dtype))
    return np.where(valid, received, 0.0)


def importance(s_sem: np.ndarray, s_attn: np.ndarray, valid: np.ndarray) -> ImportanceVector:
    s_sem, s_attn = np.asarray(s_sem, dtype=float), np.asarray(s_attn, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if s_sem.shape != s_attn.shape or s_sem.shape != valid.shape:
        raise ContractError(f"length mismatch: s_sem {s_sem.shape}, s_attn {s_attn.shape}, valid {valid.shape}")
    imp = np.where(valid, s_sem * s_attn, -np.inf)
    return ImportanceVector(s_sem, s_attn, imp, valid)


def baseline_score(strategy: str, hidden, probs, valid) -> np.ndarray:
    """Per-token selection scores for the score-based strategies (-inf on padding)."""
    valid = np.asarray(valid, dtype=bool)
    if strategy == "sap":
        return importance(semantic_saliency(hidden, valid), attention_centrality(probs, valid), valid).importance
    if strategy == "l2":
        s = l2_saliency(hidden, valid)
    elif strategy == "attention_only":
        s = attention_centrality(probs, valid)
    else:
        raise PruneConfigError(f"{strategy!r} is not a score-based strategy")
    return np.where(valid, s, -np.inf)


# ---------------------------------------------------------------------------
# selection


def budget(n_valid: int, alpha: float, window_W: int) -> int:
    return max(window_W, int(math.floor(alpha * n_valid)))


def select_tokens(scores, cfg: PruneConfig, valid: np.ndarray) -> np.ndarray:
    """Indices to keep for one sequence, ascending by original position."""
    imp = scores.importance if isinstance(scores, ImportanceVector) else np.asarray(scores, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    pos = np.flatnonzero(valid)
    n_valid = pos.size
    W = cfg.window_W
    if W > n_valid:
        raise PruneConfigError(f"window_W={W} exceeds the {n_valid} valid tokens")
    B = budget(n_valid, cfg.alpha, W)
    protected = pos[n_valid - W :]
    free = pos[: n_valid - W]
    # stable sort on -score: equal scores keep ascending index order
    order = np.argsort(-imp[free], kind="stable")
    chosen = free[order[: B - W]]
    return np.sort(np.concatenate([chosen, protected]))


def compress(hidden: Tensor, mask: np.ndarray, keep: list[np.ndarray]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Order-preserving gather of the kept rows, right-aligned in a padded batch.

    When no row drops anything the inputs are returned untouched.
    """
    mask = np.asarray(mask, dtype=bool)
    if hidden.ndim == 2:
        h, kept_valid, idx = compress(hidden.reshape(1, *hidden.shape), mask[None], [keep[0] if isinstance(keep, list) else keep])
        return h.reshape(h.shape[1:]), kept_valid[0], idx[0]
    B, N = mask.shape
    for row in keep:
        row = np.asarray(row)
        if row.size and (row.min() < 0 or row.max() >= N):
            raise ContractError("kept index out of range")
        if row.size > 1 and not (np.diff(row) > 0).all():
            raise ContractError("kept indices must be strictly increasing")
    if all(np.array_equal(np.asarray(k), np.flatnonzero(mask[b])) for b, k in enumerate(keep)):
        return hidden, mask, np.where(mask, np.arange(N)[None, :], -1)
    T = max(len(k) for k in keep)
    idx = np.full((B, T), -1, dtype=np.int64)
    for b, k in enumerate(keep):
        if len(k):
            idx[b, T - len(k) :] = k
    return K.gather_seq(hidden, idx), idx >= 0, idx


def pool_groups_for(valid: np.ndarray, alpha: float, window_W: int) -> list[list[np.ndarray]]:
    """Contiguous groups shrinking a sequence to the same budget as selection.

    The non-protected prefix is split into ``budget - W`` near-equal runs; the
    protected tail stays as singletons.
    """
    pos = np.flatnonzero(valid)
    n = pos.size
    if window_W > n:
        raise PruneConfigError(f"window_W={window_W} exceeds the {n} valid tokens")
    B = budget(n, alpha, window_W)
    prefix = pos[: n - window_W]
    n_groups = min(B - window_W, prefix.size)
    groups = [g for g in np.array_split(prefix, n_groups)] if n_groups > 0 else []
    return groups + [np.array([p]) for p in pos[n - window_W :]]


def baseline_pool(strategy: str, hidden: Tensor, valid: np.ndarray, alpha: float, window_W: int):
    """Pool consecutive tokens by max or mean; returns (hidden', valid', kept_map).

    The kept map points at the last source position of each group.
    """
    if strategy not in POOL_STRATEGIES:
        raise PruneConfigError(f"{strategy!r} is not a pooling strategy")
    valid = np.asarray(valid, dtype=bool)
    B, N = valid.shape
    per_row = [pool_groups_for(valid[b], alpha, window_W) for b in range(B)]
    T = max(len(g) for g in per_row)
    G = max(len(x) for gs in per_row for x in gs)
    groups = np.full((B, T, G), -1, dtype=np.int64)
    last = np.full((B, T), -1, dtype=np.int64)
    for b, gs in enumerate(per_row):
        off = T - len(gs)
        for t, g in enumerate(gs):
            groups[b, off + t, : len(g)] = g
            last[b, off + t] = g[-1]
    return K.pool_groups(hidden, groups, strategy), last >= 0, last


# ---------------------------------------------------------------------------
# hook


class SapHook:
    """Callable inserted after layer ``cfg.l_prune`` of the decoder."""

    def __init__(self, cfg: PruneConfig) -> None:
        if cfg.strategy == "none":
            raise PruneConfigError("strategy 'none' means no hook; use make_hook")
        self.cfg = cfg
        self.layer = cfg.l_prune
        self.last_scores: np.ndarray | None = None

    def scores(self, hidden: Tensor, probs: AttentionProbs, valid: np.ndarray) -> np.ndarray:
        return baseline_score(self.cfg.strategy, hidden, probs, valid)

    def __call__(self, hidden: Tensor, probs: AttentionProbs, valid: np.ndarray):
        cfg = self.cfg
        valid = np.asarray(valid, dtype=bool)
        if cfg.strategy in POOL_STRATEGIES:
            if cfg.alpha >= 1.0:
                return hidden, valid, np.where(valid, np.arange(valid.shape[1])[None, :], -1)
            return baseline_pool(cfg.strategy, hidden, valid, cfg.alpha, cfg.window_W)
        s = self.scores(hidden, probs, valid)
        self.last_scores = s
        keep = [select_tokens(s[b], cfg, valid[b]) for b in range(valid.shape[0])]
        return compress(hidden, valid, keep)


def make_hook(cfg: PruneConfig | None) -> SapHook | None:
    if cfg is None or cfg.strategy == "none":
        return None
    return SapHook(cfg)
