"""Trie-constrained beam search, ranking metrics and efficiency summaries."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from . import kernel as K
from .backbone import Decoder, ForwardTrace
from .corpus import N_SPECIAL, PAD, CatalogError, Example, SidTrie, history_window
from .kernel import ContractError


class MeasurementError(Exception):
    pass


@dataclass(frozen=True)
class BeamHypothesis:
    prefix: tuple[int, ...]
    log_prob: float


def _last_logprobs(model: Decoder, ids: np.ndarray, valid: np.ndarray, hook, chunk: int) -> np.ndarray:
    out = []
    with K.no_grad():
        for s in range(0, ids.shape[0], chunk):
            tr = model.forward(ids[s : s + chunk], valid[s : s + chunk], prune_hook=hook, training=False)
            out.append(K.log_softmax_np(tr.logits.data[:, -1, :]))
            del tr
    return np.concatenate(out, axis=0)


def beam_search_batch(
    model: Decoder,
    windows: np.ndarray,
    valids: np.ndarray,
    trie: SidTrie,
    beam_width: int = 20,
    top_k: int | None = None,
    V_c: int | None = None,
    prune_hook=None,
    chunk: int = 128,
) -> list[list[BeamHypothesis]]:
    """Level-synchronous beam search for several users at once.

    Each level appends one SID token; only codes that continue a catalog path
    are expanded. Hypotheses are ranked by accumulated log-probability, ties by
    lexicographic code.
    """
    top_k = beam_width if top_k is None else top_k
    if beam_width < top_k:
        raise ValueError(f"beam_width={beam_width} < top_k={top_k}")
    if not trie.root:
        raise CatalogError("trie is empty")
    if V_c is None:
        V_c = (model.cfg.vocab_size - N_SPECIAL) // trie.L
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    valids = np.atleast_2d(np.asarray(valids, dtype=bool))
    U = windows.shape[0]
    beams: list[list[BeamHypothesis]] = [[BeamHypothesis((), 0.0)] for _ in range(U)]
    for level in range(trie.L):
        flat = [(u, hyp) for u in range(U) for hyp in beams[u]]
        offset = N_SPECIAL + level * V_c
        ids = np.stack([np.concatenate([windows[u], [N_SPECIAL + j * V_c + c for j, c in enumerate(h.prefix)]]) for u, h in flat]).astype(np.int64)
        valid = np.stack([np.concatenate([valids[u], np.ones(level, dtype=bool)]) for u, _ in flat])
        logp = _last_logprobs(model, ids, valid, prune_hook, chunk)
        fresh: list[list[BeamHypothesis]] = [[] for _ in range(U)]
        for row, (u, hyp) in enumerate(flat):
            kids = trie.children(hyp.prefix)
            scores = logp[row, [offset + c for c in kids]]
            fresh[u].extend(BeamHypothesis(hyp.prefix + (c,), hyp.log_prob + float(s)) for c, s in zip(kids, scores))
        beams = [sorted(c, key=lambda h: (-h.log_prob, h.prefix))[:beam_width] for c in fresh]
    return [b[:top_k] for b in beams]


def beam_search(model, history_tokens, trie, beam_width=20, top_k=None, valid=None, **kw) -> list[tuple[tuple[int, ...], float]]:
    ids = np.asarray(history_tokens, dtype=np.int64)
    valid = ids != PAD if valid is None else valid
    res = beam_search_batch(model, ids[None], np.asarray(valid)[None], trie, beam_width, top_k, **kw)[0]
    return [(h.prefix, h.log_prob) for h in res]


# ---------------------------------------------------------------------------
# metrics


def target_rank(ranked: Sequence[Sequence[int]], target: Sequence[int]) -> int | None:
    """1-based rank of ``target`` in ``ranked`` (codes compared as tuples)."""
    t = tuple(target)
    for r, code in enumerate(ranked, start=1):
        if tuple(code) == t:
            return r
    return None


def recall_at_k(ranked, target, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    r = target_rank(ranked, target)
    return 1.0 if r is not None and r <= k else 0.0


hit_at_k = recall_at_k


def ndcg_at_k(ranked, target, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    r = target_rank(ranked, target)
    return 1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0


@dataclass
class MetricsReport:
    recall_at: dict[int, float] = field(default_factory=dict)
    ndcg_at: dict[int, float] = field(default_factory=dict)
    hit_at: dict[int, float] = field(default_factory=dict)
    mean_step_millis: float | None = None
    peak_bytes: float | None = None
    speedup_vs_base: float | None = None
    reduction_vs_base: float | None = None
    n_users: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("recall_at", "ndcg_at", "hit_at"):
            d[key] = {str(k): v for k, v in sorted(d[key].items())}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        for key in ("recall_at", "ndcg_at", "hit_at"):
            d[key] = {int(k): float(v) for k, v in d.get(key, {}).items()}
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())


def score_rankings(ranked_lists, targets, ks=(5, 10), hit_ks=(20, 100)) -> MetricsReport:
    n = len(targets)
    rep = MetricsReport(n_users=n)
    if n == 0:
        return rep
    ranks = [target_rank(rl, t) for rl, t in zip(ranked_lists, targets)]
    for k in ks:
        rep.recall_at[k] = sum(1.0 for r in ranks if r is not None and r <= k) / n
        rep.ndcg_at[k] = sum(1.0 / math.log2(r + 1) for r in ranks if r is not None and r <= k) / n
    for k in sorted(set(ks) | set(hit_ks)):
        rep.hit_at[k] = sum(1.0 for r in ranks if r is not None and r <= k) / n
    return rep


def evaluate(
    model: Decoder,
    examples: Sequence[Example],
    catalog: dict[Hashable, object],
    trie: SidTrie,
    window_items: int,
    V_c: int,
    beam_width: int = 20,
    prune_hook=None,
    ks=(5, 10),
    hit_ks=(20, 100),
    chunk_users: int = 64,
) -> MetricsReport:
    """Generate top-``beam_width`` codes per user and score against the target code.

    A generated code counts as a hit when it equals the target item's code, so
    colliding items are indistinguishable by construction.
    """
    ranked, targets = [], []
    for s in range(0, len(examples), chunk_users):
        part = examples[s : s + chunk_users]
        ids, valid = history_window(part, catalog, window_items, V_c)
        res = beam_search_batch(model, ids, valid, trie, beam_width, beam_width, V_c=V_c, prune_hook=prune_hook)
        ranked.extend([h.prefix for h in hyps] for hyps in res)
        targets.extend(catalog[e.target].codes for e in part)
    return score_rankings(ranked, targets, ks, hit_ks)


# ---------------------------------------------------------------------------
# efficiency


def _steady(log, warmup: int):
    rows = [r for r in log if r.step >= warmup]
    if len(rows) < 100:
        raise MeasurementError(f"need >= 100 steady-state steps (step >= {warmup}), got {len(rows)}")
    return rows


def summarize_efficiency(log, warmup: int = 100) -> tuple[float, float]:
    """(mean wall millis, mean per-step high-water bytes) over the steady window."""
    rows = _steady(log, warmup)
    return float(np.mean([r.wall_millis for r in rows])), float(np.mean([r.high_water_bytes for r in rows]))


def aggregate_efficiency(step_log, base_log, warmup: int = 100) -> tuple[float, float]:
    """Speedup (base time / variant time) and memory reduction (1 - variant / base)."""
    t_var, m_var = summarize_efficiency(step_log, warmup)
    t_base, m_base = summarize_efficiency(base_log, warmup)
    return t_base / t_var, 1.0 - m_var / m_base


def write_efficiency_table(rows: Sequence[tuple[str, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "Speedup", "Reduction"])
        for name, sp, red in rows:
            w.writerow([name, f"{sp:.4f}", f"{red:.4f}"])


# ---------------------------------------------------------------------------
# attention export


def dump_attention(trace: ForwardTrace, layers: Sequence[int], path: str | Path, sample: int = 0) -> list[Path]:
    """Write one head-averaged query-by-key CSV per requested layer."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for layer in layers:
        if layer not in trace.probs:
            raise ContractError(f"layer {layer} attention was not retained in the trace")
        A = trace.probs[layer].values
        M = A[sample].mean(axis=0) if A.ndim == 4 else A.mean(axis=0)
        f = out_dir / f"attention_layer{layer}.csv"
        np.savetxt(f, M, delimiter=",", fmt="%.17g")
        written.append(f)
    return written
