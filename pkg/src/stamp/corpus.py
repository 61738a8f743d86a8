"""Interaction data: synthetic generation, CSV ingestion, splits, SID serialization."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .quantizer import SidCode

logger = logging.getLogger(__name__)

PAD = 0
BOS = 1
N_SPECIAL = 2


class CorpusError(Exception):
    pass


class CatalogError(CorpusError):
    pass


class ParseError(CorpusError):
    pass


class EmptyDatasetError(CorpusError):
    pass


class TrieRangeError(CorpusError):
    pass


@dataclass
class InteractionDataset:
    users: list[Hashable]
    histories: dict[Hashable, list[Hashable]]
    catalog: dict[Hashable, SidCode] = field(default_factory=dict)

    @property
    def n_interactions(self) -> int:
        return sum(len(h) for h in self.histories.values())

    @property
    def items(self) -> list[Hashable]:
        seen: dict[Hashable, None] = {}
        for u in self.users:
            for i in self.histories[u]:
                seen.setdefault(i, None)
        return list(seen)

    def check(self) -> None:
        for u in self.users:
            h = self.histories[u]
            if len(h) < 3:
                raise CorpusError(f"user {u!r}: history shorter than 3")
            missing = [i for i in h if i not in self.catalog]
            if missing:
                raise CatalogError(f"user {u!r}: items not in catalog: {missing[:5]}")


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic(
    n_users: int,
    n_items: int,
    d_emb: int,
    n_latent_clusters: int,
    seed: int,
    *,
    history_len: tuple[int, int] = (5, 20),
    concentration: float = 0.9,
    follow_prob: float = 0.8,
    n_successors: int = 4,
    cluster_scale: float = 4.0,
) -> tuple[np.ndarray, InteractionDataset]:
    """Clustered item embeddings plus Markovian user histories.

    Each item's successors are its nearest neighbours in embedding space.
    A user draws a preferred cluster (weight ``concentration``, the rest spread
    evenly) and walks: with ``follow_prob`` the next item is a successor of
    the current one, otherwise a fresh item from a cluster drawn from the
    user's mixture.
    """
    if not n_items >= n_latent_clusters >= 1:
        raise CorpusError("need n_items >= n_latent_clusters >= 1")
    rng = np.random.default_rng(seed)
    C = n_latent_clusters
    means = rng.normal(0.0, cluster_scale, size=(C, d_emb))
    cluster_of = np.arange(n_items) % C
    rng.shuffle(cluster_of)
    emb = means[cluster_of] + rng.normal(0.0, 1.0, size=(n_items, d_emb))

    members = [np.flatnonzero(cluster_of == c) for c in range(C)]
    k = min(n_successors, n_items - 1)
    successors = np.zeros((n_items, max(k, 1)), dtype=np.int64)
    sq = (emb**2).sum(1)
    for s in range(0, n_items, 512):
        d2 = sq[s : s + 512, None] - 2.0 * emb[s : s + 512] @ emb.T + sq[None, :]
        d2[np.arange(d2.shape[0]), np.arange(s, s + d2.shape[0])] = np.inf
        if k > 0:
            successors[s : s + 512] = np.argsort(d2, axis=1, kind="stable")[:, :k]

    lo, hi = history_len
    histories: dict[Hashable, list[Hashable]] = {}
    users = list(range(n_users))
    for u in users:
        pref = int(rng.integers(C))
        mix = np.full(C, (1.0 - concentration) / max(C - 1, 1)) if C > 1 else np.ones(1)
        mix[pref] = concentration if C > 1 else 1.0
        length = int(rng.integers(lo, hi + 1))
        cur = int(rng.choice(members[rng.choice(C, p=mix)]))
        h = [cur]
        for _ in range(length - 1):
            if k > 0 and rng.random() < follow_prob:
                cur = int(successors[cur, rng.integers(k)])
            else:
                cur = int(rng.choice(members[rng.choice(C, p=mix)]))
            h.append(cur)
        histories[u] = h
    return emb, InteractionDataset(users=users, histories=histories)


# ---------------------------------------------------------------------------
# CSV ingestion


def _is_header(row: list[str]) -> bool:
    try:
        float(row[2])
    except (IndexError, ValueError):
        return True
    return False


def five_core(rows: list[tuple[str, str, float]], k: int = 5) -> list[tuple[str, str, float]]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    while True:
        ucount = Counter(r[0] for r in rows)
        icount = Counter(r[1] for r in rows)
        kept = [r for r in rows if ucount[r[0]] >= k and icount[r[1]] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def ingest_csv(path: str | Path, min_count: int = 5) -> InteractionDataset:
    """Read ``user_id,item_id,timestamp`` rows (header optional) and 5-core filter."""
    rows: list[tuple[str, str, float]] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and _is_header(row):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            user, item, ts = (c.strip() for c in row)
            try:
                t = float(ts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            if not user or not item:
                raise ParseError(f"{path}:{lineno}: empty id")
            rows.append((user, item, t))
    rows = five_core(rows, min_count)
    if not rows:
        raise EmptyDatasetError(f"{path}: nothing left after {min_count}-core filtering")
    grouped: dict[str, list[tuple[float, int, str]]] = defaultdict(list)
    for order, (u, i, t) in enumerate(rows):
        grouped[u].append((t, order, i))
    users = list(grouped)
    histories = {u: [i for _, _, i in sorted(grouped[u])] for u in users}
    return InteractionDataset(users=users, histories=histories)


# ---------------------------------------------------------------------------
# leave-one-out split


@dataclass(frozen=True)
class Example:
    user: Hashable
    history: tuple[Hashable, ...]
    target: Hashable


@dataclass
class Split:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    excluded: int = 0

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def split_leave_one_out(ds: InteractionDataset) -> Split:
    """Last item -> test, second-to-last -> validation, earlier targets -> train."""
    train, val, test = [], [], []
    excluded = 0
    for u in ds.users:
        h = tuple(ds.histories[u])
        t = len(h)
        if t < 3:
            excluded += 1
            continue
        for k in range(1, t - 2):
            train.append(Example(u, h[:k], h[k]))
        val.append(Example(u, h[: t - 2], h[t - 2]))
        test.append(Example(u, h[: t - 1], h[t - 1]))
    if excluded:
        logger.warning("excluded %d users with fewer than 3 interactions", excluded)
    return Split(train, val, test, excluded)


# ---------------------------------------------------------------------------
# serialization


def vocab_size(L: int, V_c: int) -> int:
    return N_SPECIAL + L * V_c


def code_to_tokens(codes: Sequence[int], V_c: int) -> list[int]:
    return [N_SPECIAL + j * V_c + int(c) for j, c in enumerate(codes)]


def token_to_code(token: int, V_c: int) -> tuple[int, int]:
    """Invert the level offsetting: token id -> (level, codeword)."""
    if token < N_SPECIAL:
        raise CatalogError(f"token {token} is a special token")
    level, code = divmod(token - N_SPECIAL, V_c)
    return level, code


@dataclass(frozen=True)
class TokenSequence:
    input_ids: np.ndarray
    attn_valid: np.ndarray
    target_ids: np.ndarray | None
    positions: np.ndarray


def serialize(
    history: Sequence[Hashable],
    catalog: dict[Hashable, SidCode],
    window_items: int,
    V_c: int,
    target: Hashable | None = None,
) -> TokenSequence:
    """Most recent ``window_items`` items as BOS + level-ordered SID tokens, left-padded."""
    if window_items < 1:
        raise CorpusError("window_items must be >= 1")
    if not history:
        raise CorpusError("history must contain at least one item")
    try:
        codes = [catalog[i].codes for i in history[-window_items:]]
        tgt = None if target is None else catalog[target].codes
    except KeyError as exc:
        raise CatalogError(f"item {exc.args[0]!r} not in catalog") from None
    L = len(codes[0])
    n = 1 + window_items * L
    content = [BOS] + [t for c in codes for t in code_to_tokens(c, V_c)]
    ids = np.full(n, PAD, dtype=np.int64)
    ids[n - len(content) :] = content
    valid = ids != PAD
    target_ids = None if tgt is None else np.array(code_to_tokens(tgt, V_c), dtype=np.int64)
    return TokenSequence(ids, valid, target_ids, np.arange(n))


def deserialize(seq: TokenSequence, L: int, V_c: int) -> list[tuple[int, ...]]:
    content = [int(t) for t in seq.input_ids[seq.attn_valid] if t != BOS]
    out = []
    for s in range(0, len(content), L):
        out.append(tuple(token_to_code(t, V_c)[1] for t in content[s : s + L]))
    return out


@dataclass
class Batch:
    """Model-ready batch: history window followed by the first L-1 target tokens."""

    input_ids: np.ndarray  # [B, N + L - 1]
    valid: np.ndarray  # [B, N + L - 1]
    targets: np.ndarray  # [B, L]
    target_items: list[Hashable]

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def make_batch(examples: Sequence[Example], catalog: dict[Hashable, SidCode], window_items: int, V_c: int) -> Batch:
    seqs = [serialize(e.history, catalog, window_items, V_c, target=e.target) for e in examples]
    ids = np.stack([np.concatenate([s.input_ids, s.target_ids[:-1]]) for s in seqs])
    return Batch(ids, ids != PAD, np.stack([s.target_ids for s in seqs]), [e.target for e in examples])


def history_window(examples: Sequence[Example], catalog, window_items: int, V_c: int) -> tuple[np.ndarray, np.ndarray]:
    """Serialized windows without target tokens, for generation."""
    seqs = [serialize(e.history, catalog, window_items, V_c) for e in examples]
    ids = np.stack([s.input_ids for s in seqs])
    return ids, ids != PAD


# ---------------------------------------------------------------------------
# prefix trie over catalog codes


class SidTrie:
    def __init__(self, catalog: dict[Hashable, SidCode]) -> None:
        if not catalog:
            raise CatalogError("cannot build a trie over an empty catalog")
        lengths = {len(c.codes) for c in catalog.values()}
        if len(lengths) != 1:
            raise CatalogError(f"catalog codes have mixed lengths {sorted(lengths)}")
        self.L = lengths.pop()
        self.root: dict = {}
        self._leaves: dict[tuple[int, ...], set] = {}
        for item, code in catalog.items():
            node = self.root
            for c in code.codes:
                node = node.setdefault(int(c), {})
            self._leaves.setdefault(tuple(int(c) for c in code.codes), set()).add(item)

    def children(self, prefix: Sequence[int] = ()) -> list[int]:
        if len(prefix) > self.L:
            raise TrieRangeError(f"prefix length {len(prefix)} exceeds depth {self.L}")
        node = self.root
        for c in prefix:
            node = node.get(int(c))
            if node is None:
                return []
        return sorted(node)

    def items(self, code: Sequence[int]) -> set:
        return self._leaves.get(tuple(int(c) for c in code), set())

    def paths(self) -> set[tuple[int, ...]]:
        out: set[tuple[int, ...]] = set()

        def walk(node, prefix):
            if len(prefix) == self.L:
                out.add(prefix)
                return
            for c, child in node.items():
                walk(child, prefix + (c,))

        walk(self.root, ())
        return out


def build_trie(catalog: dict[Hashable, SidCode]) -> SidTrie:
    return SidTrie(catalog)


def trie_children(trie: SidTrie, prefix: Sequence[int] = ()) -> set[int]:
    return set(trie.children(prefix))


def build_catalog(item_ids: Iterable[Hashable], codes: np.ndarray) -> dict[Hashable, SidCode]:
    return {i: SidCode(tuple(int(c) for c in row), i) for i, row in zip(item_ids, codes)}
