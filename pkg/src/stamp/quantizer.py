"""Residual k-means tokenizer mapping item embeddings to semantic-ID codes."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

import numpy as np


class QuantizerError(Exception):
    pass


class InsufficientDataError(QuantizerError):
    pass


class CodeRangeError(QuantizerError):
    pass


_MAGIC = b"RQCB"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class Codebooks:
    """``centroids[level, code, :]``; levels are applied to successive residuals."""

    centroids: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 3 or c.shape[0] < 1 or c.shape[1] < 1:
            raise QuantizerError(f"codebooks must be [L, V_c, d_emb], got {c.shape}")
        if not np.isfinite(c).all():
            raise QuantizerError("codebooks contain non-finite centroids")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def L(self) -> int:
        return self.centroids.shape[0]

    @property
    def V_c(self) -> int:
        return self.centroids.shape[1]

    @property
    def d_emb(self) -> int:
        return self.centroids.shape[2]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, self.L, self.V_c, self.d_emb))
            fh.write(self.centroids.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "Codebooks":
        raw = Path(path).read_bytes()
        magic, version, L, V_c, d = _HEADER.unpack_from(raw)
        if magic != _MAGIC or version != _VERSION:
            raise QuantizerError(f"{path}: not a version-{_VERSION} codebook file")
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != L * V_c * d:
            raise QuantizerError(f"{path}: expected {L * V_c * d} floats, found {body.size}")
        return cls(body.reshape(L, V_c, d).astype(np.float64))


def read_header(path: str | Path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        _, _, L, V_c, d = _HEADER.unpack(fh.read(_HEADER.size))
    return L, V_c, d


@dataclass(frozen=True)
class SidCode:
    codes: tuple[int, ...]
    item_id: Hashable = None

    def __len__(self) -> int:
        return len(self.codes)


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared distances ``[M, K]`` (no norm expansion, so ties stay ties)."""
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - c[None, :, :]
        out[s : s + chunk] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    M = x.shape[0]
    chosen = [int(rng.integers(M))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; take unused ones in order
            unused = np.setdiff1d(np.arange(M), chosen)
            chosen.append(int(unused[0]))
        else:
            chosen.append(int(rng.choice(M, p=d2 / total)))
        d2 = np.minimum(d2, ((x - x[chosen[-1]]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations; empty clusters are re-seeded from the farthest points."""
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            own = d2[np.arange(x.shape[0]), assign]
            far = np.argsort(-own, kind="stable")[: empty.size]
            centroids[empty] = x[far]
    return centroids, _sq_dists(x, centroids).argmin(axis=1)


def fit(embeddings: np.ndarray, L: int = 3, V_c: int = 256, seed: int = 0, max_iters: int = 100) -> Codebooks:
    """Residual k-means: level ``j`` clusters what levels ``< j`` left over."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise QuantizerError("embeddings must be a 2-D matrix")
    if L < 1:
        raise QuantizerError("L must be >= 1")
    if x.shape[0] < V_c:
        raise InsufficientDataError(f"need at least V_c={V_c} embeddings, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for _ in range(L):
        c, a = kmeans(residual, V_c, rng, max_iters=max_iters)
        levels.append(c)
        residual = residual - c[a]
    return Codebooks(np.stack(levels))


def encode_many(embeddings: np.ndarray, cb: Codebooks) -> np.ndarray:
    """Greedy nearest-centroid codes ``[M, L]``; ties go to the lowest index."""
    residual = np.array(embeddings, dtype=np.float64, ndmin=2)
    if residual.shape[1] != cb.d_emb:
        raise QuantizerError(f"embedding width {residual.shape[1]} != codebook width {cb.d_emb}")
    codes = np.empty((residual.shape[0], cb.L), dtype=np.int64)
    for j in range(cb.L):
        idx = _sq_dists(residual, cb.centroids[j]).argmin(axis=1)
        codes[:, j] = idx
        residual = residual - cb.centroids[j][idx]
    return codes


def encode(embedding: np.ndarray, cb: Codebooks, item_id: Hashable = None) -> SidCode:
    e = np.asarray(embedding, dtype=np.float64)
    if not np.isfinite(e).all():
        raise QuantizerError("embedding must be finite")
    return SidCode(tuple(int(c) for c in encode_many(e[None, :], cb)[0]), item_id)


def decode(code: SidCode | tuple[int, ...], cb: Codebooks) -> np.ndarray:
    codes = code.codes if isinstance(code, SidCode) else tuple(code)
    if len(codes) != cb.L:
        raise CodeRangeError(f"code length {len(codes)} != L={cb.L}")
    out = np.zeros(cb.d_emb)
    for j, c in enumerate(codes):
        if not 0 <= c < cb.V_c:
            raise CodeRangeError(f"code {c} at level {j} outside [0, {cb.V_c})")
        out += cb.centroids[j, c]
    return out


def residual_energy(embeddings: np.ndarray, cb: Codebooks) -> np.ndarray:
    """Sum of squared residual norms after 0, 1, ..., L levels (length L+1)."""
    residual = np.array(embeddings, dtype=np.float64)
    codes = encode_many(residual, cb)
    out = [float((residual**2).sum())]
    for j in range(cb.L):
        residual = residual - cb.centroids[j][codes[:, j]]
        out.append(float((residual**2).sum()))
    return np.array(out)


def collision_rate(codes: np.ndarray) -> float:
    """Share of items whose code duplicates an earlier item's code (1 - unique/n)."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        return 0.0
    n_unique = np.unique(codes, axis=0).shape[0]
    return float(codes.shape[0] - n_unique) / codes.shape[0]
