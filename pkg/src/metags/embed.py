"""Object embeddings used only to rank object types by similarity.

Pipeline: co-occurrence counts within a walk window -> positive PMI -> rank
``dim`` factorization by orthogonal (subspace) power iteration.  Counts come
either from seeded truncated random walks (``method="walk"``) or from the exact
expected walk co-occurrence (``method="spectral"``), which is deterministic and
respects graph automorphisms.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hetgraph import HeterogeneousGraph

METHOD_VERSION = "ppmi-power-1"


@dataclass
class EmbeddingTable:
    dim: int
    vectors: np.ndarray  # (n_objects, dim)

    def __getitem__(self, obj: int) -> np.ndarray:
        return self.vectors[obj]


def random_walks(g: HeterogeneousGraph, n_walks: int, length: int, seed: int) -> np.ndarray:
    """``(n_objects * n_walks, length)`` walks, row ``o * n_walks + k`` starts at ``o``.

    A walk stuck on an isolated object repeats it (those steps are masked out
    of the co-occurrence counts).
    """
    rng = np.random.default_rng(seed)
    n = g.n_objects
    deg = np.diff(g.indptr)
    walks = np.empty((n * n_walks, length), dtype=np.int64)
    walks[:, 0] = np.repeat(np.arange(n), n_walks)
    for step in range(1, length):
        cur = walks[:, step - 1]
        d = deg[cur]
        r = rng.random(len(cur))
        pick = g.indptr[cur] + np.floor(r * np.maximum(d, 1)).astype(np.int64)
        walks[:, step] = np.where(d > 0, g.indices[np.minimum(pick, len(g.indices) - 1)] if len(g.indices) else cur, cur)
    return walks


def walk_cooccurrence(g: HeterogeneousGraph, walks: np.ndarray, window: int) -> np.ndarray:
    n = g.n_objects
    deg = np.diff(g.indptr)
    counts = np.zeros((n, n))
    live = deg[walks[:, 0]] > 0
    w = walks[live]
    L = w.shape[1]
    for off in range(1, window + 1):
        if off >= L:
            break
        a, b = w[:, :-off].ravel(), w[:, off:].ravel()
        np.add.at(counts, (a, b), 1.0)
        np.add.at(counts, (b, a), 1.0)
    return counts


def expected_cooccurrence(g: HeterogeneousGraph, window: int) -> np.ndarray:
    """``sum_{r=1..window} (D P^r + (D P^r)^T)``: walk co-occurrence in expectation."""
    n = g.n_objects
    A = np.zeros((n, n))
    for i in range(n):
        A[i, g.indices[g.indptr[i]:g.indptr[i + 1]]] = 1.0
    deg = A.sum(1)
    P = np.divide(A, deg[:, None], out=np.zeros_like(A), where=deg[:, None] > 0)
    D = np.diag(deg)
    acc = np.zeros((n, n))
    Pr = np.eye(n)
    for _ in range(window):
        Pr = P @ Pr
        acc += D @ Pr
    return acc + acc.T


def ppmi(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    row = counts.sum(1, keepdims=True)
    col = counts.sum(0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def power_factorize(M: np.ndarray, dim: int, seed: int, iters: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Rank-``dim`` embedding ``M Q diag(s)^-1/2`` from orthogonal power iteration.

    Each output row is a function of the matching row of ``M`` only, so objects
    with identical co-occurrence rows receive identical vectors.  Directions
    with (numerically) zero singular value are returned as zero columns.
    """
    n = M.shape[0]
    out = np.zeros((n, dim))
    k = min(dim, n)
    if k == 0 or not np.any(M):
        return out
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, k)))
    for _ in range(iters):
        Z = M @ (M.T @ Q)
        Qn, _ = np.linalg.qr(Z)
        # converged when the spanned subspace stops moving
        if np.linalg.norm(Qn - Q @ (Q.T @ Qn)) < tol:
            Q = Qn
            break
        Q = Qn
    B = M @ Q
    s = np.linalg.norm(B, axis=0)
    order = np.argsort(-s, kind="stable")
    B, s = B[:, order], s[order]
    keep = s > 1e-9 * max(s.max(), 1.0)
    E = np.zeros((n, k))
    E[:, keep] = B[:, keep] / np.sqrt(s[keep])
    out[:, :k] = E
    return out


def pretrain_embeddings(g: HeterogeneousGraph, dim: int = 64, seed: int = 0, method: str = "walk",
                        n_walks: int = 80, walk_length: int = 10, window: int = 5) -> EmbeddingTable:
    if g.n_objects == 0:
        raise ValueError("graph has no objects")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if method == "walk":
        counts = walk_cooccurrence(g, random_walks(g, n_walks, walk_length, seed), window)
    elif method == "spectral":
        counts = expected_cooccurrence(g, window)
    else:
        raise ValueError(f"unknown embedding method {method!r}")
    return EmbeddingTable(dim, power_factorize(ppmi(counts), dim, seed))


def cache_key(graph_id: str, dim: int, seed: int, method: str) -> str:
    raw = f"{graph_id}|{dim}|{seed}|{method}|{METHOD_VERSION}"
    return hashlib.sha256(raw.encode()).hexdigest()[:16]


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(b"MGSEMB1\n")
    buf.write(np.asarray(table.vectors.shape, dtype="<i8").tobytes())
    buf.write(np.ascontiguousarray(table.vectors, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_table(path: str | Path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"MGSEMB1\n"):
        raise ValueError(f"{path}: not an embedding cache file")
    n, d = np.frombuffer(raw[8:24], dtype="<i8")
    vec = np.frombuffer(raw[24:], dtype="<f8").reshape(int(n), int(d)).copy()
    return EmbeddingTable(int(d), vec)


def cached_embeddings(g: HeterogeneousGraph, dim: int, seed: int, method: str,
                      cache_dir: str | Path | None) -> EmbeddingTable:
    if cache_dir is None:
        return pretrain_embeddings(g, dim, seed, method)
    path = Path(cache_dir) / f"emb-{cache_key(g.graph_id, dim, seed, method)}.bin"
    if path.exists():
        return load_table(path)
    table = pretrain_embeddings(g, dim, seed, method)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, path)
    return table
