"""Object-view and graph-view convolutions over normalized subgraphs.

Subgraphs are first compiled into flat arrays (canonical object order,
structural features, edge lists, OVGC neighbor entries) and then embedded in
batches: one episode is a handful of array operations on the tape.

Object rows are ordered by a colour-refinement labelling that never looks at
object ids except to break ties between interchangeable objects, so relabeling
the objects of a subgraph leaves every embedding bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .extract import NormalizedSubgraph
from .hetgraph import HeterogeneousGraph, bfs_distances
from .params import ModelConfig, ModelParams


@dataclass
class CompiledSubgraph:
    objects: np.ndarray  # object ids in canonical row order
    slot: np.ndarray  # rank slot per row (1..N_type)
    struct: np.ndarray  # (n, d_struct) structural features
    feats: dict  # raw feature width -> (rows, matrix)
    u_row: int
    v_row: int
    src: np.ndarray  # directed edges (both directions), sorted by (dst, src)
    dst: np.ndarray
    ov_q: np.ndarray  # OVGC entries: query (0=u, 1=v), neighbor row, its slot
    ov_row: np.ndarray
    n_type: int

    @property
    def n(self) -> int:
        return len(self.objects)


def _distances(adj: dict[int, list[int]], q: int, objects) -> dict[int, float]:
    d = bfs_distances(adj, q)
    return {o: d.get(o, np.inf) for o in objects}


def structural_feature(sub: NormalizedSubgraph, i: int, cfg: ModelConfig,
                       dist: tuple[dict, dict] | None = None) -> np.ndarray:
    """``onehot(d(i,u)) + onehot(d(i,v))`` joined with ``onehot(r(i))``.

    The query objects get the fixed labels ``(0, 1, 0)`` (u) and ``(1, 0, 0)``
    (v); distances beyond the last bucket are clamped into it.
    """
    if i not in sub.object_type:
        raise KeyError(f"object {i} is not in the subgraph")
    if i == sub.u:
        du, dv, r = 0, 1, 0
    elif i == sub.v:
        du, dv, r = 1, 0, 0
    else:
        if dist is None:
            adj = sub.adjacency()
            dist = (bfs_distances(adj, sub.u), bfs_distances(adj, sub.v))
        du, dv, r = dist[0].get(i, np.inf), dist[1].get(i, np.inf), sub.rank(i)
    D = cfg.d_max
    out = np.zeros(cfg.d_struct)
    out[int(min(du, D - 1))] += 1.0
    out[int(min(dv, D - 1))] += 1.0
    out[D + min(int(r), cfg.n_type_max)] = 1.0
    return out


def _refine(objects: list[int], init: dict[int, tuple], adj: dict[int, list[int]]) -> dict[int, int]:
    """Stable colour refinement; colours are dense ints derived from keys only."""
    keys = sorted(set(init.values()))
    color = {o: keys.index(init[o]) for o in objects}
    n_colors = len(keys)
    while True:
        sig = {o: (color[o], tuple(sorted(color[x] for x in adj[o]))) for o in objects}
        keys = sorted(set(sig.values()))
        index = {k: c for c, k in enumerate(keys)}
        color = {o: index[sig[o]] for o in objects}
        if len(keys) == n_colors:
            return color
        n_colors = len(keys)


def compile_subgraph(sub: NormalizedSubgraph, g: HeterogeneousGraph, cfg: ModelConfig) -> CompiledSubgraph:
    adj = sub.adjacency()
    objs = list(sub.objects)
    du, dv = _distances(adj, sub.u, objs), _distances(adj, sub.v, objs)
    init = {}
    for o in objs:
        role = 0 if o == sub.u else 1 if o == sub.v else 2
        init[o] = (role, sub.rank(o), du[o], dv[o], tuple(np.asarray(g.features[o]).tolist()))
    color = _refine(objs, init, adj)
    order = sorted(objs, key=lambda o: (color[o], o))
    row = {o: k for k, o in enumerate(order)}
    slot = np.array([sub.rank(o) for o in order], dtype=np.int64)
    dist = ({o: du[o] for o in objs}, {o: dv[o] for o in objs})
    struct = np.stack([structural_feature(sub, o, cfg, dist) for o in order])

    by_dim: dict[int, list[int]] = {}
    for k, o in enumerate(order):
        by_dim.setdefault(len(g.features[o]), []).append(k)
    feats = {d: (np.asarray(rows, dtype=np.int64), np.stack([np.asarray(g.features[order[k]], dtype=np.float64)
                                                              for k in rows]))
             for d, rows in sorted(by_dim.items())}

    pairs = sorted((row[b], row[a]) for a in objs for b in adj[a])  # (dst, src)
    dst = np.array([p[0] for p in pairs], dtype=np.int64)
    src = np.array([p[1] for p in pairs], dtype=np.int64)

    ov_q, ov_row = [], []
    for q, dq in ((0, du), (1, dv)):
        qo = sub.u if q == 0 else sub.v
        ent = sorted((int(slot[row[o]]), row[o]) for o in objs if o != qo and 1 <= dq[o] <= cfg.hops)
        ov_q += [q] * len(ent)
        ov_row += [r for _, r in ent]
    return CompiledSubgraph(
        np.asarray(order, dtype=np.int64), slot, struct, feats, row[sub.u], row[sub.v], src, dst,
        np.asarray(ov_q, dtype=np.int64), np.asarray(ov_row, dtype=np.int64), sub.n_type,
    )


class SubgraphCompiler:
    """Memoizes :func:`compile_subgraph` per subgraph object."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self._memo: dict[int, tuple[NormalizedSubgraph, CompiledSubgraph]] = {}

    def __call__(self, sub: NormalizedSubgraph, g: HeterogeneousGraph) -> CompiledSubgraph:
        hit = self._memo.get(id(sub))
        if hit is not None and hit[0] is sub:
            return hit[1]
        c = compile_subgraph(sub, g, self.cfg)
        self._memo[id(sub)] = (sub, c)
        return c


@dataclass
class Batch:
    n_sub: int
    n_rows: int
    row_sub: np.ndarray
    struct: np.ndarray
    groups: list  # (slot, dim, rows, matrix)
    src: np.ndarray
    dst: np.ndarray
    ov_seg: np.ndarray  # (sub * 2 + q) * n_max + slot - 1
    ov_row: np.ndarray
    ov_qrow: np.ndarray
    ov_slot: np.ndarray
    slot_sub: np.ndarray  # valid (sub, slot) pairs for type-level attention
    slot_k: np.ndarray


def pack(items: Sequence[CompiledSubgraph], cfg: ModelConfig) -> Batch:
    n_max = cfg.n_type_max
    sizes = np.array([c.n for c in items], dtype=np.int64)
    off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    N = int(sizes.sum())
    row_sub = np.repeat(np.arange(len(items)), sizes)
    struct = np.concatenate([c.struct for c in items]) if items else np.zeros((0, cfg.d_struct))
    slot = np.concatenate([c.slot for c in items]) if items else np.zeros(0, dtype=np.int64)
    if np.any(slot > n_max):
        raise ValueError(f"subgraph uses rank slot {slot.max()} beyond n_type_max={n_max}")
    rows_by_dim: dict[int, list] = {}
    mats_by_dim: dict[int, list] = {}
    for c, o in zip(items, off):
        for d, (rows, mat) in c.feats.items():
            rows_by_dim.setdefault(d, []).append(rows + o)
            mats_by_dim.setdefault(d, []).append(mat)
    groups = []
    for d in sorted(rows_by_dim):
        rows = np.concatenate(rows_by_dim[d])
        mat = np.concatenate(mats_by_dim[d])
        s = slot[rows]
        for k in np.unique(s):
            m = s == k
            groups.append((int(k), d, rows[m], mat[m]))
    src = np.concatenate([c.src + o for c, o in zip(items, off)]) if items else np.zeros(0, dtype=np.int64)
    dst = np.concatenate([c.dst + o for c, o in zip(items, off)]) if items else np.zeros(0, dtype=np.int64)
    ov_seg, ov_row, ov_qrow = [], [], []
    for i, (c, o) in enumerate(zip(items, off)):
        qrow = np.where(c.ov_q == 0, c.u_row, c.v_row) + o
        ov_seg.append((i * 2 + c.ov_q) * n_max + c.slot[c.ov_row] - 1)
        ov_row.append(c.ov_row + o)
        ov_qrow.append(qrow)
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, dtype=np.int64)
    ov_row_a = cat(ov_row)
    n_types = np.array([c.n_type for c in items], dtype=np.int64)
    slot_sub = np.repeat(np.arange(len(items)), n_types)
    slot_k = cat([np.arange(1, t + 1) for t in n_types])
    return Batch(len(items), N, row_sub, struct, groups, src, dst, cat(ov_seg), ov_row_a, cat(ov_qrow),
                 slot[ov_row_a] if len(ov_row_a) else ov_row_a, slot_sub, slot_k)


def merge(batches: Sequence[Batch], cfg: ModelConfig) -> Batch:
    """Concatenate packed batches (subgraph order preserved)."""
    n_max = cfg.n_type_max
    ro = np.concatenate([[0], np.cumsum([b.n_rows for b in batches])[:-1]]).astype(np.int64)
    so = np.concatenate([[0], np.cumsum([b.n_sub for b in batches])[:-1]]).astype(np.int64)
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, dtype=np.int64)
    rows_by: dict[tuple[int, int], list] = {}
    mats_by: dict[tuple[int, int], list] = {}
    for b, r in zip(batches, ro):
        for k, d, rows, mat in b.groups:
            rows_by.setdefault((k, d), []).append(rows + r)
            mats_by.setdefault((k, d), []).append(mat)
    groups = [(k, d, np.concatenate(rows_by[(k, d)]), np.concatenate(mats_by[(k, d)]))
              for k, d in sorted(rows_by, key=lambda kd: (kd[1], kd[0]))]
    return Batch(
        int(sum(b.n_sub for b in batches)), int(sum(b.n_rows for b in batches)),
        cat([b.row_sub + o for b, o in zip(batches, so)]),
        np.concatenate([b.struct for b in batches]) if batches else np.zeros((0, cfg.d_struct)),
        groups,
        cat([b.src + r for b, r in zip(batches, ro)]),
        cat([b.dst + r for b, r in zip(batches, ro)]),
        cat([b.ov_seg + o * 2 * n_max for b, o in zip(batches, so)]),
        cat([b.ov_row + r for b, r in zip(batches, ro)]),
        cat([b.ov_qrow + r for b, r in zip(batches, ro)]),
        cat([b.ov_slot for b in batches]),
        cat([b.slot_sub + o for b, o in zip(batches, so)]),
        cat([b.slot_k for b in batches]),
    )


# -- forward ----------------------------------------------------------------------


def project_rows(batch: Batch, params: ModelParams) -> Tensor:
    """``h_i = W_{slot(i), dim(i)} x_i`` for every row of the batch."""
    if not batch.groups:
        return Tensor(np.zeros((0, params.cfg.d_h)))
    parts = [ad.matmul(mat, params.projection(k, d)) for k, d, _, mat in batch.groups]
    rows = np.concatenate([r for _, _, r, _ in batch.groups])
    inv = np.empty_like(rows)
    inv[rows] = np.arange(len(rows))
    return ad.gather(ad.concat(parts, axis=0), inv)


def ovgc_forward(batch: Batch, H: Tensor, params: ModelParams, trace: dict | None = None) -> Tensor:
    cfg = params.cfg
    n_max, d = cfg.n_type_max, cfg.d_h
    n_seg = batch.n_sub * 2 * n_max
    # row 2(k-1) of R is the query half of a_k, row 2(k-1)+1 the neighbor half
    A = ad.concat([ad.reshape(params[f"ovgc.a.{k}"], (1, 2 * d)) for k in range(1, n_max + 1)], axis=0)
    S = ad.reshape(ad.matmul(H, ad.transpose(ad.reshape(A, (2 * n_max, d)))), (-1,))
    col = 2 * (batch.ov_slot - 1)
    score = ad.add(ad.gather(S, batch.ov_qrow * 2 * n_max + col), ad.gather(S, batch.ov_row * 2 * n_max + col + 1))
    alpha = ad.segment_softmax(ad.leaky_relu(score), batch.ov_seg, n_seg)
    slot_emb = ad.leaky_relu(ad.edge_aggregate(alpha, H, batch.ov_seg, batch.ov_row, n_seg))
    base = batch.slot_sub * 2 * n_max + batch.slot_k - 1
    F = ad.add(ad.gather(slot_emb, base), ad.gather(slot_emb, base + n_max))  # f_agg = sum
    w = ad.matmul(ad.tanh(ad.add(ad.matmul(F, params["ovgc.W_ov"]), params["ovgc.b_ov"])), params["ovgc.a_ov"])
    beta = ad.segment_softmax(w, batch.slot_sub, batch.n_sub)
    z = ad.edge_aggregate(beta, F, batch.slot_sub, np.arange(len(batch.slot_sub)), batch.n_sub)
    if trace is not None:
        trace.update(alpha=alpha.value, alpha_seg=batch.ov_seg, beta=beta.value, beta_seg=batch.slot_sub,
                     slot_emb=slot_emb.value)
    return z


def _sage(X: Tensor, batch: Batch, params: ModelParams, layer: str) -> Tensor:
    deg = np.bincount(batch.dst, minlength=batch.n_rows).astype(np.float64)
    w = 1.0 / np.maximum(deg, 1.0)[batch.dst]
    M = ad.edge_aggregate(w, X, batch.dst, batch.src, batch.n_rows)
    pre = ad.add(ad.add(ad.matmul(X, params[f"gvgc.{layer}.W_self"]), ad.matmul(M, params[f"gvgc.{layer}.W_neigh"])),
                 params[f"gvgc.{layer}.b"])
    return ad.relu(pre)


def gvgc_forward(batch: Batch, H: Tensor, params: ModelParams) -> Tensor:
    X = ad.concat([Tensor(batch.struct), H], axis=1)
    X = _sage(X, batch, params, "l1")
    X = _sage(X, batch, params, "l2")
    pooled = ad.segment_mean(X, batch.row_sub, batch.n_sub)
    return ad.relu(ad.matmul(pooled, params["gvgc.W_gv"]))


def embed_batch(batch: Batch, params: ModelParams, trace: dict | None = None) -> Tensor:
    """Subgraph embeddings ``z`` (one row per subgraph) under the configured variant."""
    cfg = params.cfg
    H = project_rows(batch, params)
    parts = []
    if cfg.use_ov:
        parts.append(ovgc_forward(batch, H, params, trace))
    if cfg.use_gv:
        parts.append(gvgc_forward(batch, H, params))
    if not parts:
        raise ValueError("variant leaves no subgraph encoder")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


# -- single-subgraph conveniences ----------------------------------------------------------


def _single(sub: NormalizedSubgraph, g: HeterogeneousGraph, params: ModelParams) -> tuple[CompiledSubgraph, Batch]:
    c = compile_subgraph(sub, g, params.cfg)
    return c, pack([c], params.cfg)


def project_features(sub: NormalizedSubgraph, g: HeterogeneousGraph, params: ModelParams) -> Tensor:
    """Projected features with rows in ``sub.objects`` order."""
    c, b = _single(sub, g, params)
    H = project_rows(b, params)
    row = {int(o): k for k, o in enumerate(c.objects)}
    return ad.gather(H, [row[o] for o in sub.objects])


def ovgc_embed(sub: NormalizedSubgraph, g: HeterogeneousGraph, params: ModelParams,
               trace: dict | None = None) -> Tensor:
    _, b = _single(sub, g, params)
    return ad.reshape(ovgc_forward(b, project_rows(b, params), params, trace), (-1,))


def gvgc_embed(sub: NormalizedSubgraph, g: HeterogeneousGraph, params: ModelParams) -> Tensor:
    _, b = _single(sub, g, params)
    return ad.reshape(gvgc_forward(b, project_rows(b, params), params), (-1,))


def subgraph_embed(sub: NormalizedSubgraph, g: HeterogeneousGraph, params: ModelParams) -> Tensor:
    _, b = _single(sub, g, params)
    return ad.reshape(embed_batch(b, params), (-1,))
