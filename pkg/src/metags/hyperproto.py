"""Hyper-graph prototypes over subgraph embeddings, distance classifier and loss.

Every set of subgraph embeddings (one relation's support subgraphs, or one
pair's subgraphs) becomes a hyper-graph whose nodes are joined when their
cosine similarity is above ``theta_ho`` (homophily) or below ``theta_he``
(heterophily).  Two attention channels run over the two edge sets and the node
states are mean-pooled into a vector of width ``2 |z|``.

Many hyper-graphs are processed in one batch: ``group[i]`` names the
hyper-graph of node ``i``.  Nodes are sorted by value inside each group before
anything else happens, which makes the result independent of input order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ModelParams

LOG_EPS = 1e-12


@dataclass
class HyperGraph:
    nodes: np.ndarray
    homophily_edges: set = field(default_factory=set)
    heterophily_edges: set = field(default_factory=set)
    theta_ho: float = 0.75
    theta_he: float = 0.15


def cosine_matrix(Z: np.ndarray) -> np.ndarray:
    """All-pairs cosine; a zero row has cosine 0 to everything (itself included)."""
    Z = np.asarray(Z, dtype=np.float64)
    norm = np.linalg.norm(Z, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    U = Z / safe[:, None]
    C = U @ U.T
    C[norm == 0, :] = 0.0
    C[:, norm == 0] = 0.0
    return C


def _check_thresholds(theta_ho: float, theta_he: float) -> None:
    if not theta_ho > theta_he:
        raise ValueError(f"need theta_ho > theta_he, got {theta_ho} <= {theta_he}")


def build_hypergraph(embs, theta_ho: float = 0.75, theta_he: float = 0.15) -> HyperGraph:
    _check_thresholds(theta_ho, theta_he)
    Z = np.atleast_2d(np.asarray(embs.value if isinstance(embs, Tensor) else embs, dtype=np.float64))
    if Z.shape[0] < 1:
        raise ValueError("a hyper-graph needs at least one node")
    C = cosine_matrix(Z)
    n = len(Z)
    ho, he = set(), set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if C[i, j] > theta_ho:
                ho.add((i, j))
            elif C[i, j] < theta_he:
                he.add((i, j))
    return HyperGraph(Z, ho, he, theta_ho, theta_he)


def _edges(Zs: np.ndarray, group: np.ndarray, n_groups: int, theta_ho: float, theta_he: float):
    """Directed (receiver, sender) edge arrays for both channels, sorted."""
    ho_i, ho_j, he_i, he_j = [], [], [], []
    starts = np.searchsorted(group, np.arange(n_groups + 1))
    for gi in range(n_groups):
        a, b = starts[gi], starts[gi + 1]
        if b - a < 2:
            continue
        C = cosine_matrix(Zs[a:b])
        off = ~np.eye(b - a, dtype=bool)
        i, j = np.nonzero((C > theta_ho) & off)
        ho_i.append(i + a)
        ho_j.append(j + a)
        i, j = np.nonzero((C < theta_he) & off)
        he_i.append(i + a)
        he_j.append(j + a)
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, dtype=np.int64)
    return (cat(ho_i), cat(ho_j)), (cat(he_i), cat(he_j))


def _attend(S: Tensor, recv: np.ndarray, send: np.ndarray, a: Tensor) -> Tensor:
    """One attention layer; nodes without neighbours keep their previous state."""
    n, d = S.shape
    if len(recv) == 0:
        return S
    # [s_i || s_j] . a  ==  s_i . a[:d] + s_j . a[d:]
    P = ad.reshape(ad.matmul(S, ad.transpose(ad.reshape(a, (2, d)))), (-1,))
    e = ad.leaky_relu(ad.add(ad.gather(P, 2 * recv), ad.gather(P, 2 * send + 1)))
    alpha = ad.segment_softmax(e, recv, n)
    agg = ad.edge_aggregate(alpha, S, recv, send, n)
    has = np.zeros((n, 1))
    has[np.unique(recv)] = 1.0
    if has.all():
        return ad.leaky_relu(agg)
    return ad.add(ad.mul(ad.leaky_relu(agg), has), ad.mul(S, 1.0 - has))


def canonical_order(Z: np.ndarray, group: np.ndarray) -> np.ndarray:
    """Permutation sorting nodes by group, then by value (lexicographic rows)."""
    keys = [Z[:, k] for k in range(Z.shape[1] - 1, -1, -1)] + [group]
    return np.lexsort(keys)


def hyper_gnn(Zs: Tensor, group: np.ndarray, n_groups: int, params: ModelParams,
              drop_heterophily: bool = False) -> Tensor:
    """Per-node ``[z_ho || z_he]`` after ``hyper_layers`` layers.

    ``Zs`` must already be in :func:`canonical_order` (``group`` ascending).
    """
    cfg = params.cfg
    (ho_i, ho_j), (he_i, he_j) = _edges(Zs.value, group, n_groups, cfg.theta_ho, cfg.theta_he)
    if drop_heterophily:
        he_i = he_j = np.zeros(0, dtype=np.int64)
    S_ho = S_he = Zs
    for l in range(cfg.hyper_layers):
        S_ho = _attend(S_ho, ho_i, ho_j, params[f"hyper.ho.{l}.a"])
        S_he = _attend(S_he, he_i, he_j, params[f"hyper.he.{l}.a"])
    return ad.concat([S_ho, S_he], axis=1)


def pool_groups(Z: Tensor, group, n_groups: int, params: ModelParams) -> Tensor:
    """One pooled vector per group: hyper-graph prototype, or the plain mean
    when the configured variant disables the hyper-graph."""
    _check_thresholds(params.cfg.theta_ho, params.cfg.theta_he)
    group = np.asarray(group, dtype=np.int64)
    order = canonical_order(Z.value, group)
    Zs = ad.gather(Z, order)
    g = group[order]
    if not params.cfg.use_hyper:
        return ad.segment_mean(Zs, g, n_groups)
    return ad.segment_mean(hyper_gnn(Zs, g, n_groups, params), g, n_groups)


def proto_sr(embs: Tensor, params: ModelParams) -> Tensor:
    """Prototype of one relation from its support subgraph embeddings ``(n, |z|)``."""
    embs = ad.as_tensor(embs)
    if embs.shape[0] < 1:
        raise ValueError("no support embeddings")
    return ad.reshape(pool_groups(embs, np.zeros(embs.shape[0], dtype=np.int64), 1, params), (-1,))


def pair_embed(embs: Tensor, params: ModelParams) -> Tensor:
    """Pair embedding from the embeddings of that pair's subgraphs (same machinery as :func:`proto_sr`)."""
    return proto_sr(embs, params)


def class_logits(zq: Tensor, prototypes: Tensor) -> Tensor:
    zq, prototypes = ad.as_tensor(zq), ad.as_tensor(prototypes)
    single = zq.value.ndim == 1
    if single:
        zq = ad.reshape(zq, (1, -1))
    if zq.shape[1] != prototypes.shape[1]:
        raise ad.ShapeError(f"classify: embedding width {zq.shape[1]} vs prototype width {prototypes.shape[1]}")
    logits = ad.neg(ad.squared_euclidean(zq, prototypes))
    return ad.reshape(logits, (-1,)) if single else logits


def classify(zq, prototypes) -> Tensor:
    """``softmax(-||z - p_y||^2)`` over the prototypes (rows)."""
    prototypes = ad.as_tensor(prototypes)
    if prototypes.value.ndim != 2 or prototypes.shape[0] < 1:
        raise ValueError("classify needs at least one prototype row")
    return ad.softmax(class_logits(zq, prototypes), axis=-1)


def _picked(mat: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    m, n = mat.shape
    if labels.shape != (m,):
        raise ValueError(f"{m} predictions but {labels.shape[0]} labels")
    return ad.gather(ad.reshape(mat, (-1,)), np.arange(m) * n + labels)


def episode_loss(probs, labels, eps: float = LOG_EPS) -> Tensor:
    """``-mean log p(y*)`` with ``p`` clamped to ``[eps, 1]``."""
    probs = ad.as_tensor(probs)
    if probs.value.ndim == 1:
        probs = ad.reshape(probs, (1, -1))
    return ad.neg(ad.reduce_mean(ad.log(_picked(probs, labels), eps=eps)))


def logit_loss(logits: Tensor, labels) -> Tensor:
    """The same objective evaluated through ``log_softmax`` (used for training)."""
    return ad.neg(ad.reduce_mean(_picked(ad.log_softmax(logits, axis=-1), labels)))
