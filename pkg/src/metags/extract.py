"""Task generation: path mining, graph-structure extraction, normalized
subgraphs with isolated-object repair and type ranking, and episode sampling.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .embed import EmbeddingTable, cached_embeddings
from .hetgraph import GraphCorpus, HeterogeneousGraph, bfs_distances

log = logging.getLogger(__name__)

SYNTHETIC_LINK = -1
"""Link-type id reserved for links added by isolated-object repair."""


class NoPath(LookupError):
    """The query pair is disconnected within ``l_max`` hops."""


class InsufficientData(ValueError):
    pass


@dataclass
class ExtractConfig:
    k_path: int = 500
    l_max: int = 6
    path_cap: int = 50_000
    n_type_min: int = 2
    n_type_max: int = 6
    m: int = 20
    seed: int = 0
    embed_dim: int = 64
    embed_method: str = "walk"
    structure: str = "paths"  # "paths" or "2hop"
    hops: int = 2

    @property
    def n_subg(self) -> int:
        return self.m * (self.n_type_max - self.n_type_min + 1)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ScoredPath:
    objects: tuple[int, ...]
    score: float

    @property
    def length(self) -> int:
        return len(self.objects) - 1


@dataclass(frozen=True)
class GraphStructure:
    u: int
    v: int
    objects: tuple[int, ...]
    links: tuple[tuple[int, int, int], ...]
    paths: tuple[ScoredPath, ...] = ()


@dataclass(frozen=True)
class NormalizedSubgraph:
    """Type-restricted, repaired subgraph of a graph structure.

    ``links`` holds ``(a, b, link_type)`` with ``a < b``; repair links carry
    ``SYNTHETIC_LINK``.  ``type_rank`` maps raw type id -> slot ``1..N_type``.
    """

    u: int
    v: int
    objects: tuple[int, ...]
    links: tuple[tuple[int, int, int], ...]
    selected_types: tuple[int, ...]
    type_rank: dict
    object_type: dict = field(repr=False, default_factory=dict)

    @property
    def n_type(self) -> int:
        return len(self.selected_types)

    @property
    def synthetic_links(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b, t in self.links if t == SYNTHETIC_LINK]

    def rank(self, obj: int) -> int:
        return self.type_rank[self.object_type[obj]]

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, set[int]] = {o: set() for o in self.objects}
        for a, b, _ in self.links:
            adj[a].add(b)
            adj[b].add(a)
        return {o: sorted(n) for o, n in adj.items()}

    def signature(self) -> tuple:
        return (self.selected_types, self.objects, self.links)


SubgraphSet = list  # list[NormalizedSubgraph]


# -- paths -------------------------------------------------------------------


def path_score(path: Sequence[int], g: HeterogeneousGraph) -> float:
    """``ln(#object types on path) * (#links joining distinct types / #links)``."""
    if len(path) < 2:
        raise ValueError("a path needs at least one link")
    types = [int(g.object_type[o]) for o in path]
    cross = sum(1 for a, b in zip(types, types[1:]) if a != b)
    return math.log(len(set(types))) * (cross / (len(path) - 1))


def enumerate_paths(g: HeterogeneousGraph, u: int, v: int, l_max: int, cap: int = 50_000) -> list[tuple[int, ...]]:
    """Simple paths ``u -> v`` with at most ``l_max`` links, depth-first with
    neighbors in ascending id order, stopping after ``cap`` paths."""
    u, v = g.check(u), g.check(v)
    if u == v:
        raise ValueError("query objects must differ")
    # hop distance to v bounds the remaining length of any simple continuation
    dist_v = {}
    frontier = [v]
    dist_v[v] = 0
    for d in range(1, l_max + 1):
        nxt = []
        for x in frontier:
            for y in g.adjacent(x):
                if y not in dist_v:
                    dist_v[y] = d
                    nxt.append(y)
        frontier = nxt
    out: list[tuple[int, ...]] = []
    if u not in dist_v:
        return out
    path = [u]
    on_path = {u}

    def dfs(x: int) -> bool:
        budget = l_max - len(path)  # links still allowed after stepping to a neighbor
        for y in g.adjacent(x):
            if y in on_path:
                continue
            if y == v:
                out.append(tuple(path) + (v,))
                if len(out) >= cap:
                    return True
                continue
            if dist_v.get(y, l_max + 1) > budget:
                continue
            path.append(y)
            on_path.add(y)
            stop = dfs(y)
            path.pop()
            on_path.discard(y)
            if stop:
                return True
        return False

    dfs(u)
    return out


def rank_paths(paths: list[tuple[int, ...]], g: HeterogeneousGraph) -> list[ScoredPath]:
    scored = [ScoredPath(p, path_score(p, g)) for p in paths]
    scored.sort(key=lambda sp: (-sp.score, sp.length, sp.objects))
    return scored


def _links_of(g: HeterogeneousGraph, pairs) -> tuple[tuple[int, int, int], ...]:
    out = set()
    for a, b in pairs:
        a, b = min(a, b), max(a, b)
        for t in g.links_between(a, b):
            out.add((a, b, t))
    return tuple(sorted(out))


def extract_structure(g: HeterogeneousGraph, u: int, v: int, k_path: int = 500, l_max: int = 6,
                      cap: int = 50_000) -> GraphStructure:
    """Union of the top-``k_path`` scored simple paths between ``u`` and ``v``."""
    paths = enumerate_paths(g, u, v, l_max, cap)
    if not paths:
        raise NoPath(f"{g.graph_id}: no path between {u} and {v} within {l_max} hops")
    top = rank_paths(paths, g)[:k_path]
    objs = sorted({o for sp in top for o in sp.objects})
    pairs = {(min(a, b), max(a, b)) for sp in top for a, b in zip(sp.objects, sp.objects[1:])}
    return GraphStructure(u, v, tuple(objs), _links_of(g, pairs), tuple(top))


def hop_structure(g: HeterogeneousGraph, u: int, v: int, hops: int = 2) -> GraphStructure:
    """Induced subgraph on the union of the ``hops``-balls around ``u`` and ``v``."""
    ball = set()
    for q in (u, v):
        dist = {q: 0}
        frontier = [q]
        for d in range(1, hops + 1):
            nxt = []
            for x in frontier:
                for y in g.adjacent(x):
                    if y not in dist:
                        dist[y] = d
                        nxt.append(y)
            frontier = nxt
        ball |= set(dist)
    pairs = [(a, b) for a in ball for b in g.adjacent(a) if b in ball and a < b]
    return GraphStructure(u, v, tuple(sorted(ball)), _links_of(g, pairs))


# -- type similarity and subgraphs --------------------------------------------


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def type_similarity(a_i: int, a_j: int, objects: Sequence[int], g: HeterogeneousGraph, emb: EmbeddingTable) -> float:
    """Cosine of the mean embeddings of the ``objects`` of type ``a_i`` and of type ``a_j``."""
    objs = np.asarray(objects, dtype=np.int64)
    types = g.object_type[objs]
    mi, mj = objs[types == a_i], objs[types == a_j]
    if len(mi) == 0 or len(mj) == 0:
        raise ValueError(f"type {a_i if len(mi) == 0 else a_j} has no objects in the structure")
    return _cos(emb.vectors[mi].mean(0), emb.vectors[mj].mean(0))


def rank_types(types: Sequence[int], objects: Sequence[int], u: int, v: int, g: HeterogeneousGraph,
               emb: EmbeddingTable) -> dict[int, int]:
    """Slot index per type: 1 = highest summed similarity to the query types."""
    tu, tv = int(g.object_type[u]), int(g.object_type[v])
    sims = {t: type_similarity(t, tu, objects, g, emb) + type_similarity(t, tv, objects, g, emb) for t in types}
    order = sorted(types, key=lambda t: (-sims[t], g.object_types[t]))
    return {t: k + 1 for k, t in enumerate(order)}


def repair_isolated(objects: Sequence[int], links: Sequence[tuple[int, int, int]], u: int, v: int
                    ) -> tuple[tuple[int, int, int], ...]:
    """Add synthetic links until every object reaches both ``u`` and ``v``.

    Repeatedly takes the smallest-id non-query object missing a query object
    and links it to that query object (to ``v`` when both are missing), then
    re-checks reachability.  If the query objects are still apart afterwards
    (only possible when nothing else is present), ``u`` and ``v`` are joined.
    """
    adj: dict[int, set[int]] = {o: set() for o in objects}
    out = set()
    for a, b, t in links:
        adj[a].add(b)
        adj[b].add(a)
        out.add((min(a, b), max(a, b), t))
    order = sorted(o for o in objects if o not in (u, v))
    while True:
        ru, rv = bfs_distances(adj, u), bfs_distances(adj, v)
        target = None
        for o in order:
            if o not in rv:
                target = (o, v)
                break
            if o not in ru:
                target = (o, u)
                break
        if target is None:
            break
        o, q = target
        adj[o].add(q)
        adj[q].add(o)
        out.add((min(o, q), max(o, q), SYNTHETIC_LINK))
    if v not in bfs_distances(adj, u):
        out.add((min(u, v), max(u, v), SYNTHETIC_LINK))
    return tuple(sorted(out))


def pair_rng(seed: int, graph_id: str, u: int, v: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(graph_id.encode()), int(u), int(v)])


def build_subgraph(S: GraphStructure, g: HeterogeneousGraph, emb: EmbeddingTable, types: Sequence[int]
                   ) -> NormalizedSubgraph:
    keep = set(int(t) for t in types)
    objs = tuple(o for o in S.objects if int(g.object_type[o]) in keep)
    oset = set(objs)
    links = [l for l in S.links if l[0] in oset and l[1] in oset]
    links = repair_isolated(objs, links, S.u, S.v)
    ranks = rank_types(sorted(keep), objs, S.u, S.v, g, emb)
    sel = tuple(sorted(keep, key=lambda t: ranks[t]))
    return NormalizedSubgraph(S.u, S.v, objs, links, sel, ranks, {o: int(g.object_type[o]) for o in objs})


def generate_subgraphs(S: GraphStructure, g: HeterogeneousGraph, emb: EmbeddingTable,
                       n_type_range: tuple[int, int] = (2, 6), m: int = 20, seed: int = 0,
                       rng: np.random.Generator | None = None) -> SubgraphSet:
    """``m`` subgraphs for every ``N_type`` in ``n_type_range`` (inclusive)."""
    n_min, n_max = n_type_range
    if n_min < 2 or n_max < n_min:
        raise ValueError(f"invalid type range {n_type_range}")
    rng = rng if rng is not None else pair_rng(seed, g.graph_id, S.u, S.v)
    objs = np.asarray(S.objects)
    types, counts = np.unique(g.object_type[objs], return_counts=True)
    forced = sorted({int(g.object_type[S.u]), int(g.object_type[S.v])})
    free = [(int(t), int(c)) for t, c in zip(types, counts) if int(t) not in forced]
    out = []
    for n_type in range(n_min, n_max + 1):
        n_eff = min(n_type, len(types))
        for _ in range(m):
            k = max(0, n_eff - len(forced))
            extra: list[int] = []
            if k and free:
                w = np.asarray([c for _, c in free], dtype=np.float64)
                pick = rng.choice(len(free), size=min(k, len(free)), replace=False, p=w / w.sum())
                extra = [free[i][0] for i in sorted(pick)]
            out.append(build_subgraph(S, g, emb, forced + extra))
    return out


# -- extraction service --------------------------------------------------------


class PairExtractor:
    """Caches embeddings per graph and subgraph sets per ``(graph, u, v)``."""

    def __init__(self, corpus: GraphCorpus, cfg: ExtractConfig | None = None, embed_cache: str | Path | None = None):
        self.corpus = corpus
        self.cfg = cfg or ExtractConfig()
        self.embed_cache = embed_cache
        self._emb: dict[str, EmbeddingTable] = {}
        self._sets: dict[tuple[str, int, int], SubgraphSet | None] = {}
        self.skipped: list[tuple[str, int, int]] = []

    def embeddings(self, gid: str) -> EmbeddingTable:
        if gid not in self._emb:
            c = self.cfg
            self._emb[gid] = cached_embeddings(self.corpus.graphs[gid], c.embed_dim, c.seed, c.embed_method,
                                               self.embed_cache)
        return self._emb[gid]

    def structure(self, gid: str, u: int, v: int) -> GraphStructure:
        g = self.corpus.graphs[gid]
        if self.cfg.structure == "2hop":
            return hop_structure(g, u, v, self.cfg.hops)
        return extract_structure(g, u, v, self.cfg.k_path, self.cfg.l_max, self.cfg.path_cap)

    def subgraphs(self, gid: str, u: int, v: int) -> SubgraphSet:
        """Subgraph set of a pair; raises :class:`NoPath` for unusable pairs."""
        key = (gid, int(u), int(v))
        if key not in self._sets:
            try:
                S = self.structure(gid, u, v)
            except NoPath:
                self._sets[key] = None
                self.skipped.append(key)
                log.info("skipping %s: no path within %d hops", key, self.cfg.l_max)
                raise
            c = self.cfg
            self._sets[key] = generate_subgraphs(S, self.corpus.graphs[gid], self.embeddings(gid),
                                                 (c.n_type_min, c.n_type_max), c.m, c.seed)
        sets = self._sets[key]
        if sets is None:
            raise NoPath(f"{key}: no path")
        return sets

    def usable(self, gid: str, u: int, v: int) -> bool:
        try:
            self.subgraphs(gid, u, v)
            return True
        except NoPath:
            return False

    # -- persistence --
    def save(self, path: str | Path) -> None:
        doc = {
            "corpus": corpus_fingerprint(self.corpus),
            "params": asdict(self.cfg),
            "pairs": [
                {"graph": k[0], "u": k[1], "v": k[2],
                 "subgraphs": None if s is None else [_sg_to_dict(x) for x in s]}
                for k, s in sorted(self._sets.items())
            ],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")

    def load(self, path: str | Path) -> int:
        """Merge a saved cache; returns the number of pairs loaded (0 on key mismatch)."""
        doc = json.loads(Path(path).read_text())
        if doc.get("corpus") != corpus_fingerprint(self.corpus) or doc.get("params") != asdict(self.cfg):
            return 0
        for rec in doc["pairs"]:
            key = (rec["graph"], int(rec["u"]), int(rec["v"]))
            s = rec["subgraphs"]
            self._sets[key] = None if s is None else [_sg_from_dict(x) for x in s]
        return len(doc["pairs"])


def _sg_to_dict(s: NormalizedSubgraph) -> dict:
    return {
        "u": s.u, "v": s.v, "objects": list(s.objects), "links": [list(l) for l in s.links],
        "types": list(s.selected_types), "otypes": [s.object_type[o] for o in s.objects],
    }


def _sg_from_dict(d: dict) -> NormalizedSubgraph:
    sel = tuple(d["types"])
    return NormalizedSubgraph(
        d["u"], d["v"], tuple(d["objects"]), tuple(tuple(l) for l in d["links"]), sel,
        {t: k + 1 for k, t in enumerate(sel)}, dict(zip(d["objects"], d["otypes"])),
    )


def graph_fingerprint(g: HeterogeneousGraph) -> str:
    h = hashlib.sha256()
    h.update(g.graph_id.encode())
    h.update(json.dumps([g.object_types, g.link_types]).encode())
    h.update(g.object_type.tobytes())
    h.update(g.links.tobytes())
    for f in g.features:
        h.update(f.tobytes())
    return h.hexdigest()[:16]


def corpus_fingerprint(corpus: GraphCorpus) -> str:
    h = hashlib.sha256()
    for gid, g in corpus.graphs.items():
        h.update(graph_fingerprint(g).encode())
    h.update(json.dumps({k: sorted(v.items()) for k, v in corpus.relation_labels.items()}, default=list).encode())
    return h.hexdigest()[:16]


# -- episodes ----------------------------------------------------------------


@dataclass
class EpisodeTask:
    """One N-way few-shot task drawn from a single graph.

    ``support``/``query`` hold ``(u, v, relation_index)``; ``subgraphs`` maps
    each pair to its subgraph set.
    """

    graph_id: str
    relation_names: list[str]
    support: list[tuple[int, int, int]]
    query: list[tuple[int, int, int]]
    subgraphs: dict[tuple[int, int], SubgraphSet] = field(repr=False, default_factory=dict)
    index: int = 0

    @property
    def n_rel(self) -> int:
        return len(self.relation_names)


def usable_pairs(extractor: PairExtractor, gid: str, names: Sequence[str]) -> dict[str, list[tuple[int, int]]]:
    rels = extractor.corpus.relation_labels.get(gid, {})
    return {n: [p for p in rels[n] if extractor.usable(gid, *p)] for n in names if n in rels}


def build_episodes(extractor: PairExtractor, graph_ids: Sequence[str], n_rel: int, k_spt: int, k_qry: int,
                   seed: int, n_episodes: int, relation_filter: set[str] | None = None) -> Iterator[EpisodeTask]:
    """Yield ``n_episodes`` tasks; deterministic for a fixed ``seed``.

    Every graph must offer ``n_rel`` relations with ``k_spt + k_qry`` usable
    pairs each, otherwise :class:`InsufficientData` names the shortfall.
    """
    need = k_spt + k_qry
    pools: dict[str, dict[str, list[tuple[int, int]]]] = {}
    for gid in graph_ids:
        names = [n for n in extractor.corpus.relation_labels.get(gid, {})
                 if relation_filter is None or n in relation_filter]
        pool = usable_pairs(extractor, gid, names)
        ok = {n: p for n, p in pool.items() if len(p) >= need}
        if len(ok) < n_rel:
            short = sorted(n for n, p in pool.items() if len(p) < need)
            raise InsufficientData(
                f"graph {gid!r} has {len(ok)} relations with >= {need} usable pairs, needs {n_rel}"
                + (f" (short: {', '.join(short)})" if short else "")
            )
        pools[gid] = ok
    if not pools:
        raise InsufficientData("no graphs to draw episodes from")
    rng = np.random.default_rng(seed)
    gids = list(pools)
    for i in range(n_episodes):
        gid = gids[int(rng.integers(len(gids)))]
        names = sorted(pools[gid])
        chosen = [names[j] for j in rng.choice(len(names), size=n_rel, replace=False)]
        support, query, sets = [], [], {}
        for r, name in enumerate(chosen):
            pairs = pools[gid][name]
            idx = rng.choice(len(pairs), size=need, replace=False)
            picked = [pairs[j] for j in idx]
            support += [(u, v, r) for u, v in picked[:k_spt]]
            query += [(u, v, r) for u, v in picked[k_spt:]]
            for p in picked:
                sets[p] = extractor.subgraphs(gid, *p)
        yield EpisodeTask(gid, chosen, support, query, sets, i)
