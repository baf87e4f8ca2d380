"""Heterogeneous graph data model, adjacency queries and corpus file IO.

Graphs are undirected: every stored link is enumerated from both endpoints.
Object ids are dense, corpus-local integers ``0..n-1``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

UNREACHABLE = math.inf
"""Sentinel distance returned for disconnected object pairs."""


class CorpusFormatError(ValueError):
    """The corpus document cannot be parsed; ``locus`` names the record."""

    def __init__(self, message: str, locus: str = ""):
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


class InvariantError(ValueError):
    """A graph or corpus invariant is violated; ``ident`` names the offender."""

    def __init__(self, message: str, ident: str = ""):
        self.ident = ident
        super().__init__(f"{ident}: {message}" if ident else message)


class UnknownObjectError(KeyError):
    pass


@dataclass(frozen=True)
class ObjectRecord:
    id: int
    type_id: int
    feature: np.ndarray


class HeterogeneousGraph:
    """Immutable typed graph ``(V, E, phi, psi)`` with per-object features.

    ``links`` is an ``(E, 3)`` int array of ``(src, dst, link_type)`` rows with
    ``src < dst``; rows are unique and sorted.
    """

    def __init__(
        self,
        graph_id: str,
        object_types: Sequence[str],
        link_types: Sequence[str],
        object_type: Sequence[int],
        features: Sequence[np.ndarray],
        links: Iterable[Sequence[int]],
    ):
        self.graph_id = str(graph_id)
        self.object_types = list(object_types)
        self.link_types = list(link_types)
        self.object_type = np.asarray(object_type, dtype=np.int64)
        self.features = [np.asarray(f, dtype=np.float64) for f in features]
        n = len(self.object_type)
        if len(self.features) != n:
            raise InvariantError("feature count differs from object count", self.graph_id)
        if len(self.object_types) + len(self.link_types) <= 2:
            raise InvariantError("heterogeneity requires |A| + |R| > 2", self.graph_id)
        if n and (self.object_type.min() < 0 or self.object_type.max() >= len(self.object_types)):
            raise InvariantError("object type id out of range", self.graph_id)

        seen: set[tuple[int, int, int]] = set()
        rows = []
        for src, dst, ltype in links:
            src, dst, ltype = int(src), int(dst), int(ltype)
            for end in (src, dst):
                if not 0 <= end < n:
                    raise InvariantError(f"link ({src}, {dst}) references unknown object {end}", self.graph_id)
            if src == dst:
                raise InvariantError(f"self-loop on object {src}", self.graph_id)
            if not 0 <= ltype < len(self.link_types):
                raise InvariantError(f"link type {ltype} out of range", self.graph_id)
            key = (min(src, dst), max(src, dst), ltype)
            if key in seen:
                raise InvariantError(f"duplicate link {key}", self.graph_id)
            seen.add(key)
            rows.append(key)
        rows.sort()
        self.links = np.asarray(rows, dtype=np.int64).reshape(-1, 3)

        dims: dict[int, int] = {}
        for i, (t, f) in enumerate(zip(self.object_type, self.features)):
            if f.ndim != 1:
                raise InvariantError(f"feature of object {i} is not a vector", self.graph_id)
            if dims.setdefault(int(t), f.shape[0]) != f.shape[0]:
                raise InvariantError(f"object {i} feature dimension differs within its type", self.graph_id)

        nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for src, dst, ltype in rows:
            nbrs[src].append((dst, ltype))
            nbrs[dst].append((src, ltype))
        self._neighbors = [tuple(sorted(x)) for x in nbrs]
        # CSR over distinct neighbor ids, for BFS and walks
        adj = [sorted({j for j, _ in x}) for x in self._neighbors]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        self.indptr[1:] = np.cumsum([len(a) for a in adj])
        self.indices = np.asarray([j for a in adj for j in a], dtype=np.int64)
        self._adj = [tuple(a) for a in adj]

    @property
    def n_objects(self) -> int:
        return len(self.object_type)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def objects(self) -> list[ObjectRecord]:
        return [ObjectRecord(i, int(t), f) for i, (t, f) in enumerate(zip(self.object_type, self.features))]

    def type_name(self, obj: int) -> str:
        return self.object_types[int(self.object_type[obj])]

    def check(self, obj: int) -> int:
        obj = int(obj)
        if not 0 <= obj < self.n_objects:
            raise UnknownObjectError(f"object {obj} not in graph {self.graph_id}")
        return obj

    def adjacent(self, obj: int) -> tuple[int, ...]:
        """Distinct neighbor ids, ascending."""
        return self._adj[self.check(obj)]

    def links_between(self, a: int, b: int) -> list[int]:
        return [t for j, t in self._neighbors[a] if j == b]

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeterogeneousGraph):
            return NotImplemented
        return (
            self.graph_id == other.graph_id
            and self.object_types == other.object_types
            and self.link_types == other.link_types
            and np.array_equal(self.object_type, other.object_type)
            and np.array_equal(self.links, other.links)
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )

    def __repr__(self) -> str:
        return (
            f"HeterogeneousGraph({self.graph_id!r}, |V|={self.n_objects}, |E|={self.n_links}, "
            f"|A|={len(self.object_types)}, |R|={len(self.link_types)})"
        )


def neighbors(g: HeterogeneousGraph, obj: int) -> list[tuple[int, int]]:
    """``(neighbor id, link type)`` pairs ordered by neighbor id then link type."""
    return list(g._neighbors[g.check(obj)])


def bfs_distances(adj: Mapping[int, Iterable[int]] | Sequence[Iterable[int]], source: int) -> dict[int, int]:
    """Hop distances from ``source`` over an adjacency mapping."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        x = queue.popleft()
        for y in adj[x]:
            if y not in dist:
                dist[y] = dist[x] + 1
                queue.append(y)
    return dist


def shortest_distance(g, a: int, b: int) -> float:
    """Unweighted BFS hop count between ``a`` and ``b``; ``UNREACHABLE`` if none.

    ``g`` is a :class:`HeterogeneousGraph` or any object exposing
    ``adjacent(obj)`` and ``check(obj)``.
    """
    a, b = g.check(a), g.check(b)
    if a == b:
        return 0
    seen = {a}
    frontier = [a]
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for x in frontier:
            for y in g.adjacent(x):
                if y == b:
                    return depth
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        frontier = nxt
    return UNREACHABLE


@dataclass
class GraphCorpus:
    """Graphs plus labeled relation pairs and a train/val/test graph split."""

    graphs: dict[str, HeterogeneousGraph]
    relation_labels: dict[str, dict[str, list[tuple[int, int]]]]
    split: dict[str, list[str]] = field(default_factory=lambda: {"train": [], "val": [], "test": []})

    def __post_init__(self):
        self.validate()

    @property
    def train_graphs(self) -> list[HeterogeneousGraph]:
        return [self.graphs[i] for i in self.split.get("train", [])]

    @property
    def val_graphs(self) -> list[HeterogeneousGraph]:
        return [self.graphs[i] for i in self.split.get("val", [])]

    @property
    def test_graphs(self) -> list[HeterogeneousGraph]:
        return [self.graphs[i] for i in self.split.get("test", [])]

    def relation_names(self, part: str) -> set[str]:
        return {name for gid in self.split.get(part, []) for name in self.relation_labels.get(gid, {})}

    def validate(self) -> None:
        for gid, rels in self.relation_labels.items():
            if gid not in self.graphs:
                raise InvariantError("relations given for unknown graph", gid)
            g = self.graphs[gid]
            for name, pairs in rels.items():
                if not pairs:
                    raise InvariantError("empty relation class", f"{gid}/{name}")
                for u, v in pairs:
                    for o in (u, v):
                        if not 0 <= o < g.n_objects:
                            raise InvariantError(f"relation pair references unknown object {o}", f"{gid}/{name}")
                    if u == v:
                        raise InvariantError(f"relation pair ({u}, {v}) is degenerate", f"{gid}/{name}")
        parts = {k: set(v) for k, v in self.split.items()}
        for k, ids in parts.items():
            missing = ids - set(self.graphs)
            if missing:
                raise InvariantError(f"split {k!r} names unknown graphs {sorted(missing)}", k)
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if parts[a] & parts[b]:
                    raise InvariantError(f"splits {a!r} and {b!r} share graphs {sorted(parts[a] & parts[b])}", a)
        if self.relation_names("train") & self.relation_names("test"):
            raise InvariantError("base and novel relation names overlap", "split")

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphCorpus):
            return NotImplemented
        return (
            list(self.graphs) == list(other.graphs)
            and all(self.graphs[k] == other.graphs[k] for k in self.graphs)
            and _norm_rel(self.relation_labels) == _norm_rel(other.relation_labels)
            and {k: list(v) for k, v in self.split.items()} == {k: list(v) for k, v in other.split.items()}
        )


def _norm_rel(rel):
    return {g: {n: [tuple(map(int, p)) for p in ps] for n, ps in r.items()} for g, r in rel.items()}


def synthesize_features(object_type: np.ndarray, n_types: int, links: np.ndarray, n: int) -> list[np.ndarray]:
    """``one-hot(type) ++ [degree / max degree]`` for graphs without features."""
    deg = np.zeros(n)
    if len(links):
        np.add.at(deg, links[:, 0], 1)
        np.add.at(deg, links[:, 1], 1)
    top = deg.max() if n and deg.max() > 0 else 1.0
    out = []
    for i in range(n):
        x = np.zeros(n_types + 1)
        x[object_type[i]] = 1.0
        x[-1] = deg[i] / top
        out.append(x)
    return out


# -- file IO -----------------------------------------------------------------


def _parse_graph(doc: dict, locus: str) -> tuple[HeterogeneousGraph, dict[str, list[tuple[int, int]]]]:
    try:
        gid = str(doc["id"])
        object_types = [str(t) for t in doc["object_types"]]
        link_types = [str(t) for t in doc["link_types"]]
        objs = doc["objects"]
        raw_links = doc.get("links", [])
        relations = doc.get("relations", {})
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(f"missing or malformed field {exc}", locus) from None
    locus = f"graph {gid!r}"
    n = len(objs)
    object_type = np.zeros(n, dtype=np.int64)
    feats: list[np.ndarray | None] = [None] * n
    seen = set()
    for k, rec in enumerate(objs):
        try:
            oid, otype = int(rec["id"]), int(rec["type"])
        except (KeyError, TypeError, ValueError):
            raise CorpusFormatError("object record needs integer 'id' and 'type'", f"{locus} object #{k}") from None
        if not 0 <= oid < n or oid in seen:
            raise InvariantError(f"object ids must be unique and dense in 0..{n - 1}, got {oid}", f"{locus} object #{k}")
        seen.add(oid)
        object_type[oid] = otype
        f = rec.get("feature")
        if f:
            try:
                feats[oid] = np.asarray([float(x) for x in f], dtype=np.float64)
            except (TypeError, ValueError):
                raise CorpusFormatError("feature must be a list of numbers", f"{locus} object {oid}") from None
    links = []
    for k, row in enumerate(raw_links):
        try:
            src, dst, lt = (int(x) for x in row)
        except (TypeError, ValueError):
            raise CorpusFormatError("link must be [src, dst, type]", f"{locus} link #{k}") from None
        links.append((src, dst, lt))
    # directed input is symmetrized: (a,b,t) and (b,a,t) collapse to one link
    seen_links = set()
    for k, row in enumerate(links):
        if row in seen_links:
            raise InvariantError(f"duplicate link {row}", f"{locus} link #{k}")
        seen_links.add(row)
    merged = sorted({(min(a, b), max(a, b), t) for a, b, t in links})
    if any(f is None for f in feats):
        missing_types = {int(object_type[i]) for i, f in enumerate(feats) if f is None}
        present_types = {int(object_type[i]) for i, f in enumerate(feats) if f is not None}
        if missing_types & present_types:
            raise InvariantError("features given for only part of an object type", locus)
        synth = synthesize_features(object_type, len(object_types), np.asarray(merged, dtype=np.int64).reshape(-1, 3), n)
        feats = [synth[i] if f is None else f for i, f in enumerate(feats)]
    g = HeterogeneousGraph(gid, object_types, link_types, object_type, feats, merged)
    rels = {}
    for name, pairs in relations.items():
        try:
            rels[str(name)] = [(int(u), int(v)) for u, v in pairs]
        except (TypeError, ValueError):
            raise CorpusFormatError("relation pairs must be [u, v]", f"{locus} relation {name!r}") from None
    return g, rels


def corpus_from_dict(doc: dict) -> GraphCorpus:
    if not isinstance(doc, dict) or "graphs" not in doc:
        raise CorpusFormatError("top-level document needs a 'graphs' list", "document")
    graphs: dict[str, HeterogeneousGraph] = {}
    relations: dict[str, dict[str, list[tuple[int, int]]]] = {}
    for k, gdoc in enumerate(doc["graphs"]):
        g, rels = _parse_graph(gdoc, f"graph #{k}")
        if g.graph_id in graphs:
            raise InvariantError("duplicate graph id", g.graph_id)
        graphs[g.graph_id] = g
        relations[g.graph_id] = rels
    split = doc.get("split") or {"train": list(graphs), "val": [], "test": []}
    split = {k: [str(x) for x in split.get(k, [])] for k in ("train", "val", "test")}
    return GraphCorpus(graphs, relations, split)


def corpus_to_dict(corpus: GraphCorpus) -> dict:
    out = []
    for gid, g in corpus.graphs.items():
        out.append(
            {
                "id": gid,
                "object_types": list(g.object_types),
                "link_types": list(g.link_types),
                "objects": [
                    {"id": i, "type": int(t), "feature": [float(x) for x in f]}
                    for i, (t, f) in enumerate(zip(g.object_type, g.features))
                ],
                "links": [[int(a), int(b), int(t)] for a, b, t in g.links],
                "relations": {
                    name: [[int(u), int(v)] for u, v in pairs]
                    for name, pairs in corpus.relation_labels.get(gid, {}).items()
                },
            }
        )
    return {"graphs": out, "split": {k: list(corpus.split.get(k, [])) for k in ("train", "val", "test")}}


def load_corpus(path: str | Path) -> GraphCorpus:
    """Parse and validate a corpus JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return corpus_from_dict(doc)


def save_corpus(corpus: GraphCorpus, path: str | Path) -> None:
    # json emits repr() floats, which round-trip exactly
    Path(path).write_text(json.dumps(corpus_to_dict(corpus), separators=(",", ":")) + "\n", encoding="utf-8")
