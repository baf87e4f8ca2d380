"""Seeded generator of heterogeneous corpora with planted composite relations.

Each relation is a parallel union of small typed motifs (wedges, chains, ...)
connecting its positive pairs.  Motifs are the ground truth: a brute-force
detector that knows the catalog can recover every relation label when no noise
edges are added.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hetgraph import GraphCorpus, HeterogeneousGraph

ANCHOR_TYPE = 0
MOTIF = "motif"
NOISE = "noise"


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class MotifTemplate:
    """Typed pattern between anchors ``u`` and ``v``.

    ``slots[k]`` is the non-anchor type slot of intermediate ``k``; link
    endpoints are ``"u"``, ``"v"`` or an intermediate index.
    """

    name: str
    slots: tuple[int, ...]
    links: tuple[tuple, ...]

    @property
    def n_types(self) -> int:
        return max(self.slots) + 1


CATALOG = (
    MotifTemplate("wedge", (0,), (("u", 0), (0, "v"))),
    MotifTemplate("double_wedge", (1, 2), (("u", 0), (0, "v"), ("u", 1), (1, "v"))),
    MotifTemplate("chain3", (0, 1), (("u", 0), (0, 1), (1, "v"))),
    MotifTemplate("chain4", (1, 2, 3), (("u", 0), (0, 1), (1, 2), (2, "v"))),
    MotifTemplate("tailed_wedge", (2, 3), (("u", 0), (0, "v"), (0, 1))),
    MotifTemplate("diamond", (3, 0, 1), (("u", 0), ("u", 1), (0, 2), (1, 2), (2, "v"))),
)


@dataclass
class GeneratorConfig:
    seed: int = 7
    n_graphs: int = 6
    objects_per_graph: int = 120
    n_object_types: int = 5
    n_link_types: int = 6
    n_relations_per_graph: int = 3
    pairs_per_relation: int = 20
    motif_catalog_size: int = 4
    feature_dim: int = 8
    noise_edges_fraction: float = 0.3
    heldout_fraction: float = 0.25
    anchor_fraction: float = 0.5
    shared_vocabulary: bool = False
    split: tuple[int, int, int] = (3, 1, 2)

    def validate(self) -> None:
        counts = dict(
            n_graphs=self.n_graphs,
            objects_per_graph=self.objects_per_graph,
            n_link_types=self.n_link_types,
            n_relations_per_graph=self.n_relations_per_graph,
            pairs_per_relation=self.pairs_per_relation,
            motif_catalog_size=self.motif_catalog_size,
            feature_dim=self.feature_dim,
        )
        for k, v in counts.items():
            if int(v) < 1:
                raise InfeasibleConfig(f"{k} must be >= 1, got {v}")
        if self.n_object_types < 3:
            raise InfeasibleConfig("n_object_types must be >= 3")
        if not 0.0 <= self.noise_edges_fraction <= 1.0:
            raise InfeasibleConfig("noise_edges_fraction must lie in [0, 1]")
        if self.motif_catalog_size > len(CATALOG):
            raise InfeasibleConfig(f"motif catalog holds only {len(CATALOG)} templates")
        need = max(m.n_types for m in CATALOG[: self.motif_catalog_size])
        if need > self.n_object_types - 1:
            raise InfeasibleConfig(
                f"motif catalog needs {need} non-anchor types but only {self.n_object_types - 1} exist"
            )
        if len(_motif_sets(self.motif_catalog_size)) < self.n_relations_per_graph:
            raise InfeasibleConfig("not enough distinct motif combinations for the requested relations")
        if sum(self.split) != self.n_graphs:
            raise InfeasibleConfig(f"split {self.split} does not sum to n_graphs={self.n_graphs}")
        n_anchor = max(2, int(round(self.objects_per_graph * self.anchor_fraction)))
        if n_anchor * (n_anchor - 1) // 2 < self.n_relations_per_graph * self.pairs_per_relation:
            raise InfeasibleConfig("too few anchor objects for the requested number of pairs")

    @classmethod
    def from_json(cls, path: str | Path) -> "GeneratorConfig":
        doc = json.loads(Path(path).read_text())
        if "split" in doc:
            doc["split"] = tuple(doc["split"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlantedRelation:
    name: str
    motif_ids: frozenset[int]
    positive_pairs: list[tuple[int, int]]
    heldout_pairs: list[tuple[int, int]]


@dataclass
class GraphTruth:
    """Generator-side ground truth for one graph."""

    graph_id: str
    slot_types: list[int]
    relations: list[PlantedRelation]
    provenance: dict[tuple[int, int], str] = field(default_factory=dict)
    catalog_size: int = len(CATALOG)


def _motif_sets(catalog_size: int) -> list[frozenset[int]]:
    sizes = [2, 3] if catalog_size >= 3 else [min(2, catalog_size)]
    return [frozenset(c) for k in sizes for c in itertools.combinations(range(catalog_size), k)]


class _GraphBuilder:
    def __init__(self, n_types: int, n_link_types: int):
        self.n_types = n_types
        self.n_link_types = n_link_types
        self.object_type: list[int] = []
        self.links: dict[tuple[int, int], int] = {}
        self.provenance: dict[tuple[int, int], str] = {}
        self._done: dict[tuple[int, tuple[int, int]], tuple[list[int], list[tuple[int, int]]]] = {}

    def add_object(self, t: int) -> int:
        self.object_type.append(t)
        return len(self.object_type) - 1

    def link_type(self, a: int, b: int) -> int:
        ta, tb = sorted((self.object_type[a], self.object_type[b]))
        return (ta * self.n_types + tb) % self.n_link_types

    def add_link(self, a: int, b: int, tag: str) -> bool:
        key = (min(a, b), max(a, b))
        if a == b or key in self.links:
            return False
        self.links[key] = self.link_type(a, b)
        self.provenance[key] = tag
        return True


def motif_instantiate(motif_id: int, pair: tuple[int, int], builder: _GraphBuilder, slot_types: list[int],
                      catalog=CATALOG) -> tuple[list[int], list[tuple[int, int]]]:
    """Add one instance of ``catalog[motif_id]`` joining ``pair``.

    Returns the new object ids and links; a repeated call for the same
    ``(motif, pair)`` adds nothing.
    """
    key = (motif_id, tuple(pair))
    if key in builder._done:
        return [], []
    m = catalog[motif_id]
    u, v = pair
    new = [builder.add_object(slot_types[s]) for s in m.slots]
    ends = {"u": u, "v": v}
    added = []
    for a, b in m.links:
        x = ends[a] if isinstance(a, str) else new[a]
        y = ends[b] if isinstance(b, str) else new[b]
        if builder.add_link(x, y, MOTIF):
            added.append((min(x, y), max(x, y)))
    builder._done[key] = (new, added)
    return new, added


def _vocab(gid: str, n: int, kind: str, rng: np.random.Generator, shared: bool) -> list[str]:
    if shared:
        return [f"{kind}{k}" for k in range(n)]
    token = rng.integers(0, 2**32)
    return [f"{gid}:{kind}{k}-{token:08x}" for k in range(n)]


def generate_graph(cfg: GeneratorConfig, gid: str, rng: np.random.Generator,
                   shared_slots: list[int] | None = None,
                   shared_centers: np.ndarray | None = None) -> tuple[HeterogeneousGraph, dict, GraphTruth]:
    T = cfg.n_object_types
    b = _GraphBuilder(T, cfg.n_link_types)
    n_anchor = max(2, int(round(cfg.objects_per_graph * cfg.anchor_fraction)))
    for i in range(cfg.objects_per_graph):
        b.add_object(ANCHOR_TYPE if i < n_anchor else int(1 + rng.integers(0, T - 1)))
    anchors = np.arange(n_anchor)

    # motif slot k -> concrete non-anchor type of this graph
    slot_types = shared_slots if shared_slots is not None else [int(t) for t in 1 + rng.permutation(T - 1)]
    sets = _motif_sets(cfg.motif_catalog_size)
    chosen = rng.choice(len(sets), size=cfg.n_relations_per_graph, replace=False)

    used: set[tuple[int, int]] = set()
    relations = []
    labels = {}
    n_held = int(round(cfg.pairs_per_relation * cfg.heldout_fraction))
    for r, ci in enumerate(chosen):
        motifs = sets[int(ci)]
        pairs = []
        while len(pairs) < cfg.pairs_per_relation:
            u, v = (int(x) for x in rng.choice(anchors, size=2, replace=False))
            key = (min(u, v), max(u, v))
            if key in used:
                continue
            used.add(key)
            pairs.append(key)
            for mid in sorted(motifs):
                motif_instantiate(mid, key, b, slot_types)
        name = f"{gid}/rel{r}"
        relations.append(PlantedRelation(name, motifs, pairs, pairs[len(pairs) - n_held:] if n_held else []))
        labels[name] = pairs

    n_noise = int(round(cfg.noise_edges_fraction * len(b.links)))
    n_obj = len(b.object_type)
    added = 0
    attempts = 0
    while added < n_noise and attempts < 100 * (n_noise + 1):
        attempts += 1
        x, y = (int(t) for t in rng.integers(0, n_obj, size=2))
        added += b.add_link(x, y, NOISE)

    if shared_centers is not None:
        centers = shared_centers
    else:
        centers = rng.normal(size=(T, cfg.feature_dim))
    object_type = np.asarray(b.object_type)
    feats = centers[object_type] + 0.1 * rng.normal(size=(n_obj, cfg.feature_dim))
    shared = cfg.shared_vocabulary
    g = HeterogeneousGraph(
        gid,
        _vocab(gid, T, "otype", rng, shared),
        _vocab(gid, cfg.n_link_types, "ltype", rng, shared),
        object_type,
        list(feats),
        [(a, c, t) for (a, c), t in sorted(b.links.items())],
    )
    truth = GraphTruth(gid, slot_types, relations, dict(b.provenance), cfg.motif_catalog_size)
    return g, labels, truth


def generate(cfg: GeneratorConfig) -> tuple[GraphCorpus, dict[str, GraphTruth]]:
    """Corpus plus per-graph ground truth (motif sets, held-out pairs, link provenance)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    shared_slots = shared_centers = None
    if cfg.shared_vocabulary:
        shared_slots = [int(t) for t in 1 + rng.permutation(cfg.n_object_types - 1)]
        shared_centers = rng.normal(size=(cfg.n_object_types, cfg.feature_dim))
    graphs, labels, truths = {}, {}, {}
    for k in range(cfg.n_graphs):
        gid = f"g{k}"
        g, lab, truth = generate_graph(cfg, gid, rng, shared_slots, shared_centers)
        graphs[gid], labels[gid], truths[gid] = g, lab, truth
    ids = list(graphs)
    n_tr, n_va, _ = cfg.split
    split = {"train": ids[:n_tr], "val": ids[n_tr:n_tr + n_va], "test": ids[n_tr + n_va:]}
    return GraphCorpus(graphs, labels, split), truths


def generate_corpus(cfg: GeneratorConfig) -> GraphCorpus:
    return generate(cfg)[0]


# -- brute-force motif detector (ground-truth oracle) ---------------------------


def motif_present(g: HeterogeneousGraph, motif: MotifTemplate, slot_types: list[int], u: int, v: int) -> bool:
    """Exhaustive search for an instance of ``motif`` between ``u`` and ``v``."""
    k = len(motif.slots)
    want = [slot_types[s] for s in motif.slots]
    ends = {"u": u, "v": v}

    def ok(assign):
        for a, b in motif.links:
            x = ends[a] if isinstance(a, str) else assign[a]
            y = ends[b] if isinstance(b, str) else assign[b]
            if x is None or y is None:
                continue
            if y not in g.adjacent(x):
                return False
        return True

    def search(i, assign):
        if i == k:
            return True
        for o in range(g.n_objects):
            if o in (u, v) or o in assign[:i] or g.object_type[o] != want[i]:
                continue
            assign[i] = o
            if ok(assign) and search(i + 1, assign):
                return True
            assign[i] = None
        return False

    return search(0, [None] * k)


def detect_relation(g: HeterogeneousGraph, truth: GraphTruth, u: int, v: int, catalog=CATALOG) -> str:
    present = {m for m in range(truth.catalog_size) if motif_present(g, catalog[m], truth.slot_types, u, v)}
    best = max(
        truth.relations,
        key=lambda r: (len(present & r.motif_ids) / max(1, len(present | r.motif_ids)), -len(r.motif_ids)),
    )
    return best.name
