import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metags.hetgraph import (UNREACHABLE, CorpusFormatError, InvariantError, UnknownObjectError, corpus_to_dict,
                             load_corpus, neighbors, save_corpus, shortest_distance)

from conftest import make_graph


def _doc(graphs, split=None):
    return {"graphs": graphs, "split": split or {"train": [g["id"] for g in graphs], "val": [], "test": []}}


def _minimal():
    return {"id": "m", "object_types": ["A", "B"], "link_types": ["ab"],
            "objects": [{"id": 0, "type": 0, "feature": [1.0]}, {"id": 1, "type": 1, "feature": [0.5, 2.0]}],
            "links": [[0, 1, 0]], "relations": {}}


def test_minimal_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([_minimal()])))
    g = load_corpus(p).graphs["m"]
    assert g.n_objects == 2 and g.n_links == 1


def test_dangling_reference(tmp_path):
    doc = _minimal()
    doc["objects"].append({"id": 2, "type": 0, "feature": [0.0]})
    doc["links"].append([0, 99, 0])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([doc])))
    with pytest.raises(InvariantError, match="99"):
        load_corpus(p)


def test_parse_error_has_locus(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"graphs": [\n  {"id": 1,,}]}')
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(p)


def test_duplicate_link_rejected(tmp_path):
    doc = _minimal()
    doc["links"].append([0, 1, 0])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([doc])))
    with pytest.raises(InvariantError, match="duplicate"):
        load_corpus(p)


def test_empty_relation_class(tmp_path):
    doc = _minimal()
    doc["relations"] = {"r": []}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([doc])))
    with pytest.raises(InvariantError, match="empty relation"):
        load_corpus(p)


def test_directed_links_symmetrized(tmp_path):
    doc = _minimal()
    doc["links"].append([1, 0, 0])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([doc])))
    g = load_corpus(p).graphs["m"]
    assert g.n_links == 1


def test_missing_features_synthesized(tmp_path):
    doc = _minimal()
    for o in doc["objects"]:
        del o["feature"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_doc([doc])))
    g = load_corpus(p).graphs["m"]
    # one-hot type ++ normalized degree
    np.testing.assert_array_equal(g.features[0], [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(g.features[1], [0.0, 1.0, 1.0])


def test_heterogeneity_condition():
    from metags.hetgraph import HeterogeneousGraph
    with pytest.raises(InvariantError):
        HeterogeneousGraph("x", ["A"], ["l"], [0, 0], [np.zeros(1)] * 2, [(0, 1, 0)])


def test_roundtrip_default_corpus(tmp_path, default_corpus):
    p = tmp_path / "c.json"
    save_corpus(default_corpus, p)
    back = load_corpus(p)
    assert back == default_corpus
    # field by field
    for gid, g in default_corpus.graphs.items():
        h = back.graphs[gid]
        assert h.object_types == g.object_types and h.link_types == g.link_types
        np.testing.assert_array_equal(h.links, g.links)
        for a, b in zip(h.features, g.features):
            assert a.tobytes() == b.tobytes()
    assert corpus_to_dict(back) == corpus_to_dict(default_corpus)


def test_neighbors_examples():
    g = make_graph([0, 1, 0], [(0, 1, 1)])
    assert neighbors(g, 2) == []
    assert neighbors(g, 0) == [(1, 1)]
    star = make_graph([0, 1, 1, 1, 1], [(0, 4), (0, 2), (0, 1), (0, 3)])
    # oracle: adjacency matrix scan
    A = np.zeros((5, 5), dtype=int)
    for a, b, _ in star.links:
        A[a, b] = A[b, a] = 1
    assert [j for j, _ in neighbors(star, 0)] == [j for j in range(5) if A[0, j]]
    assert len(neighbors(star, 0)) == 4
    with pytest.raises(UnknownObjectError):
        neighbors(star, 9)


def test_shortest_distance_examples():
    g = make_graph([0, 1, 0, 1], [(0, 1), (1, 2)])
    assert shortest_distance(g, 0, 0) == 0
    assert shortest_distance(g, 0, 2) == 2
    assert shortest_distance(g, 0, 3) == UNREACHABLE
    with pytest.raises(UnknownObjectError):
        shortest_distance(g, 0, 17)


@st.composite
def small_graphs(draw, max_n=12):
    n = draw(st.integers(2, max_n))
    types = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    pairs = draw(st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda p: p[0] != p[1]),
                         max_size=3 * n))
    links = sorted({(min(a, b), max(a, b), (a + b) % 2) for a, b in pairs})
    return make_graph(types, links, n_types=3)


def _bfs_all(g):
    n = g.n_objects
    D = np.full((n, n), np.inf)
    for s in range(n):
        D[s, s] = 0
        q = deque([s])
        while q:
            x = q.popleft()
            for y, _ in neighbors(g, x):
                if D[s, y] == np.inf:
                    D[s, y] = D[s, x] + 1
                    q.append(y)
    return D


@given(small_graphs())
def test_adjacency_symmetric_and_sorted(g):
    for a in range(g.n_objects):
        nb = neighbors(g, a)
        assert nb == sorted(nb)
        for b, t in nb:
            assert (a, t) in neighbors(g, b)


@given(small_graphs())
def test_distance_symmetric_and_triangle(g):
    D = np.array([[shortest_distance(g, a, b) for b in range(g.n_objects)] for a in range(g.n_objects)])
    np.testing.assert_array_equal(D, D.T)
    np.testing.assert_array_equal(D, _bfs_all(g))
    n = g.n_objects
    for k in range(n):
        assert np.all(D <= D[:, [k]] + D[[k], :])
