import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metags.extract import enumerate_paths
from metags.hetgraph import corpus_to_dict, save_corpus
from metags.synthgen import (CATALOG, MOTIF, GeneratorConfig, InfeasibleConfig, _GraphBuilder, detect_relation,
                             generate, motif_instantiate)


def _builder():
    b = _GraphBuilder(5, 6)
    for t in (0, 0):
        b.add_object(t)
    return b


@pytest.mark.parametrize("name, n_obj, n_links", [("wedge", 1, 2), ("double_wedge", 2, 4), ("chain3", 2, 3)])
def test_motif_sizes(name, n_obj, n_links):
    mid = [m.name for m in CATALOG].index(name)
    b = _builder()
    new, links = motif_instantiate(mid, (0, 1), b, [1, 2, 3, 4])
    assert (len(new), len(links)) == (n_obj, n_links)
    # idempotent per (motif, pair)
    assert motif_instantiate(mid, (0, 1), b, [1, 2, 3, 4]) == ([], [])


def test_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_corpus(generate(GeneratorConfig(seed=3))[0], a)
    save_corpus(generate(GeneratorConfig(seed=3))[0], b)
    assert a.read_bytes() == b.read_bytes()


def test_seeds_differ():
    la = generate(GeneratorConfig(seed=1))[0].graphs["g0"].links
    lb = generate(GeneratorConfig(seed=2))[0].graphs["g0"].links
    assert la.shape != lb.shape or not np.array_equal(la, lb)


def test_default_corpus_valid(default_corpus):
    default_corpus.validate()
    assert len(default_corpus.graphs) == 6
    for gid, g in default_corpus.graphs.items():
        assert len(default_corpus.relation_labels[gid]) == 3
        assert all(len(p) == 20 for p in default_corpus.relation_labels[gid].values())
        for a, b, _ in g.links:
            assert a < b
    # disjoint type vocabularies between graphs
    vocabs = [set(g.object_types) for g in default_corpus.graphs.values()]
    for i in range(len(vocabs)):
        for j in range(i + 1, len(vocabs)):
            assert not vocabs[i] & vocabs[j]


def test_planted_invariant(default_generated):
    from metags.synthgen import motif_present
    corpus, truths = default_generated
    for gid, truth in truths.items():
        g = corpus.graphs[gid]
        for rel in truth.relations:
            for u, v in rel.positive_pairs[:5]:
                for mid in rel.motif_ids:
                    assert motif_present(g, CATALOG[mid], truth.slot_types, u, v)


def test_short_path_exists(default_corpus):
    for gid, g in default_corpus.graphs.items():
        for pairs in default_corpus.relation_labels[gid].values():
            for u, v in pairs:
                assert enumerate_paths(g, u, v, 4, cap=1)


def test_noise_free_paths_use_motif_edges():
    corpus, truths = generate(GeneratorConfig(seed=11, n_graphs=2, split=(1, 0, 1), noise_edges_fraction=0.0))
    for gid, truth in truths.items():
        g = corpus.graphs[gid]
        assert set(truth.provenance.values()) == {MOTIF}
        for rel in truth.relations:
            u, v = rel.positive_pairs[0]
            for p in enumerate_paths(g, u, v, 6):
                for a, b in zip(p, p[1:]):
                    assert truth.provenance[(min(a, b), max(a, b))] == MOTIF


def test_relation_recoverable_without_noise():
    corpus, truths = generate(GeneratorConfig(seed=5, n_graphs=2, split=(1, 0, 1), noise_edges_fraction=0.0))
    hits = total = 0
    for gid, truth in truths.items():
        for rel in truth.relations:
            for u, v in rel.heldout_pairs:
                hits += detect_relation(corpus.graphs[gid], truth, u, v) == rel.name
                total += 1
    assert total > 0 and hits / total >= 0.95


@pytest.mark.parametrize("kw", [dict(n_object_types=2), dict(noise_edges_fraction=1.5), dict(n_graphs=0),
                                dict(motif_catalog_size=4, n_object_types=4)])
def test_infeasible(kw):
    with pytest.raises(InfeasibleConfig):
        GeneratorConfig(**kw).validate()


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_any_seed_valid(seed):
    cfg = GeneratorConfig(seed=seed, n_graphs=2, objects_per_graph=40, pairs_per_relation=6, split=(1, 0, 1))
    corpus = generate(cfg)[0]
    corpus.validate()
    assert corpus_to_dict(corpus)["split"] == {"train": ["g0"], "val": [], "test": ["g1"]}
