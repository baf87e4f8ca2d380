import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metags.embed import pretrain_embeddings
from metags.extract import NormalizedSubgraph, build_subgraph, extract_structure
from metags.hetgraph import HeterogeneousGraph, bfs_distances
from metags.params import ModelConfig, ModelParams
from metags.twoview import (compile_subgraph, embed_batch, gvgc_embed, ovgc_embed, pack, project_features,
                            structural_feature, subgraph_embed)

import oracles

CFG = ModelConfig(d_h=5, d_gv=4, d_att=3, n_type_max=4, l_max=4, seed=3)


def graph(types, links, dims=None, seed=0, perm=None):
    """Typed graph; ``dims[t]`` is the feature width of type ``t``; ``perm`` relabels objects."""
    n = len(types)
    dims = dims or {}
    rng = np.random.default_rng(seed)
    feats = [rng.normal(size=dims.get(t, 3)) for t in types]
    perm = list(range(n)) if perm is None else list(perm)
    inv = np.argsort(perm)
    return HeterogeneousGraph(
        "g", [f"T{k}" for k in range(max(types) + 1)], ["L"], [types[inv[i]] for i in range(n)],
        [feats[inv[i]] for i in range(n)], [(perm[a], perm[b], 0) for a, b in links])


TYPES = [0, 1, 2, 3, 2, 1, 3, 2, 0]
LINKS = [(0, 1), (1, 5), (0, 2), (2, 3), (3, 5), (0, 4), (4, 6), (6, 5), (2, 7), (7, 8), (8, 3)]


def subgraph(g, u=0, v=5, types=(0, 1, 2, 3)):
    S = extract_structure(g, u, v, 100, 6)
    emb = pretrain_embeddings(g, dim=4, seed=0, method="spectral")
    return build_subgraph(S, g, emb, list(types))


def relabel(sub, perm, g2):
    m = lambda o: int(perm[o])
    links = tuple(sorted((min(m(a), m(b)), max(m(a), m(b)), t) for a, b, t in sub.links))
    return NormalizedSubgraph(m(sub.u), m(sub.v), tuple(sorted(m(o) for o in sub.objects)), links,
                              sub.selected_types, dict(sub.type_rank),
                              {m(o): t for o, t in sub.object_type.items()})


# -- numpy oracles ------------------------------------------------------------------


def leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def oracle_h(sub, g, P):
    return {o: g.features[o] @ P.projection(sub.rank(o), len(g.features[o])).value for o in sub.objects}


def oracle_ovgc(sub, g, P, cfg):
    h = oracle_h(sub, g, P)
    adj = sub.adjacency()
    F = []
    for k in range(1, sub.n_type + 1):
        a = P[f"ovgc.a.{k}"].value
        total = np.zeros(cfg.d_h)
        for q in (sub.u, sub.v):
            d = bfs_distances(adj, q)
            nb = [o for o in sub.objects if o != q and o in d and 1 <= d[o] <= cfg.hops and sub.rank(o) == k]
            if not nb:
                continue
            e = np.array([leaky(np.concatenate([h[q], h[o]]) @ a) for o in nb])
            al = np.exp(e - e.max())
            al /= al.sum()
            total = total + leaky(sum(w * h[o] for w, o in zip(al, nb)))
        F.append(total)
    F = np.array(F)
    w = np.tanh(F @ P["ovgc.W_ov"].value + P["ovgc.b_ov"].value) @ P["ovgc.a_ov"].value
    beta = np.exp(w - w.max())
    beta /= beta.sum()
    return beta @ F


def oracle_gvgc(sub, g, P, cfg):
    h = oracle_h(sub, g, P)
    adj = sub.adjacency()
    du, dv = bfs_distances(adj, sub.u), bfs_distances(adj, sub.v)
    X = {}
    for o in sub.objects:
        if o == sub.u:
            lab = (0, 1, 0)
        elif o == sub.v:
            lab = (1, 0, 0)
        else:
            lab = (du[o], dv[o], sub.rank(o))
        X[o] = np.concatenate([oracles.structural_feature(*lab, cfg.d_max, cfg.n_type_max), h[o]])
    for layer in ("l1", "l2"):
        Ws, Wn, b = (P[f"gvgc.{layer}.{n}"].value for n in ("W_self", "W_neigh", "b"))
        X = {o: np.maximum(0, X[o] @ Ws + (np.mean([X[j] for j in adj[o]], axis=0) if adj[o] else 0) @ Wn + b)
             for o in sub.objects}
    pooled = np.mean([X[o] for o in sub.objects], axis=0)
    return np.maximum(0, pooled @ P["gvgc.W_gv"].value)


# -- tests -----------------------------------------------------------------------------


def test_structural_feature_examples():
    cfg = ModelConfig(n_type_max=4, l_max=4)
    g = graph([0, 1, 1, 3, 2], [(0, 2), (2, 1), (0, 3), (3, 4), (4, 1)])
    sub = subgraph(g, 0, 1, (0, 1, 2, 3))
    D = cfg.d_max
    e = lambda k, w: np.eye(w)[k]
    np.testing.assert_array_equal(structural_feature(sub, 0, cfg), np.r_[e(0, D) + e(1, D), e(0, 5)])
    np.testing.assert_array_equal(structural_feature(sub, 1, cfg), np.r_[e(1, D) + e(0, D), e(0, 5)])
    np.testing.assert_array_equal(structural_feature(sub, 2, cfg), np.r_[2 * e(1, D), e(sub.rank(2), 5)])
    assert sub.rank(2) == 2
    # (2,3,1) and (3,2,1) collide by construction
    a = oracles.structural_feature(2, 3, 1, D, 4)
    b = oracles.structural_feature(3, 2, 1, D, 4)
    assert a == b
    with pytest.raises(KeyError):
        structural_feature(sub, 99, cfg)


@settings(max_examples=200)
@given(st.integers(0, 12), st.integers(0, 12), st.integers(1, 4), st.integers(2, 8), st.integers(1, 6))
def test_structural_feature_oracle(du, dv, r, l_max, n_max):
    cfg = ModelConfig(l_max=l_max, n_type_max=max(n_max, r))
    sub = NormalizedSubgraph(0, 1, (0, 1, 2), (), (5, 6), {5: 1, 6: r}, {0: 5, 1: 5, 2: 6})
    got = structural_feature(sub, 2, cfg, ({2: du}, {2: dv}))
    ref = oracles.structural_feature(du, dv, r, cfg.d_max, cfg.n_type_max)
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_distance_clamp():
    cfg = ModelConfig(l_max=1, n_type_max=2)
    sub = NormalizedSubgraph(0, 1, (0, 1, 2), (), (5, 6), {5: 1, 6: 2}, {0: 5, 1: 5, 2: 6})
    f = structural_feature(sub, 2, cfg, ({2: 50}, {2: 7}))
    assert f[cfg.d_max - 1] == 2.0 and f[: cfg.d_max].sum() == 2.0


def test_project_features_examples():
    g = graph([0, 1, 0], [(0, 1), (1, 2)], dims={0: 2, 1: 2})
    sub = subgraph(g, 0, 2, (0, 1))
    cfg = ModelConfig(d_h=2, n_type_max=2, l_max=4)
    P = ModelParams(cfg)
    for k in (1, 2):
        P.projection(k, 2).value = np.eye(2)
    H = project_features(sub, g, P).value
    for row, o in enumerate(sub.objects):
        np.testing.assert_array_equal(H[row], g.features[o])
    g0 = graph([0, 1, 0], [(0, 1), (1, 2)], dims={0: 2, 1: 2})
    g0.features[1] = np.zeros(2)
    assert not project_features(subgraph(g0, 0, 2, (0, 1)), g0, ModelParams(cfg)).value[1].any()
    a, b = ModelParams(cfg), ModelParams(cfg)
    assert a.projection(3, 7).value.tobytes() == b.projection(3, 7).value.tobytes()


def test_ovgc_and_gvgc_match_oracles():
    g = graph(TYPES, LINKS, dims={2: 5})
    for types in [(0, 1, 2, 3), (0, 1, 2), (0, 1)]:
        sub = subgraph(g, types=types)
        P = ModelParams(CFG)
        np.testing.assert_allclose(ovgc_embed(sub, g, P).value, oracle_ovgc(sub, g, P, CFG), rtol=0, atol=1e-12)
        np.testing.assert_allclose(gvgc_embed(sub, g, P).value, oracle_gvgc(sub, g, P, CFG), rtol=0, atol=1e-12)
        z = subgraph_embed(sub, g, P).value
        assert z.shape == (CFG.d_h + CFG.d_gv,)
        np.testing.assert_array_equal(z, np.r_[ovgc_embed(sub, g, P).value, gvgc_embed(sub, g, P).value])


def test_attention_examples():
    # u - a - v with a alone in its slot: weight 1; u - {b, c} identical twins: 0.5 each
    g = graph([0, 2, 1, 3, 3], [(0, 1), (1, 2), (0, 3), (0, 4), (3, 2), (4, 2)])
    g.features[4] = g.features[3].copy()
    sub = subgraph(g, 0, 2, (0, 1, 2, 3))
    tr = {}
    ovgc_embed(sub, g, ModelParams(CFG), tr)
    slot_a, slot_t = sub.rank(1), sub.rank(3)
    for seg in np.unique(tr["alpha_seg"]):
        m = tr["alpha_seg"] == seg
        np.testing.assert_allclose(tr["alpha"][m].sum(), 1.0, rtol=0, atol=1e-12)
        slot = seg % CFG.n_type_max + 1
        if slot == slot_t and seg // CFG.n_type_max == 0:  # u's twin slot
            np.testing.assert_allclose(tr["alpha"][m], [0.5, 0.5], rtol=0, atol=1e-15)
        if slot == slot_a:
            assert m.sum() == 1 and tr["alpha"][m][0] == 1.0
    np.testing.assert_allclose(tr["beta"].sum(), 1.0, rtol=0, atol=1e-12)


def test_ovgc_reads_only_h_hop_neighbourhood():
    # u=0, v=1; the middle of the long path 0-3-4-5-6-7-1 is three hops from both
    types = [0, 1, 2, 3, 2, 3, 2, 3]
    links = [(0, 2), (2, 1), (0, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 1)]
    g = graph(types, links)
    sub = subgraph(g, 0, 1, (0, 1, 2, 3))
    cfg = ModelConfig(d_h=5, d_gv=4, d_att=3, n_type_max=4, l_max=6, hops=2, seed=3)
    adj = sub.adjacency()
    du, dv = bfs_distances(adj, 0), bfs_distances(adj, 1)
    far = [o for o in sub.objects if min(du[o], dv[o]) > cfg.hops]
    near = [o for o in sub.objects if 0 < min(du[o], dv[o]) <= cfg.hops]
    assert far and near
    P = ModelParams(cfg)
    base = ovgc_embed(sub, g, P).value
    base_gv = gvgc_embed(sub, g, P).value
    for o in far:
        g.features[o] = g.features[o] + 10.0
    assert ovgc_embed(sub, g, P).value.tobytes() == base.tobytes()
    assert not np.array_equal(gvgc_embed(sub, g, P).value, base_gv)
    g.features[near[0]] = g.features[near[0]] + 10.0
    assert not np.array_equal(ovgc_embed(sub, g, P).value, base)
    # the compiled neighbour entries never name a far object
    c = compile_subgraph(sub, g, cfg)
    assert not set(c.objects[c.ov_row].tolist()) & set(far)


def test_zero_params_zero_gvgc():
    g = graph(TYPES, LINKS)
    sub = subgraph(g)
    P = ModelParams(CFG)
    P.projection(1, 3)
    for n in P.names():
        P[n].value = np.zeros_like(P[n].value)
    for k in range(1, 5):
        P.projection(k, 3).value[:] = 0
    assert not gvgc_embed(sub, g, P).value.any()


def test_symmetric_pair_pools_to_single_object():
    # u and v share type and features; both carry the label e0+e1 with rank 0
    g = graph([0, 0, 1], [(0, 1), (1, 2)], seed=2)
    g.features[1] = g.features[0].copy()
    sub = NormalizedSubgraph(0, 1, (0, 1), ((0, 1, 0),), (0,), {0: 1}, {0: 0, 1: 0})
    P = ModelParams(CFG)
    x = np.r_[oracles.structural_feature(0, 1, 0, CFG.d_max, CFG.n_type_max), g.features[0] @ P.projection(1, 3).value]
    for layer in ("l1", "l2"):
        x = np.maximum(0, x @ P[f"gvgc.{layer}.W_self"].value + x @ P[f"gvgc.{layer}.W_neigh"].value
                       + P[f"gvgc.{layer}.b"].value)
    np.testing.assert_allclose(gvgc_embed(sub, g, P).value, np.maximum(0, x @ P["gvgc.W_gv"].value),
                               rtol=0, atol=1e-12)


def test_zero_projection_zero_ov_half():
    g = graph(TYPES, LINKS)
    sub = subgraph(g)
    P = ModelParams(CFG)
    P["ovgc.a_ov"].value[:] = 0
    for k in range(1, 5):
        P.projection(k, 3).value[:] = 0
    z = subgraph_embed(sub, g, P).value
    assert not z[: CFG.d_h].any()


@settings(max_examples=30)
@given(st.permutations(range(len(TYPES))), st.integers(0, 100))
def test_relabeling_invariance(perm, seed):
    g = graph(TYPES, LINKS, dims={2: 5}, seed=seed)
    sub = subgraph(g)
    g2 = graph(TYPES, LINKS, dims={2: 5}, seed=seed, perm=perm)
    sub2 = relabel(sub, perm, g2)
    P = ModelParams(CFG)
    assert gvgc_embed(sub, g, P).value.tobytes() == gvgc_embed(sub2, g2, P).value.tobytes()
    assert ovgc_embed(sub, g, P).value.tobytes() == ovgc_embed(sub2, g2, P).value.tobytes()


def test_identical_subgraphs_identical_z():
    g = graph(TYPES, LINKS)
    P = ModelParams(CFG)
    a = subgraph_embed(subgraph(g), g, P).value
    b = subgraph_embed(subgraph(g), g, P).value
    assert a.tobytes() == b.tobytes()


def test_batched_equals_single():
    g = graph(TYPES, LINKS, dims={2: 5})
    P = ModelParams(CFG)
    subs = [subgraph(g, types=t) for t in [(0, 1, 2, 3), (0, 1, 2), (0, 1, 3), (0, 1)]]
    Z = embed_batch(pack([compile_subgraph(s, g, CFG) for s in subs], CFG), P).value
    for row, s in zip(Z, subs):
        np.testing.assert_allclose(row, subgraph_embed(s, g, P).value, rtol=0, atol=1e-13)
