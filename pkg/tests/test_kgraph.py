import os

import numpy as np
import pytest

from kgexplain.errors import ContractError, DataError, NumericError
from kgexplain.kgraph import (
    ComputationGraph,
    KnowledgeGraph,
    TargetTriple,
    adjacency_power_row,
    extract_computation_graph,
    full_graph,
    k_core_prune,
    load_triples,
)


def kg_from(triples, n_ent=None, n_rel=None):
    arr = np.array(triples, dtype=np.int64).reshape(-1, 3)
    n_ent = n_ent or int(arr[:, [0, 2]].max()) + 1
    n_rel = n_rel or int(arr[:, 1].max()) + 1
    return KnowledgeGraph(n_ent, n_rel, arr[:, 0], arr[:, 1], arr[:, 2])


# -- load_triples -------------------------------------------------------------


def test_load_three_line_file(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("a\tr1\tb\nb\tr1\tc\na\tr2\tc\n")
    g = load_triples(p)
    assert (g.num_entities, g.num_relations, g.num_triples) == (3, 2, 3)
    assert g.entity_names == ["a", "b", "c"]
    assert g.relation_names == ["r1", "r2"]


def test_load_duplicate_line_dropped_with_count(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("a\tr\tb\na\tr\tb\n")
    g = load_triples(p)
    assert g.num_triples == 1
    assert g.duplicates_dropped == 1


def test_load_malformed_line_reports_lineno(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("a\tr\tb\nbroken line\n")
    with pytest.raises(DataError, match=":2"):
        load_triples(p)


def test_load_empty_file(tmp_path):
    p = tmp_path / "kg.tsv"
    p.write_text("\n\n")
    with pytest.raises(DataError):
        load_triples(p)


def test_load_custom_delimiter(tmp_path):
    p = tmp_path / "kg.txt"
    p.write_text("a r1 b\nb r1 c\n")
    g = load_triples(p, delimiter=" ")
    assert g.num_triples == 2


FB_TRAIN = os.environ.get("KGEXPLAIN_FB15K237_TRAIN", "")


@pytest.mark.skipif(not os.path.exists(FB_TRAIN), reason="FB15k-237 train split not available")
def test_fb15k237_statistics():
    g = load_triples(FB_TRAIN)
    assert g.num_triples == 272115
    assert g.num_entities == 14541
    assert g.num_relations == 237


# -- vocabulary and lookup ----------------------------------------------------


def test_name_lookup_and_close_matches():
    g = kg_from([(0, 0, 1)])
    g.entity_names[:] = ["alpha", "beta"]
    g._name_index = None
    assert g.entity_id("alpha") == 0
    assert g.entity_id(1) == 1
    with pytest.raises(DataError, match="alpha"):
        g.entity_id("alphaa")
    with pytest.raises(DataError):
        g.entity_id(7)


def test_vocab_json_is_sorted():
    g = kg_from([(0, 0, 1)])
    g.entity_names[:] = ["zeta", "ant"]
    g._name_index = None
    assert g.entity_vocab_json() == '{"ant":1,"zeta":0}'


def test_duplicate_triples_rejected():
    with pytest.raises(ContractError):
        kg_from([(0, 0, 1), (0, 0, 1)])


# -- extract_computation_graph ------------------------------------------------


def test_extract_path_graph():
    g = kg_from([(0, 0, 1), (1, 0, 2)])  # a->b->c
    gc = extract_computation_graph(g, TargetTriple(0, 0, 2), hops=1)
    assert gc.nodes.tolist() == [0, 1, 2]
    assert gc.num_edges == 2


def test_extract_star_excludes_far_leaves():
    # center 0, leaves 1..5; target between leaves 1 and 2
    g = kg_from([(0, 0, i) for i in range(1, 6)])
    gc = extract_computation_graph(g, TargetTriple(1, 0, 2), hops=1)
    assert gc.nodes.tolist() == [0, 1, 2]


def test_extract_matches_bfs_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        n = 50
        triples = {(int(rng.integers(n)), int(rng.integers(3)), int(rng.integers(n)))
                   for _ in range(120)}
        g = kg_from(sorted(triples), n_ent=n, n_rel=3)
        target = TargetTriple(int(rng.integers(n)), 0, int(rng.integers(n)))
        gc = extract_computation_graph(g, target, hops=2)

        # oracle: undirected BFS balls via adjacency sets
        und = {i: set() for i in range(n)}
        for h, _, t in triples:
            und[h].add(t)
            und[t].add(h)

        def ball(start, radius):
            seen = {start}
            frontier = {start}
            for _ in range(radius):
                frontier = {v for u in frontier for v in und[u]} - seen
                seen |= frontier
            return seen

        expected = ball(target.head, 2) | ball(target.tail, 2)
        assert set(gc.nodes.tolist()) == expected


def test_extract_monotone_in_hops():
    rng = np.random.default_rng(1)
    n = 30
    triples = {(int(rng.integers(n)), 0, int(rng.integers(n))) for _ in range(60)}
    g = kg_from(sorted(triples), n_ent=n, n_rel=1)
    target = TargetTriple(0, 0, 1)
    prev = set()
    for hops in (1, 2, 3):
        nodes = set(extract_computation_graph(g, target, hops).nodes.tolist())
        assert prev <= nodes
        prev = nodes


def test_extract_max_nodes_truncation_policy():
    # head 0, tail 1; nodes 2,3 at distance 1; nodes 4,5 at distance 2
    g = kg_from([(0, 0, 2), (2, 0, 4), (1, 0, 3), (3, 0, 5), (0, 0, 1)])
    gc = extract_computation_graph(g, TargetTriple(0, 0, 1), hops=2, max_nodes=4)
    # kept: head, tail (dist 0), then ids 2, 3 (dist 1, ascending id)
    assert gc.nodes.tolist() == [0, 1, 2, 3]


def test_extract_isolated_target():
    g = kg_from([(2, 0, 3)], n_ent=6, n_rel=1)
    gc = extract_computation_graph(g, TargetTriple(4, 0, 5), hops=2)
    assert gc.nodes.tolist() == [4, 5]
    assert gc.num_edges == 0


def test_extract_validates_args():
    g = kg_from([(0, 0, 1)])
    with pytest.raises(ContractError):
        extract_computation_graph(g, TargetTriple(0, 0, 1), hops=0)
    with pytest.raises(ContractError):
        extract_computation_graph(g, TargetTriple(0, 0, 1), hops=1, max_nodes=1)


def test_index_maps_are_mutual_inverses():
    g = kg_from([(0, 0, 5), (5, 0, 9), (9, 0, 0)], n_ent=10, n_rel=1)
    gc = extract_computation_graph(g, TargetTriple(0, 0, 9), hops=2)
    for local, glob in enumerate(gc.global_of_local):
        assert gc.local_of_global[int(glob)] == local
    for glob, local in gc.local_of_global.items():
        assert int(gc.global_of_local[local]) == glob


# -- k_core_prune -------------------------------------------------------------


def oracle_k_core(gc: ComputationGraph, k: int):
    """Naive repeated-scan deletion, plus the protected targets."""
    pairs = {(int(s), int(d)) for s, d in zip(gc.pair_src, gc.pair_dst) if s != d}
    alive = set(range(gc.num_nodes))
    changed = True
    while changed:
        changed = False
        deg = {u: 0 for u in alive}
        seen = set()
        for s, d in pairs:
            if s in alive and d in alive:
                key = (min(s, d), max(s, d))
                if key not in seen:
                    seen.add(key)
                    deg[s] += 1
                    deg[d] += 1
        drop = {u for u in alive if deg[u] < k}
        if drop:
            alive -= drop
            changed = True
    return alive | {gc.head_local, gc.tail_local}


def test_kcore_triangle_unchanged():
    g = kg_from([(0, 0, 1), (1, 0, 2), (2, 0, 0)])
    gc = full_graph(g, TargetTriple(0, 0, 2))
    pruned = k_core_prune(gc, 2)
    assert pruned.num_nodes == 3
    assert pruned.num_edges == 3


def test_kcore_star_cascade():
    # center 0 with 5 leaves; targets are leaves 1 and 2
    g = kg_from([(0, 0, i) for i in range(1, 6)])
    gc = full_graph(g, TargetTriple(1, 0, 2))
    pruned = k_core_prune(gc, 2)
    assert set(pruned.nodes.tolist()) == {1, 2}
    assert pruned.num_edges == 0


def test_kcore_matches_oracle_on_random_graphs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = 40
        triples = {(int(rng.integers(n)), 0, int(rng.integers(n))) for _ in range(90)}
        g = kg_from(sorted(triples), n_ent=n, n_rel=1)
        gc = full_graph(g, TargetTriple(0, 0, 1))
        pruned = k_core_prune(gc, 2)
        expected_local = oracle_k_core(gc, 2)
        assert set(pruned.nodes.tolist()) == {int(gc.nodes[i]) for i in expected_local}


def test_kcore_idempotent():
    rng = np.random.default_rng(3)
    triples = {(int(rng.integers(20)), 0, int(rng.integers(20))) for _ in range(50)}
    g = kg_from(sorted(triples), n_ent=20, n_rel=1)
    gc = full_graph(g, TargetTriple(0, 0, 1))
    once = k_core_prune(gc, 2)
    twice = k_core_prune(once, 2)
    assert once.nodes.tolist() == twice.nodes.tolist()
    assert once.edges == twice.edges


def test_kcore_rejects_negative_k():
    g = kg_from([(0, 0, 1)])
    with pytest.raises(ContractError):
        k_core_prune(full_graph(g, TargetTriple(0, 0, 1)), -1)


# -- adjacency_power_row ------------------------------------------------------


def test_power_row_path():
    g = kg_from([(0, 0, 1), (1, 0, 2)])
    gc = full_graph(g, TargetTriple(0, 0, 2))
    rows = adjacency_power_row(gc, 0, 2)
    assert rows[0].tolist() == [0, 1, 0]
    assert rows[1].tolist() == [0, 0, 1]


def test_power_row_triangle_cycle():
    g = kg_from([(0, 0, 1), (1, 0, 2), (2, 0, 0)])
    gc = full_graph(g, TargetTriple(0, 0, 2))
    rows = adjacency_power_row(gc, 0, 3)
    assert rows[2][0] == 1


def dfs_walk_counts(adj, start, length, n):
    counts = np.zeros(n, dtype=np.int64)

    def walk(node, remaining):
        if remaining == 0:
            counts[node] += 1
            return
        for nxt in adj[node]:
            walk(nxt, remaining - 1)

    walk(start, length)
    return counts


def test_power_row_matches_walk_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n = 6
        pairs = {(int(rng.integers(n)), int(rng.integers(n))) for _ in range(12)}
        g = kg_from([(h, 0, t) for h, t in sorted(pairs)], n_ent=n, n_rel=1)
        gc = full_graph(g, TargetTriple(0, 0, 1))
        adj = [[] for _ in range(n)]
        for h, t in pairs:
            adj[h].append(t)
        rows = adjacency_power_row(gc, 0, 4)
        for length in range(1, 5):
            expected = dfs_walk_counts(adj, 0, length, n)
            assert rows[length - 1].tolist() == expected.tolist()


def test_power_row_matches_dense_matrix_power():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(2, 13))
        pairs = {(int(rng.integers(n)), int(rng.integers(n))) for _ in range(3 * n)}
        g = kg_from([(h, 0, t) for h, t in sorted(pairs)], n_ent=n, n_rel=1)
        gc = full_graph(g, TargetTriple(0, 0, min(1, n - 1)))
        a = gc.local_adjacency_dense().astype(np.int64)
        rows = adjacency_power_row(gc, 0, 4)
        power = np.eye(n, dtype=np.int64)
        for length in range(1, 5):
            power = power @ a
            assert rows[length - 1].tolist() == power[0].tolist()


def test_power_row_overflow_guard():
    # complete digraph on 12 nodes with self-loops: counts grow as 12^l
    n = 12
    triples = [(i, 0, j) for i in range(n) for j in range(n)]
    g = kg_from(triples, n_ent=n, n_rel=1)
    gc = full_graph(g, TargetTriple(0, 0, 1))
    with pytest.raises(NumericError):
        adjacency_power_row(gc, 0, 25)


def test_power_row_validates_args():
    g = kg_from([(0, 0, 1)])
    gc = full_graph(g, TargetTriple(0, 0, 1))
    with pytest.raises(ContractError):
        adjacency_power_row(gc, 5, 2)
    with pytest.raises(ContractError):
        adjacency_power_row(gc, 0, 0)
