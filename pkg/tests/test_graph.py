from pathlib import Path

import networkx
import numpy as np
import pytest

from spot_mamba.graph import (
    WALK_TYPES,
    Graph,
    WalkSet,
    bfs_walk,
    dfs_walk,
    generate_walks,
    load_edges,
    random_walk,
    ring_graph,
    save_edges,
)
from spot_mamba.utils import DataError, derive_rng


def _path4() -> Graph:
    return Graph.from_edges([(0, 1), (1, 2), (2, 3)])


def _segments(walk, start):
    """Split a walk at each restart from `start`."""
    cuts = [j for j, v in enumerate(walk) if v == start] + [len(walk)]
    return [walk[a:b] for a, b in zip(cuts, cuts[1:])]


def _random_graphs(count=100):
    for seed in range(count):
        n = 3 + seed % 48
        yield seed, Graph.from_networkx(networkx.gnp_random_graph(n, 0.25, seed=seed))


def test_from_edges_symmetrises_and_drops_self_loops():
    g = Graph.from_edges([(0, 1), (1, 0), (2, 2), (2, 1)], n_nodes=4)
    assert g.neighbors(1) == (0, 2)
    assert g.neighbors(2) == (1,)
    assert g.degree(3) == 0
    assert g.edges() == [(0, 1), (1, 2)]


def test_from_edges_rejects_out_of_range_node():
    with pytest.raises(DataError, match="outside"):
        Graph.from_edges([(0, 4)], n_nodes=4)


def test_networkx_round_trip():
    g = ring_graph(6)
    assert all(g.degree(i) == 2 for i in range(6))
    again = Graph.from_networkx(g.to_networkx())
    assert again == g


def test_bfs_on_path_from_endpoint():
    assert bfs_walk(_path4(), 0, 4, derive_rng(0)) == [0, 1, 2, 3]


def test_dfs_on_path_from_endpoint():
    assert dfs_walk(_path4(), 0, 4, derive_rng(0)) == [0, 1, 2, 3]


@pytest.mark.parametrize("walker,length", [(bfs_walk, 3), (dfs_walk, 2), (random_walk, 3)])
def test_isolated_node_repeats(walker, length):
    g = Graph.from_edges([(0, 1)], n_nodes=6)
    assert walker(g, 5, length, derive_rng(1)) == [5] * length


def test_bfs_star_visits_all_leaves_after_center():
    g = Graph.from_edges([(0, 1), (0, 2), (0, 3)])
    for seed in range(5):
        walk = bfs_walk(g, 0, 4, derive_rng(seed))
        assert walk[0] == 0
        assert sorted(walk[1:]) == [1, 2, 3]


def test_bfs_star_order_depends_on_seed():
    g = Graph.from_edges([(0, i) for i in range(1, 7)])
    orders = {tuple(bfs_walk(g, 0, 7, derive_rng(seed))) for seed in range(10)}
    assert len(orders) > 1


def test_dfs_triangle():
    g = Graph.from_edges([(0, 1), (1, 2), (2, 0)])
    walk = dfs_walk(g, 0, 3, derive_rng(2))
    assert walk[0] == 0
    assert set(walk[1:]) == {1, 2}


def test_random_walk_two_cycle_is_forced():
    g = Graph.from_edges([(0, 1)])
    assert random_walk(g, 0, 4, derive_rng(3)) == [0, 1, 0, 1]


def test_small_component_restarts_from_source():
    g = Graph.from_edges([(0, 1)], n_nodes=3)
    assert bfs_walk(g, 0, 5, derive_rng(0)) == [0, 1, 0, 1, 0]
    assert dfs_walk(g, 0, 5, derive_rng(0)) == [0, 1, 0, 1, 0]


def test_random_walk_on_path_follows_edges():
    g = _path4()
    for seed in range(1000):
        walk = random_walk(g, seed % 4, 8, derive_rng(seed))
        assert all(g.has_edge(a, b) for a, b in zip(walk, walk[1:]))


def test_bfs_depth_is_monotone_within_segments():
    for seed, g in _random_graphs():
        nxg = g.to_networkx()
        rng = derive_rng(seed)
        for start in range(g.n_nodes):
            walk = bfs_walk(g, start, 10, rng)
            depth = networkx.single_source_shortest_path_length(nxg, start)
            assert len(walk) == 10 and walk[0] == start
            for segment in _segments(walk, start):
                depths = [depth[v] for v in segment]
                assert depths == sorted(depths)


def test_dfs_has_no_repeats_within_segments():
    for seed, g in _random_graphs():
        rng = derive_rng(seed)
        for start in range(g.n_nodes):
            walk = dfs_walk(g, start, 10, rng)
            assert len(walk) == 10 and walk[0] == start
            for segment in _segments(walk, start):
                assert len(set(segment)) == len(segment)


def test_dfs_descends_along_edges():
    for seed, g in _random_graphs(30):
        rng = derive_rng(seed)
        for start in range(g.n_nodes):
            walk = dfs_walk(g, start, 10, rng)
            for segment in _segments(walk, start):
                for j in range(1, len(segment)):
                    # each new node hangs off some earlier node of the segment
                    assert any(g.has_edge(u, segment[j]) for u in segment[:j])


def test_random_walk_edges_or_stalls():
    for seed, g in _random_graphs():
        rng = derive_rng(seed)
        for start in range(g.n_nodes):
            walk = random_walk(g, start, 10, rng)
            assert walk[0] == start
            for a, b in zip(walk, walk[1:]):
                assert g.has_edge(a, b) or (a == b and g.degree(a) == 0)


def test_generate_walks_counts_and_starts():
    ws = generate_walks(_path4(), K=4, M=2, seed=0)
    assert ws.walks.shape == (3, 2, 4, 4)
    assert ws.walks.reshape(-1, 4).shape[0] == 24
    for ti in range(3):
        for m in range(2):
            assert ws.walks[ti, m, :, 0].tolist() == [0, 1, 2, 3]


def test_generate_walks_is_deterministic():
    g = Graph.from_networkx(networkx.gnp_random_graph(12, 0.3, seed=4))
    a = generate_walks(g, K=8, M=3, seed=11)
    b = generate_walks(g, K=8, M=3, seed=11)
    c = generate_walks(g, K=8, M=3, seed=12)
    assert np.array_equal(a.walks, b.walks)
    assert not np.array_equal(a.walks, c.walks)


def test_generate_walks_parallel_matches_serial():
    g = Graph.from_networkx(networkx.gnp_random_graph(15, 0.3, seed=5))
    serial = generate_walks(g, K=6, M=2, seed=7)
    parallel = generate_walks(g, K=6, M=2, seed=7, max_workers=4)
    assert np.array_equal(serial.walks, parallel.walks)


def test_random_walk_repetitions_differ():
    g = Graph.from_networkx(networkx.complete_graph(6))
    ws = generate_walks(g, K=12, M=2, seed=0)
    rw = ws.sequences("rw")
    assert not np.array_equal(rw[0], rw[1])


def test_generate_walks_rejects_bad_sizes():
    with pytest.raises(DataError):
        generate_walks(_path4(), K=0, M=1, seed=0)


def test_walkset_requires_own_start():
    walks = np.zeros((3, 1, 2, 2), dtype=np.int64)
    with pytest.raises(DataError, match="start at its own node"):
        WalkSet(walks, K=2, M=1, seed=0)


def test_relabel_maps_nodes_and_rows():
    g = Graph.from_networkx(networkx.gnp_random_graph(7, 0.4, seed=1))
    ws = generate_walks(g, K=5, M=2, seed=3)
    perm = np.array([3, 0, 6, 1, 5, 2, 4])
    moved = ws.relabel(perm)
    for i in range(7):
        assert np.array_equal(moved.walks[:, :, perm[i], :], perm[ws.walks[:, :, i, :]])


def test_dump_csv_row_format(tmp_path: Path):
    ws = generate_walks(_path4(), K=4, M=1, seed=0)
    out = tmp_path / "walks.csv"
    ws.dump_csv(out)
    lines = out.read_text().splitlines()
    assert len(lines) == 12
    assert lines[0] == "bfs,0,0,0,1,2,3"
    assert {line.split(",")[0] for line in lines} == set(WALK_TYPES)


def test_load_csv_restores_walks(tmp_path: Path):
    ws = generate_walks(ring_graph(5), K=6, M=2, seed=9)
    out = tmp_path / "walks.csv"
    ws.dump_csv(out)
    again = WalkSet.load_csv(out, seed=9)
    assert (again.K, again.M, again.n_nodes) == (6, 2, 5)
    assert np.array_equal(again.walks, ws.walks)


def test_load_edges_with_header(tmp_path: Path):
    p = tmp_path / "edges.csv"
    p.write_text("src,dst\n0,1\n1,2\n")
    g = load_edges(p)
    assert g.n_nodes == 3
    assert g.neighbors(1) == (0, 2)


def test_load_edges_pems_style_costs(tmp_path: Path):
    p = tmp_path / "distance.csv"
    p.write_text("from,to,cost\n0,2,120.5\n2,3,88.0\n")
    g = load_edges(p, n_nodes=5)
    assert g.n_nodes == 5
    assert g.edges() == [(0, 2), (2, 3)]
    assert g.degree(4) == 0


def test_load_edges_rejects_non_integer(tmp_path: Path):
    p = tmp_path / "edges.csv"
    p.write_text("0,1\n1,x\n")
    with pytest.raises(DataError, match="row 2"):
        load_edges(p)


def test_save_edges_round_trip(tmp_path: Path):
    g = ring_graph(5)
    p = tmp_path / "edges.csv"
    save_edges(g, p)
    assert p.read_text().splitlines()[0] == "src,dst"
    assert load_edges(p, n_nodes=5) == g
