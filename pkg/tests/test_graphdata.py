"""Dataset format, preprocessing, mixing, hyperbolicity, and generators."""

import numpy as np
import pytest

from hamgnn import graphdata as gd
from hamgnn.graphdata import GraphDataset


def write_dataset(path, nodes_text, edges_text, splits_text):
    path.mkdir(parents=True, exist_ok=True)
    (path / "nodes.csv").write_text(nodes_text)
    (path / "edges.tsv").write_text(edges_text)
    (path / "splits.json").write_text(splits_text)
    return path


PATH3_NODES = ("id,label,f0,f1\n"
               "0,0,1.0,0.0\n"
               "1,1,0.5,0.5\n"
               "2,0,0.0,2.0\n")
PATH3_SPLITS = '{"train": [0], "val": [1], "test": [2]}'


# ---------------------------------------------------------------------------
# loading


def test_load_path_fixture(tmp_path):
    ds = gd.load_dataset(write_dataset(tmp_path / "p3", PATH3_NODES,
                                       "0\t1\n1\t2\n", PATH3_SPLITS))
    assert ds.n == 3
    assert len(ds.edges) == 2
    assert ds.num_features == 2
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.train_mask.tolist() == [0]


def test_load_rejects_self_loop(tmp_path):
    p = write_dataset(tmp_path / "x", PATH3_NODES, "0\t1\n2\t2\n", PATH3_SPLITS)
    with pytest.raises(ValueError, match="self-loop at line 2"):
        gd.load_dataset(p)


def test_load_rejects_reversed_duplicate(tmp_path):
    p = write_dataset(tmp_path / "x", PATH3_NODES, "0\t1\n1\t0\n", PATH3_SPLITS)
    with pytest.raises(ValueError, match="duplicate edge at line 2"):
        gd.load_dataset(p)


def test_load_rejects_unknown_node(tmp_path):
    p = write_dataset(tmp_path / "x", PATH3_NODES, "0\t5\n", PATH3_SPLITS)
    with pytest.raises(ValueError, match="unknown node id 5 at line 1"):
        gd.load_dataset(p)


def test_load_rejects_ragged_rows(tmp_path):
    nodes = "id,label,f0,f1\n0,0,1.0,0.0\n1,1,0.5\n2,0,0.0,2.0\n"
    p = write_dataset(tmp_path / "x", nodes, "", PATH3_SPLITS)
    with pytest.raises(ValueError, match="ragged feature row at line 3"):
        gd.load_dataset(p)


def test_load_rejects_out_of_order_ids(tmp_path):
    nodes = "id,label,f0,f1\n0,0,1.0,0.0\n0,1,0.5,0.5\n2,0,0.0,2.0\n"
    p = write_dataset(tmp_path / "x", nodes, "", PATH3_SPLITS)
    with pytest.raises(ValueError, match="0..n-1 in order"):
        gd.load_dataset(p)


def test_load_missing_file(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError, match="nodes.csv"):
        gd.load_dataset(tmp_path / "empty")


def test_features_l1_normalized_on_load(tmp_path):
    nodes = "id,label,f0,f1,f2\n0,0,2.0,2.0,0.0\n1,0,0.0,0.0,0.0\n"
    ds = gd.load_dataset(write_dataset(tmp_path / "x", nodes, "",
                                       '{"train": [], "val": [], "test": []}'))
    assert ds.features[0].tolist() == [0.5, 0.5, 0.0]
    assert ds.features[1].tolist() == [0.0, 0.0, 0.0]


def test_roundtrip_identity(tmp_path):
    ds = gd.synth_dataset("sbm", sizes=(10, 10), p_in=0.6, p_out=0.05, seed=3)
    gd.save_dataset(ds, tmp_path / "a")
    first = gd.load_dataset(tmp_path / "a")
    gd.save_dataset(first, tmp_path / "b")
    second = gd.load_dataset(tmp_path / "b")
    assert second.n == first.n
    assert second.edges == first.edges
    assert np.array_equal(second.labels, first.labels)
    assert np.array_equal(second.train_mask, first.train_mask)
    assert np.array_equal(second.val_mask, first.val_mask)
    assert np.array_equal(second.test_mask, first.test_mask)
    assert np.array_equal(second.features, first.features)


def test_dataset_validation():
    with pytest.raises(ValueError, match="self-loop"):
        GraphDataset("x", np.eye(2), [0, 0], [(1, 1)], [], [], [])
    with pytest.raises(ValueError, match="masks overlap"):
        GraphDataset("x", np.eye(2), [0, 0], [], [0], [0], [])
    with pytest.raises(ValueError, match="duplicate edge"):
        GraphDataset("x", np.eye(2), [0, 0], [(0, 1), (1, 0)], [], [], [])


# ---------------------------------------------------------------------------
# mixing


def test_mix_basic_counts():
    a = GraphDataset("a", np.ones((2, 3)), [0, 1], [(0, 1)], [0], [1], [])
    b = GraphDataset("b", np.ones((3, 5)), [0, 1, 1], [(0, 2), (1, 2)],
                     [0], [1], [2])
    m = gd.mix_datasets(a, b, seed=1)
    assert m.n == 5
    assert m.num_features == 5
    assert m.num_classes == 4
    assert len(m.edges) == 3
    assert m.labels.tolist() == [0, 1, 2, 3, 3]


def test_mix_never_crosses_sources():
    a = gd.synth_dataset("sbm", sizes=(8, 8), p_in=0.7, p_out=0.2, seed=0)
    b = gd.synth_dataset("tree", depth=3, branching=2, seed=1)
    m = gd.mix_datasets(a, b, seed=2)
    crossing = [e for e in m.edges if (e[0] < a.n) != (e[1] < a.n)]
    assert crossing == []
    # padded features: the second block's tail columns stay zero when b is narrower
    assert m.features[:a.n, a.num_features:].tolist() == \
        np.zeros((a.n, m.num_features - a.num_features)).tolist()


def test_mix_with_itself_disconnects():
    a = gd.synth_dataset("tree", depth=2, branching=2, seed=0)
    m = gd.mix_datasets(a, a, seed=0)
    assert m.n == 2 * a.n
    comps = gd._components(m.neighbors())
    assert len(comps) >= 2


def test_mix_masks_follow_proportions():
    a = gd.synth_dataset("sbm", sizes=(25, 25), p_in=0.5, p_out=0.05, seed=0)
    m = gd.mix_datasets(a, a, split=(0.6, 0.2, 0.2), seed=9)
    assert m.train_mask.size == 60
    assert m.val_mask.size == 20
    assert m.test_mask.size == 20


# ---------------------------------------------------------------------------
# hyperbolicity


@pytest.mark.parametrize("tree", [
    gd.GraphDataset("star", np.eye(5), np.zeros(5, int),
                    [(0, i) for i in range(1, 5)], [], [], []),
    gd.GraphDataset("path", np.eye(6), np.zeros(6, int),
                    [(i, i + 1) for i in range(5)], [], [], []),
])
def test_trees_are_zero_hyperbolic(tree):
    assert gd.delta_hyperbolicity(tree)["max_delta"] == 0.0


def test_deep_tree_is_zero_hyperbolic():
    tree = gd.synth_dataset("tree", depth=4, branching=2, seed=0)
    assert gd.delta_hyperbolicity(tree)["max_delta"] == 0.0


def test_four_cycle(c4_dataset):
    rep = gd.delta_hyperbolicity(c4_dataset)
    assert rep["max_delta"] == 1.0
    assert rep["histogram"] == {1.0: 1}


def test_sampled_all_equals_exact_on_random_graphs():
    rng = np.random.default_rng(7)
    for trial in range(50):
        n = int(rng.integers(5, 21))
        edges = {(i, int(rng.integers(0, i))) for i in range(1, n)}  # spanning tree
        extra = int(rng.integers(0, n))
        while len(edges) < n - 1 + extra:
            u, v = rng.integers(0, n, 2)
            if u != v:
                edges.add((max(u, v), min(u, v)))
        ds = GraphDataset("r", np.eye(n), np.zeros(n, int),
                          [(min(u, v), max(u, v)) for u, v in edges], [], [], [])
        exact = gd.delta_hyperbolicity(ds, "exact")
        sampled = gd.delta_hyperbolicity(ds, "sampled", samples=10 ** 9, seed=trial)
        assert sampled == exact, f"trial {trial}"


def test_sampled_mode_is_deterministic(sbm_dataset):
    a = gd.delta_hyperbolicity(sbm_dataset, "sampled", samples=200, seed=5)
    b = gd.delta_hyperbolicity(sbm_dataset, "sampled", samples=200, seed=5)
    assert a == b
    assert a["num_quadruples"] == 200


def test_hyperbolicity_errors(c4_dataset):
    tiny = GraphDataset("t", np.eye(3), np.zeros(3, int), [(0, 1), (1, 2)],
                        [], [], [])
    with pytest.raises(ValueError, match="at least 4"):
        gd.delta_hyperbolicity(tiny)
    with pytest.raises(ValueError, match="positive sample count"):
        gd.delta_hyperbolicity(c4_dataset, "sampled", samples=0)
    big = gd.synth_dataset("sbm", sizes=(40, 40), p_in=0.3, p_out=0.05, seed=0)
    with pytest.raises(ValueError, match="60"):
        gd.delta_hyperbolicity(big, "exact")


# ---------------------------------------------------------------------------
# generators


def test_tree_generator_counts():
    t = gd.synth_dataset("tree", depth=3, branching=2, seed=0)
    assert t.n == 15
    assert len(t.edges) == 14
    assert gd.delta_hyperbolicity(t)["max_delta"] == 0.0
    assert t.labels.tolist()[:3] == [0, 1, 1]  # depth parity


def test_grid_generator_counts():
    g = gd.synth_dataset("grid", width=3, height=3, seed=0)
    assert g.n == 9
    assert len(g.edges) == 12


def test_sbm_density_contrast_over_seeds():
    for seed in range(20):
        s = gd.synth_dataset("sbm", sizes=(20, 20), p_in=0.5, p_out=0.01,
                             seed=seed)
        intra = sum(1 for u, v in s.edges if s.labels[u] == s.labels[v])
        inter = len(s.edges) - intra
        intra_pairs = 2 * (20 * 19 // 2)
        inter_pairs = 20 * 20
        assert intra / intra_pairs > 5 * max(inter, 1) / inter_pairs


def test_generator_determinism_and_errors():
    a = gd.synth_dataset("sbm", sizes=(5, 5), p_in=0.5, p_out=0.1, seed=4)
    b = gd.synth_dataset("sbm", sizes=(5, 5), p_in=0.5, p_out=0.1, seed=4)
    assert a.edges == b.edges
    assert np.array_equal(a.features, b.features)
    with pytest.raises(ValueError):
        gd.synth_dataset("tree", depth=0)
    with pytest.raises(ValueError):
        gd.synth_dataset("sbm", sizes=(5,), p_in=0.5, p_out=0.1)
    with pytest.raises(ValueError):
        gd.synth_dataset("nope")
