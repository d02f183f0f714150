import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcurv.data import (
    DatasetError,
    SplitSpec,
    TargetStats,
    apply_bins,
    decile_bins,
    filter_targets,
    fit_stats,
    load_dataset,
    log_transform,
    one_hot,
    percentile_filter,
    poisson_ratio,
    prepare,
    read_sidecar,
    split,
    standardize,
    synth_generate,
    write_dataset,
    write_sidecar,
)
from mtcurv.graphs import Multigraph, graph_to_record, validate_graph

from conftest import random_graph


# ---------------------------------------------------------------- loading


def test_load_two_records_in_order(tmp_path, rng):
    graphs = [random_graph(rng, gid="first"), random_graph(rng, gid="second")]
    path = tmp_path / "d.jsonl"
    write_dataset(graphs, path)
    loaded = load_dataset(path)
    assert [g.id for g in loaded] == ["first", "second"]
    assert loaded == graphs


def test_load_rejects_nan_target_with_id(tmp_path):
    path = tmp_path / "d.jsonl"
    good = graph_to_record(Multigraph([[1.0]], [], [], [], np.zeros((0, 1)), [1.0], "ok"))
    path.write_text(json.dumps(good) + "\n" + '{"id": "broken", "nodes": [[1.0]], "edges": [], "targets": [NaN]}\n')
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(path)


def test_load_rejects_invalid_graph_with_id(tmp_path):
    rec = {"id": "loop-id", "nodes": [[1.0]], "edges": [{"src": 3, "dst": 0, "key": 0, "feat": [1.0]}],
           "targets": [1.0]}
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="loop-id"):
        load_dataset(path)


def test_load_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(DatasetError, match=":1:"):
        load_dataset(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "absent.jsonl")


def test_write_load_roundtrip_fifty_graphs(tmp_path, rng):
    graphs = [random_graph(rng, gid=f"g{i}") for i in range(50)]
    write_dataset(graphs, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == graphs


# ---------------------------------------------------------------- filtering


def test_percentile_filter_one_to_hundred():
    values = np.arange(1, 101, dtype=float)
    kept = percentile_filter(values)
    # linear interpolation puts the band at [5.95, 95.05]
    lo, hi = 1 + 0.05 * 99, 1 + 0.95 * 99
    assert (lo, hi) == pytest.approx((5.95, 95.05))
    np.testing.assert_array_equal(values[kept], np.arange(6, 96))


def test_percentile_filter_keeps_all_when_equal_or_full_range():
    assert percentile_filter(np.full(7, 3.0)).tolist() == list(range(7))
    values = np.random.default_rng(0).standard_normal(30)
    assert percentile_filter(values, 0, 100).tolist() == list(range(30))


def test_percentile_filter_errors():
    with pytest.raises(ValueError):
        percentile_filter([])
    with pytest.raises(ValueError):
        percentile_filter([1.0, 2.0], 50, 50)


def test_filter_targets_intersects_per_task():
    graphs = [Multigraph([[1.0]], [], [], [], np.zeros((0, 1)), [float(i), float(99 - i)], str(i))
              for i in range(100)]
    kept = filter_targets(graphs)
    vals = [g.targets[0] for g in kept]
    # each column drops its own 5 lowest and 5 highest; the columns are mirror images
    assert min(vals) == 5.0 and max(vals) == 94.0
    assert len(kept) == 90


def test_log_transform():
    assert log_transform([1.0])[0] == 0.0
    assert abs(log_transform([math.e])[0] - 1.0) <= 1e-12
    assert abs(log_transform([math.exp(3.55068348)])[0] - 3.55068348) <= 1e-12
    with pytest.raises(ValueError, match="index 2"):
        log_transform([1.0, 2.0, 0.0])


# ---------------------------------------------------------------- standardization


def test_fit_stats_and_standardize():
    stats = fit_stats([1.0, 2.0, 3.0])
    assert stats.mean[0] == 2.0
    assert stats.std[0] == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    np.testing.assert_allclose(standardize(np.array([[1.0], [2.0], [3.0]]), stats).ravel(),
                               [-1.2247, 0.0, 1.2247], atol=1e-4)
    assert standardize([2.0], stats)[0] == 0.0


def test_degenerate_target():
    with pytest.raises(ValueError, match="degenerate target"):
        fit_stats([4.0, 4.0, 4.0])


@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_standardized_training_targets_have_zero_mean_unit_std(seed, n, t):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, t)) * rng.uniform(0.1, 100, t) + rng.uniform(-50, 50, t)
    stats = fit_stats(y)
    z = standardize(y, stats)
    again = fit_stats(z)
    np.testing.assert_allclose(again.mean, 0.0, atol=1e-10)
    np.testing.assert_allclose(again.std, 1.0, atol=1e-10)


def test_stats_sidecar_roundtrip(tmp_path):
    stats = TargetStats(np.array([1.5, -2.0]), np.array([0.5, 3.0]))
    edges = [decile_bins(np.arange(100.0)), decile_bins(np.linspace(0, 1, 50))]
    write_sidecar(tmp_path / "stats.json", stats, edges)
    back, back_edges = read_sidecar(tmp_path / "stats.json")
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)
    for a, b in zip(edges, back_edges):
        np.testing.assert_array_equal(a, b)
    doc = json.loads((tmp_path / "stats.json").read_text())
    assert set(doc) == {"per_task", "edge_bins"}


# ---------------------------------------------------------------- featurization


def test_one_hot():
    np.testing.assert_array_equal(one_hot("N", ["C", "N", "O"]), [0, 1, 0])
    np.testing.assert_array_equal(one_hot("C", ["C", "N", "O"]), [1, 0, 0])
    for c in "CNO":
        assert one_hot(c, "CNO").sum() == 1
    with pytest.raises(ValueError):
        one_hot("X", ["C", "N"])


def test_decile_bins():
    train = np.arange(1, 101, dtype=float)
    edges = decile_bins(train)
    assert edges.size == 9
    assert edges[0] == pytest.approx(10.9)
    assert np.argmax(apply_bins(5.0, edges)) == 0
    assert np.argmax(apply_bins(-1e9, edges)) == 0
    assert np.argmax(apply_bins(1e9, edges)) == 9
    with pytest.raises(ValueError):
        decile_bins([])


def test_decile_bins_balance_on_uniform_data():
    train = np.random.default_rng(5).uniform(size=1000)
    edges = decile_bins(train)
    counts = np.sum([apply_bins(v, edges) for v in train], axis=0)
    assert np.all(np.abs(counts / train.size - 0.1) <= 0.01)


@given(st.floats(-1e6, 1e6, allow_nan=False))
@settings(max_examples=100, deadline=None)
def test_bins_partition_the_line(value):
    edges = decile_bins(np.linspace(-10, 10, 37))
    b = apply_bins(value, edges)
    assert b.sum() == 1.0 and b.size == 10


# ---------------------------------------------------------------- splitting


def test_split_sizes_and_determinism():
    data = list(range(10))
    train, test = split(data, SplitSpec(0.7, seed=3))
    assert len(train) == 7 and len(test) == 3
    assert split(data, SplitSpec(0.7, seed=3)) == (train, test)
    assert set(train) | set(test) == set(data) and not set(train) & set(test)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(1.0)
    with pytest.raises(ValueError):
        split([], SplitSpec())


# ---------------------------------------------------------------- synthetic data


def test_poisson_ratio_unit_moduli():
    assert poisson_ratio(1.0, 1.0) == 0.125


def test_synth_is_deterministic_and_valid():
    a = synth_generate(20, seed=9)
    b = synth_generate(20, seed=9)
    assert a == b
    assert a != synth_generate(20, seed=10)
    for g in a:
        assert validate_graph(g) == []
        assert 4 <= g.num_nodes <= 16
        assert g.node_dim == 8 and g.edge_dim == 4 and g.num_targets == 3
        np.testing.assert_array_equal(g.node_features.sum(axis=1), 1.0)


def test_synth_targets_follow_coupling_exactly():
    for g in synth_generate(200, seed=1):
        y1, y2, y3 = g.targets
        assert y3 == (3 * y2 - 2 * y1) / (2 * (3 * y2 + y1))
        assert y2 > y1 > 0


def test_synth_graphs_are_symmetric_and_connected():
    for g in synth_generate(30, seed=2):
        triples = set(zip(g.src.tolist(), g.dst.tolist(), g.key.tolist()))
        assert all((d, s, k) in triples for s, d, k in triples)
        # the spanning path guarantees connectivity
        adj = {i: set() for i in range(g.num_nodes)}
        for s, d, _ in triples:
            adj[s].add(d)
        seen, stack = {0}, [0]
        while stack:
            for nb in adj[stack.pop()] - seen:
                seen.add(nb)
                stack.append(nb)
        assert len(seen) == g.num_nodes


def test_synth_poisson_range_scan():
    y3 = np.array([g.targets[2] for g in synth_generate(10_000, seed=4)])
    assert np.all((y3 > -1) & (y3 <= 0.5))


def test_synth_extra_tasks():
    graphs = synth_generate(5, seed=0, T=5)
    assert all(g.num_targets == 5 for g in graphs)
    assert synth_generate(5, seed=0, T=1)[0].num_targets == 1


def test_prepare_standardizes_with_training_stats():
    data = prepare(synth_generate(40, seed=6), SplitSpec(0.7, seed=1))
    assert len(data.train) == 28 and len(data.test) == 12
    z = np.stack([g.targets for g in data.train])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
